//! Device-side featurization and anonymization.
//!
//! Local samples are converted into MinHash signatures (set-typed data) or
//! SimHash fingerprints (dense vectors). Sketches are the only data-derived
//! content that ever leaves a device.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Mersenne prime modulus for the universal hash family.
pub const HASH_PRIME: u64 = (1 << 61) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SketchError {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("incompatible sketches: {0}")]
    IncompatibleSketches(String),
    #[error("malformed sketch bytes: {0}")]
    MalformedSketch(String),
}

/// A featurized local sample: an L2-normalized dense vector, optionally with
/// a token-id set for the MinHash path.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub token_set: Option<BTreeSet<u64>>,
}

impl FeatureVector {
    /// Builds a dense feature vector, normalizing to unit L2 norm.
    pub fn dense(values: Vec<f64>) -> Result<Self, SketchError> {
        if values.is_empty() {
            return Err(SketchError::EmptyInput);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SketchError::DegenerateInput(
                "zero or non-finite vector".into(),
            ));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            token_set: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeaturizeMode {
    Set,
    Dense,
}

/// Canonical featurizer. Dense mode interprets the raw bytes as a
/// whitespace/comma separated numeric record and L2-normalizes it. Set mode
/// shingles the bytes (width 2) and maps each shingle to a token id via a
/// stable 64-bit hash modulo the vocabulary.
pub fn featurize(
    raw_sample: &[u8],
    mode: FeaturizeMode,
    d_or_vocab: usize,
) -> Result<FeatureVector, SketchError> {
    if raw_sample.is_empty() {
        return Err(SketchError::EmptyInput);
    }
    if d_or_vocab == 0 {
        return Err(SketchError::DegenerateInput("d_or_vocab must be >= 1".into()));
    }
    match mode {
        FeaturizeMode::Dense => {
            let text = String::from_utf8_lossy(raw_sample);
            let mut values: Vec<f64> = Vec::new();
            for tok in text.split(|c: char| c.is_whitespace() || c == ',') {
                if tok.is_empty() {
                    continue;
                }
                let v: f64 = tok
                    .parse()
                    .map_err(|_| SketchError::DegenerateInput(format!("bad number {tok:?}")))?;
                values.push(v);
            }
            if values.len() != d_or_vocab {
                return Err(SketchError::DegenerateInput(format!(
                    "expected {} values, got {}",
                    d_or_vocab,
                    values.len()
                )));
            }
            FeatureVector::dense(values)
        }
        FeaturizeMode::Set => {
            let tokens = shingle_tokens(raw_sample, d_or_vocab as u64);
            if tokens.is_empty() {
                return Err(SketchError::EmptyInput);
            }
            Ok(FeatureVector {
                values: Vec::new(),
                token_set: Some(tokens),
            })
        }
    }
}

/// 2-byte shingles hashed with FNV-1a, reduced modulo `vocab`.
pub fn shingle_tokens(bytes: &[u8], vocab: u64) -> BTreeSet<u64> {
    let mut tokens = BTreeSet::new();
    if bytes.len() == 1 {
        tokens.insert(fnv1a64(bytes) % vocab);
        return tokens;
    }
    for window in bytes.windows(2) {
        tokens.insert(fnv1a64(window) % vocab);
    }
    tokens
}

/// FNV-1a, fixed parameters; stable across platforms and std versions.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut state = OFFSET;
    for &b in bytes {
        state ^= b as u64;
        state = state.wrapping_mul(PRIME);
    }
    state
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
    pub seed: u64,
}

impl MinHashSignature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimHashFingerprint {
    pub bits: Vec<bool>,
    pub seed: u64,
    /// Pre-quantization projections, retained only when projection-noise DP
    /// is selected.
    pub projections: Option<Vec<f64>>,
}

impl SimHashFingerprint {
    pub fn width(&self) -> usize {
        self.bits.len()
    }
}

/// Parameters of the universal hash family h(x) = (a*x + b) mod p.
fn hash_params(k: usize, seed: u64) -> Vec<(u64, u64)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let a = rng.gen_range(1..HASH_PRIME);
            let b = rng.gen_range(0..HASH_PRIME);
            (a, b)
        })
        .collect()
}

pub fn universal_hash(x: u64, a: u64, b: u64) -> u64 {
    ((a as u128 * x as u128 + b as u128) % HASH_PRIME as u128) as u64
}

/// MinHash signature: per slot, the minimum of a seeded universal hash over
/// the token set.
pub fn minhash_sign(
    tokens: &BTreeSet<u64>,
    k: usize,
    seed: u64,
) -> Result<MinHashSignature, SketchError> {
    if tokens.is_empty() {
        return Err(SketchError::EmptyInput);
    }
    if k == 0 {
        return Err(SketchError::DegenerateInput("k must be >= 1".into()));
    }
    let params = hash_params(k, seed);
    let values = params
        .iter()
        .map(|&(a, b)| {
            tokens
                .iter()
                .map(|&t| universal_hash(t, a, b))
                .min()
                .expect("non-empty token set")
        })
        .collect();
    Ok(MinHashSignature { values, seed })
}

/// The seeded hyperplanes behind a SimHash fingerprint, row-major `b x d`.
pub fn simhash_planes(b: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..b)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Raw hyperplane projections of a unit vector, before quantization.
pub fn simhash_project(v: &FeatureVector, b: usize, seed: u64) -> Result<Vec<f64>, SketchError> {
    if v.values.is_empty() {
        return Err(SketchError::DegenerateInput("dense vector required".into()));
    }
    let planes = simhash_planes(b, v.dim(), seed);
    Ok(planes
        .iter()
        .map(|plane| plane.iter().zip(&v.values).map(|(p, x)| p * x).sum())
        .collect())
}

/// Quantizes projections to bits; ties break to +1.
pub fn quantize_projections(projections: &[f64]) -> Vec<bool> {
    projections.iter().map(|&p| p >= 0.0).collect()
}

pub fn simhash_sign(
    v: &FeatureVector,
    b: usize,
    seed: u64,
    keep_projections: bool,
) -> Result<SimHashFingerprint, SketchError> {
    if b == 0 {
        return Err(SketchError::DegenerateInput("b must be >= 1".into()));
    }
    let projections = simhash_project(v, b, seed)?;
    let bits = quantize_projections(&projections);
    Ok(SimHashFingerprint {
        bits,
        seed,
        projections: keep_projections.then_some(projections),
    })
}

/// A sketch as it travels in a query or sits in the corpus index.
#[derive(Debug, Clone, PartialEq)]
pub enum Sketch {
    MinHash(MinHashSignature),
    SimHash(SimHashFingerprint),
}

impl Sketch {
    pub fn kind_byte(&self) -> u8 {
        match self {
            Sketch::MinHash(_) => 0x01,
            Sketch::SimHash(_) => 0x02,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Sketch::MinHash(_) => "minhash",
            Sketch::SimHash(_) => "simhash",
        }
    }

    /// Wire form: kind byte, u32 BE length (k or b), u64 BE seed, then
    /// k x u64 BE values or ceil(b/8) bytes MSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Sketch::MinHash(sig) => {
                out.push(0x01);
                out.extend_from_slice(&(sig.values.len() as u32).to_be_bytes());
                out.extend_from_slice(&sig.seed.to_be_bytes());
                for v in &sig.values {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            Sketch::SimHash(fp) => {
                out.push(0x02);
                out.extend_from_slice(&(fp.bits.len() as u32).to_be_bytes());
                out.extend_from_slice(&fp.seed.to_be_bytes());
                let mut byte = 0u8;
                for (i, &bit) in fp.bits.iter().enumerate() {
                    if bit {
                        byte |= 1 << (7 - (i % 8));
                    }
                    if i % 8 == 7 {
                        out.push(byte);
                        byte = 0;
                    }
                }
                if fp.bits.len() % 8 != 0 {
                    out.push(byte);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SketchError> {
        let malformed = |m: &str| SketchError::MalformedSketch(m.into());
        if bytes.len() < 13 {
            return Err(malformed("truncated header"));
        }
        let kind = bytes[0];
        let len = u32::from_be_bytes(bytes[1..5].try_into().unwrap()) as usize;
        let seed = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
        let body = &bytes[13..];
        match kind {
            0x01 => {
                if body.len() != len * 8 {
                    return Err(malformed("bad minhash body length"));
                }
                let values = body
                    .chunks_exact(8)
                    .map(|c| u64::from_be_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Sketch::MinHash(MinHashSignature { values, seed }))
            }
            0x02 => {
                if body.len() != len.div_ceil(8) {
                    return Err(malformed("bad simhash body length"));
                }
                let bits = (0..len)
                    .map(|i| body[i / 8] & (1 << (7 - (i % 8))) != 0)
                    .collect();
                Ok(Sketch::SimHash(SimHashFingerprint {
                    bits,
                    seed,
                    projections: None,
                }))
            }
            _ => Err(malformed("unknown sketch kind")),
        }
    }
}

/// Similarity estimate in [0,1]: fraction of equal slots for MinHash (the
/// unbiased Jaccard estimator), 1 - hamming/b for SimHash.
pub fn estimate_similarity(a: &Sketch, b: &Sketch) -> Result<f64, SketchError> {
    match (a, b) {
        (Sketch::MinHash(x), Sketch::MinHash(y)) => {
            if x.len() != y.len() || x.seed != y.seed {
                return Err(SketchError::IncompatibleSketches(
                    "minhash k/seed mismatch".into(),
                ));
            }
            let equal = x
                .values
                .iter()
                .zip(&y.values)
                .filter(|(u, v)| u == v)
                .count();
            Ok(equal as f64 / x.len() as f64)
        }
        (Sketch::SimHash(x), Sketch::SimHash(y)) => {
            if x.width() != y.width() || x.seed != y.seed {
                return Err(SketchError::IncompatibleSketches(
                    "simhash b/seed mismatch".into(),
                ));
            }
            let hamming = x.bits.iter().zip(&y.bits).filter(|(u, v)| u != v).count();
            Ok(1.0 - hamming as f64 / x.width() as f64)
        }
        _ => Err(SketchError::IncompatibleSketches("kind mismatch".into())),
    }
}
