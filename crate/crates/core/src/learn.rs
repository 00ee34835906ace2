//! Training and inference: softmax regression and a one-hidden-layer tanh
//! MLP, trained by full-batch gradient descent with exact analytic
//! gradients. Everything is seeded and deterministic so that identical
//! inputs produce bit-identical artifacts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training diverged (non-finite loss)")]
    Diverged,
    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
    #[error("model format error: {0}")]
    ModelFormatError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    LogReg,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: u32,
    /// Hidden width; 0 for logreg, >= 1 for mlp1.
    pub hidden: u32,
    pub num_classes: u32,
}

impl ModelSpec {
    pub fn logreg(input_dim: u32, num_classes: u32) -> Self {
        Self {
            arch: Arch::LogReg,
            input_dim,
            hidden: 0,
            num_classes,
        }
    }

    pub fn mlp1(input_dim: u32, hidden: u32, num_classes: u32) -> Self {
        Self {
            arch: Arch::Mlp1,
            input_dim,
            hidden,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(LearnError::SpecMismatch("input_dim and num_classes must be >= 1".into()));
        }
        match self.arch {
            Arch::LogReg => {
                if self.hidden != 0 {
                    return Err(LearnError::SpecMismatch("logreg must have hidden = 0".into()));
                }
            }
            Arch::Mlp1 => {
                if self.hidden == 0 {
                    return Err(LearnError::SpecMismatch("mlp1 requires hidden >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Total parameter count. Layout:
    /// logreg: W[C x d] row-major, then b[C].
    /// mlp1:   W1[h x d], b1[h], W2[C x h], b2[C].
    pub fn num_params(&self) -> usize {
        let (d, h, c) = (
            self.input_dim as usize,
            self.hidden as usize,
            self.num_classes as usize,
        );
        match self.arch {
            Arch::LogReg => c * d + c,
            Arch::Mlp1 => h * d + h + c * h + c,
        }
    }
}

/// One labeled training sample: features and class id.
pub type Sample = (Vec<f64>, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u32,
    pub lr: f64,
    pub samples_used: u32,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub train_meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedBase {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    /// Digest of the corpus this base was trained on.
    pub provenance: [u8; 32],
}

/// Seeded initialization: weights ~ 0.01 * N(0,1), biases 0.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (d, h, c) = (
        spec.input_dim as usize,
        spec.hidden as usize,
        spec.num_classes as usize,
    );
    let mut params = vec![0.0; spec.num_params()];
    #[allow(clippy::single_range_in_vec_init)]
    let weight_ranges: Vec<std::ops::Range<usize>> = match spec.arch {
        Arch::LogReg => vec![0..c * d],
        Arch::Mlp1 => vec![0..h * d, h * d + h..h * d + h + c * h],
    };
    for range in weight_ranges {
        for i in range {
            let z: f64 = rng.sample(StandardNormal);
            params[i] = 0.01 * z;
        }
    }
    params
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Forward pass to class logits.
fn logits(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let (d, h, c) = (
        spec.input_dim as usize,
        spec.hidden as usize,
        spec.num_classes as usize,
    );
    match spec.arch {
        Arch::LogReg => {
            let (w, b) = (&params[..c * d], &params[c * d..]);
            (0..c)
                .map(|i| b[i] + w[i * d..(i + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect()
        }
        Arch::Mlp1 => {
            let w1 = &params[..h * d];
            let b1 = &params[h * d..h * d + h];
            let w2 = &params[h * d + h..h * d + h + c * h];
            let b2 = &params[h * d + h + c * h..];
            let hidden: Vec<f64> = (0..h)
                .map(|j| {
                    (b1[j]
                        + w1[j * d..(j + 1) * d]
                            .iter()
                            .zip(x)
                            .map(|(a, v)| a * v)
                            .sum::<f64>())
                    .tanh()
                })
                .collect();
            (0..c)
                .map(|i| {
                    b2[i]
                        + w2[i * h..(i + 1) * h]
                            .iter()
                            .zip(&hidden)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                })
                .collect()
        }
    }
}

/// Mean softmax cross-entropy and exact analytic gradients over a batch.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &[f64],
    batch: &[Sample],
) -> Result<(f64, Vec<f64>), LearnError> {
    if batch.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    if params.len() != spec.num_params() {
        return Err(LearnError::SpecMismatch("parameter count".into()));
    }
    let (d, h, c) = (
        spec.input_dim as usize,
        spec.hidden as usize,
        spec.num_classes as usize,
    );
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total_loss = 0.0;
    for (x, label) in batch {
        if x.len() != d {
            return Err(LearnError::SpecMismatch("feature dimension".into()));
        }
        if *label as usize >= c {
            return Err(LearnError::SpecMismatch("label out of range".into()));
        }
        if x.iter().any(|v| !v.is_finite()) || params.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::NumericalError("non-finite input".into()));
        }
        match spec.arch {
            Arch::LogReg => {
                let mut probs = logits(spec, params, x);
                softmax_in_place(&mut probs);
                total_loss += -probs[*label as usize].max(1e-300).ln();
                for i in 0..c {
                    let g = (probs[i] - if i == *label as usize { 1.0 } else { 0.0 }) / n;
                    for (j, xv) in x.iter().enumerate() {
                        grad[i * d + j] += g * xv;
                    }
                    grad[c * d + i] += g;
                }
            }
            Arch::Mlp1 => {
                let w1 = &params[..h * d];
                let b1 = &params[h * d..h * d + h];
                let w2 = &params[h * d + h..h * d + h + c * h];
                let b2 = &params[h * d + h + c * h..];
                let hidden: Vec<f64> = (0..h)
                    .map(|j| {
                        (b1[j]
                            + w1[j * d..(j + 1) * d]
                                .iter()
                                .zip(x)
                                .map(|(a, v)| a * v)
                                .sum::<f64>())
                        .tanh()
                    })
                    .collect();
                let mut probs: Vec<f64> = (0..c)
                    .map(|i| {
                        b2[i]
                            + w2[i * h..(i + 1) * h]
                                .iter()
                                .zip(&hidden)
                                .map(|(a, v)| a * v)
                                .sum::<f64>()
                    })
                    .collect();
                softmax_in_place(&mut probs);
                total_loss += -probs[*label as usize].max(1e-300).ln();
                let gl: Vec<f64> = (0..c)
                    .map(|i| (probs[i] - if i == *label as usize { 1.0 } else { 0.0 }) / n)
                    .collect();
                // output layer
                for i in 0..c {
                    for j in 0..h {
                        grad[h * d + h + i * h + j] += gl[i] * hidden[j];
                    }
                    grad[h * d + h + c * h + i] += gl[i];
                }
                // hidden layer
                for j in 0..h {
                    let dh: f64 = (0..c).map(|i| gl[i] * w2[i * h + j]).sum();
                    let da = dh * (1.0 - hidden[j] * hidden[j]);
                    for (i, xv) in x.iter().enumerate() {
                        grad[j * d + i] += da * xv;
                    }
                    grad[h * d + j] += da;
                }
            }
        }
    }
    Ok((total_loss / n, grad))
}

/// Full-batch gradient descent; returns final params and the loss trace.
fn gradient_descent(
    spec: &ModelSpec,
    mut params: Vec<f64>,
    batch: &[Sample],
    epochs: u32,
    lr: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64), LearnError> {
    let mut trace = Vec::with_capacity(epochs as usize);
    let mut final_loss = if epochs == 0 {
        loss_and_grad(spec, &params, batch)?.0
    } else {
        0.0
    };
    for _ in 0..epochs {
        let (loss, grad) = loss_and_grad(spec, &params, batch)?;
        if !loss.is_finite() {
            return Err(LearnError::Diverged);
        }
        trace.push(loss);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        final_loss = loss_and_grad(spec, &params, batch)?.0;
        if !final_loss.is_finite() {
            return Err(LearnError::Diverged);
        }
    }
    Ok((params, trace, final_loss))
}

pub fn pretrain_base(
    samples: &[Sample],
    spec: &ModelSpec,
    epochs: u32,
    lr: f64,
    seed: u64,
    provenance: [u8; 32],
) -> Result<PretrainedBase, LearnError> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    let init = init_params(spec, seed);
    let (params, _, _) = gradient_descent(spec, init, samples, epochs, lr)?;
    Ok(PretrainedBase {
        spec: *spec,
        params,
        provenance,
    })
}

/// Fine-tunes from the base weights; never re-initializes.
pub fn fine_tune(
    base: &PretrainedBase,
    train_set: &[Sample],
    epochs: u32,
    lr: f64,
    seed: u64,
) -> Result<ModelArtifact, LearnError> {
    if train_set.is_empty() {
        return Err(LearnError::EmptyTrainingSet);
    }
    if train_set[0].0.len() != base.spec.input_dim as usize {
        return Err(LearnError::SpecMismatch("train set dimension".into()));
    }
    let (params, _, final_loss) =
        gradient_descent(&base.spec, base.params.clone(), train_set, epochs, lr)?;
    Ok(ModelArtifact {
        spec: base.spec,
        params,
        train_meta: TrainMeta {
            seed,
            epochs,
            lr,
            samples_used: train_set.len() as u32,
            final_loss,
        },
    })
}

/// Class probabilities for one feature vector.
pub fn predict(
    spec: &ModelSpec,
    params: &[f64],
    features: &[f64],
) -> Result<Vec<f64>, LearnError> {
    if features.len() != spec.input_dim as usize {
        return Err(LearnError::SpecMismatch("feature dimension".into()));
    }
    let mut probs = logits(spec, params, features);
    softmax_in_place(&mut probs);
    Ok(probs)
}

impl ModelArtifact {
    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>, LearnError> {
        predict(&self.spec, &self.params, features)
    }
}

// ---------------------------------------------------------------------------
// Artifact wire format
//
// Offsets:  0  magic "PTMD"
//           4  version u8 (0x01)
//           5  arch u8 (0x01 logreg, 0x02 mlp1)
//           6  input_dim u32 BE
//          10  hidden u32 BE
//          14  num_classes u32 BE
//          18  weights, f64 LE each, in layout order
//   18+8P      train_meta: seed u64 BE, epochs u32 BE, lr f64 LE,
//              samples_used u32 BE, final_loss f64 LE

pub const MODEL_MAGIC: [u8; 4] = *b"PTMD";
pub const MODEL_VERSION: u8 = 0x01;

pub fn serialize_model(artifact: &ModelArtifact) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.push(match artifact.spec.arch {
        Arch::LogReg => 0x01,
        Arch::Mlp1 => 0x02,
    });
    out.extend_from_slice(&artifact.spec.input_dim.to_be_bytes());
    out.extend_from_slice(&artifact.spec.hidden.to_be_bytes());
    out.extend_from_slice(&artifact.spec.num_classes.to_be_bytes());
    for p in &artifact.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let m = &artifact.train_meta;
    out.extend_from_slice(&m.seed.to_be_bytes());
    out.extend_from_slice(&m.epochs.to_be_bytes());
    out.extend_from_slice(&m.lr.to_le_bytes());
    out.extend_from_slice(&m.samples_used.to_be_bytes());
    out.extend_from_slice(&m.final_loss.to_le_bytes());
    out
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ModelArtifact, LearnError> {
    let bad = |m: &str| LearnError::ModelFormatError(m.into());
    if bytes.len() < 18 {
        return Err(bad("truncated header"));
    }
    if bytes[0..4] != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(bad("unsupported version"));
    }
    let arch = match bytes[5] {
        0x01 => Arch::LogReg,
        0x02 => Arch::Mlp1,
        _ => return Err(bad("unknown arch")),
    };
    let spec = ModelSpec {
        arch,
        input_dim: u32::from_be_bytes(bytes[6..10].try_into().unwrap()),
        hidden: u32::from_be_bytes(bytes[10..14].try_into().unwrap()),
        num_classes: u32::from_be_bytes(bytes[14..18].try_into().unwrap()),
    };
    spec.validate()?;
    let n = spec.num_params();
    let meta_len = 8 + 4 + 8 + 4 + 8;
    if bytes.len() != 18 + 8 * n + meta_len {
        return Err(bad("length mismatch"));
    }
    let params: Vec<f64> = bytes[18..18 + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = &bytes[18 + 8 * n..];
    let train_meta = TrainMeta {
        seed: u64::from_be_bytes(m[0..8].try_into().unwrap()),
        epochs: u32::from_be_bytes(m[8..12].try_into().unwrap()),
        lr: f64::from_le_bytes(m[12..20].try_into().unwrap()),
        samples_used: u32::from_be_bytes(m[20..24].try_into().unwrap()),
        final_loss: f64::from_le_bytes(m[24..32].try_into().unwrap()),
    };
    Ok(ModelArtifact {
        spec,
        params,
        train_meta,
    })
}
