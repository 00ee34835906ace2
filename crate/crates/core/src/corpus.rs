//! Server-side data layer: corpus ingest, precomputed sketches, and top-k
//! similarity retrieval. The exhaustive scan is the reference path; the
//! banding index is an accelerator kept verifiable against it.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::learn::Sample;
use crate::sketch::{
    self, estimate_similarity, fnv1a64, minhash_sign, simhash_sign, FeatureVector,
    MinHashSignature, SimHashFingerprint, Sketch,
};

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("ingest error at line {line}: {reason}")]
    IngestError { line: usize, reason: String },
    #[error("incompatible sketches: {0}")]
    IncompatibleSketches(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corrupt index: record {0} missing")]
    CorruptIndex(u64),
    #[error("store version error: {0}")]
    StoreVersionError(String),
    #[error("store corrupt: {0}")]
    StoreCorrupt(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Server-published sketch parameters. Devices must sketch with exactly
/// these for retrieval compatibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SketchParams {
    pub minhash_k: u32,
    pub simhash_b: u32,
    pub minhash_seed: u64,
    pub simhash_seed: u64,
    /// Vocabulary for the dense-to-token quantizer feeding MinHash.
    pub vocab: u64,
}

impl Default for SketchParams {
    fn default() -> Self {
        Self {
            minhash_k: 128,
            simhash_b: 64,
            minhash_seed: 0x5eed_0001,
            simhash_seed: 0x5eed_0002,
            vocab: 1 << 20,
        }
    }
}

/// Quantizes a dense vector into a token set so set-typed retrieval also
/// works against dense corpora: one token per (dimension, bucket) pair,
/// bucket width 0.25 on the normalized values.
pub fn dense_tokens(features: &[f64], vocab: u64) -> BTreeSet<u64> {
    features
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let bucket = (v * 4.0).floor() as i64;
            let mut bytes = Vec::with_capacity(16);
            bytes.extend_from_slice(&(i as u64).to_be_bytes());
            bytes.extend_from_slice(&bucket.to_be_bytes());
            fnv1a64(&bytes) % vocab
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub record_id: u64,
    pub features: Vec<f64>,
    pub label: u32,
    pub minhash: MinHashSignature,
    pub simhash: SimHashFingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranked: Vec<(u64, f64)>,
    pub query_kind: &'static str,
}

#[derive(Debug, Clone)]
pub struct CorpusStore {
    pub params: SketchParams,
    pub dim: usize,
    pub num_classes: u32,
    records: Vec<CorpusRecord>,
    /// MinHash banding buckets: (band index, band hash) -> record positions.
    bands: HashMap<(u32, u64), Vec<usize>>,
    pub rows_per_band: u32,
}

fn sketch_record(
    record_id: u64,
    features: Vec<f64>,
    label: u32,
    params: &SketchParams,
) -> Result<CorpusRecord, CorpusError> {
    let fv = FeatureVector::dense(features)
        .map_err(|e| CorpusError::StoreCorrupt(format!("record {record_id}: {e}")))?;
    let tokens = dense_tokens(&fv.values, params.vocab);
    let minhash = minhash_sign(&tokens, params.minhash_k as usize, params.minhash_seed)
        .map_err(|e| CorpusError::StoreCorrupt(format!("record {record_id}: {e}")))?;
    let simhash = simhash_sign(&fv, params.simhash_b as usize, params.simhash_seed, false)
        .map_err(|e| CorpusError::StoreCorrupt(format!("record {record_id}: {e}")))?;
    Ok(CorpusRecord {
        record_id,
        features: fv.values,
        label,
        minhash,
        simhash,
    })
}

impl CorpusStore {
    /// Builds a store from already-parsed rows, normalizing and sketching
    /// each record under the published parameters.
    pub fn build(
        rows: Vec<(u32, Vec<f64>)>,
        params: SketchParams,
        rows_per_band: u32,
    ) -> Result<Self, CorpusError> {
        if rows.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        if !params.minhash_k.is_multiple_of(rows_per_band) {
            return Err(CorpusError::StoreCorrupt(
                "rows_per_band must divide minhash_k".into(),
            ));
        }
        let dim = rows[0].1.len();
        let indexed: Vec<(u64, u32, Vec<f64>)> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (label, features))| (i as u64, label, features))
            .collect();

        #[cfg(feature = "parallel")]
        let records: Result<Vec<CorpusRecord>, CorpusError> = indexed
            .into_par_iter()
            .map(|(id, label, features)| sketch_record(id, features, label, &params))
            .collect();
        #[cfg(not(feature = "parallel"))]
        let records: Result<Vec<CorpusRecord>, CorpusError> = indexed
            .into_iter()
            .map(|(id, label, features)| sketch_record(id, features, label, &params))
            .collect();
        let records = records?;

        let num_classes = records.iter().map(|r| r.label).max().unwrap() + 1;
        let mut store = Self {
            params,
            dim,
            num_classes,
            records,
            bands: HashMap::new(),
            rows_per_band,
        };
        store.rebuild_bands();
        Ok(store)
    }

    /// Loads a corpus file: one record per line, `label <tab> v1,v2,...,vd`.
    pub fn ingest(path: &Path, params: SketchParams, rows_per_band: u32) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io(e.to_string()))?;
        let mut rows = Vec::new();
        let mut dim: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let (label_str, values_str) = line.split_once('\t').ok_or(CorpusError::IngestError {
                line: lineno,
                reason: "expected `label<tab>values`".into(),
            })?;
            let label: u32 = label_str.trim().parse().map_err(|_| CorpusError::IngestError {
                line: lineno,
                reason: format!("bad label {label_str:?}"),
            })?;
            let values: Vec<f64> = values_str
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CorpusError::IngestError {
                    line: lineno,
                    reason: "bad feature value".into(),
                })?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(CorpusError::IngestError {
                        line: lineno,
                        reason: format!("dimension {} != {}", values.len(), d),
                    })
                }
                _ => {}
            }
            rows.push((label, values));
        }
        Self::build(rows, params, rows_per_band)
    }

    fn rebuild_bands(&mut self) {
        self.bands.clear();
        let r = self.rows_per_band as usize;
        for (pos, record) in self.records.iter().enumerate() {
            for (band_idx, band) in record.minhash.values.chunks(r).enumerate() {
                let mut bytes = Vec::with_capacity(band.len() * 8);
                for v in band {
                    bytes.extend_from_slice(&v.to_be_bytes());
                }
                self.bands
                    .entry((band_idx as u32, fnv1a64(&bytes)))
                    .or_default()
                    .push(pos);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn all_samples(&self) -> Vec<Sample> {
        self.records
            .iter()
            .map(|r| (r.features.clone(), r.label))
            .collect()
    }

    fn check_query_params(&self, query: &Sketch) -> Result<(), CorpusError> {
        let mismatch = |m: &str| CorpusError::IncompatibleSketches(m.into());
        match query {
            Sketch::MinHash(sig) => {
                if sig.len() != self.params.minhash_k as usize {
                    return Err(mismatch("minhash k differs from published k"));
                }
                if sig.seed != self.params.minhash_seed {
                    return Err(mismatch("minhash seed differs from published seed"));
                }
            }
            Sketch::SimHash(fp) => {
                if fp.width() != self.params.simhash_b as usize {
                    return Err(mismatch("simhash b differs from published b"));
                }
                if fp.seed != self.params.simhash_seed {
                    return Err(mismatch("simhash seed differs from published seed"));
                }
            }
        }
        Ok(())
    }

    fn record_sketch(&self, record: &CorpusRecord, kind: &Sketch) -> Sketch {
        match kind {
            Sketch::MinHash(_) => Sketch::MinHash(record.minhash.clone()),
            Sketch::SimHash(_) => Sketch::SimHash(record.simhash.clone()),
        }
    }

    fn rank(&self, scored: Vec<(u64, f64)>, k_retrieve: usize) -> Vec<(u64, f64)> {
        let mut scored = scored;
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored.truncate(k_retrieve);
        scored
    }

    fn score_positions(&self, positions: &[usize], query: &Sketch) -> Vec<(u64, f64)> {
        let score_one = |&pos: &usize| {
            let record = &self.records[pos];
            let s = estimate_similarity(query, &self.record_sketch(record, query))
                .expect("params pre-checked");
            (record.record_id, s)
        };
        #[cfg(feature = "parallel")]
        {
            positions.par_iter().map(score_one).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            positions.iter().map(score_one).collect()
        }
    }

    /// Reference path: exhaustive similarity scoring over every record.
    pub fn search_topk_exhaustive(
        &self,
        query: &Sketch,
        k_retrieve: usize,
        label_hints: Option<&[i64]>,
    ) -> Result<RetrievalResult, CorpusError> {
        if self.records.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        self.check_query_params(query)?;
        let positions = self.filtered_positions(label_hints);
        let scored = self.score_positions(&positions, query);
        Ok(RetrievalResult {
            ranked: self.rank(scored, k_retrieve),
            query_kind: query.kind_name(),
        })
    }

    fn filtered_positions(&self, label_hints: Option<&[i64]>) -> Vec<usize> {
        match label_hints {
            Some(hints) if !hints.is_empty() => self
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| hints.contains(&(r.label as i64)))
                .map(|(i, _)| i)
                .collect(),
            _ => (0..self.records.len()).collect(),
        }
    }

    /// Banded search for MinHash queries: candidates from band-bucket
    /// collisions, scored exactly; falls back to the exhaustive scan for
    /// SimHash queries or when candidates cannot fill k.
    pub fn search_topk(
        &self,
        query: &Sketch,
        k_retrieve: usize,
        label_hints: Option<&[i64]>,
    ) -> Result<RetrievalResult, CorpusError> {
        if self.records.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        self.check_query_params(query)?;
        let sig = match query {
            Sketch::MinHash(sig) => sig,
            Sketch::SimHash(_) => {
                return self.search_topk_exhaustive(query, k_retrieve, label_hints)
            }
        };
        let r = self.rows_per_band as usize;
        let mut candidates: BTreeSet<usize> = BTreeSet::new();
        for (band_idx, band) in sig.values.chunks(r).enumerate() {
            let mut bytes = Vec::with_capacity(band.len() * 8);
            for v in band {
                bytes.extend_from_slice(&v.to_be_bytes());
            }
            if let Some(positions) = self.bands.get(&(band_idx as u32, fnv1a64(&bytes))) {
                candidates.extend(positions.iter().copied());
            }
        }
        let allowed = self.filtered_positions(label_hints);
        let allowed_set: BTreeSet<usize> = allowed.iter().copied().collect();
        let candidate_positions: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|p| allowed_set.contains(p))
            .collect();
        let mut scored = self.score_positions(&candidate_positions, query);
        if scored.len() < k_retrieve.min(allowed.len()) {
            // Not enough band collisions; pad with the remaining records so
            // the result length matches the exhaustive path. With one row
            // per band a non-candidate always scores 0.
            let candidate_set: BTreeSet<usize> = candidate_positions.iter().copied().collect();
            let rest: Vec<usize> = allowed
                .iter()
                .copied()
                .filter(|p| !candidate_set.contains(p))
                .collect();
            scored.extend(self.score_positions(&rest, query));
        }
        Ok(RetrievalResult {
            ranked: self.rank(scored, k_retrieve),
            query_kind: query.kind_name(),
        })
    }

    /// Raw features/labels for the ranked records, order preserved.
    pub fn fetch_training_set(&self, result: &RetrievalResult) -> Result<Vec<Sample>, CorpusError> {
        let by_id: HashMap<u64, &CorpusRecord> =
            self.records.iter().map(|r| (r.record_id, r)).collect();
        result
            .ranked
            .iter()
            .map(|&(id, _)| {
                by_id
                    .get(&id)
                    .map(|r| (r.features.clone(), r.label))
                    .ok_or(CorpusError::CorruptIndex(id))
            })
            .collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        crate::envelope::digest(&self.to_bytes())
    }

    // Store format: magic "PTCS", version u8, params block, record blocks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"PTCS");
        out.push(0x01);
        out.extend_from_slice(&self.params.minhash_k.to_be_bytes());
        out.extend_from_slice(&self.params.simhash_b.to_be_bytes());
        out.extend_from_slice(&self.params.minhash_seed.to_be_bytes());
        out.extend_from_slice(&self.params.simhash_seed.to_be_bytes());
        out.extend_from_slice(&self.params.vocab.to_be_bytes());
        out.extend_from_slice(&self.rows_per_band.to_be_bytes());
        out.extend_from_slice(&(self.dim as u32).to_be_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_be_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.record_id.to_be_bytes());
            out.extend_from_slice(&r.label.to_be_bytes());
            for v in &r.features {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &r.minhash.values {
                out.extend_from_slice(&v.to_be_bytes());
            }
            let fp_bytes = Sketch::SimHash(r.simhash.clone()).to_bytes();
            // strip the 13-byte sketch header; params are stored once
            out.extend_from_slice(&fp_bytes[13..]);
        }
        out
    }

    pub fn persist(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CorpusError::Io(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        let corrupt = |m: &str| CorpusError::StoreCorrupt(m.into());
        if bytes.len() < 5 {
            return Err(corrupt("truncated"));
        }
        if &bytes[0..4] != b"PTCS" {
            return Err(CorpusError::StoreVersionError("bad magic".into()));
        }
        if bytes[4] != 0x01 {
            return Err(CorpusError::StoreVersionError(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let mut cursor = 5usize;
        let mut take = |n: usize| -> Result<&[u8], CorpusError> {
            if cursor + n > bytes.len() {
                return Err(corrupt("truncated"));
            }
            let s = &bytes[cursor..cursor + n];
            cursor += n;
            Ok(s)
        };
        let minhash_k = u32::from_be_bytes(take(4)?.try_into().unwrap());
        let simhash_b = u32::from_be_bytes(take(4)?.try_into().unwrap());
        let minhash_seed = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let simhash_seed = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let vocab = u64::from_be_bytes(take(8)?.try_into().unwrap());
        let rows_per_band = u32::from_be_bytes(take(4)?.try_into().unwrap());
        let dim = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_be_bytes(take(8)?.try_into().unwrap()) as usize;
        let params = SketchParams {
            minhash_k,
            simhash_b,
            minhash_seed,
            simhash_seed,
            vocab,
        };
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let record_id = u64::from_be_bytes(take(8)?.try_into().unwrap());
            let label = u32::from_be_bytes(take(4)?.try_into().unwrap());
            let features: Vec<f64> = take(dim * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let minhash_values: Vec<u64> = take(minhash_k as usize * 8)?
                .chunks_exact(8)
                .map(|c| u64::from_be_bytes(c.try_into().unwrap()))
                .collect();
            let fp_body = take((simhash_b as usize).div_ceil(8))?;
            let bits: Vec<bool> = (0..simhash_b as usize)
                .map(|i| fp_body[i / 8] & (1 << (7 - (i % 8))) != 0)
                .collect();
            records.push(CorpusRecord {
                record_id,
                features,
                label,
                minhash: MinHashSignature {
                    values: minhash_values,
                    seed: minhash_seed,
                },
                simhash: SimHashFingerprint {
                    bits,
                    seed: simhash_seed,
                    projections: None,
                },
            });
        }
        if cursor != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if records.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let num_classes = records.iter().map(|r| r.label).max().unwrap() + 1;
        let mut store = Self {
            params,
            dim,
            num_classes,
            records,
            bands: HashMap::new(),
            rows_per_band,
        };
        store.rebuild_bands();
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path).map_err(|e| CorpusError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    /// Sketch a normalized query vector with the published parameters.
    pub fn sketch_query_simhash(&self, v: &FeatureVector) -> Result<Sketch, CorpusError> {
        simhash_sign(v, self.params.simhash_b as usize, self.params.simhash_seed, false)
            .map(Sketch::SimHash)
            .map_err(|e| CorpusError::IncompatibleSketches(e.to_string()))
    }

    pub fn sketch_query_minhash(&self, tokens: &BTreeSet<u64>) -> Result<Sketch, CorpusError> {
        minhash_sign(tokens, self.params.minhash_k as usize, self.params.minhash_seed)
            .map(Sketch::MinHash)
            .map_err(|e| CorpusError::IncompatibleSketches(e.to_string()))
    }
}

/// Re-sketches a record from its features; used by consistency checks.
pub fn resketch(
    record: &CorpusRecord,
    params: &SketchParams,
) -> Result<(MinHashSignature, SimHashFingerprint), CorpusError> {
    let fv = FeatureVector {
        values: record.features.clone(),
        token_set: None,
    };
    let tokens = dense_tokens(&fv.values, params.vocab);
    let minhash = minhash_sign(&tokens, params.minhash_k as usize, params.minhash_seed)
        .map_err(|e| CorpusError::StoreCorrupt(e.to_string()))?;
    let simhash = simhash_sign(&fv, params.simhash_b as usize, params.simhash_seed, false)
        .map_err(|e| CorpusError::StoreCorrupt(e.to_string()))?;
    Ok((minhash, simhash))
}

pub use sketch::Sketch as QuerySketch;

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_corpus(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        let mut f = std::fs::File::create(&path).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        (dir, path)
    }

    fn params() -> SketchParams {
        SketchParams {
            minhash_k: 32,
            simhash_b: 32,
            ..Default::default()
        }
    }

    #[test]
    fn ingest_counts_records() {
        let (_d, path) = write_corpus(&["0\t1,2,3", "1\t4,5,6", "0\t-1,0.5,2"]);
        let store = CorpusStore::ingest(&path, params(), 1).unwrap();
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn ingest_rejects_dimension_mismatch() {
        let (_d, path) = write_corpus(&["0\t1,2,3,4", "1\t1,2,3,4,5"]);
        match CorpusStore::ingest(&path, params(), 1).unwrap_err() {
            CorpusError::IngestError { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn ingest_rejects_malformed_line() {
        let (_d, path) = write_corpus(&["0\t1,2,x"]);
        assert!(matches!(
            CorpusStore::ingest(&path, params(), 1).unwrap_err(),
            CorpusError::IngestError { line: 1, .. }
        ));
    }

    #[test]
    fn stored_sketches_regenerate_bit_identically() {
        let (_d, path) = write_corpus(&["0\t1,2,3", "1\t4,5,6"]);
        let store = CorpusStore::ingest(&path, params(), 1).unwrap();
        for r in store.records() {
            let (mh, sh) = resketch(r, &store.params).unwrap();
            assert_eq!(mh, r.minhash);
            assert_eq!(sh.bits, r.simhash.bits);
        }
    }

    #[test]
    fn identity_query_ranks_first_with_score_one() {
        let rows: Vec<(u32, Vec<f64>)> = (0..10)
            .map(|i| {
                let t = i as f64;
                (0u32, vec![(1.1 * t).sin(), (0.7 * t).cos(), 0.2 * t - 1.0])
            })
            .collect();
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let query = Sketch::MinHash(store.records()[7].minhash.clone());
        let result = store.search_topk(&query, 3, None).unwrap();
        assert_eq!(result.ranked[0].0, 7);
        assert_eq!(result.ranked[0].1, 1.0);
    }

    #[test]
    fn oversized_k_returns_full_sorted_corpus() {
        let rows: Vec<(u32, Vec<f64>)> =
            (0..5).map(|i| (0u32, vec![i as f64 + 1.0, 1.0])).collect();
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let query = Sketch::SimHash(store.records()[0].simhash.clone());
        let result = store.search_topk(&query, 100, None).unwrap();
        assert_eq!(result.ranked.len(), 5);
        for w in result.ranked.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn ranking_matches_brute_force_oracle() {
        let rows: Vec<(u32, Vec<f64>)> = (0..10)
            .map(|i| {
                (
                    (i % 2) as u32,
                    vec![(i as f64).sin() + 1.5, (i as f64).cos() + 1.5, 0.3 * i as f64 + 0.1],
                )
            })
            .collect();
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let query = Sketch::MinHash(store.records()[3].minhash.clone());
        // Independent oracle: score all pairs directly and sort.
        let mut oracle: Vec<(u64, f64)> = store
            .records()
            .iter()
            .map(|r| {
                let eq = r
                    .minhash
                    .values
                    .iter()
                    .zip(&store.records()[3].minhash.values)
                    .filter(|(a, b)| a == b)
                    .count();
                (r.record_id, eq as f64 / r.minhash.values.len() as f64)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let result = store.search_topk(&query, 10, None).unwrap();
        assert_eq!(result.ranked, oracle);
    }

    #[test]
    fn banded_equals_exhaustive() {
        let rows: Vec<(u32, Vec<f64>)> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                ((i % 4) as u32, vec![t.sin() + 2.0, t.cos() + 2.0, (t * 0.5).sin() + 2.0, 1.0])
            })
            .collect();
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        for probe in [0usize, 57, 123] {
            let query = Sketch::MinHash(store.records()[probe].minhash.clone());
            let banded = store.search_topk(&query, 20, None).unwrap();
            let exhaustive = store.search_topk_exhaustive(&query, 20, None).unwrap();
            assert_eq!(banded, exhaustive, "probe {probe}");
        }
    }

    #[test]
    fn param_mismatch_rejected() {
        let rows = vec![(0u32, vec![1.0, 2.0])];
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let other = minhash_sign(&[1u64, 2].iter().copied().collect(), 16, 999).unwrap();
        assert!(matches!(
            store.search_topk(&Sketch::MinHash(other), 1, None).unwrap_err(),
            CorpusError::IncompatibleSketches(_)
        ));
    }

    #[test]
    fn fetch_training_set_preserves_order_and_consistency() {
        let rows: Vec<(u32, Vec<f64>)> =
            (0..6).map(|i| ((i % 3) as u32, vec![i as f64 + 0.5, 1.0])).collect();
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let query = Sketch::SimHash(store.records()[2].simhash.clone());
        let result = store.search_topk(&query, 5, None).unwrap();
        let training = store.fetch_training_set(&result).unwrap();
        assert_eq!(training.len(), 5);
        for (i, (features, _)) in training.iter().enumerate() {
            let id = result.ranked[i].0;
            assert_eq!(features, &store.records()[id as usize].features);
        }

        let empty = RetrievalResult {
            ranked: vec![],
            query_kind: "simhash",
        };
        assert!(store.fetch_training_set(&empty).unwrap().is_empty());

        let missing = RetrievalResult {
            ranked: vec![(999, 1.0)],
            query_kind: "simhash",
        };
        assert_eq!(
            store.fetch_training_set(&missing).unwrap_err(),
            CorpusError::CorruptIndex(999)
        );
    }

    #[test]
    fn persist_load_round_trip() {
        let rows: Vec<(u32, Vec<f64>)> = (0..100)
            .map(|i| ((i % 4) as u32, vec![(i as f64 * 0.1).sin() + 1.5, i as f64 * 0.01 + 0.2, 1.0]))
            .collect();
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.ptcs");
        store.persist(&path).unwrap();
        let loaded = CorpusStore::load(&path).unwrap();
        assert_eq!(loaded.to_bytes(), store.to_bytes());

        let query = Sketch::MinHash(store.records()[42].minhash.clone());
        assert_eq!(
            loaded.search_topk(&query, 10, None).unwrap(),
            store.search_topk(&query, 10, None).unwrap()
        );
    }

    #[test]
    fn load_rejects_wrong_magic_and_truncation() {
        assert!(matches!(
            CorpusStore::from_bytes(b"NOPE\x01rest"),
            Err(CorpusError::StoreVersionError(_))
        ));
        let rows = vec![(0u32, vec![1.0, 2.0])];
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let mut bytes = store.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            CorpusStore::from_bytes(&bytes),
            Err(CorpusError::StoreCorrupt(_))
        ));
    }

    #[test]
    fn label_hints_hard_filter() {
        let rows: Vec<(u32, Vec<f64>)> =
            (0..8).map(|i| ((i % 2) as u32, vec![i as f64 + 1.0, 1.0])).collect();
        let store = CorpusStore::build(rows, params(), 1).unwrap();
        let query = Sketch::SimHash(store.records()[0].simhash.clone());
        let result = store.search_topk(&query, 8, Some(&[1])).unwrap();
        for &(id, _) in &result.ranked {
            assert_eq!(store.records()[id as usize].label, 1);
        }
    }
}
