#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` guards also reject NaN

//! Differential-privacy noise mechanisms and the per-device budget ledger.
//!
//! Two noise placements are supported: randomized response on post-hash
//! sketch bits/slots, and Laplace/Gaussian noise on SimHash projections
//! before quantization. The ledger enforces a cumulative epsilon cap under
//! sequential composition.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sketch::{MinHashSignature, HASH_PRIME};

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("budget exhausted: spent {spent} + requested {requested} > cap {cap}")]
    BudgetExhausted { spent: f64, requested: f64, cap: f64 },
    #[error("ledger io: {0}")]
    LedgerIo(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Laplace,
    Gaussian,
    RandomizedResponse,
    None,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mechanism::Laplace => "laplace",
            Mechanism::Gaussian => "gaussian",
            Mechanism::RandomizedResponse => "randomized_response",
            Mechanism::None => "none",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mechanism {
    type Err = PrivacyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "laplace" => Ok(Mechanism::Laplace),
            "gaussian" => Ok(Mechanism::Gaussian),
            "randomized_response" | "rr" => Ok(Mechanism::RandomizedResponse),
            "none" => Ok(Mechanism::None),
            other => Err(PrivacyError::InvalidBudget(format!(
                "unknown mechanism {other:?}"
            ))),
        }
    }
}

/// Where the noise is applied relative to hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// Randomized response on the sketch bits/slots after hashing.
    PostHash,
    /// Laplace/Gaussian on SimHash projections before quantization.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: f64,
    /// L1 sensitivity for Laplace, L2 for Gaussian.
    pub sensitivity: f64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<(), PrivacyError> {
        if self.mechanism == Mechanism::None {
            return Ok(());
        }
        if !(self.epsilon > 0.0) {
            return Err(PrivacyError::InvalidBudget("epsilon must be > 0".into()));
        }
        if !(self.sensitivity > 0.0) {
            return Err(PrivacyError::InvalidBudget("sensitivity must be > 0".into()));
        }
        match self.mechanism {
            Mechanism::Gaussian => {
                if !(self.delta > 0.0 && self.delta < 1.0) {
                    return Err(PrivacyError::InvalidBudget(
                        "gaussian requires 0 < delta < 1".into(),
                    ));
                }
            }
            _ => {
                if self.delta != 0.0 {
                    return Err(PrivacyError::InvalidBudget(
                        "delta must be 0 for laplace/randomized_response".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Inverse-CDF Laplace draw with scale `b`.
fn laplace_draw<R: Rng>(rng: &mut R, b: f64) -> f64 {
    // u in (-0.5, 0.5]
    let u = 0.5 - rng.gen::<f64>();
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds Laplace noise with scale sensitivity/epsilon to each value.
pub fn laplace_noise(
    values: &[f64],
    params: &PrivacyParams,
    seed: u64,
) -> Result<Vec<f64>, PrivacyError> {
    if params.mechanism != Mechanism::Laplace {
        return Err(PrivacyError::InvalidBudget("mechanism must be laplace".into()));
    }
    params.validate()?;
    let b = params.sensitivity / params.epsilon;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(values.iter().map(|v| v + laplace_draw(&mut rng, b)).collect())
}

/// Noise scale for the analytic Gaussian mechanism:
/// sigma = sensitivity * sqrt(2 ln(1.25/delta)) / epsilon.
pub fn gaussian_sigma(params: &PrivacyParams) -> Result<f64, PrivacyError> {
    if params.mechanism != Mechanism::Gaussian {
        return Err(PrivacyError::InvalidBudget("mechanism must be gaussian".into()));
    }
    params.validate()?;
    Ok(params.sensitivity * (2.0 * (1.25 / params.delta).ln()).sqrt() / params.epsilon)
}

pub fn gaussian_noise(
    values: &[f64],
    params: &PrivacyParams,
    seed: u64,
) -> Result<Vec<f64>, PrivacyError> {
    let sigma = gaussian_sigma(params)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, sigma)
        .map_err(|e| PrivacyError::InvalidBudget(e.to_string()))?;
    Ok(values.iter().map(|v| v + rng.sample(normal)).collect())
}

/// Per-bit flip probability for randomized response at the given per-bit
/// epsilon: p = 1 / (1 + e^eps_bit).
pub fn rr_flip_probability(eps_bit: f64) -> f64 {
    1.0 / (1.0 + eps_bit.exp())
}

/// Randomized response over a bit sequence. The total epsilon is split
/// evenly over the bits (sequential composition).
pub fn rr_flip_bits(bits: &[bool], epsilon: f64, seed: u64) -> Result<Vec<bool>, PrivacyError> {
    if !(epsilon > 0.0) {
        return Err(PrivacyError::InvalidBudget("epsilon must be > 0".into()));
    }
    if bits.is_empty() {
        return Err(PrivacyError::InvalidBudget("empty bit sequence".into()));
    }
    let p = rr_flip_probability(epsilon / bits.len() as f64);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(bits
        .iter()
        .map(|&b| if rng.gen::<f64>() < p { !b } else { b })
        .collect())
}

/// Discrete randomized response on MinHash slots: each slot is replaced by
/// a fresh uniform hash value with probability 1/(1 + e^(eps/k)).
pub fn rr_perturb_minhash(
    sig: &MinHashSignature,
    epsilon: f64,
    seed: u64,
) -> Result<MinHashSignature, PrivacyError> {
    if !(epsilon > 0.0) {
        return Err(PrivacyError::InvalidBudget("epsilon must be > 0".into()));
    }
    let p = rr_flip_probability(epsilon / sig.len() as f64);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let values = sig
        .values
        .iter()
        .map(|&v| {
            if rng.gen::<f64>() < p {
                rng.gen_range(0..HASH_PRIME)
            } else {
                v
            }
        })
        .collect();
    Ok(MinHashSignature {
        values,
        seed: sig.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub timestamp: String,
    pub epsilon: f64,
    pub mechanism: Mechanism,
}

/// Per-device cumulative epsilon spend under sequential composition.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    pub device_id: [u8; 16],
    pub epsilon_spent: f64,
    pub epsilon_cap: f64,
    pub entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(device_id: [u8; 16], epsilon_cap: f64) -> Self {
        Self {
            device_id,
            epsilon_spent: 0.0,
            epsilon_cap,
            entries: Vec::new(),
        }
    }

    /// Charges `epsilon` against the cap; on refusal the ledger is unchanged.
    pub fn charge(&mut self, epsilon: f64, mechanism: Mechanism) -> Result<(), PrivacyError> {
        self.charge_at(epsilon, mechanism, &chrono::Utc::now().to_rfc3339())
    }

    pub fn charge_at(
        &mut self,
        epsilon: f64,
        mechanism: Mechanism,
        timestamp: &str,
    ) -> Result<(), PrivacyError> {
        if !(epsilon > 0.0) {
            return Err(PrivacyError::InvalidBudget("epsilon must be > 0".into()));
        }
        if self.epsilon_spent + epsilon > self.epsilon_cap {
            return Err(PrivacyError::BudgetExhausted {
                spent: self.epsilon_spent,
                requested: epsilon,
                cap: self.epsilon_cap,
            });
        }
        self.epsilon_spent += epsilon;
        self.entries.push(LedgerEntry {
            timestamp: timestamp.to_string(),
            epsilon,
            mechanism,
        });
        Ok(())
    }

    pub fn remaining(&self) -> f64 {
        (self.epsilon_cap - self.epsilon_spent).max(0.0)
    }

    /// Appends this ledger's entries to a line-delimited file:
    /// device_id hex, ISO-8601 timestamp, epsilon, mechanism name.
    pub fn persist(&self, path: &Path) -> Result<(), PrivacyError> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                hex::encode(self.device_id),
                e.timestamp,
                e.epsilon,
                e.mechanism
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| PrivacyError::LedgerIo(e.to_string()))?;
        f.write_all(out.as_bytes())
            .map_err(|e| PrivacyError::LedgerIo(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &Path, device_id: [u8; 16], epsilon_cap: f64) -> Result<Self, PrivacyError> {
        let mut ledger = Self::new(device_id, epsilon_cap);
        let text =
            std::fs::read_to_string(path).map_err(|e| PrivacyError::LedgerIo(e.to_string()))?;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(PrivacyError::LedgerIo(format!(
                    "line {}: expected 4 fields",
                    lineno + 1
                )));
            }
            if fields[0] != hex::encode(device_id) {
                continue;
            }
            let epsilon: f64 = fields[2]
                .parse()
                .map_err(|_| PrivacyError::LedgerIo(format!("line {}: bad epsilon", lineno + 1)))?;
            let mechanism: Mechanism = fields[3]
                .parse()
                .map_err(|_| PrivacyError::LedgerIo(format!("line {}: bad mechanism", lineno + 1)))?;
            ledger.epsilon_spent += epsilon;
            ledger.entries.push(LedgerEntry {
                timestamp: fields[1].to_string(),
                epsilon,
                mechanism,
            });
        }
        Ok(ledger)
    }
}
