//! Confidentiality and integrity for both transport directions.
//!
//! Every message crossing the wire is a [`SealedEnvelope`]: a fixed header
//! (routed in cleartext) followed by an AES-256-GCM ciphertext with the
//! header bound as associated data. Payloads are canonically serialized
//! JSON so that identical messages produce identical bytes.

use std::collections::HashMap;
use std::path::Path;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::learn::ModelSpec;
use crate::privacy::{Mechanism, NoisePlacement};

pub const MAGIC: [u8; 4] = *b"PTAS";
pub const VERSION: u8 = 0x01;
/// magic + version + msg_type + device_id + nonce + payload_len
pub const HEADER_LEN: usize = 4 + 1 + 1 + 16 + 12 + 4;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown device")]
    UnknownDevice,
    #[error("integrity failure")]
    IntegrityFailure,
    #[error("nonce reuse")]
    NonceReuse,
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("registry io: {0}")]
    RegistryIo(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Query = 0x01,
    ModelResponse = 0x02,
    Reject = 0x03,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Result<Self, EnvelopeError> {
        match b {
            0x01 => Ok(MsgType::Query),
            0x02 => Ok(MsgType::ModelResponse),
            0x03 => Ok(MsgType::Reject),
            other => Err(EnvelopeError::MalformedFrame(format!(
                "unknown msg_type {other:#04x}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedEnvelope {
    pub msg_type: MsgType,
    pub device_id: [u8; 16],
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

impl SealedEnvelope {
    fn aad(msg_type: MsgType, device_id: &[u8; 16], nonce: &[u8; 12]) -> Vec<u8> {
        let mut aad = Vec::with_capacity(34);
        aad.extend_from_slice(&MAGIC);
        aad.push(VERSION);
        aad.push(msg_type as u8);
        aad.extend_from_slice(device_id);
        aad.extend_from_slice(nonce);
        aad
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.device_id);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let malformed = |m: &str| EnvelopeError::MalformedFrame(m.into());
        if bytes.len() < HEADER_LEN {
            return Err(malformed("truncated header"));
        }
        if bytes[0..4] != MAGIC {
            return Err(malformed("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(malformed("unsupported version"));
        }
        let msg_type = MsgType::from_byte(bytes[5])?;
        let device_id: [u8; 16] = bytes[6..22].try_into().unwrap();
        let nonce: [u8; 12] = bytes[22..34].try_into().unwrap();
        let payload_len = u32::from_be_bytes(bytes[34..38].try_into().unwrap()) as usize;
        if bytes.len() != HEADER_LEN + payload_len {
            return Err(malformed("payload length mismatch"));
        }
        if payload_len < TAG_LEN {
            return Err(malformed("payload shorter than auth tag"));
        }
        Ok(Self {
            msg_type,
            device_id,
            nonce,
            ciphertext: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

/// Nonce source: 4-byte session salt followed by a strictly increasing
/// 8-byte counter. Never repeats within a session.
#[derive(Debug, Clone)]
pub struct NonceCounter {
    salt: [u8; 4],
    counter: u64,
}

impl NonceCounter {
    pub fn new(salt: [u8; 4]) -> Self {
        Self { salt, counter: 0 }
    }

    /// Positions the counter, e.g. when restoring a persisted session.
    pub fn set_counter(&mut self, value: u64) {
        self.counter = value;
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<[u8; 12], EnvelopeError> {
        let mut nonce = [0u8; 12];
        nonce[..4].copy_from_slice(&self.salt);
        nonce[4..].copy_from_slice(&self.counter.to_be_bytes());
        self.counter = self
            .counter
            .checked_add(1)
            .ok_or(EnvelopeError::NonceReuse)?;
        Ok(nonce)
    }
}

pub fn seal(
    plaintext: &[u8],
    key: &[u8; 32],
    nonce: &[u8; 12],
    msg_type: MsgType,
    device_id: &[u8; 16],
) -> Result<SealedEnvelope, EnvelopeError> {
    let cipher = Aes256Gcm::new(key.into());
    let aad = SealedEnvelope::aad(msg_type, device_id, nonce);
    let ciphertext = cipher
        .encrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: plaintext,
                aad: &aad,
            },
        )
        .map_err(|_| EnvelopeError::IntegrityFailure)?;
    Ok(SealedEnvelope {
        msg_type,
        device_id: *device_id,
        nonce: *nonce,
        ciphertext,
    })
}

/// Opens an envelope with an explicit key (device side).
pub fn open_with_key(
    env: &SealedEnvelope,
    key: &[u8; 32],
) -> Result<(MsgType, Vec<u8>), EnvelopeError> {
    let cipher = Aes256Gcm::new(key.into());
    let aad = SealedEnvelope::aad(env.msg_type, &env.device_id, &env.nonce);
    let plaintext = cipher
        .decrypt(
            Nonce::from_slice(&env.nonce),
            Payload {
                msg: &env.ciphertext,
                aad: &aad,
            },
        )
        .map_err(|_| EnvelopeError::IntegrityFailure)?;
    Ok((env.msg_type, plaintext))
}

/// Opens an envelope by looking up the device key in the registry
/// (server side).
pub fn open(
    env: &SealedEnvelope,
    registry: &KeyRegistry,
) -> Result<(MsgType, Vec<u8>), EnvelopeError> {
    let key = registry
        .key_for(&env.device_id)
        .ok_or(EnvelopeError::UnknownDevice)?;
    open_with_key(env, &key)
}

/// SHA-256; the inner integrity check on model artifacts.
pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceKeyRecord {
    pub device_id: [u8; 16],
    pub key: [u8; 32],
    pub created_at: String,
}

/// Pre-shared key registry, persisted one record per line:
/// device_id hex, key hex, created_at.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    records: HashMap<[u8; 16], DeviceKeyRecord>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, record: DeviceKeyRecord) {
        self.records.insert(record.device_id, record);
    }

    pub fn key_for(&self, device_id: &[u8; 16]) -> Option<[u8; 32]> {
        self.records.get(device_id).map(|r| r.key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvelopeError> {
        let mut records: Vec<&DeviceKeyRecord> = self.records.values().collect();
        records.sort_by_key(|r| r.device_id);
        let mut out = String::new();
        for r in records {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                hex::encode(r.device_id),
                hex::encode(r.key),
                r.created_at
            ));
        }
        std::fs::write(path, out).map_err(|e| EnvelopeError::RegistryIo(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EnvelopeError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| EnvelopeError::RegistryIo(e.to_string()))?;
        let mut registry = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(EnvelopeError::RegistryIo(format!(
                    "line {}: expected 3 fields",
                    lineno + 1
                )));
            }
            let device_id: [u8; 16] = hex::decode(fields[0])
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| {
                    EnvelopeError::RegistryIo(format!("line {}: bad device id", lineno + 1))
                })?;
            let key: [u8; 32] = hex::decode(fields[1])
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| EnvelopeError::RegistryIo(format!("line {}: bad key", lineno + 1)))?;
            registry.register(DeviceKeyRecord {
                device_id,
                key,
                created_at: fields[2].to_string(),
            });
        }
        Ok(registry)
    }
}

// ---------------------------------------------------------------------------
// Message schemas

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSection {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: f64,
    pub sensitivity: f64,
    pub placement: NoisePlacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSection {
    pub task: String,
    pub num_classes: u32,
    pub label_hints: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub k_retrieve: u32,
    pub epochs: u32,
    pub learning_rate: f64,
    pub seed: u64,
}

/// The one-shot query plaintext. Carries only sketches and metadata, never
/// raw feature values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub sketch_kind: String,
    /// base64 of the sketch wire format
    pub sketch: String,
    pub dp: DpSection,
    pub metadata: MetadataSection,
    pub model_spec: ModelSpec,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSection {
    pub train_loss: f64,
    pub samples_used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponsePayload {
    /// base64 of the model artifact bytes
    pub model: String,
    /// hex SHA-256 of the artifact bytes
    pub model_digest: String,
    pub metrics: MetricsSection,
    pub epsilon_spent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectPayload {
    pub code: RejectCode,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectCode {
    #[serde(rename = "BUDGET_EXHAUSTED")]
    BudgetExhausted,
    #[serde(rename = "VERIFY_FAILED")]
    VerifyFailed,
    #[serde(rename = "INTERNAL")]
    Internal,
}

/// Deterministic text encoding: UTF-8 JSON, object keys sorted ascending
/// bytewise, no insignificant whitespace, shortest round-trip numbers.
pub fn canonical_serialize<T: Serialize>(message: &T) -> Result<Vec<u8>, EnvelopeError> {
    // serde_json's default Map is a BTreeMap, so converting through Value
    // sorts object keys.
    let value =
        serde_json::to_value(message).map_err(|e| EnvelopeError::SchemaError(e.to_string()))?;
    serde_json::to_vec(&value).map_err(|e| EnvelopeError::SchemaError(e.to_string()))
}

pub fn parse_message<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, EnvelopeError> {
    serde_json::from_slice(bytes).map_err(|e| EnvelopeError::SchemaError(e.to_string()))
}

impl QueryPayload {
    /// Schema-level validation, independent of server policy checks.
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        let schema = |m: String| EnvelopeError::SchemaError(m);
        if self.sketch_kind != "minhash" && self.sketch_kind != "simhash" {
            return Err(schema(format!("unknown sketch_kind {:?}", self.sketch_kind)));
        }
        if self.metadata.task != "classify" {
            return Err(schema(format!("unknown task {:?}", self.metadata.task)));
        }
        let sketch_bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.sketch)
            .map_err(|e| schema(format!("sketch base64: {e}")))?;
        let sketch = crate::sketch::Sketch::from_bytes(&sketch_bytes)
            .map_err(|e| schema(format!("sketch bytes: {e}")))?;
        if sketch.kind_name() != self.sketch_kind {
            return Err(schema("sketch_kind disagrees with sketch bytes".into()));
        }
        self.model_spec
            .validate()
            .map_err(|e| schema(format!("model_spec: {e}")))?;
        if self.metadata.num_classes != self.model_spec.num_classes {
            return Err(schema("metadata/model_spec num_classes mismatch".into()));
        }
        Ok(())
    }

    pub fn decode_sketch(&self) -> Result<crate::sketch::Sketch, EnvelopeError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.sketch)
            .map_err(|e| EnvelopeError::SchemaError(e.to_string()))?;
        crate::sketch::Sketch::from_bytes(&bytes)
            .map_err(|e| EnvelopeError::SchemaError(e.to_string()))
    }
}
