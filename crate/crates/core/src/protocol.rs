//! Service layer: the device and cloud request/response state machines over
//! a length-framed stream transport, including query verification, sealed
//! rejection paths, replay protection, and auditing.
//!
//! One QUERY frame triggers one full training round; no other
//! device-to-server message type exists.

use std::collections::{HashSet, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStore, SketchParams};
use crate::envelope::{
    self, canonical_serialize, parse_message, open, open_with_key, seal, DpSection, EnvelopeError,
    KeyRegistry, MetadataSection, MetricsSection, ModelResponsePayload, MsgType, NonceCounter,
    QueryPayload, RejectCode, RejectPayload, SealedEnvelope, TrainSection, HEADER_LEN,
};
use crate::learn::{
    deserialize_model, fine_tune, serialize_model, LearnError, ModelArtifact, ModelSpec,
    PretrainedBase,
};
use crate::privacy::{
    gaussian_noise, laplace_noise, rr_flip_bits, rr_perturb_minhash, BudgetLedger, Mechanism,
    NoisePlacement, PrivacyError, PrivacyParams,
};
use crate::sketch::{quantize_projections, simhash_project, FeatureVector, Sketch, SimHashFingerprint};

pub const DEFAULT_MAX_FRAME: usize = 8 * 1024 * 1024;
pub const REPLAY_CACHE_CAPACITY: usize = 10_000;

/// Counts TCP-level operations; the offline-inference guarantee is asserted
/// against this.
pub static NET_OPS: AtomicU64 = AtomicU64::new(0);

pub fn net_ops() -> u64 {
    NET_OPS.load(Ordering::SeqCst)
}

pub fn reset_net_ops() {
    NET_OPS.store(0, Ordering::SeqCst);
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("transport failure (retryable): {0}")]
    Retryable(String),
    #[error("integrity failure")]
    IntegrityFailure,
    #[error("rejected: {0:?} {1}")]
    Rejected(RejectCode, String),
    #[error("envelope: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error("learn: {0}")]
    Learn(#[from] LearnError),
    #[error("privacy: {0}")]
    Privacy(#[from] PrivacyError),
    #[error("sketch: {0}")]
    Sketch(#[from] crate::sketch::SketchError),
    #[error("corpus: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("config: {0}")]
    Config(String),
    #[error("no local data")]
    NoLocalData,
}

// ---------------------------------------------------------------------------
// Pipeline trace

/// Device-side pipeline events, one per pseudocode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceEvent {
    CollectData,
    CreateModel,
    Anonymize,
    AddNoise,
    Encrypt,
    Transmit,
    ReceiveModel,
    CheckIntegrity,
    Decrypt,
    Deploy,
}

/// Cloud-side pipeline events, one per pseudocode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudEvent {
    ReceiveQuery,
    VerifyQuery,
    Decrypt,
    SimilaritySearch,
    TransferLearning,
    Encrypt,
    Transmit,
}

// ---------------------------------------------------------------------------
// Server configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceLimits {
    pub max_epochs: u32,
    pub max_k_retrieve: u32,
    pub max_frame_bytes: usize,
    pub max_hidden: u32,
    pub max_learning_rate: f64,
}

impl Default for ServiceLimits {
    fn default() -> Self {
        Self {
            max_epochs: 10_000,
            max_k_retrieve: 10_000,
            max_frame_bytes: DEFAULT_MAX_FRAME,
            max_hidden: 256,
            max_learning_rate: 10.0,
        }
    }
}

/// On-disk server configuration (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    pub listen_addr: String,
    pub corpus_path: PathBuf,
    pub base_model_path: PathBuf,
    pub key_registry_path: PathBuf,
    pub sketch_params: SketchParams,
    pub epsilon_cap: f64,
    pub limits: ServiceLimits,
    pub audit_log_path: Option<PathBuf>,
    pub ledger_path: Option<PathBuf>,
}

impl ServerConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProtocolError::Config(format!("read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ProtocolError::Config(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ProtocolError> {
        let text =
            toml::to_string_pretty(self).map_err(|e| ProtocolError::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ProtocolError::Config(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Server state

/// Server-side audit record, one per received QUERY frame.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub device_id: String,
    pub timestamp: String,
    pub mechanism: String,
    pub epsilon: f64,
    pub k_retrieve: u32,
    pub outcome: String,
    pub epsilon_charged: f64,
}

impl QueryRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.device_id,
            self.timestamp,
            self.mechanism,
            self.epsilon,
            self.k_retrieve,
            self.outcome,
            self.epsilon_charged
        )
    }
}

struct ReplayCache {
    seen: HashSet<([u8; 16], [u8; 12])>,
    order: VecDeque<([u8; 16], [u8; 12])>,
    capacity: usize,
}

impl ReplayCache {
    fn new(capacity: usize) -> Self {
        Self {
            seen: HashSet::new(),
            order: VecDeque::new(),
            capacity,
        }
    }

    /// Returns false if the (device, nonce) pair was already seen.
    fn insert(&mut self, key: ([u8; 16], [u8; 12])) -> bool {
        if self.seen.contains(&key) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(key);
        self.seen.insert(key);
        true
    }
}

pub struct ServerState {
    pub registry: KeyRegistry,
    pub corpus: Arc<CorpusStore>,
    pub base: Arc<PretrainedBase>,
    pub epsilon_cap: f64,
    pub limits: ServiceLimits,
    ledgers: Mutex<std::collections::HashMap<[u8; 16], BudgetLedger>>,
    replay: Mutex<ReplayCache>,
    audit: Mutex<Vec<QueryRecord>>,
    audit_path: Option<PathBuf>,
    trace: Mutex<Vec<CloudEvent>>,
    nonce: Mutex<NonceCounter>,
}

impl ServerState {
    pub fn new(
        registry: KeyRegistry,
        corpus: Arc<CorpusStore>,
        base: Arc<PretrainedBase>,
        epsilon_cap: f64,
        limits: ServiceLimits,
        audit_path: Option<PathBuf>,
    ) -> Self {
        Self {
            registry,
            corpus,
            base,
            epsilon_cap,
            limits,
            ledgers: Mutex::new(std::collections::HashMap::new()),
            replay: Mutex::new(ReplayCache::new(REPLAY_CACHE_CAPACITY)),
            audit: Mutex::new(Vec::new()),
            audit_path,
            trace: Mutex::new(Vec::new()),
            nonce: Mutex::new(NonceCounter::new(*b"srv0")),
        }
    }

    fn trace_push(&self, event: CloudEvent) {
        self.trace.lock().unwrap().push(event);
    }

    /// Drains the cloud-side pipeline trace collected so far.
    pub fn take_trace(&self) -> Vec<CloudEvent> {
        std::mem::take(&mut self.trace.lock().unwrap())
    }

    pub fn audit_records(&self) -> Vec<QueryRecord> {
        self.audit.lock().unwrap().clone()
    }

    pub fn epsilon_spent(&self, device_id: &[u8; 16]) -> f64 {
        self.ledgers
            .lock()
            .unwrap()
            .get(device_id)
            .map(|l| l.epsilon_spent)
            .unwrap_or(0.0)
    }

    pub fn ledger_snapshot(&self, device_id: &[u8; 16]) -> Option<BudgetLedger> {
        self.ledgers.lock().unwrap().get(device_id).cloned()
    }

    fn audit_write(&self, record: QueryRecord) {
        if let Some(path) = &self.audit_path {
            if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
                let _ = writeln!(f, "{}", record.to_line());
            }
        }
        self.audit.lock().unwrap().push(record);
    }

    fn next_nonce(&self) -> Result<[u8; 12], EnvelopeError> {
        self.nonce.lock().unwrap().next()
    }

    /// Policy checks on an authenticated query plaintext. Returns a
    /// machine-readable reason on failure.
    pub fn verify_query(&self, query: &QueryPayload) -> Result<Sketch, String> {
        query.validate().map_err(|e| format!("schema: {e}"))?;
        let sketch = query.decode_sketch().map_err(|e| format!("schema: {e}"))?;
        let params = &self.corpus.params;
        let ok = match &sketch {
            Sketch::MinHash(sig) => {
                sig.len() == params.minhash_k as usize && sig.seed == params.minhash_seed
            }
            Sketch::SimHash(fp) => {
                fp.width() == params.simhash_b as usize && fp.seed == params.simhash_seed
            }
        };
        if !ok {
            return Err("sketch_params".into());
        }
        if query.dp.mechanism != Mechanism::None {
            let params = PrivacyParams {
                mechanism: query.dp.mechanism,
                epsilon: query.dp.epsilon,
                delta: query.dp.delta,
                sensitivity: query.dp.sensitivity,
            };
            params.validate().map_err(|e| format!("dp_params: {e}"))?;
        }
        if query.model_spec.input_dim as usize != self.corpus.dim {
            return Err("model_spec: input_dim".into());
        }
        if query.model_spec.num_classes != self.corpus.num_classes {
            return Err("model_spec: num_classes".into());
        }
        if query.model_spec.hidden > self.limits.max_hidden {
            return Err("limits: hidden".into());
        }
        if query.train.epochs > self.limits.max_epochs {
            return Err("limits: epochs".into());
        }
        if query.train.k_retrieve == 0 || query.train.k_retrieve > self.limits.max_k_retrieve {
            return Err("limits: k_retrieve".into());
        }
        if !(query.train.learning_rate > 0.0
            && query.train.learning_rate <= self.limits.max_learning_rate)
        {
            return Err("limits: learning_rate".into());
        }
        Ok(sketch)
    }

    fn seal_response<T: Serialize>(
        &self,
        device_id: &[u8; 16],
        key: &[u8; 32],
        msg_type: MsgType,
        payload: &T,
    ) -> Result<Vec<u8>, EnvelopeError> {
        let plaintext = canonical_serialize(payload)?;
        let nonce = self.next_nonce()?;
        Ok(seal(&plaintext, key, &nonce, msg_type, device_id)?.to_bytes())
    }

    /// One full CloudExecute round. Returns the response frame bytes, or
    /// None when no authenticated response can be produced (frame dropped).
    pub fn cloud_execute(&self, frame_bytes: &[u8]) -> Option<Vec<u8>> {
        self.trace_push(CloudEvent::ReceiveQuery);
        let timestamp = chrono::Utc::now().to_rfc3339();

        // Frame-level verification: structure, known device, fresh nonce,
        // authentication tag.
        self.trace_push(CloudEvent::VerifyQuery);
        let env = match SealedEnvelope::from_bytes(frame_bytes) {
            Ok(env) => env,
            Err(_) => {
                self.audit_write(QueryRecord {
                    device_id: "-".into(),
                    timestamp,
                    mechanism: "-".into(),
                    epsilon: 0.0,
                    k_retrieve: 0,
                    outcome: "REJECTED MALFORMED_FRAME".into(),
                    epsilon_charged: 0.0,
                });
                return None;
            }
        };
        let device_id = env.device_id;
        let device_hex = hex::encode(device_id);
        let key = match self.registry.key_for(&device_id) {
            Some(k) => k,
            None => {
                self.audit_write(QueryRecord {
                    device_id: device_hex,
                    timestamp,
                    mechanism: "-".into(),
                    epsilon: 0.0,
                    k_retrieve: 0,
                    outcome: "REJECTED UNKNOWN_DEVICE".into(),
                    epsilon_charged: 0.0,
                });
                return None;
            }
        };
        let reject = |code: RejectCode, detail: &str| -> Option<Vec<u8>> {
            self.seal_response(
                &device_id,
                &key,
                MsgType::Reject,
                &RejectPayload {
                    code,
                    detail: detail.to_string(),
                },
            )
            .ok()
        };
        if env.msg_type != MsgType::Query {
            self.audit_write(QueryRecord {
                device_id: device_hex,
                timestamp,
                mechanism: "-".into(),
                epsilon: 0.0,
                k_retrieve: 0,
                outcome: "REJECTED VERIFY_FAILED".into(),
                epsilon_charged: 0.0,
            });
            return reject(RejectCode::VerifyFailed, "msg_type");
        }
        if !self.replay.lock().unwrap().insert((device_id, env.nonce)) {
            self.audit_write(QueryRecord {
                device_id: device_hex,
                timestamp,
                mechanism: "-".into(),
                epsilon: 0.0,
                k_retrieve: 0,
                outcome: "REJECTED VERIFY_FAILED".into(),
                epsilon_charged: 0.0,
            });
            return reject(RejectCode::VerifyFailed, "replay");
        }
        let plaintext = match open(&env, &self.registry) {
            Ok((_, pt)) => pt,
            Err(_) => {
                self.audit_write(QueryRecord {
                    device_id: device_hex,
                    timestamp,
                    mechanism: "-".into(),
                    epsilon: 0.0,
                    k_retrieve: 0,
                    outcome: "REJECTED VERIFY_FAILED".into(),
                    epsilon_charged: 0.0,
                });
                return reject(RejectCode::VerifyFailed, "auth");
            }
        };

        // Plaintext-level verification and processing.
        self.trace_push(CloudEvent::Decrypt);
        let query: QueryPayload = match parse_message(&plaintext) {
            Ok(q) => q,
            Err(e) => {
                self.audit_write(QueryRecord {
                    device_id: device_hex,
                    timestamp,
                    mechanism: "-".into(),
                    epsilon: 0.0,
                    k_retrieve: 0,
                    outcome: "REJECTED VERIFY_FAILED".into(),
                    epsilon_charged: 0.0,
                });
                return reject(RejectCode::VerifyFailed, &format!("schema: {e}"));
            }
        };
        let mut audit = QueryRecord {
            device_id: device_hex,
            timestamp,
            mechanism: query.dp.mechanism.to_string(),
            epsilon: query.dp.epsilon,
            k_retrieve: query.train.k_retrieve,
            outcome: String::new(),
            epsilon_charged: 0.0,
        };
        let sketch = match self.verify_query(&query) {
            Ok(s) => s,
            Err(reason) => {
                audit.outcome = "REJECTED VERIFY_FAILED".into();
                self.audit_write(audit);
                return reject(RejectCode::VerifyFailed, &reason);
            }
        };

        // Budget enforcement (serialized per device; check-then-charge is
        // atomic under the ledger map lock).
        if query.dp.mechanism != Mechanism::None {
            let mut ledgers = self.ledgers.lock().unwrap();
            let ledger = ledgers
                .entry(device_id)
                .or_insert_with(|| BudgetLedger::new(device_id, self.epsilon_cap));
            if let Err(e) = ledger.charge(query.dp.epsilon, query.dp.mechanism) {
                drop(ledgers);
                audit.outcome = "REJECTED BUDGET_EXHAUSTED".into();
                self.audit_write(audit);
                return reject(RejectCode::BudgetExhausted, &e.to_string());
            }
            audit.epsilon_charged = query.dp.epsilon;
        }

        self.trace_push(CloudEvent::SimilaritySearch);
        let hints = if query.metadata.label_hints.is_empty() {
            None
        } else {
            Some(query.metadata.label_hints.as_slice())
        };
        let result = match self
            .corpus
            .search_topk(&sketch, query.train.k_retrieve as usize, hints)
        {
            Ok(r) => r,
            Err(e) => {
                audit.outcome = "REJECTED INTERNAL".into();
                self.audit_write(audit);
                return reject(RejectCode::Internal, &e.to_string());
            }
        };
        let training_set = match self.corpus.fetch_training_set(&result) {
            Ok(t) => t,
            Err(e) => {
                audit.outcome = "REJECTED INTERNAL".into();
                self.audit_write(audit);
                return reject(RejectCode::Internal, &e.to_string());
            }
        };

        self.trace_push(CloudEvent::TransferLearning);
        let artifact = match fine_tune(
            &self.base,
            &training_set,
            query.train.epochs,
            query.train.learning_rate,
            query.train.seed,
        ) {
            Ok(a) => a,
            Err(e) => {
                audit.outcome = "REJECTED INTERNAL".into();
                self.audit_write(audit);
                return reject(RejectCode::Internal, &e.to_string());
            }
        };

        self.trace_push(CloudEvent::Encrypt);
        let model_bytes = serialize_model(&artifact);
        let model_digest = hex::encode(envelope::digest(&model_bytes));
        let response = ModelResponsePayload {
            model: base64::engine::general_purpose::STANDARD.encode(&model_bytes),
            model_digest,
            metrics: MetricsSection {
                train_loss: artifact.train_meta.final_loss,
                samples_used: artifact.train_meta.samples_used,
            },
            epsilon_spent: self.epsilon_spent(&device_id),
        };
        let frame = match self.seal_response(&device_id, &key, MsgType::ModelResponse, &response) {
            Ok(f) => f,
            Err(_) => {
                audit.outcome = "REJECTED INTERNAL".into();
                self.audit_write(audit);
                return reject(RejectCode::Internal, "seal");
            }
        };
        self.trace_push(CloudEvent::Transmit);
        audit.outcome = "SERVED".into();
        self.audit_write(audit);
        Some(frame)
    }
}

// ---------------------------------------------------------------------------
// Transport

/// One-shot request/response transport: sends a QUERY frame, returns the
/// response frame bytes.
pub trait Transport {
    fn round_trip(&mut self, frame: &[u8]) -> Result<Vec<u8>, ProtocolError>;
}

/// Loopback transport calling the server state machine directly.
pub struct LoopbackTransport {
    pub state: Arc<ServerState>,
}

impl Transport for LoopbackTransport {
    fn round_trip(&mut self, frame: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        self.state
            .cloud_execute(frame)
            .ok_or_else(|| ProtocolError::Retryable("frame dropped".into()))
    }
}

pub fn write_frame(stream: &mut TcpStream, frame: &[u8]) -> std::io::Result<()> {
    NET_OPS.fetch_add(1, Ordering::SeqCst);
    stream.write_all(frame)?;
    stream.flush()
}

/// Reads exactly one frame, reassembling partial reads. `None` on clean EOF
/// before any byte of the header.
pub fn read_frame(stream: &mut TcpStream, max_frame: usize) -> std::io::Result<Option<Vec<u8>>> {
    NET_OPS.fetch_add(1, Ordering::SeqCst);
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = stream.read(&mut header[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "truncated header",
            ));
        }
        filled += n;
    }
    if header[0..4] != envelope::MAGIC {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad magic",
        ));
    }
    let payload_len =
        u32::from_be_bytes(header[HEADER_LEN - 4..].try_into().unwrap()) as usize;
    if HEADER_LEN + payload_len > max_frame {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "oversize frame",
        ));
    }
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + payload_len, 0);
    let mut filled = HEADER_LEN;
    while filled < frame.len() {
        let n = stream.read(&mut frame[filled..])?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "truncated payload",
            ));
        }
        filled += n;
    }
    Ok(Some(frame))
}

/// TCP transport: one connection per round.
pub struct TcpTransport {
    pub addr: SocketAddr,
    pub max_frame: usize,
}

impl Transport for TcpTransport {
    fn round_trip(&mut self, frame: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        NET_OPS.fetch_add(1, Ordering::SeqCst);
        let mut stream = TcpStream::connect(self.addr)
            .map_err(|e| ProtocolError::Retryable(e.to_string()))?;
        write_frame(&mut stream, frame).map_err(|e| ProtocolError::Retryable(e.to_string()))?;
        match read_frame(&mut stream, self.max_frame) {
            Ok(Some(resp)) => Ok(resp),
            Ok(None) => Err(ProtocolError::Retryable("connection closed".into())),
            Err(e) => Err(ProtocolError::Retryable(e.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Server loop

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

fn handle_connection(state: Arc<ServerState>, mut stream: TcpStream, max_frame: usize) {
    loop {
        let frame = match read_frame(&mut stream, max_frame) {
            Ok(Some(f)) => f,
            // EOF, garbage before magic, or oversize: drop the connection.
            Ok(None) | Err(_) => return,
        };
        // A panic in one request must not kill the serving loop.
        let response = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            state.cloud_execute(&frame)
        }))
        .unwrap_or(None);
        match response {
            Some(resp) => {
                if write_frame(&mut stream, &resp).is_err() {
                    return;
                }
            }
            None => return,
        }
    }
}

/// Starts the serving loop on the given address ("127.0.0.1:0" for an
/// ephemeral port). Connections are handled on their own threads.
pub fn serve(state: Arc<ServerState>, listen_addr: &str) -> Result<ServerHandle, ProtocolError> {
    let listener =
        TcpListener::bind(listen_addr).map_err(|e| ProtocolError::Retryable(e.to_string()))?;
    let addr = listener
        .local_addr()
        .map_err(|e| ProtocolError::Retryable(e.to_string()))?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let shutdown_flag = shutdown.clone();
    let max_frame = state.limits.max_frame_bytes;
    let join = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if shutdown_flag.load(Ordering::SeqCst) {
                return;
            }
            match conn {
                Ok(stream) => {
                    let state = state.clone();
                    std::thread::spawn(move || handle_connection(state, stream, max_frame));
                }
                Err(_) => continue,
            }
        }
    });
    Ok(ServerHandle {
        addr,
        shutdown,
        join: Some(join),
    })
}

// ---------------------------------------------------------------------------
// Device session

#[derive(Debug, Clone)]
pub struct UpdatePolicy {
    pub max_rounds: u32,
    pub min_interval_secs: u64,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        Self {
            max_rounds: 1,
            min_interval_secs: 0,
        }
    }
}

pub struct ClientSession {
    pub device_id: [u8; 16],
    pub key: [u8; 32],
    pub nonce: NonceCounter,
    /// Local dense samples (raw, pre-normalization).
    pub local_data: Vec<Vec<f64>>,
    pub deployed: Option<ModelArtifact>,
    pub policy: UpdatePolicy,
    pub trace: Vec<DeviceEvent>,
    /// Device-local budget mirror (server is authoritative).
    pub local_epsilon_spent: f64,
}

impl ClientSession {
    pub fn new(device_id: [u8; 16], key: [u8; 32], salt: [u8; 4]) -> Self {
        Self {
            device_id,
            key,
            nonce: NonceCounter::new(salt),
            local_data: Vec::new(),
            deployed: None,
            policy: UpdatePolicy::default(),
            trace: Vec::new(),
            local_epsilon_spent: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryConfig {
    pub sketch_params: SketchParams,
    pub use_minhash: bool,
    pub dp: DpSection,
    pub model_spec: ModelSpec,
    pub label_hints: Vec<i64>,
    pub k_retrieve: u32,
    pub epochs: u32,
    pub learning_rate: f64,
    pub seed: u64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub model_digest: String,
    pub train_loss: f64,
    pub samples_used: u32,
    pub epsilon_spent: f64,
}

/// Centroid direction of the local samples; the device-side featurization
/// of "collected data" into a single query vector.
pub fn local_centroid(samples: &[Vec<f64>]) -> Result<FeatureVector, ProtocolError> {
    if samples.is_empty() {
        return Err(ProtocolError::NoLocalData);
    }
    let dim = samples[0].len();
    let mut acc = vec![0.0; dim];
    for s in samples {
        if s.len() != dim {
            return Err(ProtocolError::Config("ragged local data".into()));
        }
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v / norm;
        }
    }
    FeatureVector::dense(acc).map_err(ProtocolError::Sketch)
}

/// Sketches the query vector and applies the configured DP placement.
pub fn build_noised_sketch(
    centroid: &FeatureVector,
    config: &QueryConfig,
) -> Result<Sketch, ProtocolError> {
    let p = &config.sketch_params;
    if config.use_minhash {
        let tokens = crate::corpus::dense_tokens(&centroid.values, p.vocab);
        let sig = crate::sketch::minhash_sign(&tokens, p.minhash_k as usize, p.minhash_seed)?;
        match (config.dp.mechanism, config.dp.placement) {
            (Mechanism::None, _) => Ok(Sketch::MinHash(sig)),
            (Mechanism::RandomizedResponse, NoisePlacement::PostHash) => Ok(Sketch::MinHash(
                rr_perturb_minhash(&sig, config.dp.epsilon, config.noise_seed)?,
            )),
            _ => Err(ProtocolError::Config(
                "minhash supports post-hash randomized response only".into(),
            )),
        }
    } else {
        match (config.dp.mechanism, config.dp.placement) {
            (Mechanism::None, _) => {
                let fp = crate::sketch::simhash_sign(
                    centroid,
                    p.simhash_b as usize,
                    p.simhash_seed,
                    false,
                )?;
                Ok(Sketch::SimHash(fp))
            }
            (Mechanism::RandomizedResponse, NoisePlacement::PostHash) => {
                let fp = crate::sketch::simhash_sign(
                    centroid,
                    p.simhash_b as usize,
                    p.simhash_seed,
                    false,
                )?;
                let bits = rr_flip_bits(&fp.bits, config.dp.epsilon, config.noise_seed)?;
                Ok(Sketch::SimHash(SimHashFingerprint {
                    bits,
                    seed: fp.seed,
                    projections: None,
                }))
            }
            (mech @ (Mechanism::Laplace | Mechanism::Gaussian), NoisePlacement::Projection) => {
                let projections =
                    simhash_project(centroid, p.simhash_b as usize, p.simhash_seed)?;
                let params = PrivacyParams {
                    mechanism: mech,
                    epsilon: config.dp.epsilon,
                    delta: config.dp.delta,
                    sensitivity: config.dp.sensitivity,
                };
                let noised = match mech {
                    Mechanism::Laplace => laplace_noise(&projections, &params, config.noise_seed)?,
                    _ => gaussian_noise(&projections, &params, config.noise_seed)?,
                };
                Ok(Sketch::SimHash(SimHashFingerprint {
                    bits: quantize_projections(&noised),
                    seed: p.simhash_seed,
                    projections: None,
                }))
            }
            _ => Err(ProtocolError::Config(
                "unsupported mechanism/placement combination".into(),
            )),
        }
    }
}

/// One full DeviceExecute round. On any failure the previously deployed
/// model remains active.
pub fn device_execute(
    session: &mut ClientSession,
    config: &QueryConfig,
    transport: &mut dyn Transport,
) -> Result<RoundOutcome, ProtocolError> {
    session.trace.clear();

    session.trace.push(DeviceEvent::CollectData);
    let centroid = local_centroid(&session.local_data)?;

    session.trace.push(DeviceEvent::CreateModel);
    let model_spec = config.model_spec;

    session.trace.push(DeviceEvent::Anonymize);
    session.trace.push(DeviceEvent::AddNoise);
    let sketch = build_noised_sketch(&centroid, config)?;

    session.trace.push(DeviceEvent::Encrypt);
    let query = QueryPayload {
        sketch_kind: sketch.kind_name().to_string(),
        sketch: base64::engine::general_purpose::STANDARD.encode(sketch.to_bytes()),
        dp: config.dp.clone(),
        metadata: MetadataSection {
            task: "classify".into(),
            num_classes: model_spec.num_classes,
            label_hints: config.label_hints.clone(),
        },
        model_spec,
        train: TrainSection {
            k_retrieve: config.k_retrieve,
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            seed: config.seed,
        },
    };
    let plaintext = canonical_serialize(&query)?;
    let nonce = session.nonce.next()?;
    let frame = seal(
        &plaintext,
        &session.key,
        &nonce,
        MsgType::Query,
        &session.device_id,
    )?
    .to_bytes();

    session.trace.push(DeviceEvent::Transmit);
    let response_bytes = transport.round_trip(&frame)?;

    session.trace.push(DeviceEvent::ReceiveModel);
    let env = SealedEnvelope::from_bytes(&response_bytes)?;

    session.trace.push(DeviceEvent::CheckIntegrity);
    let (msg_type, response_plaintext) =
        open_with_key(&env, &session.key).map_err(|_| ProtocolError::IntegrityFailure)?;

    session.trace.push(DeviceEvent::Decrypt);
    match msg_type {
        MsgType::Reject => {
            let reject: RejectPayload = parse_message(&response_plaintext)?;
            Err(ProtocolError::Rejected(reject.code, reject.detail))
        }
        MsgType::ModelResponse => {
            let response: ModelResponsePayload = parse_message(&response_plaintext)?;
            let model_bytes = base64::engine::general_purpose::STANDARD
                .decode(&response.model)
                .map_err(|e| EnvelopeError::SchemaError(e.to_string()))?;
            // inner digest guards storage-at-rest corruption after decrypt
            if hex::encode(envelope::digest(&model_bytes)) != response.model_digest {
                return Err(ProtocolError::IntegrityFailure);
            }
            let artifact = deserialize_model(&model_bytes)?;

            session.trace.push(DeviceEvent::Deploy);
            session.deployed = Some(artifact);
            if config.dp.mechanism != Mechanism::None {
                session.local_epsilon_spent += config.dp.epsilon;
            }
            Ok(RoundOutcome {
                model_digest: response.model_digest,
                train_loss: response.metrics.train_loss,
                samples_used: response.metrics.samples_used,
                epsilon_spent: response.epsilon_spent,
            })
        }
        MsgType::Query => Err(ProtocolError::Envelope(EnvelopeError::MalformedFrame(
            "unexpected QUERY response".into(),
        ))),
    }
}
