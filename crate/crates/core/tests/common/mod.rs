//! Shared fixtures for integration tests: a seeded cluster corpus, a
//! pretrained base, a provisioned device, and a ready server state.

use std::sync::Arc;

use ptaas_core::corpus::{CorpusStore, SketchParams};
use ptaas_core::envelope::{DeviceKeyRecord, DpSection, KeyRegistry};
use ptaas_core::learn::{pretrain_base, ModelSpec};
use ptaas_core::privacy::{Mechanism, NoisePlacement};
use ptaas_core::protocol::{ClientSession, QueryConfig, ServerState, ServiceLimits};
use ptaas_core::synth::{self, ClusterConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const DEVICE_ID: [u8; 16] = [0xd0; 16];
pub const DEVICE_KEY: [u8; 32] = [0x4b; 32];

pub fn sketch_params() -> SketchParams {
    SketchParams {
        minhash_k: 128,
        simhash_b: 256,
        ..Default::default()
    }
}

pub struct TestWorld {
    pub state: Arc<ServerState>,
    pub dataset: synth::ClusterDataset,
}

pub fn build_world(epsilon_cap: f64) -> TestWorld {
    let dataset = synth::generate(ClusterConfig {
        num_clusters: 4,
        dim: 16,
        records_per_cluster: 100,
        noise_std: 0.25,
        seed: 42,
    });
    let corpus =
        Arc::new(CorpusStore::build(dataset.rows.clone(), sketch_params(), 1).unwrap());
    let spec = ModelSpec::logreg(16, 4);
    let base = Arc::new(
        pretrain_base(&corpus.all_samples(), &spec, 40, 0.5, 7, corpus.digest()).unwrap(),
    );
    let mut registry = KeyRegistry::new();
    registry.register(DeviceKeyRecord {
        device_id: DEVICE_ID,
        key: DEVICE_KEY,
        created_at: "2026-01-01T00:00:00Z".into(),
    });
    let state = Arc::new(ServerState::new(
        registry,
        corpus,
        base,
        epsilon_cap,
        ServiceLimits::default(),
        None,
    ));
    TestWorld { state, dataset }
}

pub fn device_session(world: &TestWorld, cluster: usize, n_samples: usize) -> ClientSession {
    // Each session gets a distinct nonce salt so that parallel or repeated
    // sessions for the same device never collide in the replay cache.
    static SALT: std::sync::atomic::AtomicU32 = std::sync::atomic::AtomicU32::new(0);
    let salt = SALT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let mut session = ClientSession::new(DEVICE_ID, DEVICE_KEY, salt.to_be_bytes());
    let mut rng = ChaCha20Rng::seed_from_u64(1000 + cluster as u64);
    session.local_data = (0..n_samples)
        .map(|_| world.dataset.sample_from_cluster(cluster, &mut rng))
        .collect();
    session
}

pub fn noiseless_config() -> QueryConfig {
    QueryConfig {
        sketch_params: sketch_params(),
        use_minhash: false,
        dp: DpSection {
            mechanism: Mechanism::None,
            epsilon: 0.0,
            delta: 0.0,
            sensitivity: 1.0,
            placement: NoisePlacement::Projection,
        },
        model_spec: ModelSpec::logreg(16, 4),
        label_hints: vec![],
        k_retrieve: 20,
        epochs: 40,
        learning_rate: 0.5,
        seed: 77,
        noise_seed: 88,
    }
}

pub fn rr_config(epsilon: f64) -> QueryConfig {
    QueryConfig {
        dp: DpSection {
            mechanism: Mechanism::RandomizedResponse,
            epsilon,
            delta: 0.0,
            sensitivity: 1.0,
            placement: NoisePlacement::PostHash,
        },
        ..noiseless_config()
    }
}

#[allow(dead_code)]
pub fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}
