//! Acceptance gate: one test per release criterion, each ending in a
//! single PASS line. Run with `cargo test --test acceptance`.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ptaas_core::corpus::{dense_tokens, CorpusStore, SketchParams};
use ptaas_core::envelope::{
    digest, open_with_key, seal, DeviceKeyRecord, DpSection, EnvelopeError, KeyRegistry, MsgType,
    RejectCode, SealedEnvelope, HEADER_LEN,
};
use ptaas_core::eval;
use ptaas_core::learn::{
    fine_tune, loss_and_grad, pretrain_base, serialize_model, ModelSpec,
};
use ptaas_core::privacy::{
    gaussian_noise, gaussian_sigma, laplace_noise, rr_flip_bits, rr_flip_probability, Mechanism,
    NoisePlacement, PrivacyParams,
};
use ptaas_core::protocol::{
    device_execute, CloudEvent, ClientSession, DeviceEvent, LoopbackTransport, ProtocolError,
    QueryConfig, ServerState, ServiceLimits,
};
use ptaas_core::sketch::{
    estimate_similarity, minhash_sign, simhash_sign, FeatureVector, Sketch,
};
use ptaas_core::synth::{self, ClusterConfig};

const DEVICE_ID: [u8; 16] = [0xac; 16];
const DEVICE_KEY: [u8; 32] = [0x7e; 32];

struct World {
    state: Arc<ServerState>,
    dataset: synth::ClusterDataset,
}

fn build_world(epsilon_cap: f64) -> World {
    let dataset = synth::generate(ClusterConfig {
        num_clusters: 4,
        dim: 16,
        records_per_cluster: 100,
        noise_std: 0.25,
        seed: 42,
    });
    let params = SketchParams {
        minhash_k: 128,
        simhash_b: 256,
        ..Default::default()
    };
    let corpus = Arc::new(CorpusStore::build(dataset.rows.clone(), params, 1).unwrap());
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
    World { state, dataset }
}

fn session(world: &World, cluster: usize, salt: [u8; 4]) -> ClientSession {
    let mut s = ClientSession::new(DEVICE_ID, DEVICE_KEY, salt);
    let mut rng = ChaCha20Rng::seed_from_u64(900 + cluster as u64);
    s.local_data = (0..10)
        .map(|_| world.dataset.sample_from_cluster(cluster, &mut rng))
        .collect();
    s
}

fn plain_config(epsilon: f64, mechanism: Mechanism) -> QueryConfig {
    QueryConfig {
        sketch_params: SketchParams {
            minhash_k: 128,
            simhash_b: 256,
            ..Default::default()
        },
        use_minhash: false,
        dp: DpSection {
            mechanism,
            epsilon,
            delta: 0.0,
            sensitivity: 1.0,
            placement: NoisePlacement::PostHash,
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

// ---------------------------------------------------------------------------
// 1. Pipeline fidelity

#[test]
fn criterion_01_pipeline_trace_fidelity() {
    let world = build_world(8.0);
    let mut s = session(&world, 0, *b"ac01");
    let mut transport = LoopbackTransport {
        state: world.state.clone(),
    };
    world.state.take_trace();
    let outcome = device_execute(&mut s, &plain_config(0.0, Mechanism::None), &mut transport)
        .expect("healthy round");
    assert_eq!(
        s.trace,
        vec![
            DeviceEvent::CollectData,
            DeviceEvent::CreateModel,
            DeviceEvent::Anonymize,
            DeviceEvent::AddNoise,
            DeviceEvent::Encrypt,
            DeviceEvent::Transmit,
            DeviceEvent::ReceiveModel,
            DeviceEvent::CheckIntegrity,
            DeviceEvent::Decrypt,
            DeviceEvent::Deploy,
        ]
    );
    assert_eq!(
        world.state.take_trace(),
        vec![
            CloudEvent::ReceiveQuery,
            CloudEvent::VerifyQuery,
            CloudEvent::Decrypt,
            CloudEvent::SimilaritySearch,
            CloudEvent::TransferLearning,
            CloudEvent::Encrypt,
            CloudEvent::Transmit,
        ]
    );
    let deployed = serialize_model(s.deployed.as_ref().unwrap());
    assert_eq!(hex::encode(digest(&deployed)), outcome.model_digest);
    println!("PASS 01 pipeline-trace-fidelity: device and cloud event order exact, digests equal");
}

// ---------------------------------------------------------------------------
// 2. Sketch estimator accuracy

#[test]
fn criterion_02_sketch_estimator_accuracy() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5e7);
    // MinHash vs exact Jaccard over 200 random set pairs, k = 512.
    let mut jaccard_err = 0.0;
    for _ in 0..200 {
        let size_a = rng.gen_range(40..160);
        let shared = rng.gen_range(0..size_a);
        let a: BTreeSet<u64> = (0..size_a).map(|_| rng.gen::<u64>() >> 8).collect();
        let mut b: BTreeSet<u64> = a.iter().take(shared).copied().collect();
        while b.len() < size_a {
            b.insert(rng.gen::<u64>() >> 8);
        }
        let inter = a.intersection(&b).count() as f64;
        let union = a.union(&b).count() as f64;
        let exact = inter / union;
        let sa = Sketch::MinHash(minhash_sign(&a, 512, 99).unwrap());
        let sb = Sketch::MinHash(minhash_sign(&b, 512, 99).unwrap());
        jaccard_err += (estimate_similarity(&sa, &sb).unwrap() - exact).abs();
    }
    jaccard_err /= 200.0;
    assert!(jaccard_err <= 0.05, "mean jaccard error {jaccard_err}");

    // SimHash Hamming/b vs angle/pi over 200 unit-vector pairs, b = 256.
    let mut angle_err = 0.0;
    for _ in 0..200 {
        let dim = 24;
        let u: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let fu = FeatureVector::dense(u).unwrap();
        let fv = FeatureVector::dense(v).unwrap();
        let dot: f64 = fu.values.iter().zip(&fv.values).map(|(a, b)| a * b).sum();
        let angle = dot.clamp(-1.0, 1.0).acos();
        let su = simhash_sign(&fu, 256, 77, false).unwrap();
        let sv = simhash_sign(&fv, 256, 77, false).unwrap();
        let hamming = su
            .bits
            .iter()
            .zip(&sv.bits)
            .filter(|(a, b)| a != b)
            .count() as f64;
        angle_err += (hamming / 256.0 - angle / std::f64::consts::PI).abs();
    }
    angle_err /= 200.0;
    assert!(angle_err <= 0.05, "mean angle error {angle_err}");
    println!(
        "PASS 02 sketch-estimator-accuracy: mean |minhash - jaccard| = {jaccard_err:.4} <= 0.05, \
         mean |hamming/b - angle/pi| = {angle_err:.4} <= 0.05"
    );
}

// ---------------------------------------------------------------------------
// 3. Noise mechanism statistics

fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    sorted[((sorted.len() as f64 - 1.0) * p) as usize]
}

#[test]
fn criterion_03_noise_mechanism_statistics() {
    let n = 1_000_000usize;
    let zeros = vec![0.0; n];

    // Laplace, scale b = sensitivity / epsilon = 0.25.
    let params = PrivacyParams {
        mechanism: Mechanism::Laplace,
        epsilon: 4.0,
        delta: 0.0,
        sensitivity: 1.0,
    };
    let mut samples = laplace_noise(&zeros, &params, 31337).unwrap();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let b = 0.25;
    // Laplace inverse CDF: b ln(2p) below the median, -b ln(2(1-p)) above.
    let mut max_lap: f64 = 0.0;
    for (p, analytic) in [
        (0.01, b * (2.0 * 0.01f64).ln()),
        (0.50, 0.0),
        (0.99, -b * (2.0 * 0.01f64).ln()),
    ] {
        let gap = (empirical_quantile(&samples, p) - analytic).abs();
        max_lap = max_lap.max(gap);
        assert!(gap <= 0.01, "laplace quantile {p}: gap {gap}");
    }

    // Gaussian, sigma = sqrt(2 ln(1.25/delta)) / epsilon.
    let params = PrivacyParams {
        mechanism: Mechanism::Gaussian,
        epsilon: 10.0,
        delta: 1e-5,
        sensitivity: 1.0,
    };
    let sigma = gaussian_sigma(&params).unwrap();
    let mut samples = gaussian_noise(&zeros, &params, 1234).unwrap();
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // z-scores of the standard normal at 1% / 50% / 99%.
    const Z99: f64 = 2.326_347_874_040_840_8;
    let mut max_gauss: f64 = 0.0;
    for (p, analytic) in [(0.01, -Z99 * sigma), (0.50, 0.0), (0.99, Z99 * sigma)] {
        let gap = (empirical_quantile(&samples, p) - analytic).abs();
        max_gauss = max_gauss.max(gap);
        assert!(gap <= 0.01, "gaussian quantile {p}: gap {gap}");
    }

    // Randomized response: flip count within 4 sigma of n * p.
    let bits = vec![false; n];
    let epsilon = 2.0;
    let flipped = rr_flip_bits(&bits, epsilon, 777).unwrap();
    let flips = flipped.iter().filter(|&&x| x).count() as f64;
    let p = rr_flip_probability(epsilon / n as f64);
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    let gap = (flips - n as f64 * p).abs();
    assert!(gap <= 4.0 * sd, "rr flips {flips} vs {}", n as f64 * p);
    println!(
        "PASS 03 noise-mechanism-statistics: laplace quantile gap {max_lap:.4} <= 0.01, \
         gaussian gap {max_gauss:.4} <= 0.01, rr flips within {:.1} sigma",
        gap / sd
    );
}

// ---------------------------------------------------------------------------
// 4. Envelope security

#[test]
fn criterion_04_envelope_security() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xbeef);
    let plaintext: Vec<u8> = (0..4096).map(|_| rng.gen()).collect();
    let env = seal(&plaintext, &DEVICE_KEY, &[9u8; 12], MsgType::Query, &DEVICE_ID).unwrap();
    let frame = env.to_bytes();

    // Every single-byte tamper position must fail authentication; within
    // the ciphertext region the failure is specifically IntegrityFailure.
    let mut tampered_positions = 0usize;
    for i in 0..frame.len() {
        let mut copy = frame.clone();
        copy[i] ^= 0x01;
        let outcome = SealedEnvelope::from_bytes(&copy)
            .and_then(|env| open_with_key(&env, &DEVICE_KEY));
        match outcome {
            Err(e) => {
                if i >= HEADER_LEN {
                    assert!(
                        matches!(e, EnvelopeError::IntegrityFailure),
                        "position {i}: {e}"
                    );
                }
            }
            Ok(_) => panic!("tamper at byte {i} went undetected"),
        }
        tampered_positions += 1;
    }
    assert_eq!(tampered_positions, frame.len());

    // No 16-byte plaintext window may appear anywhere in the frame.
    let frame_windows: HashSet<&[u8]> = frame.windows(16).collect();
    for window in plaintext.windows(16) {
        assert!(!frame_windows.contains(window), "plaintext leaked into frame");
    }

    // A replayed nonce is rejected by the server.
    let world = build_world(8.0);
    let mut s = session(&world, 0, *b"ac04");

    struct Capture {
        inner: LoopbackTransport,
        frame: Option<Vec<u8>>,
    }
    impl ptaas_core::protocol::Transport for Capture {
        fn round_trip(&mut self, frame: &[u8]) -> Result<Vec<u8>, ProtocolError> {
            self.frame = Some(frame.to_vec());
            self.inner.round_trip(frame)
        }
    }
    let mut transport = Capture {
        inner: LoopbackTransport {
            state: world.state.clone(),
        },
        frame: None,
    };
    device_execute(&mut s, &plain_config(0.0, Mechanism::None), &mut transport).unwrap();
    let replayed = world
        .state
        .cloud_execute(&transport.frame.unwrap())
        .expect("sealed reject");
    let env = SealedEnvelope::from_bytes(&replayed).unwrap();
    let (msg_type, body) = open_with_key(&env, &DEVICE_KEY).unwrap();
    assert_eq!(msg_type, MsgType::Reject);
    let reject: ptaas_core::envelope::RejectPayload =
        ptaas_core::envelope::parse_message(&body).unwrap();
    assert_eq!(reject.code, RejectCode::VerifyFailed);
    println!(
        "PASS 04 envelope-security: {}/{} tamper positions detected, replay rejected, \
         no plaintext window leaked",
        tampered_positions,
        frame.len()
    );
}

// ---------------------------------------------------------------------------
// 5. Retrieval correctness

#[test]
fn criterion_05_retrieval_correctness() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x109);
    let params = SketchParams::default();
    let mut checked = 0usize;
    for &size in &[100usize, 1_000, 10_000] {
        let rows: Vec<(u32, Vec<f64>)> = (0..size)
            .map(|_| {
                let features: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
                (rng.gen_range(0..5u32), features)
            })
            .collect();
        let corpus = CorpusStore::build(rows, params, 1).unwrap();

        for q in 0..20 {
            let query: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
            let fv = FeatureVector::dense(query).unwrap();
            let tokens = dense_tokens(&fv.values, params.vocab);
            let minhash = corpus.sketch_query_minhash(&tokens).unwrap();
            let simhash = corpus.sketch_query_simhash(&fv).unwrap();
            for sketch in [&minhash, &simhash] {
                let banded = corpus.search_topk(sketch, 25, None).unwrap();
                let exhaustive = corpus.search_topk_exhaustive(sketch, 25, None).unwrap();
                assert_eq!(banded.ranked, exhaustive.ranked, "corpus {size} query {q}");
                checked += 1;
            }
        }

        // An identical-sketch query ranks its own record first at 1.0.
        let record = &corpus.records()[size / 2];
        let fv = FeatureVector::dense(record.features.clone()).unwrap();
        let simhash = corpus.sketch_query_simhash(&fv).unwrap();
        let top = corpus.search_topk(&simhash, 5, None).unwrap();
        assert_eq!(top.ranked[0], (record.record_id, 1.0));
        let tokens = dense_tokens(&record.features, params.vocab);
        let minhash = corpus.sketch_query_minhash(&tokens).unwrap();
        let top = corpus.search_topk(&minhash, 5, None).unwrap();
        assert_eq!(top.ranked[0], (record.record_id, 1.0));
    }
    println!(
        "PASS 05 retrieval-correctness: banded == exhaustive top-k on {checked} queries \
         across corpora up to 10^4 records; identity queries rank first at 1.0"
    );
}

// ---------------------------------------------------------------------------
// 6. Gradient correctness

#[test]
fn criterion_06_gradient_correctness() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x96ad);
    let step = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut instances = 0usize;
    for i in 0..120 {
        let d = rng.gen_range(2..8u32);
        let c = rng.gen_range(2..5u32);
        let spec = if i % 2 == 0 {
            ModelSpec::logreg(d, c)
        } else {
            ModelSpec::mlp1(d, rng.gen_range(2..6), c)
        };
        let batch: Vec<(Vec<f64>, u32)> = (0..5)
            .map(|_| {
                (
                    (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
                    rng.gen_range(0..c),
                )
            })
            .collect();
        let params: Vec<f64> = (0..spec.num_params())
            .map(|_| rng.gen::<f64>() - 0.5)
            .collect();
        let (_, grad) = loss_and_grad(&spec, &params, &batch).unwrap();
        for j in 0..params.len() {
            let mut hi = params.clone();
            hi[j] += step;
            let mut lo = params.clone();
            lo[j] -= step;
            let (loss_hi, _) = loss_and_grad(&spec, &hi, &batch).unwrap();
            let (loss_lo, _) = loss_and_grad(&spec, &lo, &batch).unwrap();
            let fd = (loss_hi - loss_lo) / (2.0 * step);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        instances += 1;
    }
    assert!(instances >= 100);
    assert!(max_rel <= 1e-4, "max relative gradient error {max_rel}");
    println!(
        "PASS 06 gradient-correctness: {instances} instances, max relative error \
         {max_rel:.2e} <= 1e-4"
    );
}

// ---------------------------------------------------------------------------
// 7. Transfer benefit

#[test]
fn criterion_07_transfer_benefit() {
    let (benefit, _) = eval::retrieval_ablation(42, 20);
    assert!(
        benefit.mean_retrieved_accuracy >= benefit.mean_base_accuracy,
        "retrieved {} < base {}",
        benefit.mean_retrieved_accuracy,
        benefit.mean_base_accuracy
    );
    assert!(
        benefit.mean_retrieved_accuracy >= benefit.mean_random_accuracy,
        "retrieved {} < random {}",
        benefit.mean_retrieved_accuracy,
        benefit.mean_random_accuracy
    );
    println!(
        "PASS 07 transfer-benefit: retrieved {:.4} >= base {:.4} and >= random {:.4} \
         over 20 seeds",
        benefit.mean_retrieved_accuracy,
        benefit.mean_base_accuracy,
        benefit.mean_random_accuracy
    );
}

// ---------------------------------------------------------------------------
// 8. Privacy-utility monotonicity

#[test]
fn criterion_08_privacy_utility_monotonicity() {
    let trials = 50;
    let (utility, _) = eval::privacy_utility(42, trials);
    let (attack, _) = eval::reconstruction(42, trials);
    // The grid runs from no noise down to epsilon = 0.1: precision may only
    // fall, reconstruction error may only rise (non-strict).
    for w in utility.windows(2) {
        assert!(
            w[0].mean_precision >= w[1].mean_precision - 1e-12,
            "precision not monotone: {:?} -> {:?}",
            w[0].epsilon,
            w[1].epsilon
        );
    }
    for w in attack.windows(2) {
        assert!(
            w[0].mean_l2_error <= w[1].mean_l2_error + 1e-12,
            "attack error not monotone: {:?} -> {:?}",
            w[0].epsilon,
            w[1].epsilon
        );
    }
    println!(
        "PASS 08 privacy-utility-monotonicity: precision {:.3} -> {:.3} falls while attack \
         error {:.3} -> {:.3} rises over the epsilon grid ({} trials)",
        utility.first().unwrap().mean_precision,
        utility.last().unwrap().mean_precision,
        attack.first().unwrap().mean_l2_error,
        attack.last().unwrap().mean_l2_error,
        trials
    );
}

// ---------------------------------------------------------------------------
// 9. Budget enforcement

#[test]
fn criterion_09_budget_enforcement() {
    let world = build_world(5.0);
    let mut s = session(&world, 1, *b"ac09");
    let mut transport = LoopbackTransport {
        state: world.state.clone(),
    };
    let config = plain_config(2.0, Mechanism::RandomizedResponse);
    for round in 1..=2 {
        device_execute(&mut s, &config, &mut transport).unwrap();
        assert_eq!(world.state.epsilon_spent(&DEVICE_ID), 2.0 * round as f64);
    }
    let ledger_before = world.state.ledger_snapshot(&DEVICE_ID).unwrap();
    match device_execute(&mut s, &config, &mut transport).unwrap_err() {
        ProtocolError::Rejected(code, _) => assert_eq!(code, RejectCode::BudgetExhausted),
        other => panic!("unexpected {other}"),
    }
    let ledger_after = world.state.ledger_snapshot(&DEVICE_ID).unwrap();
    assert_eq!(ledger_before.entries, ledger_after.entries);
    assert_eq!(world.state.epsilon_spent(&DEVICE_ID), 4.0);
    println!(
        "PASS 09 budget-enforcement: 2 rounds charged exactly 4.0, overflow refused with \
         BUDGET_EXHAUSTED and ledger unchanged"
    );
}

// ---------------------------------------------------------------------------
// 10. Offline deployment

#[test]
fn criterion_10_offline_deployment() {
    // Train via a loopback round, deploy into a device home directory, then
    // run the real `device predict` binary with no server anywhere.
    let world = build_world(8.0);
    let s = session(&world, 2, *b"ac10");
    let retrieved = {
        let sketch = world
            .state
            .corpus
            .sketch_query_simhash(&FeatureVector::dense(s.local_data[0].clone()).unwrap())
            .unwrap();
        let top = world.state.corpus.search_topk(&sketch, 20, None).unwrap();
        world.state.corpus.fetch_training_set(&top).unwrap()
    };
    let artifact = fine_tune(&world.state.base, &retrieved, 40, 0.5, 77).unwrap();

    let home = tempfile::tempdir().unwrap();
    std::fs::write(home.path().join("model.bin"), serialize_model(&artifact)).unwrap();
    std::fs::write(
        home.path().join("device.toml"),
        format!(
            "device_id = \"{}\"\nkey = \"{}\"\nnonce_salt = \"61633130\"\n\
             nonce_counter = 0\nepsilon_spent = 0.0\n",
            hex::encode(DEVICE_ID),
            hex::encode(DEVICE_KEY)
        ),
    )
    .unwrap();
    let input = home.path().join("row.txt");
    std::fs::write(
        &input,
        s.local_data[0]
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    )
    .unwrap();

    let output = std::process::Command::new(env!("CARGO_BIN_EXE_ptaas"))
        .args(["device", "predict", "--home"])
        .arg(home.path())
        .arg("--input")
        .arg(&input)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("net_ops\t0"), "{stdout}");
    assert!(stdout.contains("label\t2"), "{stdout}");
    println!("PASS 10 offline-deployment: predict succeeded with no server and zero network calls");
}
