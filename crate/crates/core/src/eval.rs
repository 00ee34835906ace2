//! Evaluation harness: privacy-utility sweeps, the hash-similarity
//! reconstruction attack, and the retrieved-vs-random training ablation.
//! Every experiment is a pure function of (seed, config) and regenerates
//! identical reports.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::corpus::{CorpusStore, SketchParams};
use crate::learn::{fine_tune, pretrain_base, ModelSpec, PretrainedBase, Sample};
use crate::privacy::{laplace_noise, Mechanism, PrivacyParams};
use crate::sketch::{
    estimate_similarity, quantize_projections, simhash_planes, FeatureVector, Sketch,
    SimHashFingerprint,
};
use crate::synth::{self, ClusterConfig, ClusterDataset};

/// Epsilon grid used by the sweeps; None is the noiseless baseline.
pub const EPSILON_GRID: [Option<f64>; 5] = [None, Some(8.0), Some(2.0), Some(0.5), Some(0.1)];

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: String,
    pub parameters: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub summary: String,
}

impl ExperimentReport {
    /// Tab-separated table plus a trailing summary line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.parameters {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&self.header.join("\t"));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out.push_str(&format!("# summary: {}\n", self.summary));
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.tsv", self.name));
        std::fs::write(&path, self.to_tsv())?;
        Ok(path)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn eps_label(eps: Option<f64>) -> String {
    match eps {
        None => "inf".into(),
        Some(e) => format!("{e}"),
    }
}

/// Shared experiment fixture: a seeded 4-cluster corpus with wide SimHash
/// fingerprints and a pretrained base model.
pub struct Fixture {
    pub dataset: ClusterDataset,
    pub corpus: CorpusStore,
    pub base: PretrainedBase,
    pub planes: Vec<Vec<f64>>,
}

pub fn build_fixture(seed: u64) -> Fixture {
    let config = ClusterConfig {
        num_clusters: 4,
        dim: 16,
        records_per_cluster: 100,
        noise_std: 0.25,
        seed,
    };
    let dataset = synth::generate(config);
    let params = SketchParams {
        minhash_k: 128,
        simhash_b: 256,
        ..Default::default()
    };
    let corpus = CorpusStore::build(dataset.rows.clone(), params, 1).expect("non-empty corpus");
    let spec = ModelSpec::logreg(16, 4);
    let base = pretrain_base(&corpus.all_samples(), &spec, 40, 0.5, seed, corpus.digest())
        .expect("pretraining");
    let planes = simhash_planes(
        params.simhash_b as usize,
        config.dim,
        params.simhash_seed,
    );
    Fixture {
        dataset,
        corpus,
        base,
        planes,
    }
}

fn project(planes: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    planes
        .iter()
        .map(|p| p.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Sketches a unit query vector, optionally applying projection-placement
/// Laplace noise. Common noise seed across epsilons keeps the sweep
/// pointwise comparable.
fn noised_query_sketch(
    fixture: &Fixture,
    query: &FeatureVector,
    epsilon: Option<f64>,
    noise_seed: u64,
) -> Sketch {
    let projections = project(&fixture.planes, &query.values);
    let projections = match epsilon {
        None => projections,
        Some(eps) => {
            let params = PrivacyParams {
                mechanism: Mechanism::Laplace,
                epsilon: eps,
                delta: 0.0,
                sensitivity: 1.0,
            };
            laplace_noise(&projections, &params, noise_seed).expect("valid params")
        }
    };
    Sketch::SimHash(SimHashFingerprint {
        bits: quantize_projections(&projections),
        seed: fixture.corpus.params.simhash_seed,
        projections: None,
    })
}

fn unit(v: Vec<f64>) -> FeatureVector {
    FeatureVector::dense(v).expect("non-degenerate sample")
}

struct TrialOutcome {
    precision: f64,
    accuracy: f64,
}

fn run_retrieval_trial(
    fixture: &Fixture,
    epsilon: Option<f64>,
    trial: u64,
    k_retrieve: usize,
    with_accuracy: bool,
) -> TrialOutcome {
    let cluster = (trial % 4) as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(0x71a1u64 + trial);
    let query = unit(fixture.dataset.sample_from_cluster(cluster, &mut rng));
    let sketch = noised_query_sketch(fixture, &query, epsilon, 0x1000 + trial);
    let result = fixture
        .corpus
        .search_topk(&sketch, k_retrieve, None)
        .expect("search");
    let hits = result
        .ranked
        .iter()
        .filter(|&&(id, _)| fixture.corpus.records()[id as usize].label as usize == cluster)
        .count();
    let precision = hits as f64 / result.ranked.len() as f64;

    let accuracy = if with_accuracy {
        let training = fixture.corpus.fetch_training_set(&result).expect("fetch");
        match fine_tune(&fixture.base, &training, 60, 0.5, trial) {
            Ok(artifact) => {
                let mut heldout_rng = ChaCha20Rng::seed_from_u64(0x8e1d + trial);
                target_cluster_accuracy(&artifact.spec, &artifact.params, fixture, cluster, 50, &mut heldout_rng)
            }
            Err(_) => 0.0,
        }
    } else {
        0.0
    };
    TrialOutcome {
        precision,
        accuracy,
    }
}

fn target_cluster_accuracy(
    spec: &ModelSpec,
    params: &[f64],
    fixture: &Fixture,
    cluster: usize,
    n: usize,
    rng: &mut ChaCha20Rng,
) -> f64 {
    let mut correct = 0usize;
    for _ in 0..n {
        let x = unit(fixture.dataset.sample_from_cluster(cluster, rng));
        let probs = crate::learn::predict(spec, params, &x.values).expect("predict");
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == cluster {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone)]
pub struct PrivacyUtilityPoint {
    pub epsilon: Option<f64>,
    pub mean_precision: f64,
    pub mean_accuracy: f64,
}

/// Sweeps the epsilon grid, reporting retrieval precision and fine-tuned
/// accuracy per setting.
pub fn privacy_utility(seed: u64, trials: u64) -> (Vec<PrivacyUtilityPoint>, ExperimentReport) {
    let fixture = build_fixture(seed);
    let points: Vec<PrivacyUtilityPoint> = EPSILON_GRID
        .iter()
        .map(|&epsilon| {
            let run = |t: u64| run_retrieval_trial(&fixture, epsilon, t, 20, true);
            #[cfg(feature = "parallel")]
            let outcomes: Vec<TrialOutcome> = (0..trials).into_par_iter().map(run).collect();
            #[cfg(not(feature = "parallel"))]
            let outcomes: Vec<TrialOutcome> = (0..trials).map(run).collect();
            PrivacyUtilityPoint {
                epsilon,
                mean_precision: mean(&outcomes.iter().map(|o| o.precision).collect::<Vec<_>>()),
                mean_accuracy: mean(&outcomes.iter().map(|o| o.accuracy).collect::<Vec<_>>()),
            }
        })
        .collect();
    let report = ExperimentReport {
        name: "privacy_utility".into(),
        parameters: vec![
            ("seed".into(), seed.to_string()),
            ("trials".into(), trials.to_string()),
        ],
        header: vec!["epsilon".into(), "retrieval_precision".into(), "finetuned_accuracy".into()],
        rows: points
            .iter()
            .map(|p| {
                vec![
                    eps_label(p.epsilon),
                    fmt(p.mean_precision),
                    fmt(p.mean_accuracy),
                ]
            })
            .collect(),
        summary: format!(
            "precision at inf {} vs at 0.1 {}",
            fmt(points[0].mean_precision),
            fmt(points[4].mean_precision)
        ),
    };
    (points, report)
}

/// Hill-climbing reconstruction: the honest-but-curious server optimizes a
/// candidate unit vector for sketch similarity against the received
/// fingerprint and reports the L2 error to the true device vector.
fn reconstruct_once(
    fixture: &Fixture,
    target: &Sketch,
    truth: &[f64],
    iters: usize,
    rng: &mut ChaCha20Rng,
) -> f64 {
    let dim = truth.len();
    let mut candidate = synth::random_unit(dim, rng);
    let similarity = |v: &[f64]| -> f64 {
        let fp = Sketch::SimHash(SimHashFingerprint {
            bits: quantize_projections(&project(&fixture.planes, v)),
            seed: fixture.corpus.params.simhash_seed,
            projections: None,
        });
        estimate_similarity(&fp, target).expect("compatible")
    };
    let mut best = similarity(&candidate);
    for _ in 0..iters {
        let mut proposal: Vec<f64> = candidate
            .iter()
            .map(|&c| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                c + 0.2 * z
            })
            .collect();
        let norm = proposal.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for x in proposal.iter_mut() {
            *x /= norm;
        }
        let score = similarity(&proposal);
        if score > best {
            best = score;
            candidate = proposal;
        }
    }
    candidate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct ReconstructionPoint {
    pub epsilon: Option<f64>,
    pub mean_l2_error: f64,
}

pub fn reconstruction(seed: u64, trials: u64) -> (Vec<ReconstructionPoint>, ExperimentReport) {
    let fixture = build_fixture(seed);
    let points: Vec<ReconstructionPoint> = EPSILON_GRID
        .iter()
        .map(|&epsilon| {
            let run = |t: u64| {
                let cluster = (t % 4) as usize;
                let mut rng = ChaCha20Rng::seed_from_u64(0xa11ac + t);
                let truth = unit(fixture.dataset.sample_from_cluster(cluster, &mut rng));
                let target = noised_query_sketch(&fixture, &truth, epsilon, 0x1000 + t);
                let mut attack_rng = ChaCha20Rng::seed_from_u64(0xbad5eed + t);
                reconstruct_once(&fixture, &target, &truth.values, 300, &mut attack_rng)
            };
            #[cfg(feature = "parallel")]
            let errors: Vec<f64> = (0..trials).into_par_iter().map(run).collect();
            #[cfg(not(feature = "parallel"))]
            let errors: Vec<f64> = (0..trials).map(run).collect();
            ReconstructionPoint {
                epsilon,
                mean_l2_error: mean(&errors),
            }
        })
        .collect();
    let report = ExperimentReport {
        name: "reconstruction".into(),
        parameters: vec![
            ("seed".into(), seed.to_string()),
            ("trials".into(), trials.to_string()),
        ],
        header: vec!["epsilon".into(), "mean_l2_error".into()],
        rows: points
            .iter()
            .map(|p| vec![eps_label(p.epsilon), fmt(p.mean_l2_error)])
            .collect(),
        summary: format!(
            "attack error at inf {} vs at 0.1 {}",
            fmt(points[0].mean_l2_error),
            fmt(points[4].mean_l2_error)
        ),
    };
    (points, report)
}

#[derive(Debug, Clone)]
pub struct TransferBenefit {
    pub mean_retrieved_accuracy: f64,
    pub mean_random_accuracy: f64,
    pub mean_base_accuracy: f64,
}

/// Retrieved-vs-random ablation over `seeds` independent device seeds:
/// fine-tune on retrieved top-k, on an equal-size random sample, and
/// compare both against the untouched base, all on target-cluster accuracy.
pub fn retrieval_ablation(seed: u64, seeds: u64) -> (TransferBenefit, ExperimentReport) {
    let fixture = build_fixture(seed);
    let k = 40usize;
    let run = |s: u64| -> (f64, f64, f64) {
        let cluster = (s % 4) as usize;
        let mut rng = ChaCha20Rng::seed_from_u64(0xde71ce + s);
        let query = unit(fixture.dataset.sample_from_cluster(cluster, &mut rng));
        let sketch = noised_query_sketch(&fixture, &query, None, 0);
        let result = fixture.corpus.search_topk(&sketch, k, None).expect("search");
        let retrieved = fixture.corpus.fetch_training_set(&result).expect("fetch");

        let mut pick_rng = ChaCha20Rng::seed_from_u64(0x9a9d0u64 + s);
        let all = fixture.corpus.all_samples();
        let random_set: Vec<Sample> = (0..k)
            .map(|_| all[pick_rng.gen_range(0..all.len())].clone())
            .collect();

        let epochs = 60;
        let lr = 0.5;
        let tuned = fine_tune(&fixture.base, &retrieved, epochs, lr, s).expect("fine tune");
        let random_tuned = fine_tune(&fixture.base, &random_set, epochs, lr, s).expect("fine tune");

        let mut heldout = ChaCha20Rng::seed_from_u64(0x8e1d + s);
        let acc_retrieved =
            target_cluster_accuracy(&tuned.spec, &tuned.params, &fixture, cluster, 50, &mut heldout);
        let mut heldout = ChaCha20Rng::seed_from_u64(0x8e1d + s);
        let acc_random = target_cluster_accuracy(
            &random_tuned.spec,
            &random_tuned.params,
            &fixture,
            cluster,
            50,
            &mut heldout,
        );
        let mut heldout = ChaCha20Rng::seed_from_u64(0x8e1d + s);
        let acc_base = target_cluster_accuracy(
            &fixture.base.spec,
            &fixture.base.params,
            &fixture,
            cluster,
            50,
            &mut heldout,
        );
        (acc_retrieved, acc_random, acc_base)
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<(f64, f64, f64)> = (0..seeds).into_par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<(f64, f64, f64)> = (0..seeds).map(run).collect();

    let benefit = TransferBenefit {
        mean_retrieved_accuracy: mean(&outcomes.iter().map(|o| o.0).collect::<Vec<_>>()),
        mean_random_accuracy: mean(&outcomes.iter().map(|o| o.1).collect::<Vec<_>>()),
        mean_base_accuracy: mean(&outcomes.iter().map(|o| o.2).collect::<Vec<_>>()),
    };
    let report = ExperimentReport {
        name: "retrieval_ablation".into(),
        parameters: vec![
            ("seed".into(), seed.to_string()),
            ("seeds".into(), seeds.to_string()),
            ("k_retrieve".into(), k.to_string()),
        ],
        header: vec!["training_set".into(), "mean_target_cluster_accuracy".into()],
        rows: vec![
            vec!["retrieved".into(), fmt(benefit.mean_retrieved_accuracy)],
            vec!["random".into(), fmt(benefit.mean_random_accuracy)],
            vec!["base_only".into(), fmt(benefit.mean_base_accuracy)],
        ],
        summary: format!(
            "retrieved {} random {} base {}",
            fmt(benefit.mean_retrieved_accuracy),
            fmt(benefit.mean_random_accuracy),
            fmt(benefit.mean_base_accuracy)
        ),
    };
    (benefit, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_are_deterministic() {
        let (_, a) = reconstruction(3, 4);
        let (_, b) = reconstruction(3, 4);
        assert_eq!(a.to_tsv(), b.to_tsv());
    }

    #[test]
    fn noiseless_precision_is_high() {
        let fixture = build_fixture(11);
        let outcomes: Vec<f64> = (0..20)
            .map(|t| run_retrieval_trial(&fixture, None, t, 20, false).precision)
            .collect();
        assert!(mean(&outcomes) >= 0.8, "mean precision {}", mean(&outcomes));
    }
}
