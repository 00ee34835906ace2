//! Seeded synthetic datasets: Gaussian clusters on the unit sphere, one
//! class per cluster. The canonical desk-scale corpus for experiments and
//! acceptance runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy)]
pub struct ClusterConfig {
    pub num_clusters: usize,
    pub dim: usize,
    pub records_per_cluster: usize,
    /// Within-cluster standard deviation before normalization.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            num_clusters: 4,
            dim: 16,
            records_per_cluster: 100,
            noise_std: 0.25,
            seed: 42,
        }
    }
}

fn unit_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Random unit vector.
pub fn random_unit(dim: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    unit_normalize(&mut v);
    v
}

pub struct ClusterDataset {
    /// (label, features); features are not yet L2-normalized.
    pub rows: Vec<(u32, Vec<f64>)>,
    pub centers: Vec<Vec<f64>>,
    pub config: ClusterConfig,
}

/// Generates `num_clusters` unit-sphere centers and Gaussian samples around
/// them; label = cluster index.
pub fn generate(config: ClusterConfig) -> ClusterDataset {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let centers: Vec<Vec<f64>> = (0..config.num_clusters)
        .map(|_| random_unit(config.dim, &mut rng))
        .collect();
    let mut rows = Vec::with_capacity(config.num_clusters * config.records_per_cluster);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..config.records_per_cluster {
            let features: Vec<f64> = center
                .iter()
                .map(|&c| {
                    let z: f64 = rng.sample(StandardNormal);
                    c + config.noise_std * z
                })
                .collect();
            rows.push((label as u32, features));
        }
    }
    ClusterDataset {
        rows,
        centers,
        config,
    }
}

impl ClusterDataset {
    /// A fresh sample from the given cluster, drawn from a separate stream.
    pub fn sample_from_cluster(&self, cluster: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
        self.centers[cluster]
            .iter()
            .map(|&c| {
                let z: f64 = rng.sample(StandardNormal);
                c + self.config.noise_std * z
            })
            .collect()
    }

    /// Writes the dataset in the corpus file format:
    /// `label <tab> v1,v2,...,vd`.
    pub fn write_corpus_file(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::new();
        for (label, features) in &self.rows {
            let values: Vec<String> = features.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{label}\t{}\n", values.join(",")));
        }
        std::fs::write(path, out)
    }
}
