//! Throughput benches for the data-parallel hot paths: batch sketching and
//! corpus scoring. The `sequential` variants are hand-rolled single-threaded
//! baselines over the public API; the `parallel` variants go through the
//! library paths, which use rayon when the `parallel` feature (default) is
//! enabled. Run with `cargo bench`, and with
//! `cargo bench --no-default-features` to measure the fallback build.

use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ptaas_core::corpus::{dense_tokens, CorpusStore, SketchParams};
use ptaas_core::sketch::{
    estimate_similarity, minhash_sign, simhash_sign, FeatureVector, Sketch,
};

fn make_rows(n: usize, dim: usize) -> Vec<(u32, Vec<f64>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(0xbe9c);
    (0..n)
        .map(|_| {
            let features: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
            (rng.gen_range(0..8u32), features)
        })
        .collect()
}

/// Single-threaded replica of the per-record sketching done by
/// `CorpusStore::build`.
fn sketch_rows_sequential(rows: &[(u32, Vec<f64>)], params: &SketchParams) {
    for (_, features) in rows {
        let fv = FeatureVector::dense(features.clone()).unwrap();
        let tokens: BTreeSet<u64> = dense_tokens(&fv.values, params.vocab);
        let _ = minhash_sign(&tokens, params.minhash_k as usize, params.minhash_seed).unwrap();
        let _ =
            simhash_sign(&fv, params.simhash_b as usize, params.simhash_seed, false).unwrap();
    }
}

/// Single-threaded exhaustive top-k over the stored sketches.
fn score_sequential(corpus: &CorpusStore, query: &Sketch, k: usize) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = corpus
        .records()
        .iter()
        .map(|r| {
            let stored = match query {
                Sketch::MinHash(_) => Sketch::MinHash(r.minhash.clone()),
                Sketch::SimHash(_) => Sketch::SimHash(r.simhash.clone()),
            };
            (r.record_id, estimate_similarity(query, &stored).unwrap())
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn bench_batch_sketching(c: &mut Criterion) {
    let params = SketchParams {
        simhash_b: 256,
        ..Default::default()
    };
    let mut group = c.benchmark_group("batch_sketching");
    for &n in &[500usize, 2_000] {
        let rows = make_rows(n, 16);
        group.bench_with_input(BenchmarkId::new("sequential", n), &rows, |b, rows| {
            b.iter(|| sketch_rows_sequential(rows, &params));
        });
        group.bench_with_input(BenchmarkId::new("library", n), &rows, |b, rows| {
            b.iter(|| CorpusStore::build(rows.clone(), params, 1).unwrap());
        });
    }
    group.finish();
}

fn bench_corpus_scoring(c: &mut Criterion) {
    let params = SketchParams {
        simhash_b: 256,
        ..Default::default()
    };
    let mut group = c.benchmark_group("corpus_scoring");
    for &n in &[2_000usize, 10_000] {
        let corpus = CorpusStore::build(make_rows(n, 16), params, 1).unwrap();
        let fv = FeatureVector::dense(make_rows(1, 16)[0].1.clone()).unwrap();
        let query = corpus.sketch_query_simhash(&fv).unwrap();
        group.bench_with_input(BenchmarkId::new("sequential", n), &query, |b, query| {
            b.iter(|| score_sequential(&corpus, query, 20));
        });
        group.bench_with_input(BenchmarkId::new("library", n), &query, |b, query| {
            b.iter(|| corpus.search_topk_exhaustive(query, 20, None).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch_sketching, bench_corpus_scoring);
criterion_main!(benches);
