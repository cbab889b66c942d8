//! Shared fixtures for the benchmarks.

use skelflow_core::dataset::{benchmark_actions, generate, sample_seed, BenchmarkConfig};
use skelflow_core::train::{prepare_sample, InputConfig, PreparedSample};

/// The first `n` samples of the desk benchmark at noise `sigma`.
pub fn desk_samples(n: usize, sigma: f64) -> Vec<PreparedSample> {
    let cfg = BenchmarkConfig::desk(sigma);
    benchmark_actions(&cfg, 0)
        .expect("desk benchmark is valid")
        .into_iter()
        .take(n)
        .map(|(m, a)| {
            let g = generate(&a, &cfg.render, sample_seed(0, m.id)).expect("generation succeeds");
            prepare_sample(m, &g, &InputConfig::desk()).expect("desk input is valid")
        })
        .collect()
}
