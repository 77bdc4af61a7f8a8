//! Fixtures shared by the benchmarks.

use spkdistill::numerics::gaussian_draw;
use spkdistill::{EncoderConfig, FeatureSequence, ParameterSet, Rng};

/// The default encoder with `frames`-long random input.
pub fn network_fixture(frames: usize, seed: u64) -> (ParameterSet, FeatureSequence) {
    let cfg = EncoderConfig::default();
    let mut rng = Rng::new(seed);
    let params = ParameterSet::init(cfg.clone(), &mut rng).expect("default config is valid");
    let x = gaussian_draw(&mut rng, 0.0, 1.0, frames, cfg.input_dim).expect("shape is valid");
    (params, x)
}

/// `n` scores with roughly one target in six, targets shifted up by two.
pub fn score_fixture(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = Rng::new(seed);
    let labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 1.0 / 6.0).collect();
    let scores = labels.iter().map(|&t| rng.normal() + if t { 2.0 } else { 0.0 }).collect();
    (scores, labels)
}
