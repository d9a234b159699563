//! Shared fixtures for the criterion benchmarks.

use cici_core::{LabeledInstance, SuiteSpec};

/// A small target-domain stream with `n` instances.
pub fn small_stream(n: usize) -> Vec<LabeledInstance> {
    let spec = SuiteSpec {
        scenarios: 1,
        instances_per_scenario: n,
        ..SuiteSpec::target_default()
    };
    spec.instances().expect("default target spec is valid")
}

/// A deterministic pulse-like test signal.
pub fn tone(len: usize, bpm: f64, fs: f64) -> Vec<f64> {
    (0..len)
        .map(|t| (std::f64::consts::TAU * bpm / 60.0 * t as f64 / fs).sin() + 0.1 * (t as f64 * 0.37).sin())
        .collect()
}
