//! Seeded inputs shared by the benchmarks.

use avmoe::frontend::Waveform;
use avmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform entries in [-1, 1).
pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// One second of a 440 Hz tone at 16 kHz.
pub fn tone() -> Waveform {
    let samples = (0..16_000)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin())
        .collect();
    Waveform { samples, sample_rate: 16_000 }
}
