//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chansim::features::{Layout, SpectrogramFrame, FRAME_T, N_MELS};
use chansim::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

pub fn random_frame(seed: u64) -> SpectrogramFrame {
    SpectrogramFrame::from_tensor(&random_tensor(&[1, 1, FRAME_T, N_MELS], seed), Layout::TimeMel, "bench", 0, 0).expect("frame shape")
}

/// Unit vectors, `n` rows of dimension `d`.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// One second of a two-tone signal at 16 kHz.
pub fn tone(seconds: f64) -> Vec<f32> {
    let n = (16_000.0 * seconds) as usize;
    (0..n)
        .map(|i| {
            let t = i as f32 / 16_000.0;
            0.3 * (2.0 * std::f32::consts::PI * 220.0 * t).sin() + 0.1 * (2.0 * std::f32::consts::PI * 1800.0 * t).sin()
        })
        .collect()
}
