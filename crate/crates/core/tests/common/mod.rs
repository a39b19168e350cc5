#![allow(dead_code)]

use ammsm_core::backbone::StageConfig;
use ammsm_core::data::{generate_dataset, Dataset, SyntheticSpec};
use ammsm_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GOLDEN_SEED: u64 = 0xA11A;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// N(0, 1) entries, kept at least 1e-3 away from zero.
pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() > 1e-3 {
            break v;
        }
    })
}

/// Small four-stage layout for fast structural tests.
pub fn tiny_stages() -> StageConfig {
    StageConfig {
        layers: vec![3, 1, 2, 2],
        channels: vec![8, 8, 16, 16],
        d_state: 4,
        heads: 2,
    }
}

pub fn small_dataset(n_subjects: usize, per_class: usize, seed: u64) -> Dataset {
    generate_dataset(&SyntheticSpec {
        n_subjects,
        samples_per_class: per_class,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// Sum, sum of squares and a few fixed entries: a compact fingerprint for
/// golden-value regressions.
pub fn fingerprint(t: &Tensor<f64>) -> [f64; 5] {
    let d = t.data();
    let n = d.len();
    [
        d.iter().sum(),
        d.iter().map(|v| v * v).sum(),
        d[0],
        d[n / 2],
        d[n - 1],
    ]
}

pub fn assert_fingerprint(name: &str, t: &Tensor<f64>, expected: [f64; 5]) {
    let got = fingerprint(t);
    let ok = got
        .iter()
        .zip(&expected)
        .all(|(g, e)| (g - e).abs() <= 1e-9 * (1.0 + e.abs()));
    assert!(ok, "{name} golden mismatch: got {got:?}, expected {expected:?}");
}
