//! Synthetic dataset generation and the on-disk format.

mod common;

use std::collections::BTreeMap;
use std::fs;

use ammsm_core::data::{generate_dataset, landmark_windows, read_dataset, write_dataset, Dataset, SyntheticSpec, MANIFEST};
use ammsm_core::Error;

use common::small_dataset;

fn spec(motion: f64, distractor: f64, noise: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        motion_amplitude: motion,
        distractor_amplitude: distractor,
        noise_std: noise,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Mean per-pixel displacement norm over the whole dataset.
fn mean_flow_norm(ds: &Dataset) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in &ds.samples {
        for v in s.flow.data().chunks(2) {
            sum += (v[0] as f64).hypot(v[1] as f64);
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn default_spec_counts_are_exact() {
    let ds = generate_dataset(&SyntheticSpec::default()).unwrap();
    assert_eq!(ds.samples.len(), 60);
    let mut per: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in &ds.samples {
        *per.entry((s.subject, s.label)).or_default() += 1;
        assert_eq!(s.onset.shape(), &[64, 64, 3]);
        assert_eq!(s.flow.shape(), &[64, 64, 2]);
        assert!(s.onset.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(per.len(), 15);
    assert!(per.values().all(|&c| c == 4));
    assert_eq!(ds.subjects(), vec![0, 1, 2, 3, 4]);

    let five = generate_dataset(&SyntheticSpec {
        n_classes: 5,
        n_subjects: 2,
        samples_per_class: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_eq!(five.samples.len(), 10);
}

#[test]
fn zero_amplitudes_give_zero_flow() {
    let ds = generate_dataset(&spec(0.0, 0.0, 0.0, 3)).unwrap();
    assert!(ds.samples.iter().all(|s| s.flow.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&spec(0.4, 0.6, 0.05, 9)).unwrap();
    let b = generate_dataset(&spec(0.4, 0.6, 0.05, 9)).unwrap();
    for (x, y) in a.samples.iter().zip(&b.samples) {
        let bits = |t: &ammsm_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.flow), bits(&y.flow));
        assert_eq!(bits(&x.onset), bits(&y.onset));
    }
    assert_ne!(a, generate_dataset(&spec(0.4, 0.6, 0.05, 10)).unwrap());
}

#[test]
fn invalid_specs_are_config_errors() {
    for bad in [
        SyntheticSpec { resolution: 40, ..SyntheticSpec::default() },
        SyntheticSpec { n_classes: 4, ..SyntheticSpec::default() },
        SyntheticSpec { n_subjects: 0, ..SyntheticSpec::default() },
        SyntheticSpec { noise_std: -0.1, ..SyntheticSpec::default() },
        SyntheticSpec { motion_amplitude: f64::NAN, ..SyntheticSpec::default() },
    ] {
        assert!(generate_dataset(&bad).unwrap_err().is_config(), "{bad:?}");
    }
}

#[test]
fn write_read_round_trip() {
    let ds = small_dataset(2, 2, 5);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn truncated_tensor_is_a_format_error() {
    let ds = small_dataset(2, 1, 6);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let victim = dir.path().join("flow").join(format!("{}.ammt", ds.samples[1].id));
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 7]).unwrap();
    match read_dataset(dir.path()).unwrap_err() {
        Error::Format { path, offset, .. } => {
            assert_eq!(path, victim);
            assert!(offset.is_some());
        }
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn missing_member_and_bad_manifest_are_format_errors() {
    let ds = small_dataset(2, 1, 7);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let gone = dir.path().join("onset").join(format!("{}.ammt", ds.samples[0].id));
    fs::remove_file(&gone).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains(&gone.display().to_string()), "{err}");

    let manifest = dir.path().join(MANIFEST);
    fs::write(&manifest, "{\"version\": 1,\n  \"n_classes\": oops}").unwrap();
    match read_dataset(dir.path()).unwrap_err() {
        Error::Format { path, offset, .. } => {
            assert_eq!(path, manifest);
            assert_eq!(offset, Some(30));
        }
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn nearest_centroid_beats_chance_without_distractors() {
    let ds = generate_dataset(&SyntheticSpec {
        n_subjects: 6,
        ..spec(0.4, 0.0, 0.05, 11)
    })
    .unwrap();
    let dim = ds.samples[0].flow.numel();
    let (train, test): (Vec<_>, Vec<_>) = ds.samples.iter().partition(|s| s.subject < 4);
    let mut centroids = vec![vec![0.0f64; dim]; 3];
    let mut counts = [0usize; 3];
    for s in &train {
        counts[s.label] += 1;
        for (c, &v) in centroids[s.label].iter_mut().zip(s.flow.data()) {
            *c += v as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let dist = |c: &Vec<f64>| c.iter().zip(s.flow.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let pred = (0..3).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            pred == s.label
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 1.0 / 3.0 + 0.2, "nearest-centroid accuracy {acc}");
}

#[test]
fn distractor_motion_dominates_template_motion() {
    let template = mean_flow_norm(&generate_dataset(&spec(0.4, 0.0, 0.0, 12)).unwrap());
    let drift = mean_flow_norm(&generate_dataset(&spec(0.0, 0.6, 0.0, 12)).unwrap());
    assert!(drift > template, "drift {drift} vs template {template}");
}

#[test]
fn flow_amplitude_is_consistent_with_spec() {
    let d = SyntheticSpec::default();
    let nominal = d.motion_amplitude + d.distractor_amplitude;
    for seed in 0..3 {
        let m = mean_flow_norm(&generate_dataset(&SyntheticSpec { seed, ..d.clone() }).unwrap());
        assert!((0.1 * nominal..=3.0 * nominal).contains(&m), "seed {seed}: mean |flow| {m}");
    }
}

#[test]
fn landmark_windows_cover_each_class_template() {
    for n_classes in [3, 5] {
        let w = landmark_windows(n_classes, 64, 16);
        assert!(!w.is_empty() && w.len() < 16);
        assert!(w.iter().all(|&i| i < 16));
    }
}
