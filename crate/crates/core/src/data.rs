//! Synthetic micro-motion datasets and their on-disk layout.
//!
//! Each sample pairs a procedural face-like onset image with a ground-truth
//! flow field: a class template of Gaussian displacement bumps at fixed
//! landmarks, a rigid global drift that carries no label information, and
//! white noise.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ammsm_tensor::{io, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{lift, Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const RESOLUTION_MULTIPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub resolution: usize,
    pub motion_amplitude: f64,
    pub distractor_amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 5,
            n_classes: 3,
            samples_per_class: 4,
            resolution: 64,
            motion_amplitude: 0.4,
            distractor_amplitude: 0.6,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("n_subjects and samples_per_class must be positive".into()));
        }
        if self.n_classes != 3 && self.n_classes != 5 {
            return Err(Error::Config(format!("n_classes must be 3 or 5, got {}", self.n_classes)));
        }
        if self.resolution == 0 || self.resolution % RESOLUTION_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of {RESOLUTION_MULTIPLE}, got {}",
                self.resolution
            )));
        }
        for (name, v) in [
            ("motion_amplitude", self.motion_amplitude),
            ("distractor_amplitude", self.distractor_amplitude),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_subjects * self.n_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: usize,
    pub label: usize,
    /// `[H, W, 3]` in `[0, 1]`.
    pub onset: Tensor<f32>,
    /// `[H, W, 2]` displacement (dy, dx) in pixels.
    pub flow: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.samples[0].flow.shape();
        (s[0], s[1])
    }

    pub fn subjects(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.subject)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// A displacement bump: centre as fractions of the image size and a unit
/// direction `(dy, dx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub y: f64,
    pub x: f64,
    pub dy: f64,
    pub dx: f64,
}

const BROW_Y: f64 = 0.36;
const EYE_Y: f64 = 0.42;
const MOUTH_Y: f64 = 0.625;
const LEFT_X: f64 = 0.375;
const RIGHT_X: f64 = 0.625;

fn lm(y: f64, x: f64, dy: f64, dx: f64) -> Landmark {
    Landmark { y, x, dy, dx }
}

/// Motion template of a class. Three classes: positive, negative, surprise.
/// Five classes: happiness, depression, disgust, surprise, others.
pub fn class_template(n_classes: usize, label: usize) -> Vec<Landmark> {
    let smile = vec![lm(MOUTH_Y, LEFT_X, -0.8, -0.6), lm(MOUTH_Y, RIGHT_X, -0.8, 0.6)];
    let frown = vec![lm(BROW_Y, LEFT_X, 0.8, 0.6), lm(BROW_Y, RIGHT_X, 0.8, -0.6)];
    let surprise = vec![
        lm(BROW_Y, LEFT_X, -1.0, 0.0),
        lm(BROW_Y, RIGHT_X, -1.0, 0.0),
        lm(0.68, 0.5, 1.0, 0.0),
    ];
    match (n_classes, label) {
        (3, 0) | (5, 0) => smile,
        (3, 1) => frown,
        (3, 2) | (5, 3) => surprise,
        (5, 1) => vec![lm(MOUTH_Y, LEFT_X, 0.8, 0.6), lm(MOUTH_Y, RIGHT_X, 0.8, -0.6)],
        (5, 2) => vec![lm(0.55, 0.5, -1.0, 0.0), lm(BROW_Y, LEFT_X, 0.6, 0.8), lm(BROW_Y, RIGHT_X, 0.6, -0.8)],
        (5, 4) => vec![lm(BROW_Y, LEFT_X, -1.0, 0.0)],
        _ => panic!("no template for label {label} of {n_classes} classes"),
    }
}

/// Indices (row-major) of the `window_px`-sized tiles of a `resolution`
/// image that contain a landmark centre of any class.
pub fn landmark_windows(n_classes: usize, resolution: usize, window_px: usize) -> BTreeSet<usize> {
    let cols = resolution / window_px;
    (0..n_classes)
        .flat_map(|c| class_template(n_classes, c))
        .map(|l| {
            let py = ((l.y * resolution as f64) as usize).min(resolution - 1);
            let px = ((l.x * resolution as f64) as usize).min(resolution - 1);
            (py / window_px) * cols + px / window_px
        })
        .collect()
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

struct Face {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    skin: [f64; 3],
    eye_dx: f64,
}

fn subject_face(seed: u64, subject: usize) -> Face {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1, subject as u64]));
    let mut j = |s: f64| rng.random_range(-s..s);
    Face {
        cy: 0.52 + j(0.02),
        cx: 0.5 + j(0.02),
        ry: 0.44 * (1.0 + j(0.05)),
        rx: 0.36 * (1.0 + j(0.05)),
        skin: [0.8 + j(0.05), 0.65 + j(0.05), 0.55 + j(0.05)],
        eye_dx: j(0.015),
    }
}

fn render_onset(face: &Face, res: usize, brightness: f64) -> Tensor<f32> {
    let r = res as f64;
    let inside = |y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64| {
        let (u, v) = ((y - cy) / ry, (x - cx) / rx);
        u * u + v * v <= 1.0
    };
    let mut data = Vec::with_capacity(res * res * 3);
    for py in 0..res {
        for px in 0..res {
            let (y, x) = ((py as f64 + 0.5) / r, (px as f64 + 0.5) / r);
            let mut rgb = [0.1, 0.1, 0.12];
            if inside(y, x, face.cy, face.cx, face.ry, face.rx) {
                rgb = face.skin;
                for ex in [LEFT_X - face.eye_dx, RIGHT_X + face.eye_dx] {
                    if inside(y, x, EYE_Y, ex, 0.03, 0.05) {
                        rgb = [0.15, 0.12, 0.1];
                    }
                    if inside(y, x, BROW_Y - 0.03, ex, 0.012, 0.07) {
                        rgb = [0.3, 0.2, 0.15];
                    }
                }
                if inside(y, x, MOUTH_Y + 0.04, 0.5, 0.02, 0.12) {
                    rgb = [0.55, 0.2, 0.2];
                }
            }
            data.extend(rgb.iter().map(|&c| (c * brightness).clamp(0.0, 1.0) as f32));
        }
    }
    Tensor::from_vec(&[res, res, 3], data).expect("sized")
}

fn render_flow(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let res = spec.resolution;
    let r = res as f64;
    let sigma = r / 16.0;
    let intensity = rng.random_range(0.7..1.3);
    let bumps: Vec<(f64, f64, f64, f64)> = class_template(spec.n_classes, label)
        .into_iter()
        .map(|l| {
            let jy = rng.random_range(-0.02..0.02);
            let jx = rng.random_range(-0.02..0.02);
            ((l.y + jy) * r, (l.x + jx) * r, l.dy, l.dx)
        })
        .collect();
    let theta = rng.random_range(0.0..2.0 * PI);
    let drift = spec.distractor_amplitude * rng.random_range(0.5..1.5);
    let (ddy, ddx) = (drift * theta.sin(), drift * theta.cos());
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let amp = spec.motion_amplitude * intensity;
    let mut data = Vec::with_capacity(res * res * 2);
    for py in 0..res {
        for px in 0..res {
            let (y, x) = (py as f64 + 0.5, px as f64 + 0.5);
            let (mut fy, mut fx) = (ddy, ddx);
            for &(cy, cx, dy, dx) in &bumps {
                let g = (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
                fy += amp * dy * g;
                fx += amp * dx * g;
            }
            if spec.noise_std > 0.0 {
                fy += noise.sample(rng);
                fx += noise.sample(rng);
            }
            data.push(fy as f32);
            data.push(fx as f32);
        }
    }
    Tensor::from_vec(&[res, res, 2], data).expect("sized")
}

/// Deterministic dataset ordered by subject, then class, then index.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.len());
    for subject in 0..spec.n_subjects {
        let face = subject_face(spec.seed, subject);
        for label in 0..spec.n_classes {
            for k in 0..spec.samples_per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 2, subject as u64, label as u64, k as u64]));
                let brightness = rng.random_range(0.95..1.05);
                samples.push(Sample {
                    id: format!("s{subject:02}_c{label}_{k:02}"),
                    subject,
                    label,
                    onset: render_onset(&face, spec.resolution, brightness),
                    flow: render_flow(spec, label, &mut rng),
                });
            }
        }
    }
    Ok(Dataset {
        n_classes: spec.n_classes,
        samples,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    n_classes: usize,
    samples: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: String,
    subject: usize,
    label: usize,
    onset: String,
    flow: String,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["onset", "flow"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let onset = format!("onset/{}.ammt", s.id);
        let flow = format!("flow/{}.ammt", s.id);
        io::write_tensor(&dir.join(&onset), &s.onset).map_err(lift)?;
        io::write_tensor(&dir.join(&flow), &s.flow).map_err(lift)?;
        entries.push(Entry {
            id: s.id.clone(),
            subject: s.subject,
            label: s.label,
            onset,
            flow,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n_classes: ds.n_classes,
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Byte offset of a 1-based line/column position.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

fn read_member(dir: &Path, rel: &str, manifest: &Path) -> Result<Tensor<f32>> {
    let path = dir.join(rel);
    if !path.is_file() {
        return Err(Error::format(
            manifest,
            None,
            format!("referenced file {} does not exist", path.display()),
        ));
    }
    io::read_tensor(&path).map_err(lift)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&mpath, Some(byte_offset(&text, e.line(), e.column())), e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(&mpath, None, format!("unsupported version {}", manifest.version)));
    }
    if manifest.samples.is_empty() {
        return Err(Error::format(&mpath, None, "manifest lists no samples"));
    }
    let mut seen = BTreeMap::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut res: Option<(usize, usize)> = None;
    for e in manifest.samples {
        if e.label >= manifest.n_classes {
            return Err(Error::format(&mpath, None, format!("sample {} has label {} >= {}", e.id, e.label, manifest.n_classes)));
        }
        if seen.insert(e.id.clone(), ()).is_some() {
            return Err(Error::format(&mpath, None, format!("duplicate sample id {}", e.id)));
        }
        let onset = read_member(dir, &e.onset, &mpath)?;
        let flow = read_member(dir, &e.flow, &mpath)?;
        let (os, fs_) = (onset.shape(), flow.shape());
        let ok = os.len() == 3 && fs_.len() == 3 && os[2] == 3 && fs_[2] == 2 && os[..2] == fs_[..2];
        if !ok {
            return Err(Error::format(
                dir.join(&e.flow),
                None,
                format!("onset {os:?} and flow {fs_:?} are not [H,W,3] and [H,W,2] of one size"),
            ));
        }
        let hw = (fs_[0], fs_[1]);
        if *res.get_or_insert(hw) != hw {
            return Err(Error::format(dir.join(&e.flow), None, format!("resolution {hw:?} differs from {res:?}")));
        }
        samples.push(Sample {
            id: e.id,
            subject: e.subject,
            label: e.label,
            onset,
            flow,
        });
    }
    Ok(Dataset {
        n_classes: manifest.n_classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmark_windows_at_desk_resolution() {
        let w = landmark_windows(3, 64, 16);
        assert_eq!(w, [5, 6, 9, 10].into_iter().collect());
    }

    #[test]
    fn byte_offsets() {
        let t = "ab\ncd\nef";
        assert_eq!(byte_offset(t, 1, 1), 0);
        assert_eq!(byte_offset(t, 2, 2), 4);
        assert_eq!(byte_offset(t, 3, 1), 6);
    }

    #[test]
    fn seeds_differ_per_part() {
        assert_ne!(mix_seed(&[0, 1]), mix_seed(&[1, 0]));
        assert_eq!(mix_seed(&[3, 4]), mix_seed(&[3, 4]));
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSpec::default();
        assert!(s.validate().is_ok());
        s.resolution = 40;
        assert!(s.validate().unwrap_err().to_string().contains("multiple of 16"));
    }
}
