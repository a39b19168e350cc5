//! The flat JSON run configuration and `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use ammsm_core::backbone::StageConfig;
use ammsm_core::data::SyntheticSpec;
use ammsm_core::model::Variant;
use ammsm_core::search::{default_alpha_choices, default_ratio_choices, GaParams};
use ammsm_core::train::{PipelineConfig, TrainSchedule};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Every setting of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,

    pub n_subjects: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub resolution: usize,
    pub motion_amplitude: f64,
    pub distractor_amplitude: f64,
    pub noise_std: f64,
    pub data_seed: u64,

    /// `desk` or `paper`; the explicit fields below override it.
    pub preset: String,
    pub layers: Option<Vec<usize>>,
    pub channels: Option<Vec<usize>>,
    pub d_state: Option<usize>,
    pub heads: Option<usize>,
    pub variant: Variant,

    pub ratio_choices: Vec<f64>,
    pub alpha_choices: Vec<f64>,

    pub adaptive_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,

    pub population: usize,
    pub generations: usize,
    pub elite: usize,
    pub tournament: usize,
    pub mutation_rate: f64,
    pub val_fraction: f64,

    pub seed: u64,
    pub precision: Precision,
    pub workers: usize,

    /// Uniform ratios benchmarked against the dense model.
    pub bench_ratios: Vec<f64>,
    pub bench_batch: usize,
    pub bench_resolution: usize,
    pub bench_alpha: f64,
    pub bench_warmup: usize,
    pub bench_runs: usize,

    pub write_csv: bool,
    pub write_svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        let sched = TrainSchedule::desk();
        let ga = GaParams::default();
        RunConfig {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("out"),
            n_subjects: spec.n_subjects,
            n_classes: spec.n_classes,
            samples_per_class: spec.samples_per_class,
            resolution: spec.resolution,
            motion_amplitude: spec.motion_amplitude,
            distractor_amplitude: spec.distractor_amplitude,
            noise_std: spec.noise_std,
            data_seed: spec.seed,
            preset: "desk".into(),
            layers: None,
            channels: None,
            d_state: None,
            heads: None,
            variant: Variant::Full,
            ratio_choices: default_ratio_choices(),
            alpha_choices: default_alpha_choices(),
            adaptive_epochs: sched.adaptive_epochs,
            finetune_epochs: sched.finetune_epochs,
            batch_size: sched.batch_size,
            learning_rate: sched.learning_rate,
            weight_decay: sched.weight_decay,
            population: ga.population,
            generations: ga.generations,
            elite: ga.elite,
            tournament: ga.tournament,
            mutation_rate: ga.mutation_rate,
            val_fraction: 0.2,
            seed: 0,
            precision: Precision::F32,
            workers: 1,
            bench_ratios: vec![0.0, 0.25, 0.5, 0.75],
            bench_batch: 16,
            bench_resolution: 128,
            bench_alpha: 2.0,
            bench_warmup: 5,
            bench_runs: 20,
            write_csv: true,
            write_svg: true,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if given), applies overrides and deserializes.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| CliError::Config("run config must be a JSON object".into()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {o:?}")))?;
            let parsed = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            obj.insert(k.trim().to_string(), parsed);
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: self.n_subjects,
            n_classes: self.n_classes,
            samples_per_class: self.samples_per_class,
            resolution: self.resolution,
            motion_amplitude: self.motion_amplitude,
            distractor_amplitude: self.distractor_amplitude,
            noise_std: self.noise_std,
            seed: self.data_seed,
        }
    }

    pub fn stages(&self) -> Result<StageConfig, CliError> {
        let mut s = StageConfig::preset(&self.preset)?;
        if let Some(l) = &self.layers {
            s.layers = l.clone();
        }
        if let Some(c) = &self.channels {
            s.channels = c.clone();
        }
        if let Some(d) = self.d_state {
            s.d_state = d;
        }
        if let Some(h) = self.heads {
            s.heads = h;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        Ok(PipelineConfig {
            stages: self.stages()?,
            variant: self.variant,
            schedule: TrainSchedule {
                adaptive_epochs: self.adaptive_epochs,
                finetune_epochs: self.finetune_epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
            },
            ratio_choices: self.ratio_choices.clone(),
            alpha_choices: self.alpha_choices.clone(),
            ga: GaParams {
                population: self.population,
                generations: self.generations,
                elite: self.elite,
                tournament: self.tournament,
                mutation_rate: self.mutation_rate,
            },
            val_fraction: self.val_fraction,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synthetic().validate()?;
        self.pipeline()?.validate()?;
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if self.bench_batch == 0 || self.bench_runs == 0 {
            return Err(CliError::Config("bench_batch and bench_runs must be positive".into()));
        }
        if let Some(r) = self.bench_ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(CliError::Config(format!("bench ratio {r} outside [0, 1)")));
        }
        Ok(())
    }

    /// Fails unless the dataset directory holds a manifest.
    pub fn require_dataset(&self) -> Result<(), CliError> {
        let m = self.dataset.join(ammsm_core::data::MANIFEST);
        if !m.is_file() {
            return Err(CliError::Config(format!("dataset manifest {} not found", m.display())));
        }
        Ok(())
    }
}
