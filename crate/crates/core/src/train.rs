//! The three training phases: adaptive training under randomly sampled
//! configurations, genetic search scored on held-out subjects, and
//! fine-tuning under the chosen configuration.

use std::collections::HashMap;

use ammsm_tensor::{Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::StageConfig;
use crate::classifier::cls_loss;
use crate::data::{mix_seed, Sample};
use crate::error::{Error, Result};
use crate::magnifier::{loss_weight, LossSchedule};
use crate::metrics::Registry;
use crate::model::{Batch, Model, Variant};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::search::{evolve, sample_config, Config, GaParams, SearchOutcome, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub adaptive_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainSchedule {
    pub fn desk() -> Self {
        TrainSchedule {
            adaptive_epochs: 20,
            finetune_epochs: 10,
            batch_size: 16,
            learning_rate: 2e-3,
            weight_decay: 0.05,
        }
    }

    pub fn paper() -> Self {
        TrainSchedule {
            adaptive_epochs: 70,
            finetune_epochs: 30,
            batch_size: 16,
            learning_rate: 3e-5,
            weight_decay: 0.05,
        }
    }

    /// Total planned epochs over both phases.
    pub fn e_r(&self) -> usize {
        self.adaptive_epochs + self.finetune_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Adaptive,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_weight: f64,
    /// Sample-weighted means over the epoch.
    pub loss: f64,
    pub cls: f64,
    pub mag: f64,
}

/// Model plus optimizer state and the global epoch counter shared by both
/// training phases.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub sched: TrainSchedule,
    pub space: SearchSpace,
    opt: AdamW<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    pub history: Vec<EpochLog>,
    /// Configuration used for every optimizer step, in order.
    pub config_trace: Vec<Config>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, sched: TrainSchedule, space: SearchSpace, seed: u64) -> Result<Self> {
        sched.validate()?;
        space.validate()?;
        if space.slots != model.arch.backbone.cfg.slots() {
            return Err(Error::Config(format!(
                "search space has {} slots, backbone has {}",
                space.slots,
                model.arch.backbone.cfg.slots()
            )));
        }
        let opt = AdamW::new(
            &model.store,
            AdamWConfig {
                weight_decay: sched.weight_decay,
                ..Default::default()
            },
        );
        Ok(Trainer {
            model,
            sched,
            space,
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
            history: Vec::new(),
            config_trace: Vec::new(),
        })
    }

    /// Next epoch index handed to the loss schedule.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Trains `adaptive_epochs`, drawing a fresh configuration per batch.
    pub fn adaptive_train(&mut self, data: &[&Sample]) -> Result<()> {
        for _ in 0..self.sched.adaptive_epochs {
            let space = self.space.clone();
            self.run_epoch(data, Phase::Adaptive, &mut |rng| sample_config(&space, rng))?;
        }
        Ok(())
    }

    /// Trains `finetune_epochs` with `best` held fixed.
    pub fn finetune(&mut self, data: &[&Sample], best: &Config) -> Result<()> {
        if !self.space.contains(best) {
            return Err(Error::Config(format!("configuration {best:?} is outside the search space")));
        }
        for _ in 0..self.sched.finetune_epochs {
            self.run_epoch(data, Phase::Finetune, &mut |_| best.clone())?;
        }
        Ok(())
    }

    fn run_epoch(&mut self, data: &[&Sample], phase: Phase, choose: &mut dyn FnMut(&mut ChaCha8Rng) -> Config) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let e_r = self.sched.e_r();
        let sched = LossSchedule::new(self.epoch, e_r)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<&[usize]> = order.chunks(self.sched.batch_size).collect();
        let nb = batches.len();
        let (mut loss, mut cls, mut mag) = (0.0, 0.0, 0.0);
        for (bi, idx) in batches.into_iter().enumerate() {
            let cfg = choose(&mut self.rng);
            let samples: Vec<&Sample> = idx.iter().map(|&i| data[i]).collect();
            let batch = Batch::<T>::from_samples(&samples)?;
            let tape = Tape::new();
            let p = self.model.bind(&tape, true);
            let step = self.model.loss(&p, &batch, cfg.alpha, &cfg.ratios, sched, &Registry::new())?;
            let total = step.total.value().item()?.as_f64();
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss {total} at epoch {}, batch {bi}, config {cfg:?}",
                    self.epoch
                )));
            }
            let grads = step.total.backward()?;
            let lr = cosine_lr(self.sched.learning_rate, self.epoch * nb + bi, e_r * nb);
            self.opt.step(&mut self.model.store, &p, &grads, lr)?;
            let n = idx.len() as f64;
            loss += total * n;
            cls += step.cls * n;
            mag += step.mag * n;
            self.config_trace.push(cfg);
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch: self.epoch,
            phase,
            loss_weight: loss_weight(sched)?,
            loss: loss / n,
            cls: cls / n,
            mag: mag / n,
        };
        log::debug!("{entry:?}");
        self.history.push(entry);
        self.epoch += 1;
        Ok(())
    }
}

/// Inference over a fixed sample set with a frozen model. Spatial features
/// and magnifier outputs (per α) are computed once and reused across
/// configurations, since only the backbone depends on the ratios.
pub struct Evaluator<'a, T> {
    model: &'a Model<T>,
    batches: Vec<Batch<T>>,
    spatial: Vec<Tensor<T>>,
    flow_in: HashMap<u64, Vec<Tensor<T>>>,
    memo: HashMap<String, (f64, Vec<usize>)>,
}

impl<'a, T: Scalar> Evaluator<'a, T> {
    pub fn new(model: &'a Model<T>, data: &[&Sample], batch_size: usize) -> Result<Self> {
        if data.is_empty() || batch_size == 0 {
            return Err(Error::Contract("evaluation needs samples and a positive batch size".into()));
        }
        let batches = data
            .chunks(batch_size)
            .map(Batch::from_samples)
            .collect::<Result<Vec<_>>>()?;
        let spatial = batches
            .iter()
            .map(|b| {
                let tape = Tape::new();
                let p = model.bind(&tape, false);
                Ok(model.spatial_features(&p, &p.constant(b.onset.clone()))?.value())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Evaluator {
            model,
            batches,
            spatial,
            flow_in: HashMap::new(),
            memo: HashMap::new(),
        })
    }

    fn flow_inputs(&mut self, alpha: f64) -> Result<&[Tensor<T>]> {
        let key = alpha.to_bits();
        if !self.flow_in.contains_key(&key) {
            let mut out = Vec::with_capacity(self.batches.len());
            for b in &self.batches {
                let tape = Tape::new();
                let p = self.model.bind(&tape, false);
                let flow = p.constant(b.flow.clone());
                let x = self.model.temporal_input(&p, &flow, alpha)?.unwrap_or(flow);
                out.push(x.value());
            }
            self.flow_in.insert(key, out);
        }
        Ok(&self.flow_in[&key])
    }

    /// Components of `cfg` that affect the output for this variant.
    fn effective_key(&self, cfg: &Config) -> String {
        let v = self.model.arch.variant;
        let alpha = if v.has_magnifier() { cfg.alpha } else { 0.0 };
        let ratios: &[f64] = if v.is_sparse() { &cfg.ratios } else { &[] };
        format!("{alpha:?}/{ratios:?}")
    }

    /// Mean cross-entropy and argmax predictions under `cfg`.
    pub fn run(&mut self, cfg: &Config, reg: &Registry) -> Result<(f64, Vec<usize>)> {
        let key = self.effective_key(cfg);
        if !reg.logs_masks() {
            if let Some(hit) = self.memo.get(&key) {
                return Ok(hit.clone());
            }
        }
        let alpha = if self.model.arch.variant.has_magnifier() { cfg.alpha } else { 1.0 };
        self.flow_inputs(alpha)?;
        let inputs = &self.flow_in[&alpha.to_bits()];
        let (mut total, mut count) = (0.0, 0usize);
        let mut preds = Vec::new();
        for ((b, s), x) in self.batches.iter().zip(&self.spatial).zip(inputs) {
            let tape = Tape::new();
            let p = self.model.bind(&tape, false);
            let logits = self.model.classify_from(&p, &p.constant(x.clone()), &p.constant(s.clone()), &cfg.ratios, reg)?;
            total += cls_loss(&logits, &b.labels)?.value().item()?.as_f64() * b.len() as f64;
            count += b.len();
            preds.extend(argmax_rows(&logits.value()));
        }
        let out = (total / count as f64, preds);
        self.memo.insert(key, out.clone());
        Ok(out)
    }

    pub fn loss(&mut self, cfg: &Config) -> Result<f64> {
        Ok(self.run(cfg, &Registry::new())?.0)
    }

    pub fn predict(&mut self, cfg: &Config) -> Result<Vec<usize>> {
        Ok(self.run(cfg, &Registry::new())?.1)
    }
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Everything one run of the three phases needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stages: StageConfig,
    pub variant: Variant,
    pub schedule: TrainSchedule,
    pub ratio_choices: Vec<f64>,
    pub alpha_choices: Vec<f64>,
    pub ga: GaParams,
    /// Fraction of training subjects held out to score configurations.
    pub val_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: StageConfig::desk(),
            variant: Variant::Full,
            schedule: TrainSchedule::desk(),
            ratio_choices: crate::search::default_ratio_choices(),
            alpha_choices: crate::search::default_alpha_choices(),
            ga: GaParams::default(),
            val_fraction: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn space(&self) -> SearchSpace {
        SearchSpace {
            ratio_choices: self.ratio_choices.clone(),
            alpha_choices: self.alpha_choices.clone(),
            slots: self.stages.slots(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.schedule.validate()?;
        self.space().validate()?;
        self.ga.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

/// A trained model with the search record behind it.
pub struct Trained<T> {
    pub model: Model<T>,
    pub best: Config,
    pub search: SearchOutcome,
    pub history: Vec<EpochLog>,
    pub val_subjects: Vec<usize>,
    /// Validation cross-entropy of `best` at search end and after fine-tuning.
    pub val_loss_search: f64,
    pub val_loss_final: f64,
}

/// Splits training samples into fitting and validation subjects.
/// The validation side gets `round(fraction * subjects)` subjects, at least
/// one, and never all of them; with a single subject both sides coincide.
pub fn validation_split<'a>(data: &[&'a Sample], fraction: f64, seed: u64) -> (Vec<&'a Sample>, Vec<&'a Sample>, Vec<usize>) {
    let mut subjects: Vec<usize> = data.iter().map(|s| s.subject).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 || fraction == 0.0 {
        log::warn!("no held-out subjects for validation; scoring on the training samples");
        return (data.to_vec(), data.to_vec(), Vec::new());
    }
    let n_val = ((fraction * subjects.len() as f64).round() as usize).clamp(1, subjects.len() - 1);
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_subjects = subjects[..n_val].to_vec();
    val_subjects.sort_unstable();
    let (val, fit): (Vec<&Sample>, Vec<&Sample>) = data.iter().partition(|s| val_subjects.contains(&s.subject));
    (fit, val, val_subjects)
}

/// Adaptive training, genetic search on held-out subjects, fine-tuning.
pub fn train_pipeline<T: Scalar>(cfg: &PipelineConfig, n_classes: usize, data: &[&Sample], seed: u64) -> Result<Trained<T>> {
    cfg.validate()?;
    let (fit, val, val_subjects) = validation_split(data, cfg.val_fraction, mix_seed(&[seed, 10]));
    let model = Model::new(&cfg.stages, n_classes, cfg.variant, mix_seed(&[seed, 11]))?;
    let mut trainer = Trainer::new(model, cfg.schedule, cfg.space(), mix_seed(&[seed, 12]))?;
    trainer.adaptive_train(&fit)?;

    let search_seed = mix_seed(&[seed, 13]);
    let search = {
        let mut ev = Evaluator::new(&trainer.model, &val, cfg.schedule.batch_size)?;
        let mut failure = None;
        let out = evolve(
            &trainer.space,
            &mut |c| match ev.loss(c) {
                Ok(l) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::INFINITY
                }
            },
            &cfg.ga,
            search_seed,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        out
    };
    let best = search.best.config.clone();
    trainer.finetune(&fit, &best)?;
    let val_loss_final = Evaluator::new(&trainer.model, &val, cfg.schedule.batch_size)?.loss(&best)?;
    Ok(Trained {
        val_loss_search: search.best.fitness,
        model: trainer.model,
        best,
        search,
        history: trainer.history,
        val_subjects,
        val_loss_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(TrainSchedule::desk().e_r(), 30);
        assert_eq!(TrainSchedule::paper().e_r(), 100);
        assert!(TrainSchedule { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 3.0, 3.0, 0.0, -1.0, -2.0]).unwrap();
        assert_eq!(argmax_rows::<f64>(&t), vec![1, 0]);
    }
}
