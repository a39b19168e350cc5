//! Leave-one-subject-out evaluation, UF1/UAR metrics and the FLOP/latency
//! benchmark.

use std::collections::BTreeMap;
use std::fs;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ammsm_tensor::{Scalar, Tape};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{landmark_windows, mix_seed, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::Registry;
use crate::model::{Batch, Model};
use crate::search::Config;
use crate::sparse::WINDOW;
use crate::train::{train_pipeline, Evaluator, PipelineConfig, Trained};

/// `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_predictions(n_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Contract(format!("{} labels but {} predictions", truth.len(), pred.len())));
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.n_classes();
        if truth >= c || pred >= c {
            return Err(Error::Contract(format!("class pair ({truth}, {pred}) outside {c} classes")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::Contract("confusion matrices differ in class count".into()));
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.counts[i][i]
    }

    pub fn fp(&self, i: usize) -> u64 {
        (0..self.n_classes()).filter(|&j| j != i).map(|j| self.counts[j][i]).sum()
    }

    pub fn fn_(&self, i: usize) -> u64 {
        self.n(i) - self.tp(i)
    }

    /// Number of samples whose true class is `i`.
    pub fn n(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Classes with no true samples.
    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.n_classes()).filter(|&i| self.n(i) == 0).collect()
    }
}

fn check_nonempty(cm: &ConfusionMatrix) -> Result<()> {
    if cm.n_classes() == 0 || cm.total() == 0 {
        return Err(Error::Contract("metrics of an empty confusion matrix".into()));
    }
    Ok(())
}

fn f1_terms(cm: &ConfusionMatrix, classes: &[usize]) -> f64 {
    let sum: f64 = classes
        .iter()
        .map(|&i| {
            let tp = cm.tp(i) as f64;
            let denom = 2.0 * tp + cm.fp(i) as f64 + cm.fn_(i) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    sum / classes.len() as f64
}

fn recall_terms(cm: &ConfusionMatrix, classes: &[usize]) -> f64 {
    let sum: f64 = classes.iter().map(|&i| cm.tp(i) as f64 / cm.n(i) as f64).sum();
    sum / classes.len() as f64
}

fn present_classes(cm: &ConfusionMatrix) -> Vec<usize> {
    let absent = cm.absent_classes();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} have no true samples and are left out of the averages");
    }
    (0..cm.n_classes()).filter(|i| !absent.contains(i)).collect()
}

/// Unweighted F1: mean over classes of `2 TP / (2 TP + FP + FN)`.
/// Classes without true samples are left out with a warning.
pub fn uf1(cm: &ConfusionMatrix) -> Result<f64> {
    check_nonempty(cm)?;
    Ok(f1_terms(cm, &present_classes(cm)))
}

/// Unweighted average recall: mean over classes of `TP / n`. Every class
/// needs at least one true sample.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    check_nonempty(cm)?;
    let absent = cm.absent_classes();
    if !absent.is_empty() {
        return Err(Error::Contract(format!("UAR undefined: classes {absent:?} have no true samples")));
    }
    Ok(recall_terms(cm, &(0..cm.n_classes()).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledMetrics {
    pub uf1: f64,
    pub uar: f64,
    pub confusion: ConfusionMatrix,
    /// Classes without true samples, excluded from both averages.
    pub excluded_classes: Vec<usize>,
}

/// UF1 and UAR over the classes that occur, for reporting.
pub fn pooled_metrics(cm: &ConfusionMatrix) -> Result<PooledMetrics> {
    check_nonempty(cm)?;
    let classes = present_classes(cm);
    Ok(PooledMetrics {
        uf1: f1_terms(cm, &classes),
        uar: recall_terms(cm, &classes),
        confusion: cm.clone(),
        excluded_classes: cm.absent_classes(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoSplit {
    pub subject: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// One split per subject, in ascending subject order.
pub fn loso_splits(ds: &Dataset) -> Result<Vec<LosoSplit>> {
    let subjects = ds.subjects();
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-subject-out needs at least two subjects, dataset has {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .map(|subject| {
            let (test, train): (Vec<&Sample>, Vec<&Sample>) = ds.samples.iter().partition(|s| s.subject == subject);
            LosoSplit {
                subject,
                train: train.into_iter().map(|s| s.id.clone()).collect(),
                test: test.into_iter().map(|s| s.id.clone()).collect(),
            }
        })
        .collect())
}

/// Stage-1 selection statistics on test samples: how many kept windows fall
/// on the class-template landmark windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LandmarkOverlap {
    pub kept: u64,
    pub on_landmarks: u64,
}

impl LandmarkOverlap {
    pub fn fraction(&self) -> f64 {
        if self.kept == 0 {
            0.0
        } else {
            self.on_landmarks as f64 / self.kept as f64
        }
    }

    pub fn merge(&mut self, o: &LandmarkOverlap) {
        self.kept += o.kept;
        self.on_landmarks += o.on_landmarks;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutput {
    pub predictions: Vec<usize>,
    pub config: Option<Config>,
    pub fitness: Option<f64>,
    pub overlap: Option<LandmarkOverlap>,
}

/// Fits on the training side of a split and predicts the test side.
pub trait FoldTrainer: Sync {
    fn fit_predict(&self, n_classes: usize, train: &[&Sample], test: &[&Sample], seed: u64) -> Result<FoldOutput>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject: usize,
    pub n_test: usize,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub config: Option<Config>,
    pub fitness: Option<f64>,
    pub overlap: Option<LandmarkOverlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub per_fold: Vec<FoldReport>,
    pub pooled: PooledMetrics,
    pub overlap: Option<LandmarkOverlap>,
}

/// Runs every split with up to `workers` folds in parallel. Each fold gets a
/// seed derived from `seed` and its subject, so results do not depend on the
/// worker count. Metrics come from the pooled confusion matrix.
pub fn run_loso(trainer: &dyn FoldTrainer, ds: &Dataset, seed: u64, workers: usize) -> Result<LosoReport> {
    let splits = loso_splits(ds)?;
    let by_id: BTreeMap<&str, &Sample> = ds.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let results: Mutex<Vec<Option<Result<FoldReport>>>> = Mutex::new((0..splits.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_fold = |i: usize| -> Result<FoldReport> {
        let split = &splits[i];
        let train: Vec<&Sample> = split.train.iter().map(|id| by_id[id.as_str()]).collect();
        let test: Vec<&Sample> = split.test.iter().map(|id| by_id[id.as_str()]).collect();
        log::info!("fold {i}: subject {} ({} train, {} test)", split.subject, train.len(), test.len());
        let out = trainer.fit_predict(ds.n_classes, &train, &test, mix_seed(&[seed, 3, split.subject as u64]))?;
        let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
        let confusion = ConfusionMatrix::from_predictions(ds.n_classes, &truth, &out.predictions)?;
        let correct = truth.iter().zip(&out.predictions).filter(|(a, b)| a == b).count();
        Ok(FoldReport {
            subject: split.subject,
            n_test: test.len(),
            accuracy: correct as f64 / test.len() as f64,
            confusion,
            config: out.config,
            fitness: out.fitness,
            overlap: out.overlap,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, splits.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= splits.len() {
                    break;
                }
                let r = run_fold(i);
                let failed = r.is_err();
                results.lock().expect("no poisoned folds")[i] = Some(r);
                if failed {
                    next.store(splits.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut per_fold = Vec::with_capacity(splits.len());
    for (i, r) in results.into_inner().expect("no poisoned folds").into_iter().enumerate() {
        match r {
            Some(Ok(f)) => per_fold.push(f),
            Some(Err(e)) => {
                return Err(Error::Fold {
                    fold: i,
                    subject: splits[i].subject,
                    source: Box::new(e),
                })
            }
            None => {}
        }
    }
    let mut pooled = ConfusionMatrix::new(ds.n_classes);
    let mut overlap: Option<LandmarkOverlap> = None;
    for f in &per_fold {
        pooled.merge(&f.confusion)?;
        if let Some(o) = &f.overlap {
            overlap.get_or_insert_with(Default::default).merge(o);
        }
    }
    Ok(LosoReport {
        pooled: pooled_metrics(&pooled)?,
        per_fold,
        overlap,
    })
}

/// The full pipeline as a fold trainer.
pub struct PipelineTrainer<T> {
    pub cfg: PipelineConfig,
    /// When set, each fold writes its search log, chosen configuration,
    /// epoch history and checkpoint to `<dir>/fold-s<subject>/`.
    pub artifacts: Option<PathBuf>,
    _scalar: PhantomData<fn() -> T>,
}

impl<T: Scalar> PipelineTrainer<T> {
    pub fn new(cfg: PipelineConfig) -> Self {
        PipelineTrainer {
            cfg,
            artifacts: None,
            _scalar: PhantomData,
        }
    }

    pub fn with_artifacts(cfg: PipelineConfig, dir: impl Into<PathBuf>) -> Self {
        PipelineTrainer {
            artifacts: Some(dir.into()),
            ..Self::new(cfg)
        }
    }
}

fn write_fold_artifacts<T: Scalar>(dir: &Path, trained: &Trained<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    let log: String = trained
        .search
        .log
        .iter()
        .map(|l| serde_json::to_string(l).expect("log line serializes") + "\n")
        .collect();
    write("search.jsonl", log)?;
    write("best_config.json", serde_json::to_string_pretty(&trained.best).expect("config serializes"))?;
    write("history.json", serde_json::to_string_pretty(&trained.history).expect("history serializes"))?;
    save_checkpoint(&trained.model, &trained.best, &dir.join("model.ckpt"))
}

impl<T: Scalar> FoldTrainer for PipelineTrainer<T> {
    fn fit_predict(&self, n_classes: usize, train: &[&Sample], test: &[&Sample], seed: u64) -> Result<FoldOutput> {
        let trained = train_pipeline::<T>(&self.cfg, n_classes, train, seed)?;
        if let Some(dir) = &self.artifacts {
            write_fold_artifacts(&dir.join(format!("fold-s{:02}", test[0].subject)), &trained)?;
        }
        let reg = Registry::with_masks();
        let mut ev = Evaluator::new(&trained.model, test, self.cfg.schedule.batch_size)?;
        let (_, predictions) = ev.run(&trained.best, &reg)?;
        let overlap = trained
            .model
            .arch
            .variant
            .is_sparse()
            .then(|| stage1_overlap(&reg, n_classes, test[0].flow.shape()[0], self.cfg.stages.layers[0]));
        Ok(FoldOutput {
            predictions,
            config: Some(trained.best),
            fitness: Some(trained.val_loss_search),
            overlap,
        })
    }
}

/// Input pixels covered by one stage-1 window (the stem downsamples by 4).
pub const STAGE1_WINDOW_PX: usize = 4 * WINDOW;

/// Kept stage-1 windows over all recorded layers and samples, and how many
/// of them are landmark windows.
pub fn stage1_overlap(reg: &Registry, n_classes: usize, resolution: usize, layers: usize) -> LandmarkOverlap {
    let marks = landmark_windows(n_classes, resolution, STAGE1_WINDOW_PX);
    let mut o = LandmarkOverlap::default();
    for j in 0..layers {
        for m in reg.masks(1, j) {
            for i in m.kept_indices() {
                o.kept += 1;
                o.on_landmarks += marks.contains(&i) as u64;
            }
        }
    }
    o
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub name: String,
    pub ratios: Vec<f64>,
    pub batch: usize,
    /// Per-key counts from one forward pass.
    pub flops: BTreeMap<String, u64>,
    pub ssd_flops: u64,
    pub msa_flops: u64,
    pub total_flops: u64,
    pub median_ms: f64,
    pub timed_runs: usize,
}

pub const WARMUP_RUNS: usize = 5;
pub const TIMED_RUNS: usize = 20;

/// Times forward passes of `model` on `batch` for each named ratio vector:
/// `warmup` untimed passes, then the median of `runs` timed ones. FLOPs come
/// from the instrumentation registry of a single pass.
pub fn bench<T: Scalar>(
    model: &Model<T>,
    variants: &[(String, Vec<f64>)],
    batch: &Batch<T>,
    alpha: f64,
    warmup: usize,
    runs: usize,
) -> Result<Vec<LatencyReport>> {
    if runs == 0 {
        return Err(Error::Config("benchmark needs at least one timed run".into()));
    }
    let (h, w) = (batch.flow.shape()[1], batch.flow.shape()[2]);
    let fixed = model.fixed_flops(h, w) * batch.len() as u64;
    let pass = |ratios: &[f64], reg: &Registry| -> Result<()> {
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        model.forward(&p, batch, alpha, ratios, reg)?;
        Ok(())
    };
    let mut out = Vec::with_capacity(variants.len());
    for (name, ratios) in variants {
        let reg = Registry::new();
        pass(ratios, &reg)?;
        for _ in 0..warmup {
            pass(ratios, &Registry::new())?;
        }
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            pass(ratios, &Registry::new())?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let median = if runs % 2 == 1 {
            times[runs / 2]
        } else {
            0.5 * (times[runs / 2 - 1] + times[runs / 2])
        };
        let backbone = reg.total("block_flops") + reg.total("stem_flops") + (1..=3).map(|i| reg.get(&format!("down{i}_flops"))).sum::<u64>();
        out.push(LatencyReport {
            name: name.clone(),
            ratios: ratios.clone(),
            batch: batch.len(),
            ssd_flops: reg.total("ssd_flops"),
            msa_flops: reg.total("msa_flops"),
            total_flops: backbone + fixed,
            flops: reg.snapshot(),
            median_ms: median,
            timed_runs: runs,
        });
    }
    Ok(out)
}

/// Confusion matrix as CSV with a header row of predicted classes.
pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let c = cm.n_classes();
    let mut s = String::from("true\\pred");
    for j in 0..c {
        s.push_str(&format!(",{j}"));
    }
    s.push('\n');
    for (i, row) in cm.counts.iter().enumerate() {
        s.push_str(&i.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Horizontal bar chart of labelled non-negative values.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (w, row, left) = (480.0, 28.0, 160.0);
    let h = 40.0 + row * bars.len() as f64;
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"8\" y=\"20\" font-weight=\"bold\">{}</text>\n",
        xml_escape(title)
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = 32.0 + row * i as f64;
        let len = (w - left - 70.0) * v.max(0.0) / max;
        s.push_str(&format!(
            "<text x=\"8\" y=\"{:.1}\">{}</text>\n<rect x=\"{left}\" y=\"{y:.1}\" width=\"{len:.1}\" height=\"{:.1}\" fill=\"#4a7ab5\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{v:.4}</text>\n",
            y + 15.0,
            xml_escape(label),
            row - 8.0,
            left + len + 6.0,
            y + 15.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(truth: &[usize], pred: &[usize]) -> ConfusionMatrix {
        ConfusionMatrix::from_predictions(3, truth, pred).unwrap()
    }

    #[test]
    fn hand_example() {
        let m = cm(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0]);
        assert_eq!((m.tp(1), m.fp(1), m.fn_(1), m.n(1)), (2, 1, 0, 2));
        assert!((uf1(&m).unwrap() - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((uar(&m).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_absent_classes() {
        assert!(uf1(&ConfusionMatrix::new(3)).is_err());
        let m = cm(&[0, 1], &[0, 1]);
        assert!(uar(&m).is_err());
        let p = pooled_metrics(&m).unwrap();
        assert_eq!(p.excluded_classes, vec![2]);
        assert_eq!((p.uf1, p.uar), (1.0, 1.0));
    }

    #[test]
    fn csv_and_svg() {
        let m = cm(&[0, 1, 2], &[0, 2, 2]);
        assert_eq!(confusion_csv(&m), "true\\pred,0,1,2\n0,1,0,0\n1,0,0,1\n2,0,0,1\n");
        let svg = bar_chart_svg("a<b", &[("x".into(), 1.0), ("y".into(), 0.5)]);
        assert!(svg.starts_with("<svg") && svg.contains("a&lt;b"));
    }
}
