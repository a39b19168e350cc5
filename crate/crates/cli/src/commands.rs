use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ammsm_core::backbone::INPUT_MULTIPLE;
use ammsm_core::checkpoint::load_checkpoint;
use ammsm_core::data::{generate_dataset, read_dataset, write_dataset, Dataset, Sample, SyntheticSpec};
use ammsm_core::eval::{
    bar_chart_svg, bench as bench_model, confusion_csv, pooled_metrics, run_loso, stage1_overlap, ConfusionMatrix,
    LatencyReport, LosoReport, PipelineTrainer, PooledMetrics, LandmarkOverlap,
};
use ammsm_core::metrics::Registry;
use ammsm_core::model::{Batch, Model};
use ammsm_core::search::Config;
use ammsm_core::train::Evaluator;
use ammsm_core::Scalar;
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::CliError;

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn to_json<S: Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = generate_dataset(&cfg.synthetic())?;
    write_dataset(&ds, &cfg.dataset)?;
    let mut per_class = BTreeMap::new();
    for s in &ds.samples {
        *per_class.entry(s.label).or_insert(0usize) += 1;
    }
    println!(
        "wrote {} samples ({} subjects, {} classes) to {}",
        ds.samples.len(),
        ds.subjects().len(),
        ds.n_classes,
        cfg.dataset.display()
    );
    for (label, n) in per_class {
        println!("  class {label}: {n}");
    }
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    cfg.require_dataset()?;
    let ds = read_dataset(&cfg.dataset)?;
    if ds.samples.is_empty() {
        return Err(CliError::Config(format!("dataset {} is empty", cfg.dataset.display())));
    }
    if ds.n_classes != cfg.n_classes {
        return Err(CliError::Config(format!(
            "dataset has {} classes, config says {}",
            ds.n_classes, cfg.n_classes
        )));
    }
    let (h, w) = ds.resolution();
    if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(CliError::Config(format!(
            "dataset resolution {h}x{w} must be divisible by {INPUT_MULTIPLE} for the backbone"
        )));
    }
    Ok(ds)
}

#[derive(Serialize)]
struct DatasetInfo {
    path: String,
    samples: usize,
    subjects: usize,
    n_classes: usize,
}

impl DatasetInfo {
    fn new(cfg: &RunConfig, ds: &Dataset) -> Self {
        DatasetInfo {
            path: cfg.dataset.display().to_string(),
            samples: ds.samples.len(),
            subjects: ds.subjects().len(),
            n_classes: ds.n_classes,
        }
    }
}

#[derive(Serialize)]
struct RunReport<'a> {
    dataset: DatasetInfo,
    config: &'a RunConfig,
    #[serde(flatten)]
    loso: LosoReport,
    bench: Vec<LatencyReport>,
}

fn write_extras(cfg: &RunConfig, name: &str, cm: &ConfusionMatrix, bars: &[(String, f64)], title: &str) -> Result<(), CliError> {
    if cfg.write_csv {
        write_file(&cfg.output.join(format!("{name}_confusion.csv")), &confusion_csv(cm))?;
    }
    if cfg.write_svg {
        write_file(&cfg.output.join(format!("{name}.svg")), &bar_chart_svg(title, bars))?;
    }
    Ok(())
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let pipeline = cfg.pipeline()?;
    let folds = cfg.output.join("folds");
    let loso = match cfg.precision {
        Precision::F32 => run_loso(&PipelineTrainer::<f32>::with_artifacts(pipeline, folds), &ds, cfg.seed, cfg.workers)?,
        Precision::F64 => run_loso(&PipelineTrainer::<f64>::with_artifacts(pipeline, folds), &ds, cfg.seed, cfg.workers)?,
    };
    let mut bars: Vec<(String, f64)> = vec![("UF1".into(), loso.pooled.uf1), ("UAR".into(), loso.pooled.uar)];
    bars.extend(loso.per_fold.iter().map(|f| (format!("subject {} acc", f.subject), f.accuracy)));
    write_extras(cfg, "run", &loso.pooled.confusion, &bars, "Leave-one-subject-out")?;
    println!("UF1 {:.4}  UAR {:.4}", loso.pooled.uf1, loso.pooled.uar);
    let report = RunReport {
        dataset: DatasetInfo::new(cfg, &ds),
        config: cfg,
        loso,
        bench: Vec::new(),
    };
    let path = cfg.output.join("report.json");
    write_file(&path, &to_json(&report))?;
    println!("report written to {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchReport<'a> {
    config: &'a RunConfig,
    bench: &'a [LatencyReport],
}

fn bench_typed<T: Scalar>(cfg: &RunConfig) -> Result<Vec<LatencyReport>, CliError> {
    let stages = cfg.stages()?;
    let model = Model::<T>::new(&stages, cfg.n_classes, cfg.variant, cfg.seed)?;
    let spec = SyntheticSpec {
        n_subjects: cfg.bench_batch,
        samples_per_class: 1,
        resolution: cfg.bench_resolution,
        ..cfg.synthetic()
    };
    let ds = generate_dataset(&spec)?;
    let samples: Vec<&Sample> = ds.samples.iter().take(cfg.bench_batch).collect();
    let batch = Batch::<T>::from_samples(&samples)?;
    model.arch.backbone.check_input(cfg.bench_resolution, cfg.bench_resolution)?;
    let slots = stages.slots();
    let variants: Vec<(String, Vec<f64>)> = cfg
        .bench_ratios
        .iter()
        .map(|&r| {
            let name = if r == 0.0 { "dense".to_string() } else { format!("ratio {r}") };
            (name, vec![r; slots])
        })
        .collect();
    Ok(bench_model(&model, &variants, &batch, cfg.bench_alpha, cfg.bench_warmup, cfg.bench_runs)?)
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = match cfg.precision {
        Precision::F32 => bench_typed::<f32>(cfg)?,
        Precision::F64 => bench_typed::<f64>(cfg)?,
    };
    let dense_ssd = rows.first().map_or(0, |r| r.ssd_flops).max(1) as f64;
    let mut csv = String::from("name,ssd_flops,ssd_fraction,msa_flops,total_flops,median_ms\n");
    for r in &rows {
        println!(
            "{:<12} ssd {:>12} ({:.3} of first)  total {:>12}  {:>8.3} ms",
            r.name,
            r.ssd_flops,
            r.ssd_flops as f64 / dense_ssd,
            r.total_flops,
            r.median_ms
        );
        csv.push_str(&format!(
            "{},{},{:.6},{},{},{:.4}\n",
            r.name,
            r.ssd_flops,
            r.ssd_flops as f64 / dense_ssd,
            r.msa_flops,
            r.total_flops,
            r.median_ms
        ));
    }
    write_file(&cfg.output.join("bench.json"), &to_json(&BenchReport { config: cfg, bench: &rows }))?;
    if cfg.write_csv {
        write_file(&cfg.output.join("bench.csv"), &csv)?;
    }
    if cfg.write_svg {
        let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.name.clone(), r.median_ms)).collect();
        write_file(&cfg.output.join("bench.svg"), &bar_chart_svg("Forward latency (ms)", &bars))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    dataset: DatasetInfo,
    checkpoint: String,
    config: &'a Config,
    pooled: PooledMetrics,
    overlap: Option<LandmarkOverlap>,
}

fn eval_typed<T: Scalar>(checkpoint: &Path, ds: &Dataset, batch: usize) -> Result<(Config, ConfusionMatrix, Option<LandmarkOverlap>), CliError> {
    let (model, index) = load_checkpoint::<T>(checkpoint)?;
    if index.n_classes != ds.n_classes {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            index.n_classes, ds.n_classes
        )));
    }
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let reg = Registry::with_masks();
    let (_, preds) = Evaluator::new(&model, &samples, batch)?.run(&index.config, &reg)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cm = ConfusionMatrix::from_predictions(ds.n_classes, &truth, &preds)?;
    let overlap = model
        .arch
        .variant
        .is_sparse()
        .then(|| stage1_overlap(&reg, ds.n_classes, ds.resolution().0, index.stages.layers[0]));
    Ok((index.config, cm, overlap))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    if !checkpoint.is_file() {
        return Err(CliError::Config(format!("checkpoint {} not found", checkpoint.display())));
    }
    let (config, cm, overlap) = match cfg.precision {
        Precision::F32 => eval_typed::<f32>(checkpoint, &ds, cfg.batch_size)?,
        Precision::F64 => eval_typed::<f64>(checkpoint, &ds, cfg.batch_size)?,
    };
    let pooled = pooled_metrics(&cm)?;
    println!("UF1 {:.4}  UAR {:.4}", pooled.uf1, pooled.uar);
    let bars = vec![("UF1".to_string(), pooled.uf1), ("UAR".to_string(), pooled.uar)];
    write_extras(cfg, "eval", &cm, &bars, "Checkpoint evaluation")?;
    let report = EvalReport {
        dataset: DatasetInfo::new(cfg, &ds),
        checkpoint: checkpoint.display().to_string(),
        config: &config,
        pooled,
        overlap,
    };
    write_file(&cfg.output.join("eval.json"), &to_json(&report))?;
    Ok(())
}
