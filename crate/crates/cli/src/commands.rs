use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use tsvr_core::data::{
    generate_synthetic, load_dataset, normalize_attributes, save_dataset, save_matrix, standardize_features,
    MatrixFormat, SyntheticSpec,
};
use tsvr_core::gradcheck::{run_gradcheck, Fault, GradcheckOptions, GradcheckReport};
use tsvr_core::inference::{evaluate_with_graph, hidden_activations, Evaluation, McaReport};
use tsvr_core::losses::softmax_entropy;
use tsvr_core::{AlignmentMode, DomainTag, LossReport, Matrix, Trainer, ZslDataset};

use crate::config::RunConfig;

/// A verification command ran and its check failed (exit code 1).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REFINED_PREDICTIONS_FILE: &str = "predictions_refined.csv";
pub const METRICS_FILE: &str = "metrics.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Loads the configured dataset and applies the configured preprocessing.
/// Also returns the target features before standardization, which the
/// label-propagation graph uses.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<(ZslDataset, Matrix)> {
    let manifest = cfg.manifest()?;
    let mut ds = load_dataset(manifest).with_context(|| format!("loading dataset {}", manifest.display()))?;
    let raw_target = ds.target_features.clone();
    if cfg.standardize {
        ds = standardize_features(ds)?;
    }
    if cfg.normalize_attributes {
        ds = normalize_attributes(ds);
    }
    Ok((ds, raw_target))
}

pub fn synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>, format: MatrixFormat) -> Result<PathBuf> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing spec {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec)?;
    let manifest = save_dataset(&ds, out, format)?;
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    println!("{}", ds.summary());
    println!("manifest written to {}", path.display());
    Ok(path)
}

fn loss_row(iteration: usize, r: &LossReport) -> String {
    let align = r.align.map(|a| a.to_string()).unwrap_or_default();
    format!("{iteration},{},{},{},{align},{}", r.pre, r.ent, r.rec, r.total)
}

fn losses_json(r: &LossReport) -> Value {
    json!({
        "pre": r.pre,
        "ent": r.ent,
        "rec": r.rec,
        "align": r.align,
        "total": r.total,
    })
}

/// Trains from the config (or continues from `resume`) and writes the
/// checkpoint, loss CSV and run summary into the output directory.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    let (ds, _) = prepare_dataset(cfg)?;
    let view = ds.training_view();
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::load_checkpoint(p)?;
            if t.config.alignment_mode != cfg.train.alignment_mode || t.config.seed != cfg.train.seed {
                bail!("checkpoint {} was trained with a different mode or seed", p.display());
            }
            // The stopping point is the only setting a resumed run takes from the new config.
            t.config.max_iterations = cfg.train.max_iterations;
            t
        }
        None => Trainer::new(cfg.train.clone(), &view)?,
    };

    let losses_path = out.join(LOSSES_FILE);
    let file = File::create(&losses_path).with_context(|| format!("creating {}", losses_path.display()))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "iter,pre,ent,rec,align,total")?;
    let start = Instant::now();
    let mut last = None;
    let mut write_err = None;
    let result = trainer.run_until(&view, cfg.train.max_iterations, |it, r| {
        if let Err(e) = writeln!(csv, "{}", loss_row(it, r)) {
            write_err.get_or_insert(e);
        }
        last = Some(*r);
        Ok(())
    });
    csv.flush()?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context(format!("writing {}", losses_path.display())));
    }
    result?;
    let wall = start.elapsed().as_secs_f64();

    let ckpt = out.join(CHECKPOINT_FILE);
    trainer.save_checkpoint(&ckpt)?;
    let summary = json!({
        "config": cfg.to_value(),
        "seed": cfg.train.seed,
        "dataset": ds.summary(),
        "iterations": trainer.iteration(),
        "wall_time_seconds": wall,
        "final_losses": last.as_ref().map(losses_json),
        "checkpoint": CHECKPOINT_FILE,
    });
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    match last {
        Some(r) => println!(
            "trained {} iterations in {wall:.1}s: pre {:.6} ent {:.6} rec {:.6} total {:.6}",
            trainer.iteration(),
            r.pre,
            r.ent,
            r.rec,
            r.total
        ),
        None => println!("no iterations run; checkpoint holds the initial model"),
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(trainer)
}

fn per_class_json(report: &McaReport, ds: &ZslDataset) -> Value {
    let counts = {
        let mut c = vec![0usize; ds.num_target_classes()];
        for &y in ds.target_labels() {
            c[y] += 1;
        }
        c
    };
    Value::Array(
        report
            .per_class
            .iter()
            .enumerate()
            .map(|(i, acc)| {
                json!({
                    "index": i,
                    "name": ds.target_classes[i],
                    "count": counts[i],
                    "accuracy": acc,
                })
            })
            .collect(),
    )
}

fn write_predictions(path: &Path, predictions: &[usize], scores: &Matrix) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "image_index,predicted_category,score")?;
    for (i, &p) in predictions.iter().enumerate() {
        writeln!(w, "{i},{p},{}", scores.get(i, p))?;
    }
    w.flush()?;
    Ok(())
}

fn check_compatible(trainer: &Trainer, ds: &ZslDataset) -> Result<()> {
    let c = &trainer.model.config;
    if c.feature_dim != ds.feature_dim() || c.attribute_dim != ds.attribute_dim() {
        bail!(
            "checkpoint expects d={} r={}, dataset has d={} r={}",
            c.feature_dim,
            c.attribute_dim,
            ds.feature_dim(),
            ds.attribute_dim()
        );
    }
    Ok(())
}

/// Evaluates a checkpoint on the configured dataset and writes predictions
/// and metrics into `out`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, dump_hidden: Option<&Path>) -> Result<Evaluation> {
    let (ds, raw_target) = prepare_dataset(cfg)?;
    let trainer = Trainer::load_checkpoint(checkpoint)?;
    check_compatible(&trainer, &ds)?;
    let model = &trainer.model;
    let ev = evaluate_with_graph(model, &ds, &raw_target, &cfg.label_propagation)?;
    create_dir(out)?;
    write_predictions(&out.join(PREDICTIONS_FILE), &ev.predictions, &ev.scores.scores)?;

    let mut metrics = json!({
        "mca": ev.raw.mca,
        "mca_raw": ev.raw.mca,
        "per_class": per_class_json(&ev.raw, &ds),
        "dataset": ds.name,
        "num_images": ds.target_features.rows(),
        "config": cfg.to_value(),
        "seed": trainer.config.seed,
        "iterations": trainer.iteration(),
    });
    println!("MCA (raw): {:.4}", ev.raw.mca);
    if let (Some(refined), Some(preds), Some(f)) = (&ev.refined, &ev.refined_predictions, &ev.refined_scores) {
        metrics["mca_refined"] = json!(refined.mca);
        metrics["per_class_refined"] = per_class_json(refined, &ds);
        write_predictions(&out.join(REFINED_PREDICTIONS_FILE), preds, f)?;
        println!("MCA (label propagation): {:.4}", refined.mca);
    }
    write_json(&out.join(METRICS_FILE), &metrics)?;

    if let Some(dir) = dump_hidden {
        create_dir(dir)?;
        let src = hidden_activations(
            model,
            &ds.source_features,
            &ds.source_attributes,
            &ds.source_labels,
            DomainTag::Source,
        )?;
        let tgt = hidden_activations(
            model,
            &ds.target_features,
            &ds.target_attributes,
            &ev.predictions,
            DomainTag::Target,
        )?;
        for (domain, layers) in [("source", &src), ("target", &tgt)] {
            for (l, m) in layers.iter().enumerate() {
                save_matrix(m, dir.join(format!("{domain}_hidden{}.mtxb", l + 1)), MatrixFormat::Mtxb)?;
            }
        }
        let labels = |v: &[usize]| Matrix::column_vector(v.iter().map(|&x| x as f64).collect());
        save_matrix(&labels(&ds.source_labels), dir.join("source_labels.mtxb"), MatrixFormat::Mtxb)?;
        save_matrix(&labels(ds.target_labels()), dir.join("target_labels.mtxb"), MatrixFormat::Mtxb)?;
        save_matrix(&labels(&ev.predictions), dir.join("target_predictions.mtxb"), MatrixFormat::Mtxb)?;
        println!("hidden activations written to {}", dir.display());
    }
    Ok(ev)
}

/// Outcome of one (mode, seed) cell of an ablation.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub mode: AlignmentMode,
    pub seed: u64,
    pub mca_raw: Option<f64>,
    pub mca_refined: Option<f64>,
    /// Mean softmax entropy of the target images' category logits.
    pub mean_entropy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub mode: AlignmentMode,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub runs: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn ablation_cell(cfg: &RunConfig, ds: &ZslDataset, raw_target: &Matrix, mode: AlignmentMode, seed: u64) -> Result<AblationRun> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.alignment_mode = mode;
    train_cfg.seed = seed;
    let view = ds.training_view();
    let mut trainer = Trainer::new(train_cfg, &view)?;
    trainer.run_until(&view, cfg.train.max_iterations, |_, _| Ok(()))?;
    let ev = evaluate_with_graph(&trainer.model, ds, raw_target, &cfg.label_propagation)?;
    let rows = ev.scores.logits.rows();
    let entropy = (0..rows).map(|r| softmax_entropy(ev.scores.logits.row(r)).0).sum::<f64>() / rows as f64;
    Ok(AblationRun {
        mode,
        seed,
        mca_raw: Some(ev.raw.mca),
        mca_refined: ev.refined.map(|r| r.mca),
        mean_entropy: Some(entropy),
        error: None,
    })
}

/// Trains and evaluates every mode for `seeds` consecutive seeds starting at
/// the configured one. A failing run is recorded and skipped.
pub fn run_ablation(
    cfg: &RunConfig,
    ds: &ZslDataset,
    raw_target: &Matrix,
    modes: &[AlignmentMode],
    seeds: usize,
) -> Ablation {
    let mut runs = Vec::with_capacity(modes.len() * seeds);
    for &mode in modes {
        for i in 0..seeds as u64 {
            let seed = cfg.train.seed + i;
            let run = ablation_cell(cfg, ds, raw_target, mode, seed).unwrap_or_else(|e| {
                log::warn!("ablation run {mode} seed {seed} failed: {e}");
                AblationRun {
                    mode,
                    seed,
                    mca_raw: None,
                    mca_refined: None,
                    mean_entropy: None,
                    error: Some(e.to_string()),
                }
            });
            log::info!("ablation {mode} seed {seed}: mca {:?}", run.mca_raw);
            runs.push(run);
        }
    }
    let rows = modes
        .iter()
        .map(|&mode| {
            let cell: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
            let values: Vec<f64> = cell.iter().filter_map(|r| r.mca_raw).collect();
            let (mean, std) = mean_std(&values);
            AblationRow {
                mode,
                mean,
                std,
                runs: cell.len(),
                failed: cell.len() - values.len(),
            }
        })
        .collect();
    Ablation { runs, rows }
}

pub fn parse_modes(spec: &str) -> Result<Vec<AlignmentMode>> {
    let modes = spec
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<AlignmentMode>().map_err(|e| anyhow!("{e}")))
        .collect::<Result<Vec<_>>>()?;
    if modes.is_empty() {
        bail!("no modes given");
    }
    Ok(modes)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ablate(cfg: &RunConfig, modes: &[AlignmentMode], seeds: usize, out: &Path) -> Result<Ablation> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let (ds, raw_target) = prepare_dataset(cfg)?;
    let ablation = run_ablation(cfg, &ds, &raw_target, modes, seeds);
    create_dir(out)?;
    let mut table = String::from("mode,mean_mca,std_mca,runs,failed\n");
    for r in &ablation.rows {
        table.push_str(&format!("{},{},{},{},{}\n", r.mode, r.mean, r.std, r.runs, r.failed));
    }
    fs::write(out.join("ablation.csv"), &table)?;
    let mut detail = String::from("mode,seed,mca_raw,mca_refined,mean_entropy,error\n");
    for r in &ablation.runs {
        detail.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode,
            r.seed,
            fmt_opt(r.mca_raw),
            fmt_opt(r.mca_refined),
            fmt_opt(r.mean_entropy),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
        ));
    }
    fs::write(out.join("ablation_runs.csv"), detail)?;
    println!("{:<10} {:>8} {:>8} {:>5} {:>7}", "mode", "mean", "std", "runs", "failed");
    for r in &ablation.rows {
        println!("{:<10} {:>8.4} {:>8.4} {:>5} {:>7}", r.mode.name(), r.mean, r.std, r.runs, r.failed);
    }
    Ok(ablation)
}

/// Parses `component` or `component=scale` for the fault-injection flag.
pub fn parse_fault(spec: &str) -> Result<Fault> {
    let (component, scale) = match spec.split_once('=') {
        Some((c, s)) => (c, s.parse::<f64>().with_context(|| format!("fault scale `{s}`"))?),
        None => (spec, 1.5),
    };
    Ok(Fault {
        component: component.to_string(),
        scale,
    })
}

pub fn gradcheck(seed: u64, seeds: usize, fault: Option<Fault>) -> Result<GradcheckReport> {
    let options = GradcheckOptions {
        seeds: (seed..seed + seeds as u64).collect(),
        fault,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&options)?;
    for c in &report.components {
        println!(
            "{:<24} max rel err {:.3e}  {}",
            c.component,
            c.max_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if !report.passed() {
        let failing: Vec<&str> = report
            .components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.component.as_str())
            .collect();
        return Err(CheckFailed(format!(
            "gradient check failed (threshold {:e}): {}",
            report.threshold,
            failing.join(", ")
        ))
        .into());
    }
    println!("all {} components pass", report.components.len());
    Ok(report)
}
