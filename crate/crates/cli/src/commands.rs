use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use cmae::eval::{
    ablation_grid, extract_features, feature_stats, linear_probe, partial_finetune, AblationRow, Axis, ExperimentData,
    FeatureStats, GridOptions, HeadType, ProbeConfig, ProbeResult,
};
use cmae::model::CmaeModel;
use cmae::pipeline::{
    load_cifar10_dir, resume_trainer, save_checkpoint, write_summary, write_synthetic_cifar, Checkpoint, Dataset,
    MetricsWriter, Precision, RunSummary, Split, TrainConfig, Trainer, DATA_DIR_ENV,
};
use cmae::tensor::{Element, ParamStore};
use serde_json::json;

use crate::{AblateArgs, AnalyzeArgs, EvalData, Failure, FinetuneArgs, PretrainArgs, ProbeArgs, ProbeOpts, SynthArgs, TrainArgs};

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Defaults, then the config file, then flags; the environment only supplies a data
/// directory when nothing else did.
fn build_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        if !path.exists() {
            return Err(usage(format!("config file {} does not exist", path.display())));
        }
        cfg.apply_file(path).map_err(usage)?;
    }
    let mut set = |k: &str, v: String| cfg.set(k, &v).map_err(usage);
    if let Some(d) = &a.data {
        set("data_dir", d.display().to_string())?;
    }
    if let Some(v) = a.epochs {
        set("epochs", v.to_string())?;
    }
    if let Some(v) = a.num_images {
        set("num_images", v.to_string())?;
    }
    if let Some(v) = a.batch_size {
        set("batch_size", v.to_string())?;
    }
    if let Some(v) = a.lr {
        set("base_lr", v.to_string())?;
    }
    if let Some(v) = a.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = &a.precision {
        set("precision", v.clone())?;
    }
    if let Some(v) = a.workers {
        set("workers", v.to_string())?;
    }
    if let Some(v) = a.lambda_c {
        set("lambda_c", v.to_string())?;
    }
    if let Some(v) = a.log_interval {
        set("log_interval", v.to_string())?;
    }
    for kv in &a.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(usage(format!("--set expects KEY=VALUE, got `{kv}`")));
        };
        set(k.trim(), v.trim().to_string())?;
    }
    cfg.apply_env();
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Accepts either the batch directory itself or its parent (the extracted archive).
fn resolve_data_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn data_dir(flag: Option<&PathBuf>, cfg: Option<&TrainConfig>) -> std::result::Result<PathBuf, Failure> {
    flag.cloned()
        .or_else(|| cfg.and_then(|c| c.data_dir.clone()))
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .map(|d| resolve_data_dir(&d))
        .ok_or_else(|| usage(format!("no data directory: pass --data, set data_dir in the config file or {DATA_DIR_ENV}")))
}

fn load_split(dir: &Path, split: Split, limit: Option<usize>) -> anyhow::Result<Dataset> {
    let ds = load_cifar10_dir(dir, split).with_context(|| format!("loading {split:?} split from {}", dir.display()))?;
    Ok(match limit {
        Some(n) => ds.take(n),
        None => ds,
    })
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn pretrain(a: PretrainArgs) -> CmdResult {
    let (cfg, resume) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
            (ck.config()?, Some(ck))
        }
        None => (build_config(&a.train)?, None),
    };
    let dir = data_dir(a.train.data.as_ref(), Some(&cfg))?;
    let train = load_split(&dir, Split::Train, None)?;
    match cfg.precision {
        Precision::F32 => run_pretrain::<f32>(&a, &cfg, &train, resume.as_ref()),
        Precision::F64 => run_pretrain::<f64>(&a, &cfg, &train, resume.as_ref()),
    }
}

fn run_pretrain<T: Element>(a: &PretrainArgs, cfg: &TrainConfig, train: &Dataset, resume: Option<&Checkpoint>) -> CmdResult {
    let start = Instant::now();
    let metrics_path = a.metrics.clone().unwrap_or_else(|| sibling(&a.out, ".metrics.csv"));
    let summary_path = a.summary.clone().unwrap_or_else(|| sibling(&a.out, ".summary.json"));
    let (mut trainer, mut metrics) = match resume {
        Some(ck) => (resume_trainer::<T>(ck, train)?, MetricsWriter::append(&metrics_path, cfg.log_interval)?),
        None => (Trainer::<T>::new(cfg, train)?, MetricsWriter::create(&metrics_path, cfg.log_interval)?),
    };
    let stop = a.stop_at.unwrap_or(u64::MAX).min(trainer.total_steps());
    log::info!(
        "pre-training {} images for {} epochs ({} steps, resuming at {}), {} parameters",
        trainer.data().len(),
        cfg.epochs,
        trainer.total_steps(),
        trainer.step,
        trainer.store.num_scalars()
    );
    while trainer.step < stop {
        let epoch_end = (trainer.step / trainer.steps_per_epoch + 1) * trainer.steps_per_epoch;
        trainer.train_until(epoch_end.min(stop), Some(&mut metrics))?;
        save_checkpoint(&trainer, &a.out)?;
    }
    save_checkpoint(&trainer, &a.out)?;
    let means = trainer.epoch_means();
    let last = means.last();
    let summary = RunSummary {
        steps: trainer.step,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        peak_lr: trainer.schedule.peak,
        lambda_c: cfg.lambda_c,
        final_loss_total: last.map(|m| m.total).unwrap_or(f64::NAN),
        final_loss_recon: last.map(|m| m.recon).unwrap_or(f64::NAN),
        final_loss_contrastive: last.map(|m| m.contrastive).unwrap_or(f64::NAN),
        first_step_contrastive: trainer.history.first().filter(|r| r.step == 0).map(|r| r.loss.contrastive),
        epoch_means: means,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_summary(&summary_path, &summary)?;
    log::info!("wrote {}, {} and {}", a.out.display(), metrics_path.display(), summary_path.display());
    Ok(())
}

fn probe_config(blocks: usize, o: &ProbeOpts) -> std::result::Result<ProbeConfig, Failure> {
    let mut cfg = if blocks == 0 { ProbeConfig::default() } else { ProbeConfig::finetune(blocks) };
    if let Some(h) = &o.head {
        cfg.head = h.parse::<HeadType>().map_err(usage)?;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = o.hidden {
        cfg.hidden = v;
    }
    cfg.seed = o.seed;
    Ok(cfg)
}

/// A restored checkpoint in one precision, with the data it is evaluated on.
struct Loaded<T: Element> {
    model: CmaeModel,
    store: ParamStore<T>,
    ck: Checkpoint,
}

fn load_model<T: Element>(ck: Checkpoint) -> anyhow::Result<Loaded<T>> {
    let (_, model, store) = cmae::pipeline::restore_model::<T>(&ck)?;
    Ok(Loaded { model, store, ck })
}

fn read_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint, TrainConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let cfg = ck.config()?;
    Ok((ck, cfg))
}

fn eval_one<T: Element>(
    l: &Loaded<T>,
    blocks: usize,
    pc: &ProbeConfig,
    train: &Dataset,
    test: &Dataset,
) -> anyhow::Result<ProbeResult> {
    let stats = l.ck.stats()?;
    if blocks == 0 {
        let ftr = extract_features(&l.model, &l.store, &stats, train, 256)?;
        let fte = extract_features(&l.model, &l.store, &stats, test, 256)?;
        Ok(linear_probe(&ftr, &fte, pc)?)
    } else {
        Ok(partial_finetune(&l.model, &l.store, &stats, train, test, pc)?.0)
    }
}

fn check_blocks(blocks: usize, depth: usize) -> CmdResult {
    if blocks > depth {
        return Err(usage(format!("--blocks {blocks} exceeds the encoder depth {depth}")));
    }
    Ok(())
}

fn probe_dispatch<T: Element>(ckpt: &Path, ck: Checkpoint, blocks: Vec<usize>, data: &EvalData, opts: &ProbeOpts) -> CmdResult {
    let cfg = ck.config()?;
    let dir = data_dir(data.data.as_ref(), Some(&cfg))?;
    let train = load_split(&dir, Split::Train, data.probe_train)?;
    let test = load_split(&dir, Split::Test, data.test)?;
    let loaded = load_model::<T>(ck)?;
    let mut rows = Vec::new();
    for &k in &blocks {
        let pc = probe_config(k, opts)?;
        pc.validate(cfg.depth).map_err(usage)?;
        let r = eval_one(&loaded, k, &pc, &train, &test)?;
        rows.push(json!({
            "blocks": k,
            "head": pc.head.to_string(),
            "top1": r.top1,
            "train_top1": r.train_top1,
        }));
    }
    let out = if rows.len() == 1 {
        let mut row = rows.pop().unwrap_or_default();
        row["checkpoint"] = json!(ckpt.display().to_string());
        row["probe_train"] = json!(train.len());
        row["test"] = json!(test.len());
        row
    } else {
        json!({
            "checkpoint": ckpt.display().to_string(),
            "probe_train": train.len(),
            "test": test.len(),
            "curve": rows,
        })
    };
    println!("{}", serde_json::to_string_pretty(&out).map_err(anyhow::Error::from)?);
    Ok(())
}

pub fn probe(a: ProbeArgs) -> CmdResult {
    let (ck, cfg) = read_checkpoint(&a.ckpt)?;
    check_blocks(a.blocks, cfg.depth)?;
    match cfg.precision {
        Precision::F32 => probe_dispatch::<f32>(&a.ckpt, ck, vec![a.blocks], &a.data, &a.opts),
        Precision::F64 => probe_dispatch::<f64>(&a.ckpt, ck, vec![a.blocks], &a.data, &a.opts),
    }
}

pub fn finetune(a: FinetuneArgs) -> CmdResult {
    let (ck, cfg) = read_checkpoint(&a.ckpt)?;
    let blocks: Vec<usize> = if a.curve {
        (0..=cfg.depth).collect()
    } else {
        if a.blocks == 0 {
            return Err(usage("finetune needs --blocks >= 1 (use `probe --blocks 0` for linear probing)"));
        }
        check_blocks(a.blocks, cfg.depth)?;
        vec![a.blocks]
    };
    if a.curve && a.opts.head.is_some() {
        return Err(usage("--head cannot be combined with --curve (linear at 0 blocks, mlp otherwise)"));
    }
    match cfg.precision {
        Precision::F32 => probe_dispatch::<f32>(&a.ckpt, ck, blocks, &a.data, &a.opts),
        Precision::F64 => probe_dispatch::<f64>(&a.ckpt, ck, blocks, &a.data, &a.opts),
    }
}

fn stats_for<T: Element>(ck: Checkpoint, test: &Dataset) -> anyhow::Result<FeatureStats> {
    let l = load_model::<T>(ck)?;
    let f = extract_features(&l.model, &l.store, &l.ck.stats()?, test, 256)?;
    Ok(feature_stats(&f.normalized, f.dim, &f.labels)?)
}

fn analyze_one(path: &Path, data: &EvalData) -> std::result::Result<serde_json::Value, Failure> {
    let (ck, cfg) = read_checkpoint(path)?;
    let dir = data_dir(data.data.as_ref(), Some(&cfg))?;
    let test = load_split(&dir, Split::Test, data.test)?;
    let stats = match cfg.precision {
        Precision::F32 => stats_for::<f32>(ck, &test)?,
        Precision::F64 => stats_for::<f64>(ck, &test)?,
    };
    Ok(json!({ "checkpoint": path.display().to_string(), "lambda_c": cfg.lambda_c, "images": test.len(), "stats": stats }))
}

pub fn analyze(a: AnalyzeArgs) -> CmdResult {
    if a.data.probe_train.is_some() {
        return Err(usage("analyze uses the test split only; --probe-train does not apply"));
    }
    let mut out = analyze_one(&a.ckpt, &a.data)?;
    if let Some(b) = &a.baseline {
        out["baseline"] = analyze_one(b, &a.data)?;
    }
    println!("{}", serde_json::to_string_pretty(&out).map_err(anyhow::Error::from)?);
    Ok(())
}

pub fn ablate(a: AblateArgs) -> CmdResult {
    let base = build_config(&a.train)?;
    let axis: Axis = a.axis.parse().map_err(usage)?;
    let rows: Vec<AblationRow> = if a.values.is_empty() { axis.default_rows() } else { axis.rows_for(&a.values).map_err(usage)? };
    if a.seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    for row in &rows {
        row.apply(&base).map_err(|e| usage(format!("row `{}`: {e}", row.label)))?;
    }
    if a.dry_run {
        for row in &rows {
            println!("{}: {}", row.label, row.settings_text());
        }
        return Ok(());
    }
    let mut probe = ProbeConfig::default();
    if let Some(v) = a.probe_epochs {
        probe.epochs = v;
    }
    if let Some(v) = a.probe_lr {
        probe.lr = v;
    }
    probe.validate(0).map_err(usage)?;
    let dir = data_dir(a.train.data.as_ref(), Some(&base))?;
    let train = load_split(&dir, Split::Train, None)?;
    let probe_train = train.take(a.probe_train.unwrap_or(base.num_images));
    let test = load_split(&dir, Split::Test, a.test)?;
    let threads = a.threads.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let opts = GridOptions { seeds: a.seeds.clone(), probe, parallel: a.parallel, threads };
    let data = ExperimentData { pretrain: &train, probe_train: &probe_train, probe_test: &test };
    let report = ablation_grid(&base, axis, &rows, data, &opts, &a.out_dir)?;
    for r in &report.rows {
        let reference = r.row.reference_top1.map(|v| format!("{v}")).unwrap_or_else(|| "-".into());
        println!("{:<18} mean top1 {:.4} over {} seeds (reference {})", r.row.label, r.mean_top1(), r.runs.len(), reference);
    }
    println!("wrote {}", report.csv_path.display());
    Ok(())
}

pub fn synth_data(a: SynthArgs) -> CmdResult {
    if a.train == 0 || a.test == 0 {
        return Err(usage("--train and --test must be positive"));
    }
    write_synthetic_cifar(&a.out, a.train, a.test, a.seed)?;
    println!("wrote {} training and {} test images to {}", a.train, a.test, a.out.display());
    Ok(())
}
