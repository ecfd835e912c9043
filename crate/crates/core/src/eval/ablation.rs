//! Ablation grids: each row is a set of config overrides; every row is pre-trained and
//! linear-probed once per seed, and the results land in `ablation_<axis>.csv`.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::features::extract_features;
use super::probe::{linear_probe, ProbeConfig, ProbeResult};
use crate::error::{bail, CmaeError, Result};
use crate::model::CmaeModel;
use crate::pipeline::{ChannelStats, Dataset, Precision, TrainConfig, Trainer};
use crate::tensor::{Element, ParamStore};

const FEATURE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    ShiftRange,
    LambdaC,
    FdecDepth,
    MomentumMaskRatio,
    LossForm,
    Components,
    Augmentation,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::ShiftRange,
        Axis::LambdaC,
        Axis::FdecDepth,
        Axis::MomentumMaskRatio,
        Axis::LossForm,
        Axis::Components,
        Axis::Augmentation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::ShiftRange => "shift_range",
            Axis::LambdaC => "lambda_c",
            Axis::FdecDepth => "fdec_depth",
            Axis::MomentumMaskRatio => "momentum_mask_ratio",
            Axis::LossForm => "loss_form",
            Axis::Components => "components",
            Axis::Augmentation => "augmentation",
        }
    }

    pub fn csv_name(self) -> String {
        format!("ablation_{}.csv", self.name())
    }

    /// The published rows of this ablation with their reported top-1.
    pub fn default_rows(self) -> Vec<AblationRow> {
        let r = AblationRow::new;
        match self {
            Axis::ShiftRange => vec![
                r("crop", &[("shift", "crop")], Some(83.29)),
                r("0", &[("shift", "0-0")], Some(83.68)),
                r("0-2", &[("shift", "0-2")], Some(83.78)),
                r("0-4", &[("shift", "0-4")], Some(83.82)),
                r("0-6", &[("shift", "0-6")], Some(83.71)),
                r("0-9", &[("shift", "0-9")], Some(83.64)),
                r("4-6", &[("shift", "4-6")], Some(83.54)),
                r("6-9", &[("shift", "6-9")], Some(83.48)),
            ],
            Axis::LambdaC => vec![
                r("0", &[("lambda_c", "0")], Some(82.9)),
                r("0.1", &[("lambda_c", "0.1")], Some(83.3)),
                r("0.5", &[("lambda_c", "0.5")], Some(83.7)),
                r("1", &[("lambda_c", "1")], Some(83.8)),
                r("1.5", &[("lambda_c", "1.5")], Some(83.5)),
                r("2", &[("lambda_c", "2")], Some(83.2)),
            ],
            Axis::FdecDepth => vec![
                r("0", &[("fdec_depth", "0"), ("share_decoder", "false")], Some(83.6)),
                r("2", &[("fdec_depth", "2"), ("share_decoder", "false")], Some(83.8)),
                r("2-shared", &[("fdec_depth", "2"), ("share_decoder", "true")], Some(83.4)),
                r("4", &[("fdec_depth", "4"), ("share_decoder", "false")], Some(83.8)),
                r("4-shared", &[("fdec_depth", "4"), ("share_decoder", "true")], Some(83.5)),
            ],
            Axis::MomentumMaskRatio => vec![
                r("0", &[("momentum_mask_ratio", "0")], Some(83.8)),
                r("0.25", &[("momentum_mask_ratio", "0.25")], Some(83.6)),
                r("0.5", &[("momentum_mask_ratio", "0.5")], Some(83.3)),
                r("0.65", &[("momentum_mask_ratio", "0.65")], Some(83.3)),
                r("0.75", &[("momentum_mask_ratio", "0.75")], Some(83.0)),
            ],
            Axis::LossForm => vec![r("infonce", &[("loss_form", "infonce")], None), r("byol", &[("loss_form", "byol")], None)],
            Axis::Components => vec![
                r("baseline", &[("lambda_c", "0")], Some(82.9)),
                r("+contrastive", &[("lambda_c", "1"), ("shift", "crop"), ("fdec_depth", "0"), ("color_transfer", "true")], Some(83.1)),
                r("+pixel_shift", &[("lambda_c", "1"), ("shift", "0-4"), ("fdec_depth", "0"), ("color_transfer", "true")], Some(83.6)),
                r("+feature_decoder", &[("lambda_c", "1"), ("shift", "0-4"), ("fdec_depth", "2"), ("color_transfer", "true")], Some(83.8)),
            ],
            Axis::Augmentation => vec![
                r("none", &[("shift", "0-0"), ("color_transfer", "false")], Some(82.9)),
                r("crop", &[("shift", "crop"), ("color_transfer", "false")], Some(83.0)),
                r("shift", &[("shift", "0-4"), ("color_transfer", "false")], Some(83.4)),
                r("shift+color", &[("shift", "0-4"), ("color_transfer", "true")], Some(83.8)),
            ],
        }
    }

    /// Rows for user-chosen values. Single-key axes accept any value of that key
    /// (`fdec_depth` also accepts `N-shared`); composite axes accept row labels.
    pub fn rows_for(self, values: &[String]) -> Result<Vec<AblationRow>> {
        let defaults = self.default_rows();
        values
            .iter()
            .map(|v| {
                let v = v.trim();
                if let Some(row) = defaults.iter().find(|r| r.label == v) {
                    return Ok(row.clone());
                }
                let settings: Vec<(&str, String)> = match self {
                    Axis::ShiftRange => vec![("shift", v.to_string())],
                    Axis::LambdaC => vec![("lambda_c", v.to_string())],
                    Axis::MomentumMaskRatio => vec![("momentum_mask_ratio", v.to_string())],
                    Axis::LossForm => vec![("loss_form", v.to_string())],
                    Axis::FdecDepth => match v.strip_suffix("-shared") {
                        Some(d) => vec![("fdec_depth", d.to_string()), ("share_decoder", "true".into())],
                        None => vec![("fdec_depth", v.to_string()), ("share_decoder", "false".into())],
                    },
                    Axis::Components | Axis::Augmentation => {
                        let known: Vec<&str> = defaults.iter().map(|r| r.label.as_str()).collect();
                        bail!(Config, "unknown {} row `{}` (expected one of {})", self.name(), v, known.join(", "))
                    }
                };
                let row = AblationRow {
                    label: v.to_string(),
                    settings: settings.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                    reference_top1: None,
                };
                row.apply(&TrainConfig::default())?;
                Ok(row)
            })
            .collect()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = CmaeError;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "shift" { "shift_range" } else { s };
        Axis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
            CmaeError::Config(format!("unknown ablation axis `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// Config overrides in `TrainConfig::set` form, applied in order.
    pub settings: Vec<(String, String)>,
    /// Top-1 reported for this setting at full scale.
    pub reference_top1: Option<f64>,
}

impl AblationRow {
    fn new(label: &str, settings: &[(&str, &str)], reference_top1: Option<f64>) -> Self {
        AblationRow {
            label: label.to_string(),
            settings: settings.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            reference_top1,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.settings {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn settings_text(&self) -> String {
        self.settings.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }
}

/// Images used by one experiment: pre-training pool (the first `num_images` are
/// used) plus the labelled probe splits.
#[derive(Debug, Clone, Copy)]
pub struct ExperimentData<'a> {
    pub pretrain: &'a Dataset,
    pub probe_train: &'a Dataset,
    pub probe_test: &'a Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub top1: f64,
    pub train_top1: f64,
    /// Epoch-mean total loss of the last epoch; NaN for an untrained encoder.
    pub final_loss: f64,
}

/// Linear probe of the online encoder held in `store`.
pub fn probe_encoder<T: Element>(
    model: &CmaeModel,
    store: &ParamStore<T>,
    stats: &ChannelStats,
    data: ExperimentData<'_>,
    probe: &ProbeConfig,
) -> Result<ProbeResult> {
    let mut tr = data.probe_train.clone();
    let mut te = data.probe_test.clone();
    tr.normalization = None;
    te.normalization = None;
    let ftr = extract_features(model, store, stats, &tr, FEATURE_BATCH)?;
    let fte = extract_features(model, store, stats, &te, FEATURE_BATCH)?;
    linear_probe(&ftr, &fte, probe)
}

fn pretrain_and_probe<T: Element>(cfg: &TrainConfig, data: ExperimentData<'_>, probe: &ProbeConfig) -> Result<ExperimentResult> {
    let mut trainer = Trainer::<T>::new(cfg, data.pretrain)?;
    trainer.run(None)?;
    let final_loss = trainer.epoch_means().last().map(|m| m.total).unwrap_or(f64::NAN);
    let r = probe_encoder(&trainer.model, &trainer.store, &trainer.stats, data, probe)?;
    Ok(ExperimentResult { seed: cfg.seed, top1: r.top1, train_top1: r.train_top1, final_loss })
}

fn untrained_probe<T: Element>(cfg: &TrainConfig, data: ExperimentData<'_>, probe: &ProbeConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let stats = data.pretrain.take(cfg.num_images).channel_stats();
    let mut store = ParamStore::<T>::new();
    let model = CmaeModel::new(&cfg.model_config(), &mut store, cfg.seed)?;
    let r = probe_encoder(&model, &store, &stats, data, probe)?;
    Ok(ExperimentResult { seed: cfg.seed, top1: r.top1, train_top1: r.train_top1, final_loss: f64::NAN })
}

/// Pre-trains with `cfg` and linear-probes the result. The probe shares `cfg.seed`.
pub fn run_experiment(cfg: &TrainConfig, data: ExperimentData<'_>, probe: &ProbeConfig) -> Result<ExperimentResult> {
    let probe = ProbeConfig { seed: cfg.seed, ..probe.clone() };
    match cfg.precision {
        Precision::F32 => pretrain_and_probe::<f32>(cfg, data, &probe),
        Precision::F64 => pretrain_and_probe::<f64>(cfg, data, &probe),
    }
}

/// Same protocol on the encoder as initialized with `cfg.seed`, without pre-training.
pub fn run_random_init(cfg: &TrainConfig, data: ExperimentData<'_>, probe: &ProbeConfig) -> Result<ExperimentResult> {
    let probe = ProbeConfig { seed: cfg.seed, ..probe.clone() };
    match cfg.precision {
        Precision::F32 => untrained_probe::<f32>(cfg, data, &probe),
        Precision::F64 => untrained_probe::<f64>(cfg, data, &probe),
    }
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
    /// Run independent (row, seed) jobs on separate threads.
    pub parallel: bool,
    pub threads: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { seeds: vec![0, 1, 2], probe: ProbeConfig::default(), parallel: false, threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRowResult {
    pub row: AblationRow,
    pub runs: Vec<ExperimentResult>,
}

impl GridRowResult {
    pub fn mean_top1(&self) -> f64 {
        self.runs.iter().map(|r| r.top1).sum::<f64>() / self.runs.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub axis: Axis,
    pub rows: Vec<GridRowResult>,
    pub csv_path: PathBuf,
}

pub const GRID_CSV_HEADER: &str = "axis,row,settings,seed,top1,train_top1,final_loss,reference_top1";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn grid_csv(axis: Axis, rows: &[GridRowResult]) -> String {
    let mut s = String::from(GRID_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let settings = r.row.settings_text();
        for run in &r.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                axis,
                r.row.label,
                settings,
                run.seed,
                run.top1,
                run.train_top1,
                run.final_loss,
                opt(r.row.reference_top1)
            );
        }
        let mean_train = r.runs.iter().map(|x| x.train_top1).sum::<f64>() / r.runs.len().max(1) as f64;
        let mean_loss = r.runs.iter().map(|x| x.final_loss).sum::<f64>() / r.runs.len().max(1) as f64;
        let _ = writeln!(
            s,
            "{},{},{},mean,{},{},{},{}",
            axis,
            r.row.label,
            settings,
            r.mean_top1(),
            mean_train,
            mean_loss,
            opt(r.row.reference_top1)
        );
    }
    s
}

/// Runs every row for every seed and writes `ablation_<axis>.csv` into `out_dir`.
/// Each job is exactly `run_experiment(row.apply(base) with seed s)`.
pub fn ablation_grid(
    base: &TrainConfig,
    axis: Axis,
    rows: &[AblationRow],
    data: ExperimentData<'_>,
    opts: &GridOptions,
    out_dir: &Path,
) -> Result<GridReport> {
    if opts.seeds.is_empty() {
        bail!(Config, "ablation grid needs at least one seed");
    }
    let mut jobs = Vec::new();
    for (ri, row) in rows.iter().enumerate() {
        let cfg = row.apply(base)?;
        for &seed in &opts.seeds {
            jobs.push((ri, TrainConfig { seed, ..cfg.clone() }));
        }
    }
    let run = |ri: usize, cfg: &TrainConfig| -> Result<ExperimentResult> {
        log::info!("ablation {} row `{}` seed {}", axis, rows[ri].label, cfg.seed);
        run_experiment(cfg, data, &opts.probe)
    };
    let results: Vec<Result<ExperimentResult>> = if opts.parallel && opts.threads > 1 {
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(opts.threads) {
            let part: Vec<Result<ExperimentResult>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|(ri, cfg)| s.spawn(|| run(*ri, cfg))).collect();
                handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(CmaeError::Config("ablation worker panicked".into())))).collect()
            });
            out.extend(part);
        }
        out
    } else {
        jobs.iter().map(|(ri, cfg)| run(*ri, cfg)).collect()
    };

    let mut grid: Vec<GridRowResult> = rows.iter().map(|r| GridRowResult { row: r.clone(), runs: Vec::new() }).collect();
    for ((ri, _), res) in jobs.iter().zip(results) {
        grid[*ri].runs.push(res?);
    }
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(axis.csv_name());
    std::fs::write(&csv_path, grid_csv(axis, &grid))?;
    Ok(GridReport { axis, rows: grid, csv_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_roundtrip() {
        for a in Axis::ALL {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn every_default_row_applies() {
        let base = TrainConfig::default();
        for a in Axis::ALL {
            for row in a.default_rows() {
                row.apply(&base).unwrap_or_else(|e| panic!("{a} {}: {e}", row.label));
            }
        }
    }

    #[test]
    fn shift_bins_are_scaled_floor() {
        let base = TrainConfig::default();
        let bins = [(0, 15), (0, 31), (0, 47), (0, 63), (32, 47), (48, 63)];
        let rows = Axis::ShiftRange.default_rows();
        for (lo, hi) in bins {
            let (a, b) = (lo * 32 / 224, hi * 32 / 224);
            let row = rows.iter().find(|r| r.label == format!("{a}-{b}")).unwrap();
            let cfg = row.apply(&base).unwrap();
            assert_eq!((cfg.shift_min, cfg.shift_max), (a, b));
        }
    }

    #[test]
    fn custom_values() {
        let rows = Axis::FdecDepth.rows_for(&["3-shared".into(), "1".into()]).unwrap();
        let cfg = rows[0].apply(&TrainConfig::default()).unwrap();
        assert_eq!((cfg.fdec_depth, cfg.share_decoder), (3, true));
        assert!(Axis::Components.rows_for(&["nope".into()]).is_err());
        assert!(Axis::LambdaC.rows_for(&["abc".into()]).is_err());
    }
}
