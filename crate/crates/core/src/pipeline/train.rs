//! The pre-training loop: batching, parallel augmentation, one optimizer step, EMA.

use std::thread;

use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::data::{normalize_batch, ChannelStats, Dataset};
use super::metrics::MetricsWriter;
use super::optim::{adamw_step, effective_lr, LrSchedule, OptimState};
use crate::augment::{make_views, random_mask, normalize_target, AugmentConfig, Image, MaskPlan};
use crate::error::{bail, Result};
use crate::model::{ema_update, gather_per_image, CmaeModel};
use crate::nn::{mlp_head, patchify, HeadMode};
use crate::objectives::{contrastive_loss, mean_positive_similarity, reconstruction_loss, total_loss, total_loss_var, LossBreakdown, LossConfig};
use crate::rng::{stream, Stream};
use crate::tensor::{Element, Graph, ParamStore, Tensor, Var};

/// Shuffled index chunks for one epoch. Every index appears exactly once; a trailing
/// chunk smaller than 2 is merged into its predecessor so InfoNCE always has a negative.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Shuffle, &[epoch]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

/// Everything one step consumes, already augmented and normalized.
#[derive(Debug, Clone)]
pub struct PreparedBatch<T> {
    pub indices: Vec<usize>,
    /// `[B, H, W, C]`
    pub online: Tensor<T>,
    pub momentum: Tensor<T>,
    pub online_plans: Vec<MaskPlan>,
    pub momentum_plans: Vec<MaskPlan>,
    /// Per-patch normalized pixels of the masked online patches, `[B * N_m, P*P*C]`.
    pub targets: Tensor<T>,
}

struct Sample {
    online: Image,
    momentum: Image,
    online_plan: MaskPlan,
    momentum_plan: MaskPlan,
}

fn augment_one(ds: &Dataset, index: usize, epoch: u64, seed: u64, aug: &AugmentConfig, n_patches: usize) -> Result<Sample> {
    let mut rng = stream(seed, Stream::Augment, &[epoch, index as u64]);
    let pair = make_views(&ds.image(index), aug, &mut rng)?;
    let online_plan = random_mask(n_patches, aug.mask_ratio_online, &mut rng)?;
    let momentum_plan = random_mask(n_patches, aug.mask_ratio_momentum, &mut rng)?;
    Ok(Sample { online: pair.online_view, momentum: pair.momentum_view, online_plan, momentum_plan })
}

/// Augments `indices` on up to `workers` threads. Each image draws from its own
/// `(seed, epoch, index)` stream, so the result does not depend on `workers`.
pub fn prepare_batch<T: Element>(
    ds: &Dataset,
    indices: &[usize],
    epoch: u64,
    cfg: &TrainConfig,
    stats: &ChannelStats,
) -> Result<PreparedBatch<T>> {
    if indices.len() < 2 {
        bail!(Config, "a batch needs at least 2 images, got {}", indices.len());
    }
    let aug = cfg.augment_config();
    let model_cfg = cfg.model_config();
    let n_patches = model_cfg.encoder.num_patches();
    let workers = cfg.workers.clamp(1, indices.len());
    let chunk = indices.len().div_ceil(workers);
    let samples: Vec<Sample> = if workers == 1 {
        indices.iter().map(|&i| augment_one(ds, i, epoch, cfg.seed, &aug, n_patches)).collect::<Result<_>>()?
    } else {
        let parts: Vec<Result<Vec<Sample>>> = thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|part| {
                    let aug = &aug;
                    s.spawn(move || part.iter().map(|&i| augment_one(ds, i, epoch, cfg.seed, aug, n_patches)).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("augmentation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(indices.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };

    let online_imgs: Vec<Image> = samples.iter().map(|s| s.online.clone()).collect();
    let momentum_imgs: Vec<Image> = samples.iter().map(|s| s.momentum.clone()).collect();
    let online = normalize_batch::<T>(&online_imgs, stats)?;
    let momentum = normalize_batch::<T>(&momentum_imgs, stats)?;
    let online_plans: Vec<MaskPlan> = samples.iter().map(|s| s.online_plan.clone()).collect();
    let momentum_plans: Vec<MaskPlan> = samples.into_iter().map(|s| s.momentum_plan).collect();

    let patches = patchify(&online, model_cfg.encoder.patch_size)?;
    let select: Vec<&[usize]> = online_plans.iter().map(|p| p.masked.as_slice()).collect();
    let targets = normalize_target(&gather_per_image(&patches, &select)?)?;
    Ok(PreparedBatch { indices: indices.to_vec(), online, momentum, online_plans, momentum_plans, targets })
}

/// Builds the composite objective of one prepared batch into `g` and returns its
/// breakdown with the root to differentiate. With `lambda_c == 0` the momentum branch,
/// feature decoder and heads are skipped.
pub fn batch_loss<T: Element>(
    g: &mut Graph<T>,
    model: &CmaeModel,
    store: &ParamStore<T>,
    batch: &PreparedBatch<T>,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Var)> {
    let z = model.online_encode(g, store, &batch.online, &batch.online_plans)?;
    if loss_cfg.lambda_c == 0.0 {
        let pred = model.pixel_decode(g, store, z, &batch.online_plans)?;
        let recon = reconstruction_loss(g, pred, &batch.targets)?;
        return Ok((total_loss(g.value(recon).item().as_f64(), 0.0, loss_cfg), recon));
    }
    let (pred, y_s) = model.decode_both(g, store, z, &batch.online_plans)?;
    let recon = reconstruction_loss(g, pred, &batch.targets)?;
    let targets = model.momentum_targets(store, &batch.momentum, &batch.momentum_plans)?;
    let online = mlp_head(g, store, y_s, &model.online_heads, HeadMode::ProjectionThenPrediction, model.cfg.gelu)?;
    let momentum = g.constant(targets.clone())?;
    let c = contrastive_loss(g, online, momentum, loss_cfg)?;
    let root = total_loss_var(g, recon, Some(c), loss_cfg)?;
    let mut b = total_loss(g.value(recon).item().as_f64(), g.value(c).item().as_f64(), loss_cfg);
    b.mean_positive_similarity = mean_positive_similarity(g.value(online), &targets);
    Ok((b, root))
}

/// One optimizer step on the composite objective followed by the EMA update.
pub fn pretrain_step<T: Element>(
    model: &CmaeModel,
    store: &mut ParamStore<T>,
    optim: &mut OptimState<T>,
    batch: &PreparedBatch<T>,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (breakdown, root) = batch_loss(&mut g, model, store, batch, loss_cfg)?;
    if !breakdown.total.is_finite() {
        bail!(NonFinite, "loss is {} (recon {}, contrastive {})", breakdown.total, breakdown.recon, breakdown.contrastive);
    }
    g.backward(root)?;
    let grads = g.param_grads();
    drop(g);
    adamw_step(store, &grads, optim, lr)?;
    ema_update(store, &model.ema)?;
    Ok(LossBreakdown { step_lr: lr, ..breakdown })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochMean {
    pub epoch: u64,
    pub steps: usize,
    pub total: f64,
    pub recon: f64,
    pub contrastive: f64,
}

/// Model, optimizer and schedule state for one pre-training run.
pub struct Trainer<T: Element> {
    pub cfg: TrainConfig,
    pub model: CmaeModel,
    pub store: ParamStore<T>,
    pub optim: OptimState<T>,
    pub stats: ChannelStats,
    /// Steps completed.
    pub step: u64,
    pub schedule: LrSchedule,
    pub steps_per_epoch: u64,
    pub history: Vec<StepRecord>,
    data: Dataset,
    cached: Option<(u64, Vec<Vec<usize>>)>,
}

impl<T: Element> Trainer<T> {
    /// Fresh run on the first `cfg.num_images` images of `train`. Channel statistics
    /// come from those images.
    pub fn new(cfg: &TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let data = train.take(cfg.num_images);
        let stats = data.channel_stats();
        let mut store = ParamStore::new();
        let model = CmaeModel::new(&cfg.model_config(), &mut store, cfg.seed)?;
        Self::assemble(cfg, data, stats, model, store, OptimState::new(cfg.adamw()), 0)
    }

    pub(crate) fn assemble(
        cfg: &TrainConfig,
        data: Dataset,
        stats: ChannelStats,
        model: CmaeModel,
        store: ParamStore<T>,
        optim: OptimState<T>,
        step: u64,
    ) -> Result<Self> {
        if data.len() < 2 {
            bail!(Config, "pre-training needs at least 2 images, got {}", data.len());
        }
        let steps_per_epoch = epoch_batches(data.len(), cfg.batch_size, cfg.seed, 0).len() as u64;
        let peak = effective_lr(cfg.base_lr, cfg.batch_size)?;
        let schedule = LrSchedule {
            peak,
            warmup_steps: cfg.warmup_epochs as u64 * steps_per_epoch,
            total_steps: cfg.epochs as u64 * steps_per_epoch,
        };
        let mut data = data;
        data.normalization = Some(stats);
        Ok(Trainer { cfg: cfg.clone(), model, store, optim, stats, step, schedule, steps_per_epoch, history: Vec::new(), data, cached: None })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Indices of the batch consumed at `step`.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let within = (step % self.steps_per_epoch) as usize;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached = Some((epoch, epoch_batches(self.data.len(), self.cfg.batch_size, self.cfg.seed, epoch)));
        }
        self.cached.as_ref().map(|(_, b)| b[within].clone()).unwrap_or_default()
    }

    /// Runs the next step and records it.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let epoch = step / self.steps_per_epoch;
        let indices = self.batch_indices(step);
        let batch = prepare_batch::<T>(&self.data, &indices, epoch, &self.cfg, &self.stats)?;
        let lr = self.schedule.lr_at(step);
        let loss = pretrain_step(&self.model, &mut self.store, &mut self.optim, &batch, &self.cfg.loss_config(), lr)?;
        let rec = StepRecord { step, epoch, lr, loss };
        self.history.push(rec);
        self.step += 1;
        Ok(rec)
    }

    /// Trains until `until` steps are complete (capped at the schedule end), logging
    /// into `metrics` when given.
    pub fn train_until(&mut self, until: u64, mut metrics: Option<&mut MetricsWriter>) -> Result<()> {
        let until = until.min(self.total_steps());
        while self.step < until {
            let rec = self.step_once()?;
            if let Some(m) = metrics.as_deref_mut() {
                m.record(&rec)?;
            }
            if rec.step % self.cfg.log_interval as u64 == 0 {
                log::info!(
                    "step {} epoch {} lr {:.3e} loss {:.4} (recon {:.4}, contrastive {:.4}, pos_sim {:.3})",
                    rec.step,
                    rec.epoch,
                    rec.lr,
                    rec.loss.total,
                    rec.loss.recon,
                    rec.loss.contrastive,
                    rec.loss.mean_positive_similarity
                );
            }
        }
        if let Some(m) = metrics {
            m.flush()?;
        }
        Ok(())
    }

    pub fn run(&mut self, metrics: Option<&mut MetricsWriter>) -> Result<()> {
        self.train_until(self.total_steps(), metrics)
    }

    /// Per-epoch means of the recorded history.
    pub fn epoch_means(&self) -> Vec<EpochMean> {
        epoch_means(&self.history)
    }
}

pub fn epoch_means(history: &[StepRecord]) -> Vec<EpochMean> {
    let mut out: Vec<EpochMean> = Vec::new();
    for r in history {
        match out.last_mut() {
            Some(m) if m.epoch == r.epoch => {
                m.steps += 1;
                m.total += r.loss.total;
                m.recon += r.loss.recon;
                m.contrastive += r.loss.contrastive;
            }
            _ => out.push(EpochMean { epoch: r.epoch, steps: 1, total: r.loss.total, recon: r.loss.recon, contrastive: r.loss.contrastive }),
        }
    }
    for m in &mut out {
        let n = m.steps as f64;
        m.total /= n;
        m.recon /= n;
        m.contrastive /= n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::{synthetic_dataset, Split};

    fn tiny_setup() -> (TrainConfig, Dataset) {
        let cfg = TrainConfig::tiny();
        let ds = synthetic_dataset(16, 3, Split::Train).unwrap();
        (cfg, ds)
    }

    #[test]
    fn epoch_covers_every_index_once() {
        for (n, b) in [(10, 4), (9, 4), (5000, 128), (7, 7)] {
            let batches = epoch_batches(n, b, 1, 3);
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(batches.iter().all(|c| c.len() >= 2));
        }
        assert_eq!(epoch_batches(9, 4, 1, 0).len(), 2);
        assert_ne!(epoch_batches(100, 10, 1, 0), epoch_batches(100, 10, 1, 1));
    }

    #[test]
    fn prepared_batch_independent_of_workers() {
        let (mut cfg, ds) = tiny_setup();
        let stats = ds.channel_stats();
        let a = prepare_batch::<f64>(&ds, &[0, 3, 5, 7, 9], 1, &cfg, &stats).unwrap();
        cfg.workers = 3;
        let b = prepare_batch::<f64>(&ds, &[0, 3, 5, 7, 9], 1, &cfg, &stats).unwrap();
        assert_eq!(a.online, b.online);
        assert_eq!(a.momentum, b.momentum);
        assert_eq!(a.online_plans, b.online_plans);
        assert_eq!(a.targets.shape(), &[5 * 12, 48]);
    }

    #[test]
    fn lambda_zero_reports_no_contrastive_term() {
        let (mut cfg, ds) = tiny_setup();
        cfg.lambda_c = 0.0;
        let mut t = Trainer::<f64>::new(&cfg, &ds).unwrap();
        let rec = t.step_once().unwrap();
        assert_eq!(rec.loss.contrastive, 0.0);
        assert_eq!(rec.loss.total, rec.loss.recon);
    }

    #[test]
    fn two_fresh_runs_match() {
        let (cfg, ds) = tiny_setup();
        let mut a = Trainer::<f64>::new(&cfg, &ds).unwrap();
        let mut b = Trainer::<f64>::new(&cfg, &ds).unwrap();
        a.train_until(3, None).unwrap();
        b.train_until(3, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.steps_per_epoch, 4);
        assert_eq!(a.schedule.lr_at(0), 0.0);
    }
}
