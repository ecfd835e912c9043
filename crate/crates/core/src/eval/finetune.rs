//! Partial fine-tuning: the last `k` online-encoder blocks, the final norm and a small
//! MLP head are trained with AdamW on labelled images; everything else stays frozen.

use rand::seq::SliceRandom;

use super::probe::{argmax, check_labels, HeadType, ProbeConfig, ProbeResult};
use crate::augment::MaskPlan;
use crate::error::{bail, Result};
use crate::model::CmaeModel;
use crate::nn::MlpStack;
use crate::pipeline::{adamw_step, normalize_batch, AdamWConfig, ChannelStats, Dataset, LrSchedule, OptimState, NUM_CLASSES};
use crate::rng::{stream, Stream};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

pub const FINETUNE_HEAD: &str = "finetune_head";

/// Trainable set for `k` tuned blocks. With `k == depth` the patch projection is
/// included too, which makes the run full fine-tuning.
pub fn tuned_params(model: &CmaeModel, k: usize) -> Result<Vec<ParamId>> {
    let stack = &model.online.stack;
    let depth = stack.depth();
    if k == 0 || k > depth {
        bail!(Config, "partial fine-tuning needs 1..={} tuned blocks, got {}", depth, k);
    }
    let mut ids: Vec<ParamId> = stack.blocks[depth - k..].iter().flat_map(|b| b.params()).collect();
    ids.extend(stack.norm.params());
    if k == depth {
        ids.extend(model.online.patch.params());
    }
    Ok(ids)
}

/// Token activations entering the first tuned block, per image `[N, dim]` rows.
struct Prefix<T> {
    rows: Vec<T>,
    per_image: usize,
}

fn frozen_prefix<T: Element>(
    model: &CmaeModel,
    store: &ParamStore<T>,
    stats: &ChannelStats,
    ds: &Dataset,
    frozen: usize,
    batch: usize,
) -> Result<Prefix<T>> {
    let n = model.cfg.encoder.num_patches();
    let dim = model.cfg.encoder.dim;
    let mut rows = Vec::with_capacity(ds.len() * n * dim);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch) {
        let imgs: Vec<_> = chunk.iter().map(|&i| ds.image(i)).collect();
        let x = normalize_batch::<T>(&imgs, stats)?;
        let plans = vec![MaskPlan::full(n); chunk.len()];
        let mut g = Graph::inference();
        let h = model.embed_visible(&mut g, store, &model.online, &x, &plans)?;
        let h = model.online.stack.forward_range(&mut g, store, h, chunk.len(), n, model.cfg.gelu, 0, frozen)?;
        rows.extend_from_slice(g.value(h).data());
    }
    Ok(Prefix { rows, per_image: n * dim })
}

struct Tuner<'a> {
    model: &'a CmaeModel,
    head: MlpStack,
    frozen: usize,
    stats: &'a ChannelStats,
}

impl Tuner<'_> {
    /// Logits for images `chunk`, starting from cached activations or, when nothing is
    /// frozen, from pixels.
    fn logits<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ds: &Dataset, prefix: Option<&Prefix<T>>, chunk: &[usize]) -> Result<Var> {
        let e = &self.model.cfg.encoder;
        let n = e.num_patches();
        let h = match prefix {
            Some(p) => {
                let mut rows = Vec::with_capacity(chunk.len() * p.per_image);
                for &i in chunk {
                    rows.extend_from_slice(&p.rows[i * p.per_image..(i + 1) * p.per_image]);
                }
                g.constant(Tensor::new(&[chunk.len() * n, e.dim], rows)?)?
            }
            None => {
                let imgs: Vec<_> = chunk.iter().map(|&i| ds.image(i)).collect();
                let x = normalize_batch::<T>(&imgs, self.stats)?;
                let plans = vec![MaskPlan::full(n); chunk.len()];
                self.model.embed_visible(g, store, &self.model.online, &x, &plans)?
            }
        };
        let stack = &self.model.online.stack;
        let h = stack.forward_range(g, store, h, chunk.len(), n, self.model.cfg.gelu, self.frozen, stack.depth())?;
        let h = stack.norm.forward(g, store, h)?;
        let pooled = g.mean_rows(h, chunk.len())?;
        self.head.forward(g, store, pooled, self.model.cfg.gelu)
    }

    fn accuracy<T: Element>(&self, store: &ParamStore<T>, ds: &Dataset, prefix: Option<&Prefix<T>>, batch: usize) -> Result<f64> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut hits = 0;
        for chunk in idx.chunks(batch) {
            let mut g = Graph::inference();
            let out = self.logits(&mut g, store, ds, prefix, chunk)?;
            let vals: Vec<f64> = g.value(out).to_f64_vec();
            for (row, &i) in vals.chunks(NUM_CLASSES).zip(chunk) {
                hits += usize::from(argmax(row) == ds.labels[i] as usize);
            }
        }
        Ok(hits as f64 / ds.len() as f64)
    }
}

/// Fine-tunes a copy of `store`; the caller's parameters are never modified. Returns
/// top-1 on `test` and the tuned copy. Every tensor outside the tuned set is checked
/// to be bit-identical to its original after training.
pub fn partial_finetune<T: Element>(
    model: &CmaeModel,
    store: &ParamStore<T>,
    stats: &ChannelStats,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
) -> Result<(ProbeResult, ParamStore<T>)> {
    let depth = model.online.stack.depth();
    if cfg.tunable_blocks == 0 || cfg.tunable_blocks > depth {
        bail!(Config, "partial fine-tuning needs 1..={} tuned blocks, got {}", depth, cfg.tunable_blocks);
    }
    if cfg.head != HeadType::Mlp {
        bail!(Config, "partial fine-tuning uses an MLP head");
    }
    cfg.validate(depth)?;
    check_labels(&train.labels)?;
    for ds in [train, test] {
        if let Some(own) = &ds.normalization {
            if !own.approx_eq(stats, 1e-9) {
                bail!(Input, "dataset normalization differs from the checkpoint statistics");
            }
        }
    }

    let k = cfg.tunable_blocks;
    let frozen = depth - k;
    let tuned = tuned_params(model, k)?;
    let mut work = store.clone();
    let ids: Vec<ParamId> = work.ids().collect();
    for &id in &ids {
        work.set_trainable(id, false);
    }
    for &id in &tuned {
        work.set_trainable(id, true);
    }
    let dim = model.cfg.encoder.dim;
    let head = MlpStack::new(&mut work, FINETUNE_HEAD, "mlp", &[dim, cfg.hidden, NUM_CLASSES], &mut stream(cfg.seed, Stream::Probe, &[2]))?;

    let tuner = Tuner { model, head, frozen, stats };
    let (train_prefix, test_prefix) = if frozen > 0 {
        (
            Some(frozen_prefix(model, store, stats, train, frozen, cfg.batch_size)?),
            Some(frozen_prefix(model, store, stats, test, frozen, cfg.batch_size)?),
        )
    } else {
        (None, None)
    };

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule { peak: cfg.lr, warmup_steps: 0, total_steps: steps_per_epoch * cfg.epochs as u64 };
    let mut optim = OptimState::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, Stream::Probe, &[1, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let logits = tuner.logits(&mut g, &work, train, train_prefix.as_ref(), chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i] as usize).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            g.backward(loss)?;
            adamw_step(&mut work, &g.param_grads(), &mut optim, schedule.lr_at(step))?;
            step += 1;
        }
    }

    for &id in &ids {
        if tuned.contains(&id) {
            continue;
        }
        let (a, b) = (store.value(id).data(), work.value(id).data());
        if a.iter().zip(b).any(|(x, y)| x.as_f64().to_bits() != y.as_f64().to_bits()) {
            bail!(Oracle, "frozen tensor `{}` changed during fine-tuning", store.get(id).name);
        }
    }

    let result = ProbeResult {
        top1: tuner.accuracy(&work, test, test_prefix.as_ref(), cfg.batch_size)?,
        train_top1: tuner.accuracy(&work, train, train_prefix.as_ref(), cfg.batch_size)?,
    };
    Ok((result, work))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CmaeConfig;
    use crate::nn::VitConfig;
    use crate::pipeline::{synthetic_dataset, Split};

    fn setup() -> (CmaeModel, ParamStore<f64>, Dataset, Dataset) {
        let mut cfg = CmaeConfig::tiny();
        cfg.encoder = VitConfig { image_size: 32, patch_size: 8, ..cfg.encoder };
        let mut store = ParamStore::new();
        let model = CmaeModel::new(&cfg, &mut store, 3).unwrap();
        (model, store, synthetic_dataset(24, 1, Split::Train).unwrap(), synthetic_dataset(12, 2, Split::Test).unwrap())
    }

    #[test]
    fn range_checked() {
        let (model, store, tr, te) = setup();
        let stats = tr.channel_stats();
        for k in [0, 3] {
            let err = partial_finetune(&model, &store, &stats, &tr, &te, &ProbeConfig::finetune(k)).unwrap_err();
            assert!(matches!(err, crate::CmaeError::Config(_)), "{err}");
        }
    }

    #[test]
    fn frozen_tensors_untouched_and_tuned_ones_move() {
        let (model, store, tr, te) = setup();
        let stats = tr.channel_stats();
        for k in 1..=2 {
            let cfg = ProbeConfig { epochs: 2, batch_size: 8, hidden: 16, ..ProbeConfig::finetune(k) };
            let (res, tuned) = partial_finetune(&model, &store, &stats, &tr, &te, &cfg).unwrap();
            assert!((0.0..=1.0).contains(&res.top1));
            let moved = tuned_params(&model, k).unwrap();
            for id in store.ids() {
                let same = store.value(id).data() == tuned.value(id).data();
                assert_eq!(same, !moved.contains(&id), "{}", store.get(id).name);
            }
        }
    }

    #[test]
    fn cached_prefix_matches_live_forward() {
        let (model, store, tr, _) = setup();
        let stats = tr.channel_stats();
        let mut work = store.clone();
        let head = MlpStack::new(&mut work, FINETUNE_HEAD, "mlp", &[16, 8, NUM_CLASSES], &mut stream(0, Stream::Probe, &[2])).unwrap();
        let prefix = frozen_prefix(&model, &work, &stats, &tr, 1, 5).unwrap();
        let cached = Tuner { model: &model, head: head.clone(), frozen: 1, stats: &stats };
        let live = Tuner { model: &model, head, frozen: 0, stats: &stats };
        let chunk = [3, 7, 11];
        let mut g1 = Graph::inference();
        let a = cached.logits(&mut g1, &work, &tr, Some(&prefix), &chunk).unwrap();
        let mut g2 = Graph::inference();
        let b = live.logits(&mut g2, &work, &tr, None, &chunk).unwrap();
        for (x, y) in g1.value(a).data().iter().zip(g2.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
