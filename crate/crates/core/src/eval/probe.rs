//! Linear probing on frozen features: softmax regression trained by SGD with momentum
//! under a cosine learning-rate schedule.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::features::Features;
use crate::error::{bail, CmaeError, Result};
use crate::pipeline::NUM_CLASSES;
use crate::rng::{stream, Stream};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadType {
    Linear,
    Mlp,
}

impl fmt::Display for HeadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadType::Linear => "linear",
            HeadType::Mlp => "mlp",
        })
    }
}

impl FromStr for HeadType {
    type Err = CmaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadType::Linear),
            "mlp" => Ok(HeadType::Mlp),
            other => Err(CmaeError::Config(format!("unknown head `{other}` (expected linear or mlp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Encoder blocks trained; 0 is linear probing.
    pub tunable_blocks: usize,
    pub head: HeadType,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Hidden width of the MLP head.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            tunable_blocks: 0,
            head: HeadType::Linear,
            epochs: 20,
            lr: 0.1,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 0.0,
            hidden: 128,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// Defaults for partial fine-tuning: MLP head, AdamW-sized learning rate.
    pub fn finetune(blocks: usize) -> Self {
        ProbeConfig { tunable_blocks: blocks, head: HeadType::Mlp, epochs: 10, lr: 1e-3, batch_size: 128, weight_decay: 0.05, ..Self::default() }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.tunable_blocks > depth {
            bail!(Config, "{} tunable blocks exceed encoder depth {}", self.tunable_blocks, depth);
        }
        if self.tunable_blocks == 0 && self.head != HeadType::Linear {
            bail!(Config, "linear probing (0 tunable blocks) uses a linear head");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "probe epochs and batch size must be positive");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "probe learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub train_top1: f64,
}

pub(crate) fn check_labels(labels: &[u8]) -> Result<usize> {
    let mut seen = [false; NUM_CLASSES];
    for &l in labels {
        if l as usize >= NUM_CLASSES {
            bail!(Input, "label {} out of range", l);
        }
        seen[l as usize] = true;
    }
    let classes = seen.iter().filter(|s| **s).count();
    if classes < 2 {
        bail!(Degenerate, "probe needs at least two classes, found {}", classes);
    }
    Ok(classes)
}

/// Per-dimension standardization fitted on the training features.
pub(crate) fn standardizer(x: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / dim).max(1) as f64;
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for row in x.chunks(dim) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    for row in x.chunks(dim) {
        var.iter_mut().zip(row.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    let std = var.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
    (mean, std)
}

fn standardize(x: &[f64], dim: usize, mean: &[f64], std: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(dim) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
    out
}

pub(crate) fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    peak * 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos())
}

fn logits(x: &[f64], rows: usize, dim: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * NUM_CLASSES];
    for row in out.chunks_mut(NUM_CLASSES) {
        row.copy_from_slice(b);
    }
    f64::gemm(rows, dim, NUM_CLASSES, x, false, w, false, 1.0, &mut out);
    out
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(x: &[f64], labels: &[u8], dim: usize, w: &[f64], b: &[f64]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let out = logits(x, labels.len(), dim, w, b);
    let hits = out.chunks(NUM_CLASSES).zip(labels).filter(|(row, l)| argmax(row) == **l as usize).count();
    hits as f64 / labels.len() as f64
}

/// Trains a softmax classifier on `train` and reports top-1 on `test`. Features are
/// standardized per dimension with statistics of the training split.
pub fn linear_probe(train: &Features, test: &Features, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if cfg.tunable_blocks != 0 || cfg.head != HeadType::Linear {
        bail!(Config, "linear_probe trains a linear head on frozen features (0 tunable blocks)");
    }
    cfg.validate(0)?;
    check_labels(&train.labels)?;
    if train.dim != test.dim {
        bail!(Dimension, "train features have width {}, test features {}", train.dim, test.dim);
    }
    let dim = train.dim;
    let (mean, std) = standardizer(&train.raw, dim);
    let xtr = standardize(&train.raw, dim, &mean, &std);
    let xte = standardize(&test.raw, dim, &mean, &std);

    let mut w = vec![0.0; dim * NUM_CLASSES];
    let mut b = vec![0.0; NUM_CLASSES];
    let mut vw = vec![0.0; w.len()];
    let mut vb = vec![0.0; NUM_CLASSES];
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut xb = Vec::with_capacity(cfg.batch_size * dim);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, Stream::Probe, &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.len();
            xb.clear();
            for &i in chunk {
                xb.extend_from_slice(&xtr[i * dim..(i + 1) * dim]);
            }
            let mut d = logits(&xb, rows, dim, &w, &b);
            for (row, &i) in d.chunks_mut(NUM_CLASSES).zip(chunk) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for (c, v) in row.iter_mut().enumerate() {
                    let p = (*v - max).exp() / sum;
                    let y = if c == train.labels[i] as usize { 1.0 } else { 0.0 };
                    *v = (p - y) / rows as f64;
                }
            }
            let mut gw = vec![0.0; w.len()];
            f64::gemm(dim, rows, NUM_CLASSES, &xb, true, &d, false, 0.0, &mut gw);
            let mut gb = vec![0.0; NUM_CLASSES];
            for row in d.chunks(NUM_CLASSES) {
                gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
            let lr = cosine_lr(cfg.lr, step, total);
            for ((p, v), g) in w.iter_mut().zip(vw.iter_mut()).zip(&gw) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            for ((p, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            step += 1;
        }
    }
    Ok(ProbeResult { top1: accuracy(&xte, &test.labels, dim, &w, &b), train_top1: accuracy(&xtr, &train.labels, dim, &w, &b) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clustered(n: usize, dim: usize, spread: f64, seed: u64) -> Features {
        let mut rng = stream(seed, Stream::Eval, &[]);
        let mut raw = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % NUM_CLASSES;
            for j in 0..dim {
                let center = if j == c { 5.0 } else { 0.0 };
                raw.push(center + spread * (rng.gen::<f64>() - 0.5));
            }
            labels.push(c as u8);
        }
        Features::from_raw(raw, dim, labels).unwrap()
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let tr = clustered(200, 12, 0.5, 1);
        let te = clustered(100, 12, 0.5, 2);
        let r = linear_probe(&tr, &te, &ProbeConfig::default()).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.train_top1, 1.0);
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut accs = Vec::new();
        for s in 0..5u64 {
            let mut tr = clustered(2000, 16, 1.0, 10 + s);
            let te_src = clustered(2000, 16, 1.0, 20 + s);
            let mut te = te_src.clone();
            tr.labels.shuffle(&mut stream(s, Stream::Eval, &[1]));
            te.labels.shuffle(&mut stream(s, Stream::Eval, &[2]));
            accs.push(linear_probe(&tr, &te, &ProbeConfig::default()).unwrap().top1);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn single_class_is_degenerate() {
        let mut tr = clustered(20, 4, 1.0, 1);
        tr.labels.iter_mut().for_each(|l| *l = 3);
        let err = linear_probe(&tr, &tr.clone(), &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, CmaeError::Degenerate(_)));
    }

    #[test]
    fn config_checks() {
        assert!(ProbeConfig::default().validate(4).is_ok());
        assert!(ProbeConfig::finetune(5).validate(4).is_err());
        assert!(ProbeConfig { head: HeadType::Mlp, ..ProbeConfig::default() }.validate(4).is_err());
    }
}
