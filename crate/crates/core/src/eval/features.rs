use crate::augment::MaskPlan;
use crate::error::{bail, Result};
use crate::model::CmaeModel;
use crate::pipeline::{normalize_batch, ChannelStats, Dataset};
use crate::tensor::{Element, Graph, ParamStore};

/// Pooled online-encoder features of a labelled set, row-major `[n, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub raw: Vec<f64>,
    /// Rows of `raw` scaled to unit L2 norm.
    pub normalized: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Features {
    pub fn from_raw(raw: Vec<f64>, dim: usize, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || raw.len() != dim * labels.len() {
            bail!(Dimension, "{} feature values for {} labels of width {}", raw.len(), labels.len(), dim);
        }
        let mut normalized = raw.clone();
        for row in normalized.chunks_mut(dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Features { dim, raw, normalized, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.raw[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean-pooled online-encoder outputs on full, unmasked images. The dataset must
/// either carry no normalization or exactly `stats` (the pre-training statistics).
pub fn extract_features<T: Element>(
    model: &CmaeModel,
    store: &ParamStore<T>,
    stats: &ChannelStats,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Features> {
    if let Some(own) = &ds.normalization {
        if !own.approx_eq(stats, 1e-9) {
            bail!(
                Input,
                "dataset normalization (mean {:?}, std {:?}) differs from the checkpoint statistics (mean {:?}, std {:?}); \
                 features would be computed on a different input scale",
                own.mean,
                own.std,
                stats.mean,
                stats.std
            );
        }
    }
    let n_patches = model.cfg.encoder.num_patches();
    let dim = model.cfg.encoder.dim;
    let mut raw = Vec::with_capacity(ds.len() * dim);
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|&i| ds.image(i)).collect();
        let x = normalize_batch::<T>(&imgs, stats)?;
        let plans = vec![MaskPlan::full(n_patches); chunk.len()];
        let mut g = Graph::inference();
        let z = model.online_encode(&mut g, store, &x, &plans)?;
        let pooled = g.mean_rows(z, chunk.len())?;
        raw.extend(g.value(pooled).data().iter().map(|v| v.as_f64()));
    }
    Features::from_raw(raw, dim, ds.labels.clone())
}
