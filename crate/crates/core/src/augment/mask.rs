use rand::seq::index::sample;
use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

pub const TARGET_EPS: f64 = 1e-6;

/// Partition of `0..n` into visible and masked patch indices, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub n: usize,
    pub n_masked: usize,
}

impl MaskPlan {
    /// No masking: every patch is visible.
    pub fn full(n: usize) -> Self {
        MaskPlan { visible: (0..n).collect(), masked: Vec::new(), n, n_masked: 0 }
    }

    /// Builds a plan from an explicit masked set.
    pub fn from_masked(n: usize, masked: &[usize]) -> Result<Self> {
        let mut is_masked = vec![false; n];
        for &m in masked {
            if m >= n || is_masked[m] {
                bail!(Config, "masked index {} repeated or out of range for {} patches", m, n);
            }
            is_masked[m] = true;
        }
        let visible = (0..n).filter(|&i| !is_masked[i]).collect();
        let masked: Vec<usize> = (0..n).filter(|&i| is_masked[i]).collect();
        Ok(MaskPlan { visible, n_masked: masked.len(), masked, n })
    }

    /// True when nothing is left for the encoder to see.
    pub fn is_degenerate(&self) -> bool {
        self.visible.is_empty()
    }
}

/// Masked count `round(ratio * n)`, halves rounded up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 0.5).floor() as usize
}

/// Uniform subset of `round(ratio * n)` patches, drawn without replacement.
pub fn random_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        bail!(Config, "mask ratio {} outside [0, 1]", ratio);
    }
    let k = masked_count(n, ratio).min(n);
    let masked = sample(rng, n, k).into_vec();
    MaskPlan::from_masked(n, &masked)
}

/// Per-row standardization `(x - mean) / sqrt(var + 1e-6)` over the last axis, using
/// the population variance.
pub fn normalize_target<T: Element>(patches: &Tensor<T>) -> Result<Tensor<T>> {
    let d = patches.last_dim();
    if d < 2 {
        bail!(Dimension, "target normalization needs at least 2 pixels per patch, got {}", d);
    }
    let inv = T::one() / T::lit(d as f64);
    let eps = T::lit(TARGET_EPS);
    let mut out = patches.data().to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv;
        let scale = (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / scale);
    }
    Tensor::new(patches.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn counts_for_default_ratio() {
        let plan = random_mask(64, 0.75, &mut stream(0, Stream::Augment, &[])).unwrap();
        assert_eq!((plan.n_masked, plan.visible.len()), (48, 16));
        assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
        let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn ratio_endpoints() {
        let mut rng = stream(0, Stream::Augment, &[]);
        assert_eq!(random_mask(64, 0.0, &mut rng).unwrap(), MaskPlan::full(64));
        let all = random_mask(64, 1.0, &mut rng).unwrap();
        assert!(all.is_degenerate());
        assert!(random_mask(64, 1.5, &mut rng).is_err());
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(masked_count(10, 0.25), 3);
        assert_eq!(masked_count(64, 0.65), 42);
        assert_eq!(masked_count(16, 0.75), 12);
    }

    #[test]
    fn target_normalization_examples() {
        let t = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 2.0, 5.0, 5.0]).unwrap();
        let n = normalize_target(&t).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((n.data()[0] + expect).abs() < 1e-12 && (n.data()[1] - expect).abs() < 1e-12);
        assert_eq!(&n.data()[2..], &[0.0, 0.0]);
        assert!(normalize_target(&Tensor::<f64>::zeros(&[3, 1])).is_err());
    }
}
