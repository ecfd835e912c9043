//! Intra-class spread and inter-class center separation of pooled features.

use serde::Serialize;

use crate::error::{bail, Result};
use crate::pipeline::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeatureStats {
    pub mean_intra_class_distance: f64,
    pub std_intra_class_distance: f64,
    pub mean_inter_class_center_distance: f64,
    pub std_inter_class_center_distance: f64,
    pub classes: usize,
}

/// `1 - cos(a, b)`, clamped at zero against rounding.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na * nb;
    if denom < 1e-300 {
        return 0.0;
    }
    (1.0 - dot / denom).max(0.0)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Statistics over L2-normalized rows `features` (`[n, dim]`). Intra-class values pool
/// every within-class pair across classes. For the inter-class values each class
/// contributes the mean and std of its center's distances to all other centers, and
/// these are averaged over classes. Classes with a single sample are skipped.
pub fn feature_stats(features: &[f64], dim: usize, labels: &[u8]) -> Result<FeatureStats> {
    if dim == 0 || features.len() != dim * labels.len() {
        bail!(Dimension, "{} feature values for {} labels of width {}", features.len(), labels.len(), dim);
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            bail!(Input, "label {} out of range", l);
        }
        members[l as usize].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if m.len() == 1 {
            log::warn!("class {c} has a single sample; skipped in feature statistics");
        }
    }
    let classes: Vec<&Vec<usize>> = members.iter().filter(|m| m.len() >= 2).collect();
    if classes.len() < 2 {
        bail!(Degenerate, "feature statistics need at least two classes with two samples, found {}", classes.len());
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];

    let mut intra = Vec::new();
    for m in &classes {
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                intra.push(cosine_distance(row(i), row(j)));
            }
        }
    }
    let centers: Vec<Vec<f64>> = classes
        .iter()
        .map(|m| {
            let mut c = vec![0.0; dim];
            for &i in m.iter() {
                c.iter_mut().zip(row(i)).for_each(|(s, v)| *s += v);
            }
            c.iter_mut().for_each(|s| *s /= m.len() as f64);
            c
        })
        .collect();
    let (mut inter_mean, mut inter_std) = (0.0, 0.0);
    for (a, ca) in centers.iter().enumerate() {
        let d: Vec<f64> =
            centers.iter().enumerate().filter(|(b, _)| *b != a).map(|(_, cb)| cosine_distance(ca, cb)).collect();
        let (m, s) = mean_std(&d);
        inter_mean += m / centers.len() as f64;
        inter_std += s / centers.len() as f64;
    }
    let (intra_mean, intra_std) = mean_std(&intra);
    Ok(FeatureStats {
        mean_intra_class_distance: intra_mean,
        std_intra_class_distance: intra_std,
        mean_inter_class_center_distance: inter_mean,
        std_inter_class_center_distance: inter_std,
        classes: classes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CmaeError;

    #[test]
    fn identical_features_give_zeros() {
        let f = vec![0.6, 0.8].repeat(6);
        let s = feature_stats(&f, 2, &[0, 0, 1, 1, 2, 2]).unwrap();
        assert_eq!(s.mean_intra_class_distance, 0.0);
        assert_eq!(s.std_intra_class_distance, 0.0);
        assert!(s.mean_inter_class_center_distance.abs() < 1e-15);
        assert!(s.std_inter_class_center_distance.abs() < 1e-15);
    }

    #[test]
    fn orthogonal_classes() {
        let f = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let s = feature_stats(&f, 2, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.mean_intra_class_distance, 0.0);
        assert!((s.mean_inter_class_center_distance - 1.0).abs() < 1e-15);
        assert_eq!(s.std_inter_class_center_distance, 0.0);
    }

    #[test]
    fn singleton_class_skipped_and_one_class_degenerate() {
        let f = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.7, 0.7];
        let s = feature_stats(&f, 2, &[0, 0, 1, 1, 2]).unwrap();
        assert_eq!(s.classes, 2);
        let err = feature_stats(&f[..6], 2, &[0, 0, 1]).unwrap_err();
        assert!(matches!(err, CmaeError::Degenerate(_)));
    }
}
