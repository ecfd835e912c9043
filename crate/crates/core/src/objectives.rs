//! Training objectives: masked-patch reconstruction, InfoNCE against in-batch
//! momentum negatives, a negative-free BYOL-style alternative, and their sum.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, CmaeError, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Norm floor inside cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveForm {
    InfoNce,
    ByolStyle,
}

impl fmt::Display for ContrastiveForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveForm::InfoNce => "infonce",
            ContrastiveForm::ByolStyle => "byol",
        })
    }
}

impl FromStr for ContrastiveForm {
    type Err = CmaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(ContrastiveForm::InfoNce),
            "byol" | "byol_style" => Ok(ContrastiveForm::ByolStyle),
            other => Err(CmaeError::Config(format!("unknown loss form `{other}` (expected infonce or byol)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_c: f64,
    pub temperature: f64,
    pub form: ContrastiveForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_c: 1.0, temperature: 0.07, form: ContrastiveForm::InfoNce }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        if !(self.lambda_c >= 0.0) {
            bail!(Config, "lambda_c must be non-negative, got {}", self.lambda_c);
        }
        Ok(())
    }
}

/// Scalars reported for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub contrastive: f64,
    pub lambda_c: f64,
    pub total: f64,
    pub mean_positive_similarity: f64,
    pub step_lr: f64,
}

/// `L = L_r + lambda_c * L_c`, evaluated as one expression.
pub fn total_loss(recon: f64, contrastive: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        recon,
        contrastive,
        lambda_c: cfg.lambda_c,
        total: recon + cfg.lambda_c * contrastive,
        mean_positive_similarity: 0.0,
        step_lr: 0.0,
    }
}

/// Graph form of the weighted sum, for backpropagation.
pub fn total_loss_var<T: Element>(g: &mut Graph<T>, recon: Var, contrastive: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match contrastive {
        Some(c) if cfg.lambda_c != 0.0 => {
            let c = g.scale(c, T::lit(cfg.lambda_c))?;
            g.add(recon, c)
        }
        _ => Ok(recon),
    }
}

/// Mean squared error over every masked-patch element.
pub fn reconstruction_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if target.numel() == 0 {
        bail!(Degenerate, "no masked patches to reconstruct");
    }
    g.mse(pred, target)
}

/// Cosine of two vectors; a zero vector is an error rather than a silent 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Dimension, "cosine of vectors with lengths {} and {}", a.len(), b.len());
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        bail!(Similarity, "cosine similarity of a zero vector");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na.max(COSINE_EPS) * nb.max(COSINE_EPS))).clamp(-1.0, 1.0))
}

fn check_pair<T: Element>(g: &Graph<T>, online: Var, momentum: Var) -> Result<usize> {
    let (a, b) = (g.shape(online), g.shape(momentum));
    if a.len() != 2 || a != b {
        bail!(Dimension, "contrastive inputs must be equal [K, d] matrices, got {:?} and {:?}", a, b);
    }
    Ok(a[0])
}

/// InfoNCE: row `i` of `online` is pulled toward row `i` of `momentum` and pushed
/// from the other momentum rows. Returns the batch-mean cross-entropy.
pub fn info_nce<T: Element>(g: &mut Graph<T>, online: Var, momentum: Var, temperature: f64) -> Result<Var> {
    let k = check_pair(g, online, momentum)?;
    if k < 2 {
        bail!(Config, "InfoNCE needs at least 2 rows for a negative, got {}", k);
    }
    if !(temperature > 0.0) {
        bail!(Config, "temperature must be positive, got {}", temperature);
    }
    let on = g.normalize_rows(online, COSINE_EPS)?;
    let mo = g.normalize_rows(momentum, COSINE_EPS)?;
    let sim = g.matmul_nt(on, mo)?;
    let logits = g.scale(sim, T::lit(1.0 / temperature))?;
    let targets: Vec<usize> = (0..k).collect();
    g.cross_entropy(logits, &targets)
}

/// Mean over rows of `2 - 2 cos(online_i, momentum_i)`.
pub fn byol_style_loss<T: Element>(g: &mut Graph<T>, online: Var, momentum: Var) -> Result<Var> {
    let k = check_pair(g, online, momentum)?;
    if k == 0 {
        bail!(Degenerate, "BYOL-style loss over zero rows");
    }
    let on = g.normalize_rows(online, COSINE_EPS)?;
    let mo = g.normalize_rows(momentum, COSINE_EPS)?;
    let prod = g.mul(on, mo)?;
    let s = g.sum(prod)?;
    let s = g.scale(s, T::lit(-2.0 / k as f64))?;
    g.add_scalar(s, T::lit(2.0))
}

/// Dispatches on the configured contrastive form.
pub fn contrastive_loss<T: Element>(g: &mut Graph<T>, online: Var, momentum: Var, cfg: &LossConfig) -> Result<Var> {
    match cfg.form {
        ContrastiveForm::InfoNce => info_nce(g, online, momentum, cfg.temperature),
        ContrastiveForm::ByolStyle => byol_style_loss(g, online, momentum),
    }
}

/// Mean positive-pair cosine similarity, a diagnostic.
pub fn mean_positive_similarity<T: Element>(online: &Tensor<T>, momentum: &Tensor<T>) -> f64 {
    let d = online.last_dim();
    if d == 0 || online.numel() == 0 {
        return 0.0;
    }
    let (a, b) = (online.to_f64_vec(), momentum.to_f64_vec());
    let rows = a.len() / d;
    let sum: f64 = (0..rows)
        .map(|r| {
            let (x, y) = (&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]);
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
            dot / (nx * ny)
        })
        .sum();
    sum / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::{finite_diff_check, GradCheckOptions, ParamStore};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    fn pair(g: &mut Graph<f64>, on: &[f64], mo: &[f64], d: usize) -> (Var, Var) {
        let k = on.len() / d;
        let a = g.input(Tensor::from_f64(&[k, d], on).unwrap()).unwrap();
        let b = g.constant(Tensor::from_f64(&[k, d], mo).unwrap()).unwrap();
        (a, b)
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        let p = g.input(t.clone()).unwrap();
        let l = reconstruction_loss(&mut g, p, &t).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let shifted = Tensor::new(&[2, 3], t.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let p = g.input(shifted).unwrap();
        let l = reconstruction_loss(&mut g, p, &t).unwrap();
        assert!((scalar(&g, l) - 1.0).abs() < 1e-12);
        let empty = Tensor::<f64>::zeros(&[0, 3]);
        let e = g.input(empty.clone()).unwrap();
        assert!(matches!(reconstruction_loss(&mut g, e, &empty), Err(CmaeError::Degenerate(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(CmaeError::Similarity(_))));
    }

    #[test]
    fn info_nce_uniform_is_ln_k() {
        for k in [2usize, 4, 8] {
            let rows: Vec<f64> = (0..k).flat_map(|_| [0.6, -0.8, 0.0]).collect();
            let mut g = Graph::new();
            let (a, b) = pair(&mut g, &rows, &rows, 3);
            let l = info_nce(&mut g, a, b, 0.07).unwrap();
            assert!((scalar(&g, l) - (k as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn info_nce_two_by_two_hand_case() {
        let mut g = Graph::new();
        let (a, b) = pair(&mut g, &[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2);
        let l = info_nce(&mut g, a, b, 1.0).unwrap();
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((scalar(&g, l) - oracle).abs() < 1e-12);
        assert!((scalar(&g, l) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn info_nce_needs_two_rows() {
        let mut g = Graph::new();
        let (a, b) = pair(&mut g, &[1.0, 0.0], &[1.0, 0.0], 2);
        assert!(matches!(info_nce(&mut g, a, b, 0.07), Err(CmaeError::Config(_))));
    }

    #[test]
    fn info_nce_row_scale_invariant() {
        let mut rng = stream(0, Stream::Eval, &[]);
        let on: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let mo: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let mut scaled = on.clone();
        scaled[3..6].iter_mut().for_each(|v| *v *= 7.5);
        let mut g = Graph::new();
        let (a, b) = pair(&mut g, &on, &mo, 3);
        let l1 = info_nce(&mut g, a, b, 0.07).unwrap();
        let (a, b) = pair(&mut g, &scaled, &mo, 3);
        let l2 = info_nce(&mut g, a, b, 0.07).unwrap();
        assert!((scalar(&g, l1) - scalar(&g, l2)).abs() < 1e-10);
    }

    #[test]
    fn info_nce_gradient_flows_to_online_rows_only() {
        let mut g = Graph::new();
        let (a, b) = pair(&mut g, &[1.0, 0.2, -0.3, 1.0], &[0.9, 0.1, 0.0, 1.0], 2);
        let l = info_nce(&mut g, a, b, 0.07).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().iter().any(|v| *v != 0.0));
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn info_nce_k2_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("t", "online", Tensor::from_f64(&[2, 3], &[0.3, -1.1, 0.4, 0.9, 0.2, -0.5]).unwrap(), true, true).unwrap();
        let mo = Tensor::from_f64(&[2, 3], &[0.5, -0.7, 0.1, 0.3, 0.8, -0.2]).unwrap();
        let r = finite_diff_check(
            &mut store,
            &[id],
            |s, g| {
                let a = g.param(s, id)?;
                let b = g.constant(mo.clone())?;
                info_nce(g, a, b, 0.5)
            },
            &GradCheckOptions { coords_per_tensor: None, ..Default::default() },
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{}", r.max_relative_error);
    }

    #[test]
    fn byol_examples() {
        let mut g = Graph::new();
        let (a, b) = pair(&mut g, &[1.0, 2.0, -3.0, 0.5], &[1.0, 2.0, -3.0, 0.5], 2);
        let l = byol_style_loss(&mut g, a, b).unwrap();
        assert!(scalar(&g, l).abs() < 1e-12);
        let (a, b) = pair(&mut g, &[1.0, 2.0, -3.0, 0.5], &[-1.0, -2.0, 3.0, -0.5], 2);
        let l = byol_style_loss(&mut g, a, b).unwrap();
        assert!((scalar(&g, l) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn byol_random_rows_near_two() {
        let mut rng = stream(1, Stream::Eval, &[]);
        let (k, d) = (10_000usize, 64usize);
        let on: Vec<f64> = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
        let mo: Vec<f64> = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut g = Graph::new();
        let (a, b) = pair(&mut g, &on, &mo, d);
        let l = byol_style_loss(&mut g, a, b).unwrap();
        assert!((scalar(&g, l) - 2.0).abs() < 0.05);
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossConfig { lambda_c: 0.0, ..Default::default() };
        assert_eq!(total_loss(0.7, 3.2, &zero).total, 0.7);
        assert_eq!(total_loss(0.5, 1.5, &LossConfig::default()).total, 2.0);
        for w in [0.1, 0.5, 1.0, 1.5, 2.0] {
            let cfg = LossConfig { lambda_c: w, ..Default::default() };
            let b = total_loss(0.3, 1.7, &cfg);
            assert_eq!(b.total, 0.3 + w * 1.7);
        }
        assert!(LossConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("byol".parse::<ContrastiveForm>().unwrap(), ContrastiveForm::ByolStyle);
    }
}
