//! Central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, ParamId, ParamStore, Var};
use crate::error::{bail, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; `None` checks all of them.
    pub coords_per_tensor: Option<usize>,
    /// Denominator floor for the relative error, so exact zeros compare cleanly.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, coords_per_tensor: Some(8), abs_floor: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Name and coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<(String, f64)>,
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against `(f(θ+ε) − f(θ−ε)) / 2ε` on the listed
/// parameters. `loss_fn` builds a fresh graph from the store and returns the scalar
/// loss; it must be deterministic.
pub fn finite_diff_check<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    mut loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Element,
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let loss = loss_fn(store, &mut g)?;
        g.backward(loss)?;
        g.param_grads()
    };

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(store, &mut g)?;
        Ok(g.value(loss).item().as_f64())
    };

    let base = eval(store)?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        bail!(Oracle, "loss function is not deterministic: {base} vs {again}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, coords_checked: 0, per_tensor: Vec::new() };
    let eps = T::lit(opts.eps);
    for &id in params {
        let name = store.get(id).name.clone();
        let n = store.value(id).numel();
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut tensor_max = 0.0f64;
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[c] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[c] = orig;
            // Effective step after rounding of orig +- eps.
            let step = ((orig + eps) - (orig - eps)).as_f64();
            let numeric = (plus? - minus?) / step;
            let a = analytic.get(id).map(|g| g[c].as_f64()).unwrap_or(0.0);
            let err = relative_error(a, numeric, opts.abs_floor);
            report.coords_checked += 1;
            tensor_max = tensor_max.max(err);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), c));
            }
        }
        report.per_tensor.push((name, tensor_max));
    }
    Ok(report)
}
