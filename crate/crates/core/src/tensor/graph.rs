//! Define-by-run reverse-mode automatic differentiation.
//!
//! Nodes are appended to an arena in creation order, so the arena order is already a
//! topological order and `backward` is a single reverse sweep that visits every node
//! once. Parameters are bound by [`ParamId`]; binding the same parameter twice in one
//! graph returns the same node, so shared weights accumulate their gradients.
//!
//! Reductions run serially in index order; results are bit-reproducible for a fixed
//! build and input.

use std::collections::HashMap;
use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

use super::{Element, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{bail, CmaeError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which GELU formula to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeluMode {
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`, used for training.
    #[default]
    Tanh,
    /// `x * Phi(x)` with the exact error function, used for oracle runs.
    Erf,
}

impl std::str::FromStr for GeluMode {
    type Err = CmaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(GeluMode::Tanh),
            "erf" => Ok(GeluMode::Erf),
            other => Err(CmaeError::Config(format!("unknown gelu mode `{other}` (tanh|erf)"))),
        }
    }
}

impl std::fmt::Display for GeluMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeluMode::Tanh => "tanh",
            GeluMode::Erf => "erf",
        })
    }
}

const GELU_TANH_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_TANH_A: f64 = 0.044715;

#[inline]
fn tanh_gate<T: Element>(x: T) -> T {
    let u = T::lit(GELU_TANH_C) * (x + T::lit(GELU_TANH_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu_forward<T: Element>(x: T, mode: GeluMode) -> T {
    let half = T::lit(0.5);
    match mode {
        // 0.5 (1 + tanh(u)) == sigmoid(2u)
        GeluMode::Tanh => x * tanh_gate(x),
        GeluMode::Erf => half * x * (T::one() + (x / T::lit(SQRT_2)).erf()),
    }
}

fn gelu_derivative<T: Element>(x: T, mode: GeluMode) -> T {
    let half = T::lit(0.5);
    match mode {
        GeluMode::Tanh => {
            let c = T::lit(GELU_TANH_C);
            let a = T::lit(GELU_TANH_A);
            let s = tanh_gate(x);
            // d/du sigmoid(2u) = 2 s (1 - s)
            s + x * T::lit(2.0) * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x)
        }
        GeluMode::Erf => {
            let cdf = half * (T::one() + (x / T::lit(SQRT_2)).erf());
            // phi(x) = exp(-x^2/2) / sqrt(2 pi)
            let pdf = (-(x * x) * half).exp() * T::lit(FRAC_2_SQRT_PI / (2.0 * SQRT_2));
            cdf + x * pdf
        }
    }
}

/// Scalar GELU, exposed for tests and reference code.
pub fn gelu_scalar<T: Element>(x: T, mode: GeluMode) -> T {
    gelu_forward(x, mode)
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    BatchMatMul { a: Var, b: Var, groups: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    Reshape { x: Var },
    Softmax { x: Var, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var, mode: GeluMode },
    Map { x: Var, derivative: fn(T) -> T },
    SplitHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    MeanRows { x: Var, groups: usize, rows: usize },
    Sum { x: Var },
    Mean { x: Var },
    NormalizeRows { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    MeanSquaredError { pred: Var, diff: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Map { .. } => "map",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::MeanRows { .. } => "mean_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanSquaredError { .. } => "mse",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient, kept on leaves and retained interior nodes.
    grad: Option<Vec<T>>,
    retain: bool,
    param: Option<ParamId>,
}

/// A computation graph rebuilt for every step.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new(), grad_enabled: true }
    }

    /// A graph whose leaves never require gradients (forward-only evaluation).
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Keeps the gradient of an interior node after backward, for inspection.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    /// Accumulated gradient of a leaf or retained node, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            bail!(NonFinite, "`{}` produced non-finite values", op.name());
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None, retain: false, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients (when the graph records them).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Binds a stored parameter. Non-trainable parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let rg = self.grad_enabled && p.trainable;
        let v = self.push(p.value.clone(), Op::Leaf, rg)?;
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// `a [m,k] x b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] x b^T` where `b` is stored `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            bail!(Dimension, "matmul expects rank-2 operands, got {:?} and {:?}", sa, sb);
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            bail!(Dimension, "matmul inner dimensions differ: {:?} x {:?}{}", sa, sb, if trans_b { "^T" } else { "" });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n, trans_b }, rg)
    }

    /// Batched `a [g,m,k] x b [g,k,n]` (or `b [g,n,k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            bail!(Dimension, "batch_matmul expects [g,m,k] and [g,k,n], got {:?} and {:?}", sa, sb);
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            bail!(Dimension, "batch_matmul inner dimensions differ: {:?} x {:?}", sa, sb);
        }
        let mut out = vec![T::zero(); groups * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for g in 0..groups {
            T::gemm(
                m,
                k,
                n,
                &av[g * m * k..(g + 1) * m * k],
                false,
                &bv[g * k * n..(g + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[g * m * n..(g + 1) * m * n],
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[groups, m, n], out)?, Op::BatchMatMul { a, b, groups, m, k, n, trans_b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "add shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out)?, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "mul shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out)?, Op::Mul { a, b }, rg)
    }

    /// Adds a vector along the trailing dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            bail!(Dimension, "bias {:?} does not match trailing dim {}", self.shape(bias), d);
        }
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += *b);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(&shape, out)?, Op::AddBias { x, bias }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|v| *v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|v| *v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::AddScalar { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {} out of range for {:?}", axis, shape);
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        if inner == 1 {
            for (row, o) in src.chunks_exact(len.max(1)).zip(out.chunks_exact_mut(len.max(1))) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (e, v) in o.iter_mut().zip(row) {
                    *e = (*v - max).exp();
                    sum += *e;
                }
                let inv = T::one() / sum;
                o.iter_mut().for_each(|e| *e *= inv);
            }
            let rg = self.rg(&[x]);
            return self.push(Tensor::new(&shape, out)?, Op::Softmax { x, len, inner }, rg);
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(src[at(l)]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x, len, inner }, rg)
    }

    /// Row-wise layer normalization over the trailing dimension followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = row_split(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            bail!(
                Dimension,
                "layer_norm gamma {:?} / beta {:?} must match trailing dim {}",
                self.shape(gamma),
                self.shape(beta),
                d
            );
        }
        if !(eps > 0.0) {
            bail!(Config, "layer_norm eps must be positive, got {eps}");
        }
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::lit(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn gelu(&mut self, x: Var, mode: GeluMode) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|v| gelu_forward(*v, mode)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::Gelu { x, mode }, rg)
    }

    /// User-defined elementwise function with its derivative.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, derivative: fn(T) -> T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::Map { x, derivative }, rg)
    }

    /// `[batch*tokens, heads*hd]` (or `[batch, tokens, heads*hd]`) to `[batch*heads, tokens, hd]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let numel = self.value(x).numel();
        let width = self.value(x).last_dim();
        if heads == 0 || width % heads != 0 || batch * tokens * width != numel {
            bail!(Dimension, "cannot split {:?} into {} heads over {}x{}", self.shape(x), heads, batch, tokens);
        }
        let hd = width / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); numel];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let s = (b * tokens + t) * width + h * hd;
                    let d = ((b * heads + h) * tokens + t) * hd;
                    out[d..d + hd].copy_from_slice(&src[s..s + hd]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[batch * heads, tokens, hd], out)?, Op::SplitHeads { x, batch, tokens, heads }, rg)
    }

    /// Inverse of [`Graph::split_heads`]; returns `[batch*tokens, heads*hd]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != batch * heads || shape[1] != tokens {
            bail!(Dimension, "cannot merge {:?} as {} heads over {}x{}", shape, heads, batch, tokens);
        }
        let hd = shape[2];
        let width = heads * hd;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let d = (b * tokens + t) * width + h * hd;
                    let s = ((b * heads + h) * tokens + t) * hd;
                    out[d..d + hd].copy_from_slice(&src[s..s + hd]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[batch * tokens, width], out)?, Op::MergeHeads { x, batch, tokens, heads }, rg)
    }

    /// Selects rows (trailing-dim vectors); indices may repeat. Output is `[len, d]`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = row_split(self.shape(x));
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            bail!(Dimension, "gather index {} out of range for {} rows", bad, rows);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[indices.len(), d], out)?, Op::GatherRows { x, indices: indices.to_vec() }, rg)
    }

    /// Stacks the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = row_split(self.shape(a));
        let (rb, db) = row_split(self.shape(b));
        if da != db {
            bail!(Dimension, "concat_rows widths differ: {} vs {}", da, db);
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[ra + rb, da], out)?, Op::ConcatRows { a, b }, rg)
    }

    /// Mean over the middle axis of `[groups, rows, d]`, giving `[groups, d]`.
    pub fn mean_rows(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (total, d) = row_split(self.shape(x));
        if groups == 0 || total % groups != 0 || total == 0 {
            bail!(Dimension, "cannot mean-pool {:?} into {} groups", self.shape(x), groups);
        }
        let rows = total / groups;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups * d];
        let inv = T::one() / T::lit(rows as f64);
        for g in 0..groups {
            let acc = &mut out[g * d..(g + 1) * d];
            for r in 0..rows {
                let row = &src[(g * rows + r) * d..(g * rows + r + 1) * d];
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
            }
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[groups, d], out)?, Op::MeanRows { x, groups, rows }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            bail!(Degenerate, "mean of an empty tensor");
        }
        let s: T = self.value(x).data().iter().copied().sum::<T>() / T::lit(n as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Scales each row to unit L2 norm; the norm is floored at `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, d) = row_split(self.shape(x));
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(T::lit(eps));
            norms[r] = n;
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::NormalizeRows { x, norms }, rg)
    }

    /// Mean softmax cross-entropy of `logits [rows, classes]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            bail!(Dimension, "cross_entropy logits {:?} vs {} targets", shape, targets.len());
        }
        let (rows, classes) = (shape[0], shape[1]);
        if let Some(t) = targets.iter().find(|&&t| t >= classes) {
            bail!(Dimension, "target {} out of range for {} classes", t, classes);
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|v| (*v - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let loss = total / T::lit(rows as f64);
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg)
    }

    /// Mean of squared differences against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            bail!(Dimension, "mse shapes differ: {:?} vs {:?}", self.shape(pred), target.shape());
        }
        let n = target.numel();
        if n == 0 {
            bail!(Degenerate, "mse over zero elements");
        }
        let diff: Vec<T> = self.value(pred).data().iter().zip(target.data()).map(|(p, t)| *p - *t).collect();
        let loss = diff.iter().map(|d| *d * *d).sum::<T>() / T::lit(n as f64);
        let rg = self.rg(&[pred]);
        self.push(Tensor::scalar(loss), Op::MeanSquaredError { pred, diff }, rg)
    }

    /// Populates leaf gradients of `root`. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            bail!(Usage, "backward needs a scalar root, got shape {:?}", self.shape(root));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].retain {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        fn slot<'a, T: Element>(grads: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        let len_of = |v: Var| nodes[v.0].value.numel();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                if wants(a) {
                    let da = slot(grads, a, m * k);
                    // dA = dC . B'^T
                    T::gemm(m, n, k, g, false, val(b), !trans_b, T::one(), da);
                }
                if wants(b) {
                    let db = slot(grads, b, k * n);
                    if trans_b {
                        // B stored [n,k]: dB = dC^T . A
                        T::gemm(n, m, k, g, true, val(a), false, T::one(), db);
                    } else {
                        T::gemm(k, m, n, val(a), true, g, false, T::one(), db);
                    }
                }
            }
            &Op::BatchMatMul { a, b, groups, m, k, n, trans_b } => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    let da = slot(grads, a, groups * m * k);
                    for gi in 0..groups {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            false,
                            &bv[gi * k * n..(gi + 1) * k * n],
                            !trans_b,
                            T::one(),
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                }
                if wants(b) {
                    let db = slot(grads, b, groups * k * n);
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let aa = &av[gi * m * k..(gi + 1) * m * k];
                        let dd = &mut db[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gg, true, aa, false, T::one(), dd);
                        } else {
                            T::gemm(k, m, n, aa, true, gg, false, T::one(), dd);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += *x);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let bv = val(b);
                    slot(grads, a, g.len()).iter_mut().enumerate().for_each(|(j, d)| *d += g[j] * bv[j]);
                }
                if wants(b) {
                    let av = val(a);
                    slot(grads, b, g.len()).iter_mut().enumerate().for_each(|(j, d)| *d += g[j] * av[j]);
                }
            }
            &Op::AddBias { x, bias } => {
                if wants(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += *v);
                }
                if wants(bias) {
                    let d = len_of(bias);
                    let db = slot(grads, bias, d);
                    for row in g.chunks_exact(d.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if wants(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += *v * factor);
                }
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                if wants(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += *v);
                }
            }
            &Op::Softmax { x, len, inner } => {
                if wants(x) {
                    let y = nodes[i].value.data();
                    let outer = y.len() / (len * inner).max(1);
                    let dx = slot(grads, x, y.len());
                    if inner == 1 {
                        let l = len.max(1);
                        for ((yr, gr), dr) in y.chunks_exact(l).zip(g.chunks_exact(l)).zip(dx.chunks_exact_mut(l)) {
                            let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d += *yv * (*gv - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + ii;
                            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                dx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = len_of(*gamma);
                let rows = rstd.len();
                if wants(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for (row, h) in g.chunks_exact(d.max(1)).zip(xhat.chunks_exact(d.max(1))) {
                        dg.iter_mut().zip(row.iter().zip(h)).for_each(|(a, (v, x))| *a += *v * *x);
                    }
                }
                if wants(*beta) {
                    let db = slot(grads, *beta, d);
                    for row in g.chunks_exact(d.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
                    }
                }
                if wants(*x) {
                    let gv = val(*gamma);
                    let inv_d = T::one() / T::lit(d as f64);
                    let dx = slot(grads, *x, rows * d);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dhh = dxhat.iter().zip(hr).map(|(a, b)| *a * *b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            &Op::Gelu { x, mode } => {
                if wants(x) {
                    let xv = val(x);
                    slot(grads, x, g.len())
                        .iter_mut()
                        .enumerate()
                        .for_each(|(j, d)| *d += g[j] * gelu_derivative(xv[j], mode));
                }
            }
            &Op::Map { x, derivative } => {
                if wants(x) {
                    let xv = val(x);
                    slot(grads, x, g.len()).iter_mut().enumerate().for_each(|(j, d)| *d += g[j] * derivative(xv[j]));
                }
            }
            &Op::SplitHeads { x, batch, tokens, heads } => {
                if wants(x) {
                    let width = len_of(x) / (batch * tokens).max(1);
                    let hd = width / heads;
                    let dx = slot(grads, x, g.len());
                    for b in 0..batch {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let s = (b * tokens + t) * width + h * hd;
                                let d = ((b * heads + h) * tokens + t) * hd;
                                dx[s..s + hd].iter_mut().zip(&g[d..d + hd]).for_each(|(a, v)| *a += *v);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, batch, tokens, heads } => {
                if wants(x) {
                    let width = g.len() / (batch * tokens).max(1);
                    let hd = width / heads;
                    let dx = slot(grads, x, g.len());
                    for b in 0..batch {
                        for t in 0..tokens {
                            for h in 0..heads {
                                let d = (b * tokens + t) * width + h * hd;
                                let s = ((b * heads + h) * tokens + t) * hd;
                                dx[s..s + hd].iter_mut().zip(&g[d..d + hd]).for_each(|(a, v)| *a += *v);
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                if wants(*x) {
                    let d = if indices.is_empty() { 0 } else { g.len() / indices.len() };
                    let dx = slot(grads, *x, len_of(*x));
                    for (r, &src) in indices.iter().enumerate() {
                        dx[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, v)| *a += *v);
                    }
                }
            }
            &Op::ConcatRows { a, b } => {
                let na = len_of(a);
                if wants(a) {
                    slot(grads, a, na).iter_mut().zip(&g[..na]).for_each(|(d, v)| *d += *v);
                }
                if wants(b) {
                    slot(grads, b, g.len() - na).iter_mut().zip(&g[na..]).for_each(|(d, v)| *d += *v);
                }
            }
            &Op::MeanRows { x, groups, rows } => {
                if wants(x) {
                    let d = g.len() / groups;
                    let inv = T::one() / T::lit(rows as f64);
                    let dx = slot(grads, x, groups * rows * d);
                    for gi in 0..groups {
                        for r in 0..rows {
                            let base = (gi * rows + r) * d;
                            for j in 0..d {
                                dx[base + j] += g[gi * d + j] * inv;
                            }
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if wants(x) {
                    let n = len_of(x);
                    slot(grads, x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if wants(x) {
                    let n = len_of(x);
                    let s = g[0] / T::lit(n as f64);
                    slot(grads, x, n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let rows = norms.len();
                    let d = if rows == 0 { 0 } else { y.len() / rows };
                    let dx = slot(grads, *x, y.len());
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let rows = targets.len();
                    let classes = probs.len() / rows;
                    let s = g[0] / T::lit(rows as f64);
                    let dl = slot(grads, *logits, probs.len());
                    for r in 0..rows {
                        for c in 0..classes {
                            let onehot = if c == targets[r] { T::one() } else { T::zero() };
                            dl[r * classes + c] += s * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::MeanSquaredError { pred, diff } => {
                if wants(*pred) {
                    let s = g[0] * T::lit(2.0) / T::lit(diff.len() as f64);
                    slot(grads, *pred, diff.len()).iter_mut().zip(diff).for_each(|(d, v)| *d += s * *v);
                }
            }
        }
    }

    /// Gradients of every bound trainable parameter that backward reached.
    pub fn param_grads(&self) -> Gradients<T> {
        let mut out = Gradients::default();
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                out.accumulate(id, g);
            }
        }
        out
    }

    /// The node bound to `id` in this graph, if any.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }
}
