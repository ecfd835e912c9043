use rand::Rng;

use super::{LayerNorm, Linear};
use crate::error::{bail, Result};
use crate::tensor::{Element, GeluMode, Graph, ParamId, ParamStore, Var};

/// Multi-head self-attention with separate q/k/v projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        group: &str,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            bail!(Config, "dim {} not divisible by {} heads", dim, heads);
        }
        Ok(Attention {
            q: Linear::new(store, group, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, group, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, group, &format!("{name}.v"), dim, dim, rng)?,
            proj: Linear::new(store, group, &format!("{name}.proj"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x` is `[batch*tokens, dim]`. Returns the projected output and the attention
    /// probabilities `[batch*heads, tokens, tokens]`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        tokens: usize,
    ) -> Result<(Var, Var)> {
        let dim = self.q.out_dim;
        let hd = dim / self.heads;
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let q = g.split_heads(q, batch, tokens, self.heads)?;
        let k = g.split_heads(k, batch, tokens, self.heads)?;
        let v = g.split_heads(v, batch, tokens, self.heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::lit(1.0 / (hd as f64).sqrt()))?;
        let attn = g.softmax(scores, 2)?;
        let out = g.batch_matmul(attn, v, false)?;
        let out = g.merge_heads(out, batch, tokens, self.heads)?;
        Ok((self.proj.forward(g, store, out)?, attn))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.proj].iter().flat_map(|l| l.params()).collect()
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        group: &str,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::new(store, group, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, group, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, group, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, group, &format!("{name}.fc1"), dim, dim * mlp_ratio, rng)?,
            fc2: Linear::new(store, group, &format!("{name}.fc2"), dim * mlp_ratio, dim, rng)?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        tokens: usize,
        gelu: GeluMode,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, batch, tokens, gelu)?.0)
    }

    /// Like [`Block::forward`] but also returns the attention probabilities.
    pub fn forward_traced<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        tokens: usize,
        gelu: GeluMode,
    ) -> Result<(Var, Var)> {
        let h = self.norm1.forward(g, store, x)?;
        let (a, attn) = self.attn.forward(g, store, h, batch, tokens)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h, gelu)?;
        let h = self.fc2.forward(g, store, h)?;
        Ok((g.add(x, h)?, attn))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }
}

/// A stack of blocks followed by one final LayerNorm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        group: &str,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(store, group, &format!("blocks.{i}"), dim, heads, mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerStack { blocks, norm: LayerNorm::new(store, group, "norm", dim)? })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs blocks `[from, to)` without the final norm.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_range<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        batch: usize,
        tokens: usize,
        gelu: GeluMode,
        from: usize,
        to: usize,
    ) -> Result<Var> {
        if from > to || to > self.blocks.len() {
            bail!(Config, "block range {}..{} invalid for depth {}", from, to, self.blocks.len());
        }
        for block in &self.blocks[from..to] {
            x = block.forward(g, store, x, batch, tokens, gelu)?;
        }
        Ok(x)
    }

    /// All blocks, then the final norm.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        tokens: usize,
        gelu: GeluMode,
    ) -> Result<Var> {
        let x = self.forward_range(g, store, x, batch, tokens, gelu, 0, self.blocks.len())?;
        self.norm.forward(g, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.norm.params());
        p
    }
}
