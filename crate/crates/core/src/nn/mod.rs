//! ViT building blocks. Layer structs only hold [`ParamId`]s, so one layout serves
//! both float widths; values live in a [`ParamStore`].

mod block;
mod head;
mod patch;

pub use block::{Attention, Block, TransformerStack};
pub use head::{mlp_head, HeadMode, HeadParams, MlpStack};
pub use patch::{patch_embed, patchify, sincos_pos_embed, unpatchify, PatchEmbed, TokenBatch};

use rand::Rng;

use crate::error::{bail, Result};
use crate::rng::trunc_normal;
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// Geometry of a vision transformer encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    /// Desk-scale default: 32x32 RGB, patch 4, width 64, 4 blocks, 4 heads.
    pub fn desk() -> Self {
        VitConfig { image_size: 32, patch_size: 4, channels: 3, dim: 64, depth: 4, heads: 4, mlp_ratio: 4 }
    }

    /// Gradient-check scale: 16x16 images, patch 4 (16 patches), width 16, 2 blocks.
    pub fn tiny() -> Self {
        VitConfig { image_size: 16, patch_size: 4, channels: 3, dim: 16, depth: 2, heads: 2, mlp_ratio: 2 }
    }

    /// ViT-Small shaped preset (224 pixels, patch 16).
    pub fn small() -> Self {
        VitConfig { image_size: 224, patch_size: 16, channels: 3, dim: 384, depth: 12, heads: 6, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Config, "image size {} not divisible by patch size {}", self.image_size, self.patch_size);
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            bail!(Config, "dim {} not divisible by {} heads", self.dim, self.heads);
        }
        if self.dim % 4 != 0 {
            bail!(Config, "dim {} must be a multiple of 4 for 2-D sine-cosine positions", self.dim);
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            bail!(Config, "channels and mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Fully connected layer `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        group: &str,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w: Vec<T> = (0..in_dim * out_dim).map(|_| T::lit(trunc_normal(rng, INIT_STD))).collect();
        Self::with_weights(store, group, name, in_dim, out_dim, w)
    }

    /// Glorot-uniform weights, `U(-a, a)` with `a = sqrt(6 / (in + out))`. Used for the
    /// MLP heads, whose stacked layers would shrink a 0.02-std signal to near zero.
    pub fn xavier<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        group: &str,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<T> = (0..in_dim * out_dim).map(|_| T::lit(rng.gen_range(-a..a))).collect();
        Self::with_weights(store, group, name, in_dim, out_dim, w)
    }

    fn with_weights<T: Element>(store: &mut ParamStore<T>, group: &str, name: &str, in_dim: usize, out_dim: usize, w: Vec<T>) -> Result<Self> {
        let weight = store.register(group, &format!("{name}.weight"), Tensor::new(&[in_dim, out_dim], w)?, true, true)?;
        let bias = store.register(group, &format!("{name}.bias"), Tensor::zeros(&[out_dim]), true, false)?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    /// `x` is `[rows, in_dim]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, group: &str, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.register(group, &format!("{name}.gamma"), Tensor::full(&[dim], T::one()), true, false)?;
        let beta = store.register(group, &format!("{name}.beta"), Tensor::zeros(&[dim]), true, false)?;
        Ok(LayerNorm { gamma, beta, dim })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
