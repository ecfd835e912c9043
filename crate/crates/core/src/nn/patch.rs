use rand::Rng;

use super::{Linear, VitConfig};
use crate::error::{bail, Result};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};

/// Tokens of a batch plus the source patch position of every token.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `[batch * n_tokens, dim]`, image-major.
    pub tokens: Var,
    pub batch: usize,
    pub n_tokens: usize,
    pub positions: Vec<Vec<usize>>,
}

/// Linear patch projection.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, group: &str, cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(PatchEmbed { proj: Linear::new(store, group, "patch_embed", cfg.patch_pixels(), cfg.dim, rng)? })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.proj.params()
    }
}

/// `[batch, H, W, C]` images to `[batch, N, P*P*C]` patches. Patches are ordered
/// row-major over the grid; pixels inside a patch are ordered (row, col, channel).
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != s[2] {
        bail!(Dimension, "patchify expects square [batch, H, W, C] images, got {:?}", s);
    }
    let (b, size, c) = (s[0], s[1], s[3]);
    if patch == 0 || size % patch != 0 {
        bail!(Config, "image size {} not divisible by patch size {}", size, patch);
    }
    let grid = size / patch;
    let pp = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((bi * size + y) * size + gx * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b, grid * grid, pp], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(patches: &Tensor<T>, patch: usize, channels: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 3 || s[2] != patch * patch * channels {
        bail!(Dimension, "unpatchify got {:?} for patch {} and {} channels", s, patch, channels);
    }
    let (b, n) = (s[0], s[1]);
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        bail!(Dimension, "{} patches do not form a square grid", n);
    }
    let size = grid * patch;
    let src = patches.data();
    let mut out = vec![T::zero(); b * size * size * channels];
    let mut k = 0;
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ((bi * size + y) * size + gx * patch) * channels;
                    out[start..start + patch * channels].copy_from_slice(&src[k..k + patch * channels]);
                    k += patch * channels;
                }
            }
        }
    }
    Tensor::new(&[b, size, size, channels], out)
}

/// Embeds every patch of every image; tokens come out in row-major patch order.
pub fn patch_embed<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    cfg: &VitConfig,
    embed: &PatchEmbed,
) -> Result<TokenBatch> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.channels {
        bail!(Config, "images {:?} do not match configured {}x{}x{}", s, cfg.image_size, cfg.image_size, cfg.channels);
    }
    let batch = s[0];
    let n = cfg.num_patches();
    let patches = patchify(images, cfg.patch_size)?.reshape(&[batch * n, cfg.patch_pixels()])?;
    let x = g.constant(patches)?;
    let tokens = embed.proj.forward(g, store, x)?;
    Ok(TokenBatch { tokens, batch, n_tokens: n, positions: vec![(0..n).collect(); batch] })
}

fn sincos_1d(dim: usize, positions: &[f64]) -> Vec<Vec<f64>> {
    let half = dim / 2;
    positions
        .iter()
        .map(|&p| {
            let mut row = Vec::with_capacity(dim);
            let omegas: Vec<f64> = (0..half).map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64)).collect();
            row.extend(omegas.iter().map(|w| (p * w).sin()));
            row.extend(omegas.iter().map(|w| (p * w).cos()));
            row
        })
        .collect()
}

/// Fixed 2-D sine-cosine table `[n_positions, dim]` over a square grid. The first
/// half of each row encodes the column, the second half the row.
pub fn sincos_pos_embed(n_positions: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        bail!(Config, "positional embedding dim {} must be even", dim);
    }
    if dim % 4 != 0 {
        bail!(Config, "2-D positional embedding dim {} must be a multiple of 4", dim);
    }
    let grid = (n_positions as f64).sqrt().round() as usize;
    if grid * grid != n_positions {
        bail!(Config, "{} positions do not form a square grid", n_positions);
    }
    let coords: Vec<f64> = (0..grid).map(|v| v as f64).collect();
    let table = sincos_1d(dim / 2, &coords);
    let mut out = Vec::with_capacity(n_positions * dim);
    for row in 0..grid {
        for col in 0..grid {
            out.extend_from_slice(&table[col]);
            out.extend_from_slice(&table[row]);
        }
    }
    Ok(out)
}
