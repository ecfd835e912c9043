//! The two-branch model: an online encoder on visible patches with pixel and feature
//! decoders, and an EMA-tracked momentum encoder on the full view.

mod ema;

pub use ema::{ema_update, EmaState};

use crate::augment::MaskPlan;
use crate::error::{bail, Result};
use crate::nn::{mlp_head, patchify, sincos_pos_embed, HeadMode, HeadParams, Linear, PatchEmbed, TransformerStack, VitConfig};
use crate::rng::{stream, trunc_normal, Stream};
use crate::tensor::{Element, GeluMode, Graph, ParamId, ParamStore, Tensor, Var};

pub const ONLINE_ENCODER: &str = "online_encoder";
pub const MOMENTUM_ENCODER: &str = "momentum_encoder";
pub const PIXEL_DECODER: &str = "pixel_decoder";
pub const FEATURE_DECODER: &str = "feature_decoder";
pub const MASK_TOKEN: &str = "mask_token";
pub const ONLINE_HEADS: &str = "online_heads";
pub const MOMENTUM_HEADS: &str = "momentum_heads";

/// Groups trained by the optimizer.
pub const ONLINE_GROUPS: [&str; 5] = [ONLINE_ENCODER, PIXEL_DECODER, FEATURE_DECODER, MASK_TOKEN, ONLINE_HEADS];
/// Groups updated only by EMA.
pub const MOMENTUM_GROUPS: [&str; 2] = [MOMENTUM_ENCODER, MOMENTUM_HEADS];

#[derive(Debug, Clone, PartialEq)]
pub struct CmaeConfig {
    pub encoder: VitConfig,
    /// Pixel-decoder width; a linear neck is added when it differs from the encoder.
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub pdec_depth: usize,
    /// Feature-decoder depth; 0 pools the online encoder output directly.
    pub fdec_depth: usize,
    /// Feature decoder reuses the first `fdec_depth` pixel-decoder blocks.
    pub share_decoder: bool,
    /// Give the feature decoder its own mask token.
    pub separate_mask_tokens: bool,
    pub contrast_dim: usize,
    pub ema_mu: f64,
    pub gelu: GeluMode,
}

impl CmaeConfig {
    pub fn desk() -> Self {
        let encoder = VitConfig::desk();
        CmaeConfig {
            decoder_dim: encoder.dim,
            decoder_heads: encoder.heads,
            encoder,
            pdec_depth: 4,
            fdec_depth: 2,
            share_decoder: false,
            separate_mask_tokens: false,
            contrast_dim: 64,
            ema_mu: 0.996,
            gelu: GeluMode::Tanh,
        }
    }

    /// Gradient-check scale, 64-bit friendly: exact GELU.
    pub fn tiny() -> Self {
        let encoder = VitConfig::tiny();
        CmaeConfig {
            decoder_dim: encoder.dim,
            decoder_heads: encoder.heads,
            encoder,
            pdec_depth: 2,
            fdec_depth: 2,
            share_decoder: false,
            separate_mask_tokens: false,
            contrast_dim: 8,
            ema_mu: 0.996,
            gelu: GeluMode::Erf,
        }
    }

    pub fn decoder_vit(&self) -> VitConfig {
        VitConfig { dim: self.decoder_dim, heads: self.decoder_heads, depth: self.pdec_depth, ..self.encoder.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder_vit().validate()?;
        if self.share_decoder && self.fdec_depth > self.pdec_depth {
            bail!(Config, "shared feature decoder depth {} exceeds pixel decoder depth {}", self.fdec_depth, self.pdec_depth);
        }
        if self.share_decoder && self.fdec_depth > 0 && self.decoder_dim != self.encoder.dim {
            bail!(Config, "sharing decoder blocks needs decoder_dim == encoder dim");
        }
        if self.contrast_dim == 0 {
            bail!(Config, "contrast_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_mu) {
            bail!(Config, "ema_mu {} outside [0, 1]", self.ema_mu);
        }
        Ok(())
    }
}

/// Patch embedding, fixed positions, transformer stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch: PatchEmbed,
    pub stack: TransformerStack,
}

impl Encoder {
    fn new<T: Element, R: rand::Rng>(store: &mut ParamStore<T>, group: &str, cfg: &VitConfig, rng: &mut R) -> Result<Self> {
        Ok(Encoder {
            patch: PatchEmbed::new(store, group, cfg, rng)?,
            stack: TransformerStack::new(store, group, cfg.depth, cfg.dim, cfg.heads, cfg.mlp_ratio, rng)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.patch.params();
        p.extend(self.stack.params());
        p
    }
}

/// Number of visible tokens shared by every plan in the batch.
pub fn visible_count(plans: &[MaskPlan]) -> Result<usize> {
    let Some(first) = plans.first() else { bail!(Degenerate, "empty batch") };
    let nv = first.visible.len();
    if plans.iter().any(|p| p.visible.len() != nv || p.n != first.n) {
        bail!(Dimension, "mask plans in one batch must have equal visible counts");
    }
    if nv == 0 {
        bail!(Degenerate, "mask plan leaves no visible patches");
    }
    Ok(nv)
}

/// Rows of `[batch, n, d]` selected per image, stacked image-major into `[rows, d]`.
pub fn gather_per_image<T: Element>(x: &Tensor<T>, select: &[&[usize]]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != select.len() {
        bail!(Dimension, "cannot gather {:?} rows for {} images", s, select.len());
    }
    let (n, d) = (s[1], s[2]);
    let src = x.data();
    let total: usize = select.iter().map(|r| r.len()).sum();
    let mut out = Vec::with_capacity(total * d);
    for (b, rows) in select.iter().enumerate() {
        for &r in rows.iter() {
            if r >= n {
                bail!(Dimension, "row {} out of range for {} tokens", r, n);
            }
            let o = (b * n + r) * d;
            out.extend_from_slice(&src[o..o + d]);
        }
    }
    Tensor::new(&[total, d], out)
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    pub neck: Option<Linear>,
    pub stack: TransformerStack,
    pub pred: Linear,
}

#[derive(Debug, Clone)]
pub enum FeatureDecoder {
    /// Depth 0: mean of the online encoder output.
    Pool,
    Own(TransformerStack),
    /// First `depth` blocks and the final norm of the pixel decoder.
    Shared { depth: usize },
}

#[derive(Debug, Clone)]
pub struct CmaeModel {
    pub cfg: CmaeConfig,
    pub online: Encoder,
    pub momentum: Encoder,
    pub pixel_decoder: PixelDecoder,
    pub feature_decoder: FeatureDecoder,
    pub mask_token: ParamId,
    pub feature_mask_token: ParamId,
    pub online_heads: HeadParams,
    pub momentum_heads: HeadParams,
    pub ema: EmaState,
    encoder_pos: Tensor<f64>,
    decoder_pos: Tensor<f64>,
}

impl CmaeModel {
    /// Registers every parameter in `store` and clones the online encoder and
    /// projection into the momentum branch.
    pub fn new<T: Element>(cfg: &CmaeConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, Stream::Init, &[]);
        let enc = &cfg.encoder;
        let dec = cfg.decoder_vit();
        let n = enc.num_patches();

        let online = Encoder::new(store, ONLINE_ENCODER, enc, &mut rng)?;
        let neck = if cfg.decoder_dim != enc.dim {
            Some(Linear::new(store, PIXEL_DECODER, "neck", enc.dim, cfg.decoder_dim, &mut rng)?)
        } else {
            None
        };
        let pixel_decoder = PixelDecoder {
            neck,
            stack: TransformerStack::new(store, PIXEL_DECODER, cfg.pdec_depth, dec.dim, dec.heads, dec.mlp_ratio, &mut rng)?,
            pred: Linear::new(store, PIXEL_DECODER, "pred", dec.dim, enc.patch_pixels(), &mut rng)?,
        };
        let feature_decoder = match (cfg.fdec_depth, cfg.share_decoder) {
            (0, _) => FeatureDecoder::Pool,
            (d, true) => FeatureDecoder::Shared { depth: d },
            (d, false) => {
                FeatureDecoder::Own(TransformerStack::new(store, FEATURE_DECODER, d, enc.dim, enc.heads, enc.mlp_ratio, &mut rng)?)
            }
        };
        let mut token = |store: &mut ParamStore<T>, name: &str, dim: usize| -> Result<ParamId> {
            let v: Vec<T> = (0..dim).map(|_| T::lit(trunc_normal(&mut rng, crate::nn::INIT_STD))).collect();
            store.register(MASK_TOKEN, name, Tensor::new(&[1, dim], v)?, true, false)
        };
        let mask_token = token(store, "pixel", cfg.decoder_dim)?;
        let feature_mask_token = if cfg.separate_mask_tokens || cfg.decoder_dim != enc.dim {
            token(store, "feature", enc.dim)?
        } else {
            mask_token
        };
        let online_heads = HeadParams::new(store, ONLINE_HEADS, enc.dim, cfg.contrast_dim, true, &mut rng)?;
        let momentum = Encoder::new(store, MOMENTUM_ENCODER, enc, &mut rng)?;
        let momentum_heads = HeadParams::new(store, MOMENTUM_HEADS, enc.dim, cfg.contrast_dim, false, &mut rng)?;

        let mut ema = EmaState::new(cfg.ema_mu, MOMENTUM_GROUPS.iter().map(|s| s.to_string()).collect())?;
        let targets = momentum.params().into_iter().chain(momentum_heads.projection.params());
        let sources = online.params().into_iter().chain(online_heads.projection.params());
        for (t, s) in targets.zip(sources) {
            store.set_trainable(t, false);
            ema.bind(t, s);
        }
        ema.copy_sources(store)?;

        let encoder_pos = Tensor::from_f64(&[n, enc.dim], &sincos_pos_embed(n, enc.dim)?)?;
        let decoder_pos = Tensor::from_f64(&[n, cfg.decoder_dim], &sincos_pos_embed(n, cfg.decoder_dim)?)?;
        Ok(CmaeModel {
            cfg: cfg.clone(),
            online,
            momentum,
            pixel_decoder,
            feature_decoder,
            mask_token,
            feature_mask_token,
            online_heads,
            momentum_heads,
            ema,
            encoder_pos,
            decoder_pos,
        })
    }

    pub fn encoder_pos(&self) -> &Tensor<f64> {
        &self.encoder_pos
    }

    fn check_images<T: Element>(&self, images: &Tensor<T>, plans: &[MaskPlan]) -> Result<usize> {
        let e = &self.cfg.encoder;
        let s = images.shape();
        if s.len() != 4 || s[1] != e.image_size || s[2] != e.image_size || s[3] != e.channels {
            bail!(Config, "images {:?} do not match {}x{}x{}", s, e.image_size, e.image_size, e.channels);
        }
        if plans.len() != s[0] {
            bail!(Dimension, "{} mask plans for {} images", plans.len(), s[0]);
        }
        if plans.iter().any(|p| p.n != e.num_patches()) {
            bail!(Dimension, "mask plan size differs from {} patches", e.num_patches());
        }
        visible_count(plans)
    }

    /// Visible patches projected and offset by their positional embeddings:
    /// `[batch * n_visible, dim]`.
    pub fn embed_visible<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        encoder: &Encoder,
        images: &Tensor<T>,
        plans: &[MaskPlan],
    ) -> Result<Var> {
        self.check_images(images, plans)?;
        let e = &self.cfg.encoder;
        let patches = patchify(images, e.patch_size)?;
        let select: Vec<&[usize]> = plans.iter().map(|p| p.visible.as_slice()).collect();
        let rows = gather_per_image(&patches, &select)?;
        let x = g.constant(rows)?;
        let tokens = encoder.patch.proj.forward(g, store, x)?;
        let pos = self.position_rows::<T>(&self.encoder_pos, &select)?;
        let pos = g.constant(pos)?;
        g.add(tokens, pos)
    }

    fn position_rows<T: Element>(&self, table: &Tensor<f64>, select: &[&[usize]]) -> Result<Tensor<T>> {
        let (n, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(select.iter().map(|s| s.len()).sum::<usize>() * d);
        for rows in select {
            for &r in rows.iter() {
                if r >= n {
                    bail!(Dimension, "position {} out of range for {} patches", r, n);
                }
                out.extend(table.data()[r * d..(r + 1) * d].iter().map(|v| T::lit(*v)));
            }
        }
        Tensor::new(&[out.len() / d, d], out)
    }

    /// `z_s^v`: online encoder output on visible tokens, `[batch * n_visible, dim]`.
    pub fn online_encode<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>, plans: &[MaskPlan]) -> Result<Var> {
        let nv = visible_count(plans)?;
        let x = self.embed_visible(g, store, &self.online, images, plans)?;
        self.online.stack.forward(g, store, x, plans.len(), nv, self.cfg.gelu)
    }

    /// `z^t`: momentum encoder output mean-pooled per image, `[batch, dim]`. The
    /// momentum tensors are not trainable, so they enter any graph as constants.
    pub fn momentum_encode<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>, plans: &[MaskPlan]) -> Result<Var> {
        let nv = visible_count(plans)?;
        let x = self.embed_visible(g, store, &self.momentum, images, plans)?;
        let z = self.momentum.stack.forward(g, store, x, plans.len(), nv, self.cfg.gelu)?;
        g.mean_rows(z, plans.len())
    }

    /// Full-length decoder input: visible latents and mask tokens scattered back to
    /// their patch positions, plus the decoder positional table. `[batch * N, width]`.
    pub fn decoder_sequence<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_visible: Var,
        plans: &[MaskPlan],
        token: ParamId,
        neck: Option<&Linear>,
    ) -> Result<Var> {
        let nv = visible_count(plans)?;
        let b = plans.len();
        let n = self.cfg.encoder.num_patches();
        if g.shape(z_visible)[0] != b * nv {
            bail!(Dimension, "latents {:?} do not match {} images x {} visible", g.shape(z_visible), b, nv);
        }
        let z = match neck {
            Some(l) => l.forward(g, store, z_visible)?,
            None => z_visible,
        };
        let tok = g.param(store, token)?;
        let width = g.shape(tok)[1];
        if g.shape(z)[1] != width {
            bail!(Dimension, "latent width {} differs from mask token width {}", g.shape(z)[1], width);
        }
        let mask_row = b * nv;
        let mut index = vec![mask_row; b * n];
        for (bi, plan) in plans.iter().enumerate() {
            for (rank, &p) in plan.visible.iter().enumerate() {
                index[bi * n + p] = bi * nv + rank;
            }
        }
        let stacked = g.concat_rows(z, tok)?;
        let seq = g.gather_rows(stacked, &index)?;
        let table = if width == self.cfg.decoder_dim { &self.decoder_pos } else { &self.encoder_pos };
        let all: Vec<usize> = (0..n).collect();
        let select: Vec<&[usize]> = vec![all.as_slice(); b];
        let pos = g.constant(self.position_rows::<T>(table, &select)?)?;
        g.add(seq, pos)
    }

    /// Pixel-decoder tokens after the final norm, before the pixel projection.
    pub fn pixel_decoder_tokens<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z_visible: Var, plans: &[MaskPlan]) -> Result<Var> {
        let seq = self.decoder_sequence(g, store, z_visible, plans, self.mask_token, self.pixel_decoder.neck.as_ref())?;
        let n = self.cfg.encoder.num_patches();
        self.pixel_decoder.stack.forward(g, store, seq, plans.len(), n, self.cfg.gelu)
    }

    fn select_masked<T: Element>(&self, g: &mut Graph<T>, pixels: Var, plans: &[MaskPlan]) -> Result<Var> {
        let n = self.cfg.encoder.num_patches();
        let index: Vec<usize> = plans.iter().enumerate().flat_map(|(b, p)| p.masked.iter().map(move |&m| b * n + m)).collect();
        g.gather_rows(pixels, &index)
    }

    /// `y'_m`: predicted pixels of masked patches only, `[batch * N_m, patch_pixels]`.
    pub fn pixel_decode<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z_visible: Var, plans: &[MaskPlan]) -> Result<Var> {
        let tokens = self.pixel_decoder_tokens(g, store, z_visible, plans)?;
        let pixels = self.pixel_decoder.pred.forward(g, store, tokens)?;
        self.select_masked(g, pixels, plans)
    }

    /// Feature-decoder tokens after its final norm (`None` for the depth-0 pool).
    pub fn feature_decoder_tokens<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_visible: Var,
        plans: &[MaskPlan],
    ) -> Result<Option<Var>> {
        let n = self.cfg.encoder.num_patches();
        let b = plans.len();
        let gelu = self.cfg.gelu;
        match &self.feature_decoder {
            FeatureDecoder::Pool => Ok(None),
            FeatureDecoder::Own(stack) => {
                let seq = self.decoder_sequence(g, store, z_visible, plans, self.feature_mask_token, None)?;
                Ok(Some(stack.forward(g, store, seq, b, n, gelu)?))
            }
            FeatureDecoder::Shared { depth } => {
                let stack = &self.pixel_decoder.stack;
                let seq = self.decoder_sequence(g, store, z_visible, plans, self.feature_mask_token, None)?;
                let x = stack.forward_range(g, store, seq, b, n, gelu, 0, *depth)?;
                Ok(Some(stack.norm.forward(g, store, x)?))
            }
        }
    }

    /// `y_s`: feature-decoder output mean-pooled over all N tokens, `[batch, dim]`.
    /// At depth 0 the online encoder output is pooled over the visible tokens.
    pub fn feature_decode<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z_visible: Var, plans: &[MaskPlan]) -> Result<Var> {
        match self.feature_decoder_tokens(g, store, z_visible, plans)? {
            Some(t) => g.mean_rows(t, plans.len()),
            None => g.mean_rows(z_visible, plans.len()),
        }
    }

    /// Both decoders. When the feature decoder is the whole shared pixel stack with
    /// the same mask token, its tokens are the pixel tokens and are computed once.
    pub fn decode_both<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z_visible: Var, plans: &[MaskPlan]) -> Result<(Var, Var)> {
        let reuse = matches!(self.feature_decoder, FeatureDecoder::Shared { depth } if depth == self.cfg.pdec_depth)
            && self.feature_mask_token == self.mask_token;
        let tokens = self.pixel_decoder_tokens(g, store, z_visible, plans)?;
        let pixels = self.pixel_decoder.pred.forward(g, store, tokens)?;
        let pred = self.select_masked(g, pixels, plans)?;
        let pooled = if reuse { g.mean_rows(tokens, plans.len())? } else { self.feature_decode(g, store, z_visible, plans)? };
        Ok((pred, pooled))
    }

    /// `(y_s^p, z_t^p)`: prediction(projection(y_s)) online, projection(z_t) on the
    /// momentum side.
    pub fn contrastive_pair<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, y_s: Var, z_t: Var) -> Result<(Var, Var)> {
        let online = mlp_head(g, store, y_s, &self.online_heads, HeadMode::ProjectionThenPrediction, self.cfg.gelu)?;
        let momentum = mlp_head(g, store, z_t, &self.momentum_heads, HeadMode::Projection, self.cfg.gelu)?;
        Ok((online, momentum))
    }

    /// Momentum-branch contrastive targets `z_t^p`, evaluated in a gradient-free graph.
    pub fn momentum_targets<T: Element>(&self, store: &ParamStore<T>, images: &Tensor<T>, plans: &[MaskPlan]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let z = self.momentum_encode(&mut g, store, images, plans)?;
        let p = mlp_head(&mut g, store, z, &self.momentum_heads, HeadMode::Projection, self.cfg.gelu)?;
        Ok(g.value(p).clone())
    }

    /// Every trainable (online-side) tensor.
    pub fn online_params<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.iter().filter(|(_, p)| ONLINE_GROUPS.contains(&p.group.as_str())).map(|(id, _)| id).collect()
    }

    /// Every EMA-tracked tensor.
    pub fn momentum_params(&self) -> Vec<ParamId> {
        self.ema.pairs.iter().map(|(t, _)| *t).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::random_mask;
    use rand::Rng;

    fn images(b: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, Stream::Eval, &[]);
        Tensor::new(&[b, size, size, 3], (0..b * size * size * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn plans(b: usize, n: usize, ratio: f64, seed: u64) -> Vec<MaskPlan> {
        (0..b).map(|i| random_mask(n, ratio, &mut stream(seed, Stream::Augment, &[i as u64])).unwrap()).collect()
    }

    fn desk_f64() -> (CmaeModel, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let cfg = CmaeConfig { gelu: GeluMode::Erf, ..CmaeConfig::desk() };
        let m = CmaeModel::new(&cfg, &mut store, 0).unwrap();
        (m, store)
    }

    #[test]
    fn online_encode_token_counts() {
        let (m, store) = desk_f64();
        let imgs = images(2, 32, 1);
        let mut g = Graph::new();
        let z = m.online_encode(&mut g, &store, &imgs, &plans(2, 64, 0.75, 0)).unwrap();
        assert_eq!(g.shape(z), &[2 * 16, 64]);
        let z = m.online_encode(&mut g, &store, &imgs, &plans(2, 64, 0.0, 0)).unwrap();
        assert_eq!(g.shape(z), &[2 * 64, 64]);
        let bad = vec![MaskPlan::from_masked(64, &(0..64).collect::<Vec<_>>()).unwrap(); 2];
        assert!(matches!(m.online_encode(&mut g, &store, &imgs, &bad), Err(crate::CmaeError::Degenerate(_))));
    }

    #[test]
    fn pixel_decode_shape_and_indicator() {
        let (m, store) = desk_f64();
        let imgs = images(2, 32, 2);
        let p = plans(2, 64, 0.75, 1);
        let mut g = Graph::new();
        let z = m.online_encode(&mut g, &store, &imgs, &p).unwrap();
        let y = m.pixel_decode(&mut g, &store, z, &p).unwrap();
        assert_eq!(g.shape(y), &[2 * 48, 48]);
        let y_s = m.feature_decode(&mut g, &store, z, &p).unwrap();
        assert_eq!(g.shape(y_s), &[2, 64]);
    }

    #[test]
    fn zero_decoder_weights_predict_zero() {
        let (m, mut store) = desk_f64();
        for id in m.pixel_decoder.pred.params() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = plans(1, 64, 0.75, 3);
        let mut g = Graph::new();
        let z = m.online_encode(&mut g, &store, &images(1, 32, 3), &p).unwrap();
        let y = m.pixel_decode(&mut g, &store, z, &p).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn momentum_starts_as_online_copy_and_pools_the_same() {
        let (m, store) = desk_f64();
        for &(t, s) in &m.ema.pairs {
            assert_eq!(store.value(t), store.value(s));
            assert!(!store.get(t).trainable);
        }
        let imgs = images(3, 32, 4);
        let full = plans(3, 64, 0.0, 0);
        let mut g = Graph::new();
        let z = m.online_encode(&mut g, &store, &imgs, &full).unwrap();
        let pooled_online = g.mean_rows(z, 3).unwrap();
        let pooled_momentum = m.momentum_encode(&mut g, &store, &imgs, &full).unwrap();
        let (a, b) = (g.value(pooled_online).data(), g.value(pooled_momentum).data());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
        assert!(!g.requires_grad(pooled_momentum));
    }

    #[test]
    fn shared_decoder_tokens_match_pixel_tokens() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CmaeConfig { share_decoder: true, fdec_depth: 4, gelu: GeluMode::Erf, ..CmaeConfig::desk() };
        let m = CmaeModel::new(&cfg, &mut store, 7).unwrap();
        assert!(store.group(FEATURE_DECODER).ids.is_empty());
        let p = plans(2, 64, 0.75, 5);
        let mut g = Graph::new();
        let z = m.online_encode(&mut g, &store, &images(2, 32, 5), &p).unwrap();
        let a = m.pixel_decoder_tokens(&mut g, &store, z, &p).unwrap();
        let b = m.feature_decoder_tokens(&mut g, &store, z, &p).unwrap().unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn depth_zero_pools_visible_latents() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CmaeConfig { fdec_depth: 0, gelu: GeluMode::Erf, ..CmaeConfig::desk() };
        let m = CmaeModel::new(&cfg, &mut store, 1).unwrap();
        let p = plans(2, 64, 0.75, 6);
        let mut g = Graph::new();
        let z = m.online_encode(&mut g, &store, &images(2, 32, 6), &p).unwrap();
        let y = m.feature_decode(&mut g, &store, z, &p).unwrap();
        let zv = g.value(z).data().to_vec();
        for j in 0..64 {
            let mean = (0..16).map(|r| zv[r * 64 + j]).sum::<f64>() / 16.0;
            assert!((g.value(y).data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_sharing_rejected() {
        let cfg = CmaeConfig { share_decoder: true, fdec_depth: 6, ..CmaeConfig::desk() };
        assert!(CmaeModel::new(&cfg, &mut ParamStore::<f32>::new(), 0).is_err());
    }

    #[test]
    fn decoder_neck_supported() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CmaeConfig { decoder_dim: 32, decoder_heads: 2, gelu: GeluMode::Erf, ..CmaeConfig::desk() };
        let m = CmaeModel::new(&cfg, &mut store, 0).unwrap();
        let p = plans(2, 64, 0.75, 8);
        let mut g = Graph::new();
        let z = m.online_encode(&mut g, &store, &images(2, 32, 8), &p).unwrap();
        let (pred, pooled) = m.decode_both(&mut g, &store, z, &p).unwrap();
        assert_eq!(g.shape(pred), &[96, 48]);
        assert_eq!(g.shape(pooled), &[2, 64]);
    }
}
