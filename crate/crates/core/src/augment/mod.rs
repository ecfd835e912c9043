//! View generation for the two branches.
//!
//! A source image is cropped and resized into a master image of `(w+p) x (h+p)`,
//! optionally flipped, then split into an online view at offset `(0, 0)` and a
//! momentum view at a random integer offset `(r_w, r_h)`. The momentum view alone
//! receives color transfer. Images are HWC `f32` in `[0, 1]`.

mod color;
mod mask;

pub use color::{color_transfer, Branch};
pub use mask::{masked_count, normalize_target, random_mask, MaskPlan, TARGET_EPS};

use rand::Rng;

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            bail!(Dimension, "image {}x{}x{} needs {} values, got {}", height, width, channels, height * width * channels, data.len());
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Axis-aligned sub-image with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            bail!(
                Dimension,
                "crop {}x{} at ({}, {}) exceeds {}x{} image",
                height,
                width,
                top,
                left,
                self.height,
                self.width
            );
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image { height, width, channels: c, data })
    }

    pub fn flip_horizontal(&self) -> Image {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let s = (y * self.width + x) * c;
                data.extend_from_slice(&self.data[s..s + c]);
            }
        }
        Image { data, ..*self }
    }
}

/// How the two views are derived from a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewMode {
    /// Shared master crop, integer-shifted views.
    PixelShift,
    /// Two independent resized random crops (the common contrastive recipe).
    RandomCrop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub target_w: usize,
    pub target_h: usize,
    pub shift_min: usize,
    /// Longest shift `p`; the master image is `(w+p) x (h+p)`.
    pub shift_max: usize,
    pub color_jitter_strength: f64,
    pub grayscale_prob: f64,
    pub mask_ratio_online: f64,
    pub mask_ratio_momentum: f64,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub view_mode: ViewMode,
    pub color_transfer: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_w: 32,
            target_h: 32,
            shift_min: 0,
            shift_max: 4,
            color_jitter_strength: 0.4,
            grayscale_prob: 0.2,
            mask_ratio_online: 0.75,
            mask_ratio_momentum: 0.0,
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            view_mode: ViewMode::PixelShift,
            color_transfer: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_w == 0 || self.target_h == 0 {
            bail!(Config, "target size must be positive");
        }
        if self.shift_min > self.shift_max {
            bail!(Config, "shift_min {} exceeds shift_max {}", self.shift_min, self.shift_max);
        }
        if self.shift_max >= self.target_w.min(self.target_h) {
            bail!(
                Config,
                "shift_max {} must be below the view size {} so the views overlap",
                self.shift_max,
                self.target_w.min(self.target_h)
            );
        }
        for (name, r) in [("mask_ratio_online", self.mask_ratio_online), ("mask_ratio_momentum", self.mask_ratio_momentum)] {
            if !(0.0..=1.0).contains(&r) {
                bail!(Config, "{} = {} outside [0, 1]", name, r);
            }
        }
        if !(0.0..=1.0).contains(&self.grayscale_prob) || !(0.0..=1.0).contains(&self.flip_prob) {
            bail!(Config, "probabilities must lie in [0, 1]");
        }
        if self.color_jitter_strength < 0.0 {
            bail!(Config, "color jitter strength {} is negative", self.color_jitter_strength);
        }
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
            bail!(Config, "invalid crop scale {:?} or ratio {:?}", self.crop_scale, self.crop_ratio);
        }
        Ok(())
    }

    pub fn master_size(&self) -> (usize, usize) {
        (self.target_h + self.shift_max, self.target_w + self.shift_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a resized-random-crop box: area fraction from `scale`, log-uniform aspect
/// ratio from `ratio`, ten attempts before falling back to a clamped center crop.
pub fn sample_crop_box<R: Rng>(height: usize, width: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut R) -> Result<CropBox> {
    if height == 0 || width == 0 {
        bail!(Input, "cannot crop a zero-area image ({}x{})", height, width);
    }
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(lr0..=lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return Ok(CropBox { top, left, height: h, width: w });
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (width, ((width as f64 / ratio.0).round() as usize).clamp(1, height))
    } else if in_ratio > ratio.1 {
        (((height as f64 * ratio.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    Ok(CropBox { top: (height - h) / 2, left: (width - w) / 2, height: h, width: w })
}

/// Bilinear resize of the `region` of `src` to `out_h x out_w` (half-pixel centers,
/// edges clamped). A same-size region is copied exactly.
pub fn resize_bilinear(src: &Image, region: CropBox, out_h: usize, out_w: usize) -> Result<Image> {
    if region.height == out_h && region.width == out_w {
        return src.crop(region.top, region.left, out_h, out_w);
    }
    if region.top + region.height > src.height || region.left + region.width > src.width || region.height == 0 || region.width == 0 {
        bail!(Input, "resize region {:?} invalid for {}x{} image", region, src.height, src.width);
    }
    let c = src.channels;
    let sy = region.height as f64 / out_h as f64;
    let sx = region.width as f64 / out_w as f64;
    let axis = |o: usize, s: f64, len: usize| -> (usize, usize, f32) {
        let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, region.height);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, sx, region.width);
            for ch in 0..c {
                let p = |y: usize, x: usize| src.at(region.top + y, region.left + x, ch);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image::new(out_h, out_w, c, data)
}

/// Resized random crop of `source` to the `(w+p) x (h+p)` master, then a horizontal
/// flip with probability `flip_prob` (shared by both views).
pub fn sample_master_crop<R: Rng>(source: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let (mh, mw) = cfg.master_size();
    let region = sample_crop_box(source.height, source.width, cfg.crop_scale, cfg.crop_ratio, rng)?;
    let master = resize_bilinear(source, region, mh, mw)?;
    Ok(if rng.gen_bool(cfg.flip_prob) { master.flip_horizontal() } else { master })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub online_view: Image,
    pub momentum_view: Image,
    pub r_w: usize,
    pub r_h: usize,
}

impl ViewPair {
    /// Pixels shared by the two views (for shifted views of one master).
    pub fn overlap_pixels(&self) -> usize {
        self.online_view.width.saturating_sub(self.r_w) * self.online_view.height.saturating_sub(self.r_h)
    }
}

/// Online view is `master[0:h, 0:w]`; the momentum view starts at `(r_h, r_w)` with
/// both offsets drawn independently and uniformly from `[shift_min, shift_max]`.
pub fn pixel_shift_views<R: Rng>(master: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewPair> {
    cfg.validate()?;
    let (mh, mw) = cfg.master_size();
    if master.height != mh || master.width != mw {
        bail!(Dimension, "master is {}x{}, expected {}x{}", master.height, master.width, mh, mw);
    }
    let r_w = rng.gen_range(cfg.shift_min..=cfg.shift_max);
    let r_h = rng.gen_range(cfg.shift_min..=cfg.shift_max);
    Ok(ViewPair {
        online_view: master.crop(0, 0, cfg.target_h, cfg.target_w)?,
        momentum_view: master.crop(r_h, r_w, cfg.target_h, cfg.target_w)?,
        r_w,
        r_h,
    })
}

/// Two independent resized random crops, each with its own flip.
pub fn random_crop_views<R: Rng>(source: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewPair> {
    cfg.validate()?;
    let view = |rng: &mut R| -> Result<Image> {
        let region = sample_crop_box(source.height, source.width, cfg.crop_scale, cfg.crop_ratio, rng)?;
        let img = resize_bilinear(source, region, cfg.target_h, cfg.target_w)?;
        Ok(if rng.gen_bool(cfg.flip_prob) { img.flip_horizontal() } else { img })
    };
    let online_view = view(rng)?;
    let momentum_view = view(rng)?;
    Ok(ViewPair { online_view, momentum_view, r_w: 0, r_h: 0 })
}

/// Full view pipeline for one source image: spatial views per `view_mode`, then color
/// transfer on the momentum view when enabled.
pub fn make_views<R: Rng>(source: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewPair> {
    let mut pair = match cfg.view_mode {
        ViewMode::PixelShift => {
            let master = sample_master_crop(source, cfg, rng)?;
            pixel_shift_views(&master, cfg, rng)?
        }
        ViewMode::RandomCrop => random_crop_views(source, cfg, rng)?,
    };
    if cfg.color_transfer {
        pair.momentum_view = color_transfer(&pair.momentum_view, cfg, Branch::Momentum, rng)?;
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[x as f32 / w as f32, y as f32 / h as f32, 0.5]);
            }
        }
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn master_size_tracks_shift() {
        let src = gradient_image(32, 32);
        let mut rng = stream(0, Stream::Augment, &[]);
        let m = sample_master_crop(&src, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!((m.height, m.width, m.channels), (36, 36, 3));
        let cfg = AugmentConfig { shift_max: 0, ..Default::default() };
        let m = sample_master_crop(&src, &cfg, &mut rng).unwrap();
        assert_eq!((m.height, m.width), (32, 32));
    }

    #[test]
    fn same_seed_same_crop_box() {
        let a = sample_crop_box(32, 32, (0.2, 1.0), (0.75, 4.0 / 3.0), &mut stream(5, Stream::Augment, &[1])).unwrap();
        let b = sample_crop_box(32, 32, (0.2, 1.0), (0.75, 4.0 / 3.0), &mut stream(5, Stream::Augment, &[1])).unwrap();
        assert_eq!(a, b);
        assert!(a.top + a.height <= 32 && a.left + a.width <= 32);
    }

    #[test]
    fn zero_area_source_rejected() {
        let src = Image::zeros(0, 0, 3);
        let r = sample_master_crop(&src, &AugmentConfig::default(), &mut stream(0, Stream::Augment, &[]));
        assert!(matches!(r, Err(crate::CmaeError::Input(_))));
    }

    #[test]
    fn zero_shift_gives_identical_views() {
        let cfg = AugmentConfig { shift_max: 0, ..Default::default() };
        let master = gradient_image(32, 32);
        let pair = pixel_shift_views(&master, &cfg, &mut stream(1, Stream::Augment, &[])).unwrap();
        assert_eq!((pair.r_w, pair.r_h), (0, 0));
        assert_eq!(pair.online_view, pair.momentum_view);
    }

    #[test]
    fn shifted_view_is_the_offset_crop() {
        let master = gradient_image(36, 36);
        let cfg = AugmentConfig::default();
        for seed in 0..50 {
            let pair = pixel_shift_views(&master, &cfg, &mut stream(seed, Stream::Augment, &[])).unwrap();
            assert_eq!(pair.momentum_view, master.crop(pair.r_h, pair.r_w, 32, 32).unwrap());
            assert_eq!(pair.online_view, master.crop(0, 0, 32, 32).unwrap());
        }
        let fixed = ViewPair {
            online_view: master.crop(0, 0, 32, 32).unwrap(),
            momentum_view: master.crop(3, 2, 32, 32).unwrap(),
            r_w: 2,
            r_h: 3,
        };
        assert_eq!(fixed.overlap_pixels(), 30 * 29);
    }

    #[test]
    fn shift_reaching_view_size_is_config_error() {
        let cfg = AugmentConfig { shift_max: 32, ..Default::default() };
        let master = gradient_image(64, 64);
        assert!(matches!(
            pixel_shift_views(&master, &cfg, &mut stream(0, Stream::Augment, &[])),
            Err(crate::CmaeError::Config(_))
        ));
    }

    #[test]
    fn identity_resize_is_exact_and_flip_involutive() {
        let img = gradient_image(8, 8);
        let full = CropBox { top: 0, left: 0, height: 8, width: 8 };
        assert_eq!(resize_bilinear(&img, full, 8, 8).unwrap(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        let up = resize_bilinear(&img, full, 16, 16).unwrap();
        assert!(up.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn random_crop_mode_outputs_target_size() {
        let cfg = AugmentConfig { view_mode: ViewMode::RandomCrop, ..Default::default() };
        let pair = make_views(&gradient_image(32, 32), &cfg, &mut stream(2, Stream::Augment, &[])).unwrap();
        assert_eq!((pair.online_view.height, pair.momentum_view.width), (32, 32));
    }
}
