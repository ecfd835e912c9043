use rand::Rng;

use super::{AugmentConfig, Image};
use crate::error::{bail, Result};

/// Which branch a view feeds. Color transfer is reserved for the momentum branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Online,
    Momentum,
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn jitter_factor<R: Rng>(strength: f64, rng: &mut R) -> f32 {
    let u: f64 = rng.gen();
    (1.0 + strength * (2.0 * u - 1.0)).max(0.0) as f32
}

/// Brightness, contrast and saturation jitter by factors in `[1-s, 1+s]`, then
/// grayscale with probability `grayscale_prob`. Values are clamped to `[0, 1]`
/// after every stage. A factor of exactly 1 leaves the image untouched.
pub fn color_transfer<R: Rng>(view: &Image, cfg: &AugmentConfig, branch: Branch, rng: &mut R) -> Result<Image> {
    if branch != Branch::Momentum {
        bail!(Usage, "color transfer is only applied to the momentum view");
    }
    if cfg.color_jitter_strength < 0.0 {
        bail!(Config, "color jitter strength {} is negative", cfg.color_jitter_strength);
    }
    if view.channels != 3 {
        bail!(Dimension, "color transfer needs RGB, got {} channels", view.channels);
    }
    let s = cfg.color_jitter_strength;
    let brightness = jitter_factor(s, rng);
    let contrast = jitter_factor(s, rng);
    let saturation = jitter_factor(s, rng);
    let gray = rng.gen_bool(cfg.grayscale_prob);

    let mut data = view.data.clone();
    if brightness != 1.0 {
        data.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let n = (data.len() / 3) as f32;
        let mean = data.chunks(3).map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / n;
        data.iter_mut().for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
    if saturation != 1.0 {
        for p in data.chunks_mut(3) {
            let l = luma(p[0], p[1], p[2]);
            p.iter_mut().for_each(|v| *v = ((*v - l) * saturation + l).clamp(0.0, 1.0));
        }
    }
    if gray {
        for p in data.chunks_mut(3) {
            let l = luma(p[0], p[1], p[2]).clamp(0.0, 1.0);
            p.fill(l);
        }
    }
    Image::new(view.height, view.width, 3, data)
}
