//! Stochastic view generation for distillation and replay.
//!
//! Ops run in the fixed order crop, flip, colour jitter, grayscale. Jitter
//! factors follow the usual `(brightness, contrast, saturation, hue)` reading:
//! brightness, contrast and saturation factors are drawn from
//! `[1 - s, 1 + s]` and the hue shift from `[-h, h]` turns of the colour wheel.

use ndarray::{s, Array4, ArrayViewMut3, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugStrategy {
    #[default]
    Full,
    Partial,
}

impl std::str::FromStr for AugStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AugStrategy::Full),
            "partial" => Ok(AugStrategy::Partial),
            _ => Err(Error::InvalidValue(format!("augmentation strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    pub strategy: AugStrategy,
    pub jitter: ColorJitter,
    pub p_jitter: f64,
    pub p_gray: f64,
    pub p_flip: f64,
    pub p_crop: f64,
    /// Zero padding of the random crop as a fraction of the side length.
    pub crop_pad_frac: f64,
}

impl AugPolicy {
    pub fn new(strategy: AugStrategy) -> Self {
        let jitter = ColorJitter {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        };
        match strategy {
            AugStrategy::Full => AugPolicy {
                strategy,
                jitter,
                p_jitter: 0.8,
                p_gray: 0.2,
                p_flip: 0.5,
                p_crop: 1.0,
                crop_pad_frac: 0.125,
            },
            AugStrategy::Partial => AugPolicy {
                strategy,
                jitter,
                p_jitter: 0.0,
                p_gray: 0.0,
                p_flip: 0.5,
                p_crop: 0.5,
                crop_pad_frac: 0.125,
            },
        }
    }

    /// Policy whose every op is disabled.
    pub fn identity() -> Self {
        AugPolicy {
            p_jitter: 0.0,
            p_gray: 0.0,
            p_flip: 0.0,
            p_crop: 0.0,
            crop_pad_frac: 0.0,
            ..AugPolicy::new(AugStrategy::Full)
        }
    }
}

/// Returns an augmented copy of `images` (`[B, C, H, W]`, values in `[0, 1]`).
pub fn augment(images: &Array4<f32>, policy: &AugPolicy, rng: &mut Rng) -> Array4<f32> {
    let mut out = images.to_owned();
    let (_, _, h, w) = out.dim();
    let pad_h = (policy.crop_pad_frac * h as f64).round() as usize;
    let pad_w = (policy.crop_pad_frac * w as f64).round() as usize;
    for mut img in out.axis_iter_mut(Axis(0)) {
        if rng.random_bool(policy.p_crop) && (pad_h > 0 || pad_w > 0) {
            let dy = rng.random_range(0..=2 * pad_h) as isize - pad_h as isize;
            let dx = rng.random_range(0..=2 * pad_w) as isize - pad_w as isize;
            shift(&mut img, dy, dx);
        }
        if rng.random_bool(policy.p_flip) {
            let flipped = img.slice(s![.., .., ..;-1]).to_owned();
            img.assign(&flipped);
        }
        if rng.random_bool(policy.p_jitter) {
            let j = policy.jitter;
            let mut factor = |s: f32| 1.0 + s * (2.0 * rng.random::<f32>() - 1.0);
            let b = factor(j.brightness);
            let c = factor(j.contrast);
            let s = factor(j.saturation);
            let hue = j.hue * (2.0 * rng.random::<f32>() - 1.0);
            color_jitter(&mut img, b, c, s, hue);
        }
        if rng.random_bool(policy.p_gray) {
            grayscale(&mut img);
        }
    }
    out
}

/// Translates the image content by `(dy, dx)`, filling with zeros. This is a
/// crop of the zero-padded image at offset `(pad - dy, pad - dx)`.
fn shift(img: &mut ArrayViewMut3<f32>, dy: isize, dx: isize) {
    let src = img.to_owned();
    let (c, h, w) = src.dim();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize - dy;
                let sx = x as isize - dx;
                img[[ch, y, x]] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[[ch, sy as usize, sx as usize]]
                } else {
                    0.0
                };
            }
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn grayscale(img: &mut ArrayViewMut3<f32>) {
    let (c, h, w) = img.dim();
    if c != 3 {
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let l = luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            for ch in 0..3 {
                img[[ch, y, x]] = l;
            }
        }
    }
}

fn color_jitter(img: &mut ArrayViewMut3<f32>, brightness: f32, contrast: f32, saturation: f32, hue: f32) {
    img.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    let (c, h, w) = img.dim();
    let mean = if c == 3 {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += luma(img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            }
        }
        acc / (h * w) as f32
    } else {
        img.mean().unwrap_or(0.0)
    };
    img.mapv_inplace(|v| (contrast * v + (1.0 - contrast) * mean).clamp(0.0, 1.0));
    if c != 3 {
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
            let l = luma(r, g, b);
            let mut rgb = [r, g, b].map(|v| (saturation * v + (1.0 - saturation) * l).clamp(0.0, 1.0));
            if hue != 0.0 {
                let (hh, s, v) = rgb_to_hsv(rgb);
                rgb = hsv_to_rgb(((hh + hue).rem_euclid(1.0), s, v));
            }
            for ch in 0..3 {
                img[[ch, y, x]] = rgb[ch].clamp(0.0, 1.0);
            }
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb((h, s, v): (f32, f32, f32)) -> [f32; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{self, Stream};
    use proptest::prelude::*;

    fn images(seed: u64) -> Array4<f32> {
        let mut rng = seed::rng(seed, Stream::Dataset);
        Array4::from_shape_fn((4, 3, 8, 8), |_| rng.random::<f32>())
    }

    #[test]
    fn identity_policy_is_identity() {
        let x = images(0);
        let y = augment(&x, &AugPolicy::identity(), &mut seed::rng(0, Stream::MkdAug));
        assert_eq!(x, y);
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let policy = AugPolicy {
            p_gray: 1.0,
            ..AugPolicy::identity()
        };
        let y = augment(&images(1), &policy, &mut seed::rng(0, Stream::MkdAug));
        for img in y.axis_iter(Axis(0)) {
            assert_eq!(img.index_axis(Axis(0), 0), img.index_axis(Axis(0), 1));
            assert_eq!(img.index_axis(Axis(0), 1), img.index_axis(Axis(0), 2));
        }
    }

    #[test]
    fn fixed_rng_is_deterministic() {
        let x = images(2);
        let policy = AugPolicy::new(AugStrategy::Full);
        let a = augment(&x, &policy, &mut seed::rng(5, Stream::MkdAug));
        let b = augment(&x, &policy, &mut seed::rng(5, Stream::MkdAug));
        let c = augment(&x, &policy, &mut seed::rng(6, Stream::MkdAug));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn flip_reverses_columns() {
        let policy = AugPolicy {
            p_flip: 1.0,
            ..AugPolicy::identity()
        };
        let x = images(3);
        let y = augment(&x, &policy, &mut seed::rng(0, Stream::MkdAug));
        assert_eq!(y[[1, 2, 3, 0]], x[[1, 2, 3, 7]]);
        assert_eq!(y[[0, 0, 5, 6]], x[[0, 0, 5, 1]]);
    }

    #[test]
    fn partial_never_touches_colour() {
        // crop and flip only permute pixels or insert zeros
        let x = Array4::from_elem((6, 3, 8, 8), 0.7f32);
        let y = augment(&x, &AugPolicy::new(AugStrategy::Partial), &mut seed::rng(1, Stream::MkdAug));
        assert!(y.iter().all(|&v| v == 0.7 || v == 0.0));
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for (a, b) in rgb.iter().zip(back) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn shape_and_range_preserved(seed in 0u64..500, full in any::<bool>()) {
            let x = images(seed);
            let strategy = if full { AugStrategy::Full } else { AugStrategy::Partial };
            let y = augment(&x, &AugPolicy::new(strategy), &mut seed::rng(seed, Stream::BaselineAug));
            prop_assert_eq!(x.dim(), y.dim());
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
