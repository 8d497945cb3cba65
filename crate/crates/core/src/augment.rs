//! Stochastic view generation: random crop + resize, colour distortion and
//! Gaussian blur, applied in that order.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Tile;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Area fraction of the crop window, drawn uniformly.
    pub crop_scale_range: (f64, f64),
    pub jitter: ColorJitter,
    pub blur_sigma_range: (f64, f64),
    pub blur_apply_prob: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_range: (0.2, 1.0),
            jitter: ColorJitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
            },
            blur_sigma_range: (0.1, 1.0),
            blur_apply_prob: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A pipeline that returns its input unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale_range: (1.0, 1.0),
            jitter: ColorJitter::NONE,
            blur_sigma_range: (1.0, 1.0),
            blur_apply_prob: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale_range(self.crop_scale_range)?;
        let j = self.jitter;
        for (name, v, max) in [
            ("brightness", j.brightness, 1.0),
            ("contrast", j.contrast, 1.0),
            ("saturation", j.saturation, 1.0),
            ("hue", j.hue, 0.5),
        ] {
            if !(0.0..=max).contains(&v) {
                return Err(Error::Config(format!("{name} jitter {v} outside [0, {max}]")));
            }
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid blur sigma range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.blur_apply_prob) {
            return Err(Error::Config(format!(
                "blur probability {} outside [0, 1]",
                self.blur_apply_prob
            )));
        }
        Ok(())
    }
}

fn check_scale_range((lo, hi): (f64, f64)) -> Result<()> {
    if lo > 0.0 && lo <= hi && hi <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")))
    }
}

/// Square source window in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
}

pub fn sample_crop_window(side: usize, scale_range: (f64, f64), rng: &mut Rng) -> Result<CropWindow> {
    check_scale_range(scale_range)?;
    let (lo, hi) = scale_range;
    let area = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let size = side as f64 * area.sqrt();
    let slack = side as f64 - size;
    let (x0, y0) = if slack > 0.0 {
        (rng.random_range(0.0..=slack), rng.random_range(0.0..=slack))
    } else {
        (0.0, 0.0)
    };
    Ok(CropWindow { x0, y0, size })
}

/// Resamples `window` of `tile` back to full size with bilinear interpolation.
pub fn crop_resize(tile: &Tile, window: CropWindow) -> Tile {
    let side = tile.side();
    let step = window.size / side as f64;
    let max = (side - 1) as f64;
    let coords: Vec<(usize, usize, f64)> = (0..side)
        .map(|i| {
            let p = (window.x0 + (i as f64 + 0.5) * step - 0.5).clamp(0.0, max);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(side - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect();
    let rows: Vec<(usize, usize, f64)> = (0..side)
        .map(|i| {
            let p = (window.y0 + (i as f64 + 0.5) * step - 0.5).clamp(0.0, max);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(side - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect();

    let mut out = Tile::filled(side, 0.0);
    for c in 0..Tile::CHANNELS {
        let src = tile.plane(c);
        let dst = out.plane_mut(c);
        for (y, &(y0, y1, ty)) in rows.iter().enumerate() {
            for (x, &(x0, x1, tx)) in coords.iter().enumerate() {
                let a = src[y0 * side + x0];
                let b = src[y0 * side + x1];
                let top = a + tx * (b - a);
                let a = src[y1 * side + x0];
                let b = src[y1 * side + x1];
                let bottom = a + tx * (b - a);
                dst[y * side + x] = top + ty * (bottom - top);
            }
        }
    }
    out
}

pub fn random_crop_resize(tile: &Tile, rng: &mut Rng, scale_range: (f64, f64)) -> Result<Tile> {
    if tile.side() < 4 {
        return Err(Error::Shape(format!("tile side {} below 4", tile.side())));
    }
    let window = sample_crop_window(tile.side(), scale_range, rng)?;
    Ok(crop_resize(tile, window))
}

fn clamp_all(tile: &mut Tile) {
    for v in tile.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn adjust_brightness(tile: &mut Tile, factor: f64) {
    for v in tile.data_mut() {
        *v *= factor;
    }
    clamp_all(tile);
}

/// Blends each pixel with the tile's mean luma.
pub fn adjust_contrast(tile: &mut Tile, factor: f64) {
    let n = tile.side() * tile.side();
    let mean = (0..n)
        .map(|p| luma(tile.plane(0)[p], tile.plane(1)[p], tile.plane(2)[p]))
        .sum::<f64>()
        / n as f64;
    for v in tile.data_mut() {
        *v = mean + (*v - mean) * factor;
    }
    clamp_all(tile);
}

/// Blends each pixel with its own luma.
pub fn adjust_saturation(tile: &mut Tile, factor: f64) {
    let n = tile.side() * tile.side();
    for p in 0..n {
        let (r, g, b) = (tile.plane(0)[p], tile.plane(1)[p], tile.plane(2)[p]);
        let l = luma(r, g, b);
        for (c, v) in [r, g, b].into_iter().enumerate() {
            tile.plane_mut(c)[p] = l + (v - l) * factor;
        }
    }
    clamp_all(tile);
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns, wrapping around.
pub fn adjust_hue(tile: &mut Tile, shift: f64) {
    let n = tile.side() * tile.side();
    for p in 0..n {
        let (h, s, v) = rgb_to_hsv(tile.plane(0)[p], tile.plane(1)[p], tile.plane(2)[p]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        tile.plane_mut(0)[p] = r;
        tile.plane_mut(1)[p] = g;
        tile.plane_mut(2)[p] = b;
    }
    clamp_all(tile);
}

/// Brightness, contrast, saturation, then hue; each factor uniform within
/// its strength. Zero strengths are skipped entirely.
pub fn color_distort(tile: &Tile, rng: &mut Rng, strengths: &ColorJitter) -> Tile {
    let mut out = tile.clone();
    if strengths.brightness > 0.0 {
        let s = strengths.brightness;
        adjust_brightness(&mut out, rng.random_range(1.0 - s..=1.0 + s));
    }
    if strengths.contrast > 0.0 {
        let s = strengths.contrast;
        adjust_contrast(&mut out, rng.random_range(1.0 - s..=1.0 + s));
    }
    if strengths.saturation > 0.0 {
        let s = strengths.saturation;
        adjust_saturation(&mut out, rng.random_range(1.0 - s..=1.0 + s));
    }
    if strengths.hue > 0.0 {
        let s = strengths.hue;
        adjust_hue(&mut out, rng.random_range(-s..=s));
    }
    out
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blur sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    Ok(k)
}

/// Half-sample symmetric index (`-1 -> 0`, `n -> n - 1`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_blur(tile: &Tile, sigma: f64) -> Result<Tile> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let side = tile.side();
    let n = side as i64;
    let mut tmp = vec![0.0; side * side];
    let mut out = Tile::filled(side, 0.0);
    for c in 0..Tile::CHANNELS {
        let src = tile.plane(c);
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (t, w) in kernel.iter().enumerate() {
                    let xx = reflect(x as i64 + t as i64 - radius, n);
                    acc += w * src[y * side + xx];
                }
                tmp[y * side + x] = acc;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (t, w) in kernel.iter().enumerate() {
                    let yy = reflect(y as i64 + t as i64 - radius, n);
                    acc += w * tmp[yy * side + x];
                }
                dst[y * side + x] = acc;
            }
        }
    }
    Ok(out)
}

pub fn apply_augmentation(tile: &Tile, config: &AugmentConfig, rng: &mut Rng) -> Result<Tile> {
    let cropped = random_crop_resize(tile, rng, config.crop_scale_range)?;
    let mut out = color_distort(&cropped, rng, &config.jitter);
    if config.blur_apply_prob > 0.0 && rng.random_bool(config.blur_apply_prob) {
        let (lo, hi) = config.blur_sigma_range;
        let sigma = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        out = gaussian_blur(&out, sigma)?;
        clamp_all(&mut out);
    }
    Ok(out)
}
