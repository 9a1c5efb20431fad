//! Training-time augmentation and input normalization.
//!
//! Images are `H×W×3` arrays in `[0, 1]`, masks `H×W` arrays in `{0, 1}`.
//! The pipeline is geometric (image and mask together) → color (image only)
//! → normalize. All draws come from a [`SampleRng`] keyed by
//! `(seed, epoch, sample index)`, so a sample is reproducible bit-for-bit
//! regardless of the order samples are processed in.
//!
//! Geometric parameters are drawn in the order: horizontal flip, vertical
//! flip, scale, shear, rotation, x translation, y translation. Color
//! parameters: brightness, contrast, saturation, hue, blur sigma.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::interp::axis_taps;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("image is {image:?} but mask is {mask:?}")]
    ShapeMismatch { image: (usize, usize), mask: (usize, usize) },
    #[error("zero-sized image or target size")]
    ZeroDimension,
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
    pub shear_deg: [f64; 2],
    pub translate_px: [f64; 2],
    pub rotate_deg: [f64; 2],
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    pub hue_factor: [f64; 2],
    pub blur_kernel: usize,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: [0.5, 1.5],
            shear_deg: [-22.5, 22.5],
            translate_px: [-48.0, 48.0],
            rotate_deg: [-180.0, 180.0],
            brightness: [0.6, 1.4],
            contrast: [0.5, 1.5],
            saturation: [0.75, 1.25],
            hue_factor: [0.99, 1.01],
            blur_kernel: 25,
            blur_sigma: [0.001, 2.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let ranges = [
            ("scale_range", self.scale_range),
            ("shear_deg", self.shear_deg),
            ("translate_px", self.translate_px),
            ("rotate_deg", self.rotate_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue_factor", self.hue_factor),
            ("blur_sigma", self.blur_sigma),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return Err(AugmentError::InvalidConfig(format!("{name}: {lo} > {hi}")));
            }
        }
        if self.blur_kernel.is_multiple_of(2) {
            return Err(AugmentError::InvalidConfig(format!("blur_kernel {} is even", self.blur_kernel)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(AugmentError::InvalidConfig(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.blur_sigma[0] <= 0.0 {
            return Err(AugmentError::InvalidConfig("blur_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Random stream for one sample in one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRng(SplitMix64);

impl SampleRng {
    pub fn new(seed: u64, epoch: u64, index: u64) -> Self {
        Self(SplitMix64::new(derive_seed(seed, &[epoch, index])))
    }

    pub fn uniform(&mut self, [lo, hi]: [f64; 2]) -> f64 {
        self.0.uniform(lo, hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.unit() < p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricParams {
    pub hflip: bool,
    pub vflip: bool,
    pub scale: f64,
    pub shear_deg: f64,
    pub rotate_deg: f64,
    pub translate: (f64, f64),
}

impl GeometricParams {
    pub const IDENTITY: Self =
        Self { hflip: false, vflip: false, scale: 1.0, shear_deg: 0.0, rotate_deg: 0.0, translate: (0.0, 0.0) };

    pub fn sample(rng: &mut SampleRng, cfg: &AugmentConfig) -> Self {
        let hflip = rng.bernoulli(cfg.flip_prob);
        let vflip = rng.bernoulli(cfg.flip_prob);
        let scale = rng.uniform(cfg.scale_range);
        let shear_deg = rng.uniform(cfg.shear_deg);
        let rotate_deg = rng.uniform(cfg.rotate_deg);
        let tx = rng.uniform(cfg.translate_px);
        let ty = rng.uniform(cfg.translate_px);
        Self { hflip, vflip, scale, shear_deg, rotate_deg, translate: (tx, ty) }
    }

    /// Forward map from source to output pixel coordinates `(x, y)`: flips,
    /// then scale, shear, rotation about the image centre, then translation.
    pub fn matrix(&self, height: usize, width: usize) -> [[f64; 3]; 2] {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let fx = if self.hflip { -1.0 } else { 1.0 };
        let fy = if self.vflip { -1.0 } else { 1.0 };
        let (sin, cos) = self.rotate_deg.to_radians().sin_cos();
        let sh = self.shear_deg.to_radians().tan();
        let s = self.scale;
        // Linear part R · Sh · S · F around the centre.
        let a = [[cos * s * fx, (cos * sh - sin) * s * fy], [sin * s * fx, (sin * sh + cos) * s * fy]];
        let (tx, ty) = self.translate;
        [
            [a[0][0], a[0][1], cx + tx - a[0][0] * cx - a[0][1] * cy],
            [a[1][0], a[1][1], cy + ty - a[1][0] * cx - a[1][1] * cy],
        ]
    }
}

fn invert(m: [[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]]
}

fn check_pair(image: &Array3<f32>, mask: &Array2<u8>) -> Result<(usize, usize), AugmentError> {
    let (h, w, _) = image.dim();
    if (h, w) != mask.dim() {
        return Err(AugmentError::ShapeMismatch { image: (h, w), mask: mask.dim() });
    }
    if h == 0 || w == 0 {
        return Err(AugmentError::ZeroDimension);
    }
    Ok((h, w))
}

/// Applies one affine map to both image (bilinear) and mask (nearest);
/// pixels mapped from outside the source are 0.
pub fn warp_pair(image: &Array3<f32>, mask: &Array2<u8>, params: &GeometricParams) -> Result<(Array3<f32>, Array2<u8>), AugmentError> {
    let (h, w) = check_pair(image, mask)?;
    let inv = invert(params.matrix(h, w));
    let channels = image.dim().2;
    let mut out_img = Array3::<f32>::zeros((h, w, channels));
    let mut out_mask = Array2::<u8>::zeros((h, w));
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h;
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let sx = inv[0][0] * xf + inv[0][1] * yf + inv[0][2];
            let sy = inv[1][0] * xf + inv[1][1] * yf + inv[1][2];
            let (nx, ny) = (sx.round() as isize, sy.round() as isize);
            if inside(nx, ny) {
                out_mask[[y, x]] = mask[[ny as usize, nx as usize]];
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (ax, ay) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..channels {
                let mut acc = 0.0f64;
                for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                    for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                        let (px, py) = (x0 + dx, y0 + dy);
                        if wx * wy != 0.0 && inside(px, py) {
                            acc += wx * wy * f64::from(image[[py as usize, px as usize, c]]);
                        }
                    }
                }
                out_img[[y, x, c]] = acc as f32;
            }
        }
    }
    Ok((out_img, out_mask))
}

pub fn geometric_augment(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    rng: &mut SampleRng,
    cfg: &AugmentConfig,
) -> Result<(Array3<f32>, Array2<u8>), AugmentError> {
    check_pair(image, mask)?;
    let params = GeometricParams::sample(rng, cfg);
    warp_pair(image, mask, &params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub sigma: f64,
}

impl ColorParams {
    pub fn sample(rng: &mut SampleRng, cfg: &AugmentConfig) -> Self {
        Self {
            brightness: rng.uniform(cfg.brightness),
            contrast: rng.uniform(cfg.contrast),
            saturation: rng.uniform(cfg.saturation),
            hue: rng.uniform(cfg.hue_factor),
            sigma: rng.uniform(cfg.blur_sigma),
        }
    }
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.2989 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
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

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Normalized 1-d Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(image: &Array3<f32>, size: usize, sigma: f64) -> Array3<f32> {
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w, ch) = image.dim();
    let mut tmp = Array3::<f64>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                tmp[[y, x, c]] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * f64::from(image[[y, reflect(x as isize + i as isize - r, w), c]]))
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v: f64 = k.iter().enumerate().map(|(i, &kv)| kv * tmp[[reflect(y as isize + i as isize - r, h), x, c]]).sum();
                out[[y, x, c]] = v as f32;
            }
        }
    }
    out
}

/// Brightness, contrast, saturation and hue scaling followed by Gaussian blur.
/// Hue is scaled multiplicatively in HSV space and wrapped into `[0, 1)`.
pub fn apply_color(image: &Array3<f32>, p: &ColorParams, blur_kernel: usize) -> Array3<f32> {
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let (h, w, ch) = image.dim();
    assert_eq!(ch, 3, "color jitter needs RGB input");
    let mut px: Vec<[f64; 3]> = image
        .rows()
        .into_iter()
        .map(|v| [f64::from(v[0]) * p.brightness, f64::from(v[1]) * p.brightness, f64::from(v[2]) * p.brightness].map(clamp))
        .collect();
    let mean = px.iter().map(|&[r, g, b]| gray(r, g, b)).sum::<f64>() / px.len() as f64;
    for v in &mut px {
        *v = v.map(|c| clamp(mean + p.contrast * (c - mean)));
        let l = gray(v[0], v[1], v[2]);
        *v = v.map(|c| clamp(l + p.saturation * (c - l)));
        if p.hue != 1.0 {
            let (hh, s, val) = rgb_to_hsv(v[0], v[1], v[2]);
            let (r, g, b) = hsv_to_rgb((hh * p.hue).rem_euclid(1.0), s, val);
            *v = [r, g, b].map(clamp);
        }
    }
    let jittered = Array3::from_shape_fn((h, w, 3), |(y, x, c)| px[y * w + x][c] as f32);
    gaussian_blur(&jittered, blur_kernel, p.sigma).mapv(|v| v.clamp(0.0, 1.0))
}

pub fn color_augment(image: &Array3<f32>, rng: &mut SampleRng, cfg: &AugmentConfig) -> Array3<f32> {
    let params = ColorParams::sample(rng, cfg);
    apply_color(image, &params, cfg.blur_kernel)
}

/// `x ↦ 2x − 1`.
pub fn normalize(image: &Array3<f32>) -> Array3<f32> {
    image.mapv(|v| 2.0 * v - 1.0)
}

/// Bilinear (half-pixel centres) for the image, nearest for the mask.
pub fn resize_pair(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    size: (usize, usize),
) -> Result<(Array3<f32>, Array2<u8>), AugmentError> {
    let (h, w) = check_pair(image, mask)?;
    let (oh, ow) = size;
    if oh == 0 || ow == 0 {
        return Err(AugmentError::ZeroDimension);
    }
    if (oh, ow) == (h, w) {
        return Ok((image.clone(), mask.clone()));
    }
    Ok((resize_image(image, size), resize_mask(mask, size)))
}

pub fn resize_image(image: &Array3<f32>, (oh, ow): (usize, usize)) -> Array3<f32> {
    let (h, w, ch) = image.dim();
    let (ty, tx) = (axis_taps(h, oh), axis_taps(w, ow));
    Array3::from_shape_fn((oh, ow, ch), |(y, x, c)| {
        let (fy, fx) = (ty.frac[y], tx.frac[x]);
        let at = |yy: usize, xx: usize| f64::from(image[[yy, xx, c]]);
        let top = at(ty.lo[y], tx.lo[x]) * (1.0 - fx) + at(ty.lo[y], tx.hi[x]) * fx;
        let bot = at(ty.hi[y], tx.lo[x]) * (1.0 - fx) + at(ty.hi[y], tx.hi[x]) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

pub fn resize_mask(mask: &Array2<u8>, (oh, ow): (usize, usize)) -> Array2<u8> {
    let (h, w) = mask.dim();
    let near = |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1);
    Array2::from_shape_fn((oh, ow), |(y, x)| mask[[near(y, h, oh), near(x, w, ow)]])
}

/// Full training transform for sample `index` of `epoch`: geometric, color,
/// then normalization.
pub fn augment_pair(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Result<(Array3<f32>, Array2<u8>), AugmentError> {
    let mut rng = SampleRng::new(seed, epoch, index);
    let (img, mask) = geometric_augment(image, mask, &mut rng, cfg)?;
    let img = color_augment(&img, &mut rng, cfg);
    Ok((normalize(&img), mask))
}

/// True when every mask value is 0 or 1.
pub fn is_binary(mask: &Array2<u8>) -> bool {
    let mut ok = true;
    Zip::from(mask).for_each(|&v| ok &= v <= 1);
    ok
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 17) as f32 / 16.0)
    }

    #[test]
    fn default_ranges_validate() {
        AugmentConfig::default().validate().unwrap();
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = ramp(9, 7);
        let mask = img.map_axis(ndarray::Axis(2), |v| u8::from(v[0] > 0.5));
        let (i2, m2) = warp_pair(&img, &mask, &GeometricParams::IDENTITY).unwrap();
        assert_eq!(i2, img);
        assert_eq!(m2, mask);
    }

    #[test]
    fn double_flip_is_exact() {
        let img = ramp(8, 6);
        let mask = img.map_axis(ndarray::Axis(2), |v| u8::from(v[1] > 0.4));
        let p = GeometricParams { hflip: true, vflip: true, ..GeometricParams::IDENTITY };
        let (a, am) = warp_pair(&img, &mask, &p).unwrap();
        assert_ne!(a, img);
        let (b, bm) = warp_pair(&a, &am, &p).unwrap();
        assert_eq!(b, img);
        assert_eq!(bm, mask);
    }

    #[test]
    fn normalize_endpoints() {
        let x = Array3::from_shape_vec((1, 1, 3), vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(normalize(&x).into_raw_vec_and_offset().0, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_brightness_is_black() {
        let p = ColorParams { brightness: 0.0, contrast: 1.0, saturation: 1.0, hue: 1.0, sigma: 1.0 };
        assert!(apply_color(&ramp(6, 6), &p, 5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_nearest_upscale() {
        let m = ndarray::array![[1u8, 0], [0, 1]];
        let img = Array3::zeros((2, 2, 3));
        let (_, up) = resize_pair(&img, &m, (4, 4)).unwrap();
        assert_eq!(up, ndarray::array![[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]);
    }

    #[test]
    fn mismatched_pair_rejected() {
        let r = resize_pair(&Array3::zeros((2, 3, 3)), &Array2::zeros((3, 2)), (4, 4));
        assert!(matches!(r, Err(AugmentError::ShapeMismatch { .. })));
        let r = resize_pair(&Array3::zeros((2, 2, 3)), &Array2::zeros((2, 2)), (0, 4));
        assert_eq!(r, Err(AugmentError::ZeroDimension));
    }
}
