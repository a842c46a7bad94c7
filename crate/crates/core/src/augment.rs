//! Image normalization and on-the-fly training augmentation.
//!
//! Two image representations exist on purpose. [`RawImage`] is the 8-bit
//! form that goes to and from disk; [`GrayImage`] is the normalized `[0,1]`
//! form every other part of the pipeline consumes. [`normalize`] and
//! [`quantize`] convert between them.
//!
//! Augmentation is rotate-then-shift: a uniform angle in ±`rotation_range_deg`
//! followed by a uniform integer shift of at most `floor(side·shift_fraction)`
//! pixels per axis. Angles that are multiples of 90° rotate by exact pixel
//! permutation, so the rotated-query evaluation protocol is interpolation-free;
//! everything else is bilinear. Out-of-source samples replicate the nearest
//! edge pixel.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major. The on-disk representation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "raw image {width}x{height} has an empty side"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "raw image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Normalized grayscale image: intensities in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image {width}x{height} has an empty side"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!(
                "image intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// raw/255, elementwise.
pub fn normalize(raw: &RawImage) -> GrayImage {
    GrayImage {
        width: raw.width,
        height: raw.height,
        pixels: raw.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    }
}

/// Nearest 8-bit level: round(v·255). Exact inverse of [`normalize`] on
/// values that came from 8-bit data.
pub fn quantize(img: &GrayImage) -> RawImage {
    RawImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect(),
    }
}

/// Ranges for the augmentation sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Angles drawn uniformly from ±this, degrees.
    pub rotation_range_deg: f64,
    /// Max shift per axis as a fraction of the side: `floor(side·fraction)` px.
    pub shift_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotation_range_deg: 180.0, shift_fraction: 0.10 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.rotation_range_deg.is_finite() || self.rotation_range_deg < 0.0 {
            return Err(Error::Parameter(format!(
                "rotation range {} not a finite non-negative angle",
                self.rotation_range_deg
            )));
        }
        if !(0.0..1.0).contains(&self.shift_fraction) {
            return Err(Error::Parameter(format!(
                "shift fraction {} outside [0, 1)",
                self.shift_fraction
            )));
        }
        Ok(())
    }

    /// Largest shift magnitude for a `side`-pixel image.
    pub fn max_shift(&self, side: usize) -> i64 {
        (side as f64 * self.shift_fraction).floor() as i64
    }
}

/// One sampled augmentation: applied as rotate, then shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub dx: i64,
    pub dy: i64,
}

/// Draw order is fixed — angle, dx, dy — so a seeded stream reproduces the
/// same augmentation everywhere. Degenerate ranges draw nothing.
pub fn sample_draw(cfg: &AugmentConfig, side: usize, rng: &mut ChaCha8Rng) -> AugmentDraw {
    let r = cfg.rotation_range_deg;
    let angle_deg = if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
    let m = cfg.max_shift(side);
    let dx = if m > 0 { rng.gen_range(-m..=m) } else { 0 };
    let dy = if m > 0 { rng.gen_range(-m..=m) } else { 0 };
    AugmentDraw { angle_deg, dx, dy }
}

/// Rotation about the image center. Multiples of 90° are exact pixel
/// permutations; other angles sample the source bilinearly with coordinates
/// clamped to the image (nearest-edge fill).
pub fn rotate(img: &GrayImage, angle_deg: f64) -> GrayImage {
    let turns = angle_deg.rem_euclid(360.0);
    if turns == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let mut out = vec![0.0; w * h];
    if turns == 90.0 || turns == 180.0 || turns == 270.0 {
        for yo in 0..h {
            for xo in 0..w {
                // inverse permutation: where this output pixel comes from
                let (ys, xs) = if turns == 90.0 {
                    (xo, w - 1 - yo)
                } else if turns == 180.0 {
                    (h - 1 - yo, w - 1 - xo)
                } else {
                    (h - 1 - xo, yo)
                };
                out[yo * w + xo] = img.pixels[ys * w + xs];
            }
        }
        return GrayImage { width: w, height: h, pixels: out };
    }

    let theta = turns.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    for yo in 0..h {
        let v = yo as f64 - cy;
        for xo in 0..w {
            let u = xo as f64 - cx;
            // source position that lands at (xo, yo) under a CCW rotation
            let xs = cx + cos * u + sin * v;
            let ys = cy - sin * u + cos * v;
            out[yo * w + xo] = bilinear_clamped(img, ys, xs).clamp(0.0, 1.0);
        }
    }
    GrayImage { width: w, height: h, pixels: out }
}

fn bilinear_clamped(img: &GrayImage, ys: f64, xs: f64) -> f64 {
    let (w, h) = (img.width, img.height);
    let clamp_x = |x: i64| x.clamp(0, w as i64 - 1) as usize;
    let clamp_y = |y: i64| y.clamp(0, h as i64 - 1) as usize;
    let x0 = xs.floor();
    let y0 = ys.floor();
    let fx = xs - x0;
    let fy = ys - y0;
    let x0i = x0 as i64;
    let y0i = y0 as i64;
    let p = |yi: i64, xi: i64| img.pixels[clamp_y(yi) * w + clamp_x(xi)];
    let top = p(y0i, x0i) * (1.0 - fx) + p(y0i, x0i + 1) * fx;
    let bot = p(y0i + 1, x0i) * (1.0 - fx) + p(y0i + 1, x0i + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Integer-pixel translation by (+dx right, +dy down); vacated pixels take
/// the nearest edge value: out(y,x) = in(clamp(y-dy), clamp(x-dx)).
pub fn shift(img: &GrayImage, dx: i64, dy: i64) -> GrayImage {
    let (w, h) = (img.width, img.height);
    if dx == 0 && dy == 0 {
        return img.clone();
    }
    let mut out = vec![0.0; w * h];
    for yo in 0..h {
        let ys = (yo as i64 - dy).clamp(0, h as i64 - 1) as usize;
        for xo in 0..w {
            let xs = (xo as i64 - dx).clamp(0, w as i64 - 1) as usize;
            out[yo * w + xo] = img.pixels[ys * w + xs];
        }
    }
    GrayImage { width: w, height: h, pixels: out }
}

/// One fresh training view: sampled rotation, then sampled shift.
pub fn draw_augmented(img: &GrayImage, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<GrayImage> {
    cfg.validate()?;
    let side = img.width.max(img.height);
    let draw = sample_draw(cfg, side, rng);
    Ok(shift(&rotate(img, draw.angle_deg), draw.dx, draw.dy))
}
