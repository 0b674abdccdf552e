//! Random affine augmentation: rotation, shift, shear and zoom about the
//! image centre, resampled bilinearly onto a black background.
//!
//! Flips are deliberately absent: mirroring a character can turn it into a
//! different one. Every sampled map has a positive determinant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::INPUT_SIDE;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute shift as a fraction of the image side.
    pub shift_frac: f64,
    /// Maximum absolute shear intensity.
    pub shear: f64,
    /// Maximum absolute deviation of the zoom factor from 1.
    pub zoom_frac: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            shift_frac: 0.05,
            shear: 0.05,
            zoom_frac: 0.05,
            enabled: false,
        }
    }
}

impl AugmentConfig {
    pub fn enabled() -> Self {
        AugmentConfig {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mags = [self.rotation_deg, self.shift_frac, self.shear, self.zoom_frac];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) || self.zoom_frac >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "augmentation magnitudes must be finite and non-negative (zoom < 1): {self:?}"
            )));
        }
        Ok(())
    }
}

/// 2×3 matrix mapping output pixel coordinates `(x = column, y = row)` to
/// source coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 2],
}

/// Concrete parameters of one sampled transform.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Content displacement in pixels (positive x moves right).
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear: f64,
    pub zoom_x: f64,
    pub zoom_y: f64,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// Shift content by `(dx, dy)` pixels.
    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            matrix: [[1.0, 0.0, -dx], [0.0, 1.0, -dy]],
        }
    }

    /// Compose rotation · shear · zoom about the centre of a `height × width`
    /// grid, then shift.
    ///
    /// `source = c + R·S·Z·(p - c) - shift`, with `S = [[1, shear], [0, 1]]`
    /// so that `source_x = x + shear·(y - cy)` for a pure shear.
    pub fn compose(p: &AffineParams, height: usize, width: usize) -> Self {
        let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
        let a = [
            [cos * p.zoom_x, (cos * p.shear - sin) * p.zoom_y],
            [sin * p.zoom_x, (sin * p.shear + cos) * p.zoom_y],
        ];
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        AffineTransform {
            matrix: [
                [a[0][0], a[0][1], cx - a[0][0] * cx - a[0][1] * cy - p.shift_x],
                [a[1][0], a[1][1], cy - a[1][0] * cx - a[1][1] * cy - p.shift_y],
            ],
        }
    }

    pub fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        0.0
    } else {
        rng.gen_range(-magnitude..=magnitude)
    }
}

/// Draw transform parameters for a `side × side` image.
pub fn sample_params<R: Rng + ?Sized>(cfg: &AugmentConfig, side: usize, rng: &mut R) -> AffineParams {
    AffineParams {
        rotation_deg: symmetric(rng, cfg.rotation_deg),
        shift_x: symmetric(rng, cfg.shift_frac) * side as f64,
        shift_y: symmetric(rng, cfg.shift_frac) * side as f64,
        shear: symmetric(rng, cfg.shear),
        zoom_x: 1.0 + symmetric(rng, cfg.zoom_frac),
        zoom_y: 1.0 + symmetric(rng, cfg.zoom_frac),
    }
}

/// Sample one transform for the 32×32 input grid.
pub fn sample_affine(cfg: &AugmentConfig, seed: u64) -> AffineTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = sample_params(cfg, INPUT_SIDE, &mut rng);
    AffineTransform::compose(&params, INPUT_SIDE, INPUT_SIDE)
}

/// Resample an `[H, W, C]` image through `t` with bilinear interpolation;
/// samples falling outside the source are black. Inputs are expected in
/// `[0, 1]` and so are outputs.
pub fn apply_affine(img: &Tensor, t: &AffineTransform) -> Result<Tensor> {
    let (h, w, c) = match img.shape() {
        [h, w, c] => (*h, *w, *c),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected an [H, W, C] image".into(),
            })
        }
    };
    let src = img.data();
    let pixel = |row: isize, col: isize, ch: usize| -> f32 {
        if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
            0.0
        } else {
            src[(row as usize * w + col as usize) * c + ch]
        }
    };
    let mut out = Vec::with_capacity(img.len());
    for i in 0..h {
        for j in 0..w {
            let (sx, sy) = t.source_of(j as f64, i as f64);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = (1.0 - fx) * pixel(y0, x0, ch) + fx * pixel(y0, x0 + 1, ch);
                let bottom = (1.0 - fx) * pixel(y0 + 1, x0, ch) + fx * pixel(y0 + 1, x0 + 1, ch);
                let v = (1.0 - fy) * top + fy * bottom;
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Seed of the transform applied to image `index` under `epoch_seed`.
pub fn image_seed(epoch_seed: u64, index: usize) -> u64 {
    derive_seed(epoch_seed, index as u64)
}

/// Augment every image of an `[N, H, W, C]` batch with its own transform.
/// A disabled config returns the batch unchanged.
pub fn augment_batch(batch: &Tensor, cfg: &AugmentConfig, epoch_seed: u64) -> Result<Tensor> {
    if !cfg.enabled {
        return Ok(batch.clone());
    }
    cfg.validate()?;
    let (n, h, w, c) = match batch.shape() {
        [n, h, w, c] => (*n, *h, *w, *c),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected an [N, H, W, C] batch".into(),
            })
        }
    };
    let per = h * w * c;
    let mut out = Vec::with_capacity(batch.len());
    for (i, img) in batch.data().chunks(per).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(epoch_seed, i));
        let params = sample_params(cfg, h.max(w), &mut rng);
        let t = AffineTransform::compose(&params, h, w);
        let img = Tensor::new(vec![h, w, c], img.to_vec())?;
        out.extend_from_slice(apply_affine(&img, &t)?.data());
    }
    Tensor::new(vec![n, h, w, c], out)
}

/// The source image followed by `count` independently augmented variants.
pub fn preview_variants(img: &Tensor, cfg: &AugmentConfig, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let (h, w) = match img.shape() {
        [h, w, _] => (*h, *w),
        s => return Err(Error::mismatch("preview image", &[0, 0, 0], s)),
    };
    let mut tiles = vec![img.clone()];
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, i));
        let t = AffineTransform::compose(&sample_params(cfg, h.max(w), &mut rng), h, w);
        tiles.push(apply_affine(img, &t)?);
    }
    Ok(tiles)
}

/// Tile equally sized `[H, W, C]` images into a single-channel grid with a
/// one-pixel mid-grey separator.
pub fn contact_sheet(tiles: &[Tensor], columns: usize) -> Result<Tensor> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::InvalidArgument("contact sheet needs at least one tile".into()))?;
    let (h, w, c) = match first.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::mismatch("contact sheet tile", &[0, 0, 0], s)),
    };
    let columns = columns.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(columns);
    let sheet_h = rows * (h + 1) + 1;
    let sheet_w = columns * (w + 1) + 1;
    let mut sheet = vec![0.5f32; sheet_h * sheet_w];
    for (k, tile) in tiles.iter().enumerate() {
        if tile.shape() != first.shape() {
            return Err(Error::mismatch("contact sheet tile", first.shape(), tile.shape()));
        }
        let top = (k / columns) * (h + 1) + 1;
        let left = (k % columns) * (w + 1) + 1;
        for i in 0..h {
            for j in 0..w {
                sheet[(top + i) * sheet_w + left + j] = tile.data()[(i * w + j) * c];
            }
        }
    }
    Tensor::new(vec![sheet_h, sheet_w, 1], sheet)
}
