use std::cell::Cell;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::Sample;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    /// Fraction of the image extent.
    pub max_shift_frac: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            max_shift_frac: 0.1,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "max_rotation_deg must be >= 0, got {}",
                self.max_rotation_deg
            )));
        }
        if !(0.0..1.0).contains(&self.max_shift_frac) {
            return Err(Error::InvalidArgument(format!(
                "max_shift_frac must lie in [0, 1), got {}",
                self.max_shift_frac
            )));
        }
        Ok(())
    }
}

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`augment_sample`] calls made on the current thread.
pub fn augment_call_count() -> u64 {
    CALLS.with(Cell::get)
}

/// Random rotation about the centre followed by a random shift. Draws θ, then dx, then dy.
/// A disabled config returns the sample unchanged without touching `rng`.
pub fn augment_sample(s: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Sample {
    CALLS.with(|c| c.set(c.get() + 1));
    if !cfg.enabled {
        return s.clone();
    }
    let (h, w) = s.size();
    let theta = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    let dx = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * w as f64;
    let dy = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * h as f64;
    transform_sample(s, theta, dx, dy)
}

/// Rotates by `theta_deg` about the image centre, then shifts by `(dx, dy)` pixels
/// (positive `dy` moves content down). Each output pixel is inverse-mapped into the
/// source; the image is sampled bilinearly, the mask by nearest neighbour, and
/// anything outside the source reads as 0.
pub fn transform_sample(s: &Sample, theta_deg: f64, dx: f64, dy: f64) -> Sample {
    let (h, w) = s.size();
    let (sin, cos) = theta_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = s.image.data();
    let read = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    let mut image = Vec::with_capacity(h * w);
    let mut bits = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let (px, py) = (ox as f64 - cx - dx, oy as f64 - cy - dy);
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;

            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * read(x0, y0) + fx * read(x0 + 1, y0))
                + fy * ((1.0 - fx) * read(x0, y0 + 1) + fx * read(x0 + 1, y0 + 1));
            image.push(v.clamp(0.0, 1.0) as f32);

            let (nx, ny) = ((sx + 0.5).floor() as isize, (sy + 0.5).floor() as isize);
            let inside = nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize;
            bits.push(if inside { s.mask.get(ny as usize, nx as usize) } else { 0 });
        }
    }
    Sample {
        image: Tensor::from_vec([1, 1, h, w], image).expect("same dims as input"),
        mask: BinaryMask::new(h, w, bits).expect("same dims as input"),
        source: s.source.clone(),
    }
}
