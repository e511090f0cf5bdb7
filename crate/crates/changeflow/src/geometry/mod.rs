//! Coordinate conventions, affine transforms, dense flow fields and the
//! bilinear warp operator.
//!
//! Pixel coordinates are 0-indexed with x along columns, y along rows, and
//! the origin at the top-left pixel center. A coordinate is in-bounds iff
//! `0 <= x <= width-1` and `0 <= y <= height-1`. All geometry runs at f64.

mod flow;
mod warp;

pub(crate) use flow::corner_weights as flow_corner_weights;
pub use flow::{flow_from_affine, scale_flow, DenseFlow};
pub use warp::{warp, BilinearSample, WarpResult};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Integer pixel grid with top-left-centered coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "pixel grid must be at least 1x1, got {height}x{width}"
            )));
        }
        Ok(PixelGrid { height, width })
    }

    /// True iff the (possibly fractional) coordinate lies inside the
    /// pixel-center hull.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Continuous image center, the fixed point of sampled rotations.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.width - 1) as f64 / 2.0,
            (self.height - 1) as f64 / 2.0,
        )
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Uniform sampling intervals for the synthetic perturbations, all closed.
/// Translations in pixels, rotation in degrees, scale as a factor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbationRanges {
    pub dx: (f64, f64),
    pub dy: (f64, f64),
    pub theta_deg: (f64, f64),
    pub scale: (f64, f64),
}

impl Default for PerturbationRanges {
    fn default() -> Self {
        PerturbationRanges {
            dx: (-25.0, 25.0),
            dy: (-25.0, 25.0),
            theta_deg: (-30.0, 30.0),
            scale: (0.80, 1.25),
        }
    }
}

impl PerturbationRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("dx", self.dx),
            ("dy", self.dy),
            ("theta", self.theta_deg),
            ("scale", self.scale),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::validation(format!(
                    "bad {name} range [{lo}, {hi}]"
                )));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::validation(format!(
                "scale lower bound must be positive, got {}",
                self.scale.0
            )));
        }
        Ok(())
    }

    /// Collapses every interval to a point, yielding the identity transform.
    pub fn identity() -> Self {
        PerturbationRanges {
            dx: (0.0, 0.0),
            dy: (0.0, 0.0),
            theta_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
        }
    }
}

/// Orientation-preserving 2x3 affine map acting on pixel coordinates.
///
/// Built as scale, then rotation about the image center, then translation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineTransform {
    /// Row-major [[a, b, tx], [c, d, ty]]: maps (x, y) to
    /// (a*x + b*y + tx, c*x + d*y + ty).
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// scale -> rotate about `center` -> translate.
    pub fn from_params(scale: f64, theta_rad: f64, dx: f64, dy: f64, center: (f64, f64)) -> Self {
        let (s, c) = theta_rad.sin_cos();
        let (a, b) = (scale * c, -scale * s);
        let (cc, d) = (scale * s, scale * c);
        // A(p) = R S (p - center) + center + t, folded into 2x3 form.
        let (cx, cy) = center;
        let tx = cx + dx - (a * cx + b * cy);
        let ty = cy + dy - (cc * cx + d * cy);
        AffineTransform {
            m: [[a, b, tx], [cc, d, ty]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.det();
        if !(det > 0.0) {
            return Err(Error::validation(format!(
                "affine transform must be orientation-preserving, det = {det}"
            )));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib) = (d / det, -b / det);
        let (ic, id) = (-c / det, a / det);
        Ok(AffineTransform {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let [[e, f, ux], [g, h, uy]] = inner.m;
        AffineTransform {
            m: [
                [a * e + b * g, a * f + b * h, a * ux + b * uy + tx],
                [c * e + d * g, c * f + d * h, c * ux + d * uy + ty],
            ],
        }
    }
}

/// Parameters drawn for one perturbation, kept alongside the matrix so
/// manifests can record them.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbationParams {
    pub dx: f64,
    pub dy: f64,
    pub theta_deg: f64,
    pub scale: f64,
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a transform uniformly from `ranges`, deterministically in `seed`.
/// Rotation and scale act about the center of `grid`.
pub fn sample_affine(
    seed: u64,
    ranges: &PerturbationRanges,
    grid: &PixelGrid,
) -> Result<(AffineTransform, PerturbationParams)> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PerturbationParams {
        dx: draw(&mut rng, ranges.dx),
        dy: draw(&mut rng, ranges.dy),
        theta_deg: draw(&mut rng, ranges.theta_deg),
        scale: draw(&mut rng, ranges.scale),
    };
    let a = AffineTransform::from_params(
        params.scale,
        params.theta_deg.to_radians(),
        params.dx,
        params.dy,
        grid.center(),
    );
    Ok((a, params))
}
