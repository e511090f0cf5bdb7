use ndarray::Array2;

use super::{AffineTransform, PixelGrid};
use crate::error::{Error, Result};

/// Per-pixel displacement field in pixels, plus a validity mask.
///
/// `valid` is false wherever the correspondence `x + U(x)` leaves the source
/// grid, and every loss or metric downstream restricts itself to valid
/// pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFlow {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub valid: Array2<bool>,
}

impl DenseFlow {
    pub fn new(u: Array2<f64>, v: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if u.dim() != v.dim() || u.dim() != valid.dim() {
            return Err(Error::validation(format!(
                "flow fields disagree on shape: u {:?}, v {:?}, valid {:?}",
                u.dim(),
                v.dim(),
                valid.dim()
            )));
        }
        Ok(DenseFlow { u, v, valid })
    }

    pub fn zero(grid: &PixelGrid) -> Self {
        DenseFlow {
            u: Array2::zeros((grid.height, grid.width)),
            v: Array2::zeros((grid.height, grid.width)),
            valid: Array2::from_elem((grid.height, grid.width), true),
        }
    }

    pub fn constant(grid: &PixelGrid, u: f64, v: f64) -> Self {
        let mut f = DenseFlow::zero(grid);
        f.u.fill(u);
        f.v.fill(v);
        for ((y, x), ok) in f.valid.indexed_iter_mut() {
            *ok = grid.contains(x as f64 + u, y as f64 + v);
        }
        f
    }

    pub fn grid(&self) -> Result<PixelGrid> {
        let (h, w) = self.u.dim();
        PixelGrid::new(h, w)
    }

    pub fn height(&self) -> usize {
        self.u.dim().0
    }

    pub fn width(&self) -> usize {
        self.u.dim().1
    }
}

/// Analytic ground-truth flow for a pair generated as
/// `image_b(x) = image_b0(A(x))`: the displacement that pulls B back onto
/// the shared frame is `U*(x) = A^-1(x) - x`, so `warp(image_b, U*)`
/// reproduces `image_b0` up to interpolation error.
pub fn flow_from_affine(a: &AffineTransform, grid: &PixelGrid) -> Result<DenseFlow> {
    let inv = a.invert()?;
    let mut flow = DenseFlow::zero(grid);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            flow.u[(y, x)] = sx - x as f64;
            flow.v[(y, x)] = sy - y as f64;
            flow.valid[(y, x)] = grid.contains(sx, sy);
        }
    }
    Ok(flow)
}

/// Resamples a flow field onto a grid scaled by `factor` and rescales the
/// displacement magnitudes by the same factor, converting between pixel
/// units of the two resolutions. Validity is the AND of every source pixel
/// that contributes interpolation weight.
pub fn scale_flow(flow: &DenseFlow, factor: f64) -> Result<DenseFlow> {
    if !(factor > 0.0) {
        return Err(Error::validation(format!(
            "scale factor must be positive, got {factor}"
        )));
    }
    let (h, w) = flow.u.dim();
    let nh = ((h as f64) * factor).round().max(1.0) as usize;
    let nw = ((w as f64) * factor).round().max(1.0) as usize;
    let mut out = DenseFlow {
        u: Array2::zeros((nh, nw)),
        v: Array2::zeros((nh, nw)),
        valid: Array2::from_elem((nh, nw), true),
    };
    for oy in 0..nh {
        for ox in 0..nw {
            // Half-pixel-aligned mapping between the two grids.
            let sx = (ox as f64 + 0.5) * (w as f64 / nw as f64) - 0.5;
            let sy = (oy as f64 + 0.5) * (h as f64 / nh as f64) - 0.5;
            let (mut su, mut sv, mut ok) = (0.0, 0.0, true);
            for (iy, ix, wt) in corner_weights(sx, sy, h, w) {
                if wt == 0.0 {
                    continue;
                }
                su += wt * flow.u[(iy, ix)];
                sv += wt * flow.v[(iy, ix)];
                ok &= flow.valid[(iy, ix)];
            }
            out.u[(oy, ox)] = su * factor;
            out.v[(oy, ox)] = sv * factor;
            out.valid[(oy, ox)] = ok;
        }
    }
    Ok(out)
}

/// Four bilinear corners of `(sx, sy)` with edge clamping, as
/// `(row, col, weight)` tuples. Weights sum to 1.
pub(crate) fn corner_weights(sx: f64, sy: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let cx = sx.clamp(0.0, (w - 1) as f64);
    let cy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ]
}
