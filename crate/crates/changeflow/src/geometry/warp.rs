use ndarray::{Array2, Array3};

use super::flow::DenseFlow;
use crate::error::{Error, Result};

/// Warped field plus the coverage mask. Uncovered pixels hold the zero fill.
#[derive(Debug, Clone)]
pub struct WarpResult {
    pub values: Array3<f64>,
    pub covered: Array2<bool>,
}

/// One resolved bilinear sample: corner taps with weights, and whether the
/// sample point lies inside the pixel-center hull. Corners are clamped to
/// the grid so zero-weight taps at exact integer coordinates stay in
/// bounds; weights always sum to 1 when covered.
#[derive(Debug, Clone, Copy)]
pub struct BilinearSample {
    pub corners: [(usize, usize, f64); 4],
    pub covered: bool,
    /// Fractional offsets inside the corner cell, used for derivatives of
    /// the interpolated value with respect to the sample coordinates.
    pub fx: f64,
    pub fy: f64,
}

impl BilinearSample {
    pub fn at(sx: f64, sy: f64, h: usize, w: usize) -> BilinearSample {
        let covered =
            sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
        let cx = sx.clamp(0.0, (w - 1) as f64);
        let cy = sy.clamp(0.0, (h - 1) as f64);
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        BilinearSample {
            corners: [
                (y0, x0, (1.0 - fx) * (1.0 - fy)),
                (y0, x1, fx * (1.0 - fy)),
                (y1, x0, (1.0 - fx) * fy),
                (y1, x1, fx * fy),
            ],
            covered,
            fx,
            fy,
        }
    }

    /// Interpolates one channel.
    pub fn interpolate(&self, plane: &ndarray::ArrayView2<f64>) -> f64 {
        self.corners
            .iter()
            .map(|&(y, x, wt)| wt * plane[(y, x)])
            .sum()
    }
}

/// Bilinear warp: `out(x) = f(x + U(x))` with four-neighbor interpolation,
/// zero fill and a coverage mask where the sample point leaves the grid.
pub fn warp(f: &Array3<f64>, flow: &DenseFlow) -> Result<WarpResult> {
    let (c, h, w) = f.dim();
    if (h, w) != flow.u.dim() {
        return Err(Error::validation(format!(
            "warp input {:?} does not match flow grid {:?}",
            (h, w),
            flow.u.dim()
        )));
    }
    let mut values = Array3::zeros((c, h, w));
    let mut covered = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow.u[(y, x)];
            let sy = y as f64 + flow.v[(y, x)];
            let sample = BilinearSample::at(sx, sy, h, w);
            if !sample.covered {
                continue;
            }
            covered[(y, x)] = true;
            for ch in 0..c {
                values[(ch, y, x)] = sample.interpolate(&f.index_axis(ndarray::Axis(0), ch));
            }
        }
    }
    Ok(WarpResult { values, covered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{flow_from_affine, AffineTransform, PixelGrid};
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_field(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0))
    }

    /// Smooth [0,1]-valued test image: a sum of low-frequency sinusoids.
    fn smooth_field(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            let u = x as f64 / w as f64;
            let v = y as f64 / h as f64;
            0.5 + 0.25 * (2.0 * std::f64::consts::PI * u).sin()
                + 0.25 * (2.0 * std::f64::consts::PI * v).cos() * 0.5
        })
    }

    #[test]
    fn zero_flow_is_identity() {
        let grid = PixelGrid::new(16, 16).unwrap();
        let f = random_field(3, 16, 16, 1);
        let out = warp(&f, &DenseFlow::zero(&grid)).unwrap();
        assert!(out.covered.iter().all(|&c| c));
        let max = f
            .iter()
            .zip(out.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-7);
    }

    #[test]
    fn unit_shift_on_ramp_is_exact() {
        // f(x, y) = x; sampling at x+1 yields x+1 wherever covered.
        let grid = PixelGrid::new(8, 8).unwrap();
        let f = Array3::from_shape_fn((1, 8, 8), |(_, _, x)| x as f64);
        let flow = DenseFlow::constant(&grid, 1.0, 0.0);
        let out = warp(&f, &flow).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if out.covered[(y, x)] {
                    assert!((out.values[(0, y, x)] - (x as f64 + 1.0)).abs() < 1e-12);
                } else {
                    assert_eq!(x, 7);
                    assert_eq!(out.values[(0, y, x)], 0.0);
                }
            }
        }
    }

    #[test]
    fn random_subpixel_warp_matches_scalar_loop_oracle() {
        let grid = PixelGrid::new(8, 8).unwrap();
        for seed in 0..50 {
            let f = random_field(2, 8, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut flow = DenseFlow::zero(&grid);
            for val in flow.u.iter_mut().chain(flow.v.iter_mut()) {
                *val = rng.random_range(-2.5..2.5);
            }
            let out = warp(&f, &flow).unwrap();

            for y in 0..8 {
                for x in 0..8 {
                    let sx = x as f64 + flow.u[(y, x)];
                    let sy = y as f64 + flow.v[(y, x)];
                    let inside = sx >= 0.0 && sy >= 0.0 && sx <= 7.0 && sy <= 7.0;
                    assert_eq!(out.covered[(y, x)], inside);
                    for ch in 0..2 {
                        let expect = if inside {
                            let x0 = (sx.floor() as usize).min(7);
                            let y0 = (sy.floor() as usize).min(7);
                            let x1 = (x0 + 1).min(7);
                            let y1 = (y0 + 1).min(7);
                            let fx = sx - x0 as f64;
                            let fy = sy - y0 as f64;
                            f[(ch, y0, x0)] * (1.0 - fx) * (1.0 - fy)
                                + f[(ch, y0, x1)] * fx * (1.0 - fy)
                                + f[(ch, y1, x0)] * (1.0 - fx) * fy
                                + f[(ch, y1, x1)] * fx * fy
                        } else {
                            0.0
                        };
                        assert!(
                            (out.values[(ch, y, x)] - expect).abs() < 1e-6,
                            "seed {seed} at ({x},{y}) ch {ch}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn uncovered_pixels_hold_zero_fill() {
        let grid = PixelGrid::new(6, 6).unwrap();
        let f = random_field(1, 6, 6, 3) + 1.0;
        let flow = DenseFlow::constant(&grid, 10.0, 0.0);
        let out = warp(&f, &flow).unwrap();
        assert!(out.covered.iter().all(|&c| !c));
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_consistency_recovers_smooth_image() {
        // Warp by U_fwd then by U_bwd; the round trip reproduces the image
        // on the doubly covered region up to interpolation error.
        let grid = PixelGrid::new(64, 64).unwrap();
        let f = smooth_field(64, 64);
        let a = AffineTransform::from_params(1.05, 0.15, 3.0, -2.0, grid.center());
        let fwd = flow_from_affine(&a, &grid).unwrap();
        let bwd = flow_from_affine(&a.invert().unwrap(), &grid).unwrap();
        let once = warp(&f, &bwd).unwrap();
        let twice = warp(&once.values, &fwd).unwrap();
        let mut checked = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                // Restrict to pixels covered by both warps, including the
                // pulled-back coverage of the first warp.
                let sx = x as f64 + fwd.u[(y, x)];
                let sy = y as f64 + fwd.v[(y, x)];
                if !twice.covered[(y, x)] || !once.covered.get((sy.round() as usize, sx.round() as usize)).copied().unwrap_or(false) {
                    continue;
                }
                // Stay one pixel away from the coverage boundary, where the
                // first warp's zero fill bleeds into the interpolation.
                if sx.fract() != 0.0 || sy.fract() != 0.0 {
                    let edge = [
                        (sy.floor(), sx.floor()),
                        (sy.floor(), sx.ceil()),
                        (sy.ceil(), sx.floor()),
                        (sy.ceil(), sx.ceil()),
                    ]
                    .iter()
                    .any(|&(ny, nx)| {
                        !once
                            .covered
                            .get((ny as usize, nx as usize))
                            .copied()
                            .unwrap_or(false)
                    });
                    if edge {
                        continue;
                    }
                }
                checked += 1;
                let err = (twice.values[(0, y, x)] - f[(0, y, x)]).abs();
                assert!(err < 2e-2, "({x},{y}): err {err}");
            }
        }
        assert!(checked > 1000, "too few doubly covered pixels: {checked}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let grid = PixelGrid::new(4, 4).unwrap();
        let f = random_field(1, 4, 5, 0);
        assert!(warp(&f, &DenseFlow::zero(&grid)).is_err());
    }
}
