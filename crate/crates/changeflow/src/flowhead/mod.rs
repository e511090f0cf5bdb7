//! Flow estimation as classification over the displacement lattice:
//! per-pixel categorical distributions, Gaussian-smoothed targets,
//! sub-pixel decoding by probability-weighted averaging, transformer
//! decoding of coarse tokens, refinement to full resolution, and the
//! combined classification + regression loss.

pub mod decoder;
pub mod loss;
pub mod refine;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::geometry::DenseFlow;
use crate::lattice::DisplacementLattice;
use crate::tensor::Tensor;

pub use decoder::DecoderStack;
pub use loss::{flow_loss, FlowLossTerms};
pub use refine::RefineHead;

/// Per-pixel logits over lattice bins with the softmax temperature that
/// turns them into probabilities.
pub struct FlowDistribution {
    pub logits: Tensor,
    pub tau: f64,
}

impl FlowDistribution {
    pub fn new(logits: Tensor, tau: f64) -> Result<Self> {
        if logits.shape().len() != 3 {
            return Err(Error::validation(format!(
                "flow logits must be [bins, H, W], got rank {}",
                logits.shape().len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::validation(format!(
                "temperature must be positive and finite, got {tau}"
            )));
        }
        Ok(FlowDistribution { logits, tau })
    }

    /// `softmax(z / tau)` over the bin axis.
    pub fn probs(&self) -> Tensor {
        self.logits.scale(1.0 / self.tau).softmax(0)
    }

    pub fn log_probs(&self) -> Tensor {
        self.logits.scale(1.0 / self.tau).log_softmax(0)
    }
}

/// Probability-weighted displacement: `(u, v)` planes where each pixel is
/// the expectation of the lattice offsets under `probs`.
pub fn argsoftmax_decode(probs: &Tensor, lattice: &DisplacementLattice) -> (Tensor, Tensor) {
    let shape = probs.shape().to_vec();
    assert_eq!(shape.len(), 3, "probabilities must be [bins, H, W]");
    assert_eq!(shape[0], lattice.num_bins(), "bin count mismatch");
    let (h, w) = (shape[1], shape[2]);
    let mut dx = ArrayD::zeros(IxDyn(&[lattice.num_bins()]));
    let mut dy = ArrayD::zeros(IxDyn(&[lattice.num_bins()]));
    for k in 0..lattice.num_bins() {
        let off = lattice.offset(k);
        dy[[k]] = off.0;
        dx[[k]] = off.1;
    }
    let u = probs
        .mul_channel(&Tensor::constant(dx))
        .sum_axis(0)
        .reshape(&[h, w]);
    let v = probs
        .mul_channel(&Tensor::constant(dy))
        .sum_axis(0)
        .reshape(&[h, w]);
    (u, v)
}

/// Same decoding straight to a [`DenseFlow`] value for evaluation paths.
pub fn decode_to_flow(dist: &FlowDistribution, lattice: &DisplacementLattice) -> DenseFlow {
    let (u, v) = argsoftmax_decode(&dist.probs(), lattice);
    let shape = u.shape().to_vec();
    let to2 = |t: &Tensor| {
        Array2::from_shape_fn((shape[0], shape[1]), |(y, x)| t.value()[[y, x]])
    };
    DenseFlow::new(to2(&u), to2(&v), Array2::from_elem((shape[0], shape[1]), true))
        .expect("decoded planes share one shape")
}

/// Gaussian-smoothed categorical target per pixel, plus the in-range flag.
/// A pixel whose true displacement leaves the lattice span by more than
/// one bin on either axis is flagged false and should be excluded from
/// distribution matching.
pub fn gaussian_target(
    w_star: &DenseFlow,
    lattice: &DisplacementLattice,
    sigma: f64,
) -> Result<(ArrayD<f64>, Array2<bool>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!(
            "target sigma must be positive and finite, got {sigma}"
        )));
    }
    let (h, w) = (w_star.height(), w_star.width());
    let bins = lattice.num_bins();
    let mut target = ArrayD::zeros(IxDyn(&[bins, h, w]));
    let mut in_range = Array2::from_elem((h, w), false);
    let limit = lattice.half_range() + lattice.delta();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (w_star.u[[y, x]], w_star.v[[y, x]]);
            in_range[[y, x]] = u.abs() <= limit && v.abs() <= limit;
            let mut best = f64::INFINITY;
            let mut d2 = vec![0.0; bins];
            for k in 0..bins {
                let (dy, dx) = lattice.offset(k);
                d2[k] = (dx - u) * (dx - u) + (dy - v) * (dy - v);
                best = best.min(d2[k]);
            }
            let mut total = 0.0;
            for k in 0..bins {
                let p = (-(d2[k] - best) / (2.0 * sigma * sigma)).exp();
                target[[k, y, x]] = p;
                total += p;
            }
            for k in 0..bins {
                target[[k, y, x]] /= total;
            }
        }
    }
    Ok((target, in_range))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_flow(h: usize, w: usize, u: f64, v: f64) -> DenseFlow {
        let grid = crate::geometry::PixelGrid::new(h, w).unwrap();
        DenseFlow::constant(&grid, u, v)
    }

    fn lat11() -> DisplacementLattice {
        DisplacementLattice::new(11, 1.0).unwrap()
    }

    #[test]
    fn targets_normalize_and_peak_at_the_nearest_bin() {
        let lat = lat11();
        let (target, in_range) = gaussian_target(&constant_flow(2, 2, 2.0, -1.0), &lat, 1.0).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let total: f64 = (0..121).map(|k| target[[k, y, x]]).sum();
                assert!((total - 1.0).abs() < 1e-6);
                assert!(in_range[[y, x]]);
                let peak = (0..121)
                    .max_by(|&a, &b| {
                        target[[a, y, x]].partial_cmp(&target[[b, y, x]]).unwrap()
                    })
                    .unwrap();
                assert_eq!(lat.offset(peak), (-1.0, 2.0));
            }
        }
    }

    #[test]
    fn tiny_sigma_approaches_a_one_hot_target() {
        let lat = lat11();
        let (target, _) = gaussian_target(&constant_flow(1, 1, 3.0, 0.0), &lat, 1e-3).unwrap();
        let k = (0..121)
            .find(|&k| lat.offset(k) == (0.0, 3.0))
            .unwrap();
        assert!((target[[k, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_flow_splits_mass_equally_between_neighbors() {
        let lat = lat11();
        let (target, _) = gaussian_target(&constant_flow(1, 1, 0.5, 0.0), &lat, 1.0).unwrap();
        let k0 = (0..121).find(|&k| lat.offset(k) == (0.0, 0.0)).unwrap();
        let k1 = (0..121).find(|&k| lat.offset(k) == (0.0, 1.0)).unwrap();
        assert!((target[[k0, 0, 0]] - target[[k1, 0, 0]]).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_pixels_are_flagged() {
        // Range is +-5 for r=11, delta=1; the flag tolerates one extra bin.
        let lat = lat11();
        let (_, in_range) = gaussian_target(&constant_flow(1, 3, 5.9, 0.0), &lat, 1.0).unwrap();
        assert!(in_range[[0, 0]]);
        let (_, in_range) = gaussian_target(&constant_flow(1, 3, 6.0, 0.0), &lat, 1.0).unwrap();
        assert!(in_range[[0, 0]]);
        let (_, in_range) = gaussian_target(&constant_flow(1, 3, 6.9, 0.0), &lat, 1.0).unwrap();
        assert!(!in_range[[0, 0]]);
        let (_, in_range) = gaussian_target(&constant_flow(1, 3, 0.0, -6.1), &lat, 1.0).unwrap();
        assert!(!in_range[[0, 0]]);
    }

    #[test]
    fn one_hot_probabilities_decode_to_the_bin_offset() {
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        for k in 0..9 {
            let mut p = ArrayD::zeros(IxDyn(&[9, 1, 1]));
            p[[k, 0, 0]] = 1.0;
            let (u, v) = argsoftmax_decode(&Tensor::constant(p), &lat);
            let (dy, dx) = lat.offset(k);
            assert_eq!(u.value()[[0, 0]], dx);
            assert_eq!(v.value()[[0, 0]], dy);
        }
    }

    #[test]
    fn uniform_probabilities_decode_to_zero() {
        let lat = lat11();
        let p = ArrayD::from_elem(IxDyn(&[121, 2, 3]), 1.0 / 121.0);
        let (u, v) = argsoftmax_decode(&Tensor::constant(p), &lat);
        for val in u.value().iter().chain(v.value().iter()) {
            assert!(val.abs() < 1e-12);
        }
    }

    #[test]
    fn decoding_a_gaussian_target_recovers_interior_flow() {
        let lat = lat11();
        for &(u, v) in &[(0.3, -2.7), (2.95, 1.5), (-3.0, 3.0), (0.0, -0.49)] {
            let (target, _) = gaussian_target(&constant_flow(1, 1, u, v), &lat, 1.0).unwrap();
            let dist = FlowDistribution::new(
                Tensor::constant(target.mapv(|p| p.max(1e-300).ln())),
                1.0,
            )
            .unwrap();
            let flow = decode_to_flow(&dist, &lat);
            assert!(
                (flow.u[[0, 0]] - u).abs() < 0.05,
                "u {} decoded {}",
                u,
                flow.u[[0, 0]]
            );
            assert!((flow.v[[0, 0]] - v).abs() < 0.05);
        }
    }

    #[test]
    fn lower_temperature_sharpens_without_moving_the_mode() {
        let logits = ArrayD::from_shape_vec(
            IxDyn(&[4, 1, 1]),
            vec![0.2, 1.1, -0.4, 0.9],
        )
        .unwrap();
        let sharp = FlowDistribution::new(Tensor::constant(logits.clone()), 0.1).unwrap();
        let soft = FlowDistribution::new(Tensor::constant(logits), 1.0).unwrap();
        let max_of = |d: &FlowDistribution| {
            let p = d.probs();
            (0..4)
                .map(|k| p.value()[[k, 0, 0]])
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let argmax_of = |d: &FlowDistribution| {
            let p = d.probs();
            (0..4)
                .max_by(|&a, &b| {
                    p.value()[[a, 0, 0]].partial_cmp(&p.value()[[b, 0, 0]]).unwrap()
                })
                .unwrap()
        };
        assert!(max_of(&sharp) > max_of(&soft));
        assert_eq!(argmax_of(&sharp), argmax_of(&soft));
        assert_eq!(argmax_of(&sharp), 1);
    }

    #[test]
    fn probabilities_sum_to_one_and_stay_positive() {
        let logits = ArrayD::from_shape_vec(
            IxDyn(&[3, 1, 2]),
            vec![5.0, -3.0, 0.5, 2.0, -40.0, 1.0],
        )
        .unwrap();
        let dist = FlowDistribution::new(Tensor::constant(logits), 0.5).unwrap();
        let p = dist.probs();
        for x in 0..2 {
            let total: f64 = (0..3).map(|k| p.value()[[k, 0, x]]).sum();
            assert!((total - 1.0).abs() < 1e-6);
            for k in 0..3 {
                assert!(p.value()[[k, 0, x]] > 0.0);
            }
        }
    }

    #[test]
    fn invalid_construction_is_rejected() {
        let ok = Tensor::constant(ArrayD::zeros(IxDyn(&[4, 2, 2])));
        assert!(FlowDistribution::new(ok.clone(), 0.0).is_err());
        assert!(FlowDistribution::new(ok, f64::NAN).is_err());
        let bad = Tensor::constant(ArrayD::zeros(IxDyn(&[4, 4])));
        assert!(FlowDistribution::new(bad, 0.1).is_err());
        let flow = constant_flow(1, 1, 0.0, 0.0);
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        assert!(gaussian_target(&flow, &lat, 0.0).is_err());
    }
}
