//! Paired supervision: a reference image, a geometrically perturbed partner,
//! the exact dense flow that undoes the perturbation, its validity mask, and
//! the change mask in the reference frame.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::{
    self, flow_from_affine, sample_affine, AffineTransform, DenseFlow, PerturbationParams,
    PerturbationRanges, PixelGrid,
};

/// One supervised training/evaluation sample.
#[derive(Debug, Clone)]
pub struct SamplePair {
    /// Reference image, [3, H, W] in [0, 1].
    pub image_a: Array3<f64>,
    /// Perturbed partner, same layout; zero-filled where the source fell
    /// outside the partner rendering.
    pub image_b: Array3<f64>,
    /// Dense flow mapping reference pixels to partner coordinates; warping
    /// `image_b` by it reproduces the unperturbed partner.
    pub flow_gt: DenseFlow,
    /// Change labels in the reference frame.
    pub change_gt: Array2<bool>,
    /// True where `flow_gt` targets lie inside the image.
    pub valid: Array2<bool>,
    pub seed: u64,
    pub transform: AffineTransform,
    pub params: PerturbationParams,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.image_a.dim().1
    }

    pub fn width(&self) -> usize {
        self.image_a.dim().2
    }

    /// Checks that all fields share one H×W and the flow matches its mask.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_a.dim();
        if c != 3 {
            return Err(Error::validation(format!("image_a has {c} channels")));
        }
        if self.image_b.dim() != (3, h, w) {
            return Err(Error::validation(format!(
                "image_b is {:?}, expected (3, {h}, {w})",
                self.image_b.dim()
            )));
        }
        for (name, dim) in [
            ("flow_gt", (self.flow_gt.height(), self.flow_gt.width())),
            ("change_gt", self.change_gt.dim()),
            ("valid", self.valid.dim()),
        ] {
            if dim != (h, w) {
                return Err(Error::validation(format!(
                    "{name} is {dim:?}, expected ({h}, {w})"
                )));
            }
        }
        Ok(())
    }
}

/// Builds a sample by perturbing only the partner image: draws an affine map
/// A from `ranges`, resamples the partner as image_b(x) = image_b0(A(x)),
/// and records the analytic reverse flow with its validity mask. The change
/// mask passes through untouched since it already lives in the reference
/// frame.
pub fn generate_pair(
    image_a: &Array3<f64>,
    image_b0: &Array3<f64>,
    change_mask: &Array2<bool>,
    seed: u64,
    ranges: &PerturbationRanges,
) -> Result<SamplePair> {
    let (c, h, w) = image_a.dim();
    if c != 3 || image_b0.dim() != (3, h, w) || change_mask.dim() != (h, w) {
        return Err(Error::validation(format!(
            "co-registered inputs required: a {:?}, b0 {:?}, mask {:?}",
            image_a.dim(),
            image_b0.dim(),
            change_mask.dim()
        )));
    }
    let grid = PixelGrid::new(h, w)?;
    let (transform, params) = sample_affine(seed, ranges, &grid)?;

    let mut uf = Array2::zeros((h, w));
    let mut vf = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (ax, ay) = transform.apply(x as f64, y as f64);
            uf[(y, x)] = ax - x as f64;
            vf[(y, x)] = ay - y as f64;
        }
    }
    let forward = DenseFlow::new(uf, vf, Array2::from_elem((h, w), true))?;
    let image_b = geometry::warp(image_b0, &forward)?.values;

    let flow_gt = flow_from_affine(&transform, &grid)?;
    let valid = flow_gt.valid.clone();
    Ok(SamplePair {
        image_a: image_a.clone(),
        image_b,
        flow_gt,
        change_gt: change_mask.clone(),
        valid,
        seed,
        transform,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            let fx = x as f64 / w as f64;
            let fy = y as f64 / h as f64;
            0.5 + 0.25 * (std::f64::consts::TAU * (fx + c as f64 * 0.3)).sin()
                * (std::f64::consts::TAU * fy).cos()
                + 0.15 * fx
        })
    }

    fn ks_uniform_p(values: &[f64], lo: f64, hi: f64) -> f64 {
        let mut xs: Vec<f64> = values.to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d = 0.0f64;
        for (i, x) in xs.iter().enumerate() {
            let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            d = d
                .max((i as f64 + 1.0) / n - cdf)
                .max(cdf - i as f64 / n);
        }
        let en = n.sqrt();
        let lambda = (en + 0.12 + 0.11 / en) * d;
        let p: f64 = (1..=100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1.0f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum();
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn collapsed_ranges_reproduce_the_partner() {
        let a = smooth_image(20, 24);
        let b0 = smooth_image(20, 24).mapv(|v| 1.0 - v);
        let mask = Array2::from_elem((20, 24), false);
        let s = generate_pair(&a, &b0, &mask, 3, &PerturbationRanges::identity()).unwrap();
        s.validate().unwrap();
        assert_eq!(s.image_b, b0);
        assert!(s.flow_gt.u.iter().all(|&v| v == 0.0));
        assert!(s.flow_gt.v.iter().all(|&v| v == 0.0));
        assert!(s.valid.iter().all(|&v| v));
    }

    #[test]
    fn pure_translation_shifts_content_and_negates_flow() {
        let a = smooth_image(16, 16);
        let b0 = smooth_image(16, 16);
        let mask = Array2::from_elem((16, 16), false);
        let ranges = PerturbationRanges {
            dx: (5.0, 5.0),
            dy: (-3.0, -3.0),
            theta_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
        };
        let s = generate_pair(&a, &b0, &mask, 7, &ranges).unwrap();
        assert!(s.flow_gt.u.iter().all(|&v| (v + 5.0).abs() < 1e-12));
        assert!(s.flow_gt.v.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        for y in 3..16 {
            for x in 0..11 {
                assert!(
                    (s.image_b[[1, y, x]] - b0[[1, y - 3, x + 5]]).abs() < 1e-12,
                    "content shift mismatch at ({y}, {x})"
                );
            }
        }
    }

    #[test]
    fn warping_the_partner_back_recovers_the_unperturbed_image() {
        let side = 96;
        let a = smooth_image(side, side);
        let b0 = smooth_image(side, side);
        let mask = Array2::from_elem((side, side), false);
        for seed in 0..5 {
            let s = generate_pair(&a, &b0, &mask, seed, &PerturbationRanges::default()).unwrap();
            let restored = geometry::warp(&s.image_b, &s.flow_gt).unwrap();
            let mut err = 0.0;
            let mut count = 0usize;
            for y in 0..side {
                for x in 0..side {
                    if s.valid[(y, x)] && restored.covered[(y, x)] {
                        for c in 0..3 {
                            err += (restored.values[[c, y, x]] - b0[[c, y, x]]).abs();
                        }
                        count += 3;
                    }
                }
            }
            assert!(count > 3000, "degenerate overlap for seed {seed}");
            let mean = err / count as f64;
            assert!(mean < 2e-2, "mean abs error {mean} for seed {seed}");
        }
    }

    #[test]
    fn drawn_parameters_are_uniform_over_the_default_ranges() {
        let ranges = PerturbationRanges::default();
        let a = smooth_image(16, 16);
        let mask = Array2::from_elem((16, 16), false);
        let mut dx = Vec::new();
        let mut dy = Vec::new();
        let mut theta = Vec::new();
        let mut scale = Vec::new();
        for seed in 0..100 {
            let s = generate_pair(&a, &a, &mask, seed, &ranges).unwrap();
            dx.push(s.params.dx);
            dy.push(s.params.dy);
            theta.push(s.params.theta_deg);
            scale.push(s.params.scale);
        }
        for (name, values, lo, hi) in [
            ("dx", &dx, -25.0, 25.0),
            ("dy", &dy, -25.0, 25.0),
            ("theta", &theta, -30.0, 30.0),
            ("scale", &scale, 0.80, 1.25),
        ] {
            let p = ks_uniform_p(values, lo, hi);
            assert!(p > 0.01, "{name} fails uniformity: p = {p}");
            assert!(values.iter().all(|v| *v >= lo && *v <= hi));
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let a = smooth_image(16, 16);
        let b0 = smooth_image(16, 18);
        let mask = Array2::from_elem((16, 16), false);
        assert!(generate_pair(&a, &b0, &mask, 0, &PerturbationRanges::default()).is_err());
        let short_mask = Array2::from_elem((8, 16), false);
        assert!(generate_pair(&a, &a, &short_mask, 0, &PerturbationRanges::default()).is_err());
    }
}
