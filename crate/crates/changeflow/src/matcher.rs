//! Random-Fourier-feature matching at the coarse scale. Feature vectors
//! are lifted through a fixed Gaussian projection into a space where the
//! inner product approximates a Gaussian kernel on their distance, and a
//! per-displacement correlation volume is built by comparing each pixel
//! of one map against lattice-offset samples of the other.

use ndarray::{Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::geometry::BilinearSample;
use crate::lattice::DisplacementLattice;
use crate::nn::gaussian_init;
use crate::tensor::{concat, offset_sample, stack0, Graph, ParamStore, Tensor};

/// Displacement-indexed similarity scores over the coarse grid. Bins whose
/// sample point leaves the grid carry score zero and a false flag.
pub struct CorrelationVolume {
    pub scores: Tensor,
    pub valid: Array3<bool>,
}

/// Fixed random projection defining the matching kernel. The matrix is
/// drawn once, registered frozen under `matcher.w`, and never trained.
pub struct Matcher {
    num_features: usize,
    channels: usize,
}

impl Matcher {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        num_features: usize,
        channels: usize,
        length_scale: f64,
    ) -> Result<Self> {
        if num_features == 0 || channels == 0 {
            return Err(Error::validation(format!(
                "matcher needs positive dimensions, got {num_features} features x {channels} channels"
            )));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::validation(format!(
                "length scale must be positive and finite, got {length_scale}"
            )));
        }
        let w = gaussian_init(
            seed,
            "matcher.w",
            &[num_features, channels],
            1.0 / length_scale,
        );
        store.register("matcher.w", w, true)?;
        Ok(Matcher {
            num_features,
            channels,
        })
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Lifts `[N, C]` feature rows into the kernel space: rows are
    /// L2-normalized, projected, and mapped to scaled cosine/sine pairs.
    /// Every output row has unit norm by construction.
    pub fn embed(&self, g: &Graph, tokens: &Tensor) -> Tensor {
        assert_eq!(tokens.shape().len(), 2, "embed expects [N, C]");
        assert_eq!(
            tokens.shape()[1],
            self.channels,
            "matcher was built for {} channels",
            self.channels
        );
        let w = g.param("matcher.w");
        let z = tokens.l2_normalize_last(1e-12).matmul_nt(&w);
        concat(1, &[z.cos(), z.sin()]).scale(1.0 / (self.num_features as f64).sqrt())
    }

    /// Correlation volume between two harmonized coarse maps `[C, H, W]`:
    /// `scores[k, y, x]` compares `fa` at `(y, x)` with `fb` bilinearly
    /// sampled at `(y, x) + m_k`.
    pub fn build_volume(
        &self,
        g: &Graph,
        fa: &Tensor,
        fb: &Tensor,
        lattice: &DisplacementLattice,
    ) -> Result<CorrelationVolume> {
        let sa = fa.shape().to_vec();
        let sb = fb.shape().to_vec();
        if sa.len() != 3 || sa != sb {
            return Err(Error::validation(format!(
                "correlation needs matching [C, H, W] maps, got {sa:?} and {sb:?}"
            )));
        }
        if sa[0] != self.channels {
            return Err(Error::validation(format!(
                "matcher was built for {} channels, maps have {}",
                self.channels, sa[0]
            )));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let phi_a = self.embed(g, &fa.reshape(&[c, h * w]).transpose2());

        let mut planes = Vec::with_capacity(lattice.num_bins());
        let mut valid = Array3::from_elem((lattice.num_bins(), h, w), false);
        for k in 0..lattice.num_bins() {
            let (dy, dx) = lattice.offset(k);
            let mut mask = ArrayD::zeros(IxDyn(&[h * w, 1]));
            for y in 0..h {
                for x in 0..w {
                    let s = BilinearSample::at(x as f64 + dx, y as f64 + dy, h, w);
                    if s.covered {
                        mask[[y * w + x, 0]] = 1.0;
                        valid[[k, y, x]] = true;
                    }
                }
            }
            let shifted = offset_sample(fb, dy, dx);
            let phi_b = self.embed(g, &shifted.reshape(&[c, h * w]).transpose2());
            let dots = phi_a.mul(&phi_b).sum_axis(1).reshape(&[h * w, 1]);
            planes.push(dots.mul(&Tensor::constant(mask)).reshape(&[h, w]));
        }
        Ok(CorrelationVolume {
            scores: stack0(&planes),
            valid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tokens(rows: &[Vec<f64>]) -> Tensor {
        let n = rows.len();
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[n, c]), flat).unwrap())
    }

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 3, 64, 5, 1.0).unwrap();
        let g = Graph::new(&store);
        let t = tokens(&[vec![0.3, -1.2, 0.8, 2.0, -0.1]]);
        let phi = m.embed(&g, &t);
        let norm2: f64 = phi.value().iter().map(|v| v * v).sum();
        assert!((norm2 - 1.0).abs() < 1e-12, "norm^2 {norm2}");
    }

    #[test]
    fn inner_product_matches_the_cosine_sum_identity() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 7, 32, 4, 1.3).unwrap();
        let g = Graph::new(&store);
        let a = vec![0.5, -0.2, 1.1, 0.7];
        let b = vec![-0.9, 0.4, 0.3, -1.5];
        let phi = m.embed(&g, &tokens(&[a.clone(), b.clone()]));
        let pv = phi.value();
        let dot: f64 = (0..64).map(|j| pv[[0, j]] * pv[[1, j]]).sum();

        let unit = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let (ua, ub) = (unit(&a), unit(&b));
        let wmat = store.value("matcher.w");
        let mut closed = 0.0;
        for d in 0..32 {
            let proj: f64 = (0..4).map(|j| wmat[[d, j]] * (ua[j] - ub[j])).sum();
            closed += proj.cos();
        }
        closed /= 32.0;
        assert!((dot - closed).abs() < 1e-10, "{dot} vs {closed}");
    }

    #[test]
    fn monte_carlo_inner_products_track_the_gaussian_kernel() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 13, 1024, 8, 1.0).unwrap();
        let g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut total = 0.0;
        for _ in 0..200 {
            let draw = |rng: &mut ChaCha8Rng| {
                let v: Array1<f64> = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
                let n = v.dot(&v).sqrt();
                (v / n).to_vec()
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let phi = m.embed(&g, &tokens(&[a.clone(), b.clone()]));
            let pv = phi.value();
            let dot: f64 = (0..2048).map(|j| pv[[0, j]] * pv[[1, j]]).sum();
            let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            total += (dot - (-d2 / 2.0).exp()).abs();
        }
        let mean = total / 200.0;
        assert!(mean < 0.05, "mean kernel deviation {mean}");
    }

    #[test]
    fn identical_maps_score_one_at_the_center_bin() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 5, 64, 3, 1.0).unwrap();
        let g = Graph::new(&store);
        let f = Tensor::constant(random_map(21, 3, 6, 7));
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        let vol = m.build_volume(&g, &f, &f, &lat).unwrap();
        assert_eq!(vol.scores.shape(), &[9, 6, 7]);
        let k0 = lat.center_bin();
        for y in 0..6 {
            for x in 0..7 {
                let s = vol.scores.value()[[k0, y, x]];
                assert!((s - 1.0).abs() < 1e-9, "({y},{x}) score {s}");
                assert!(vol.valid[[k0, y, x]]);
            }
        }
    }

    #[test]
    fn a_one_step_shift_wins_its_own_bin() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 8, 64, 3, 1.0).unwrap();
        let g = Graph::new(&store);
        let fa = random_map(33, 3, 8, 8);
        // fb(y, x) = fa(y, x + 1), so fa at x matches fb sampled one step left.
        let mut fb = fa.clone();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    fb[[c, y, x]] = fa[[c, y, (x + 1) % 8]];
                }
            }
        }
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        let vol = m
            .build_volume(
                &g,
                &Tensor::constant(fb),
                &Tensor::constant(fa.clone()),
                &lat,
            )
            .unwrap();
        // offset (0, +1) is bin 5 in row-major (dy, dx) order
        for y in 1..7 {
            for x in 1..6 {
                let best = (0..9)
                    .max_by(|&i, &j| {
                        vol.scores.value()[[i, y, x]]
                            .partial_cmp(&vol.scores.value()[[j, y, x]])
                            .unwrap()
                    })
                    .unwrap();
                assert_eq!(best, 5, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn volume_matches_a_brute_force_oracle() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 17, 16, 3, 0.8).unwrap();
        let g = Graph::new(&store);
        let fa = random_map(40, 3, 4, 5);
        let fb = random_map(41, 3, 4, 5);
        let lat = DisplacementLattice::new(3, 0.75).unwrap();
        let vol = m
            .build_volume(
                &g,
                &Tensor::constant(fa.clone()),
                &Tensor::constant(fb.clone()),
                &lat,
            )
            .unwrap();

        let wmat = store.value("matcher.w").clone();
        let phi = |v: &[f64]| -> Vec<f64> {
            let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
            let u: Vec<f64> = v.iter().map(|x| x / n).collect();
            let mut out = vec![0.0; 32];
            for d in 0..16 {
                let p: f64 = (0..3).map(|j| wmat[[d, j]] * u[j]).sum();
                out[d] = p.cos() / 4.0;
                out[16 + d] = p.sin() / 4.0;
            }
            out
        };
        for k in 0..9 {
            let (dy, dx) = lat.offset(k);
            for y in 0..4 {
                for x in 0..5 {
                    let s = BilinearSample::at(x as f64 + dx, y as f64 + dy, 4, 5);
                    let expect = if s.covered {
                        let sampled: Vec<f64> = (0..3)
                            .map(|c| {
                                let plane = fb.index_axis(ndarray::Axis(0), c);
                                let p2 = plane
                                    .into_dimensionality::<ndarray::Ix2>()
                                    .unwrap();
                                s.interpolate(&p2)
                            })
                            .collect();
                        let pa = phi(
                            &(0..3).map(|c| fa[[c, y, x]]).collect::<Vec<f64>>(),
                        );
                        let pb = phi(&sampled);
                        pa.iter().zip(&pb).map(|(a, b)| a * b).sum::<f64>()
                    } else {
                        0.0
                    };
                    let got = vol.scores.value()[[k, y, x]];
                    assert!(
                        (got - expect).abs() < 1e-6,
                        "bin {k} pixel ({y},{x}): {got} vs {expect}"
                    );
                    assert_eq!(vol.valid[[k, y, x]], s.covered);
                }
            }
        }
    }

    #[test]
    fn self_volume_is_symmetric_under_bin_mirroring() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 51, 32, 4, 1.0).unwrap();
        let g = Graph::new(&store);
        let f = Tensor::constant(random_map(52, 4, 7, 7));
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        let vol = m.build_volume(&g, &f, &f, &lat).unwrap();
        for k in 0..9 {
            let (dy, dx) = lat.offset(k);
            let mk = lat.mirror(k);
            for y in 1..6 {
                for x in 1..6 {
                    let ty = (y as f64 + dy) as isize;
                    let tx = (x as f64 + dx) as isize;
                    if !(0..7).contains(&ty) || !(0..7).contains(&tx) {
                        continue;
                    }
                    let a = vol.scores.value()[[k, y, x]];
                    let b = vol.scores.value()[[mk, ty as usize, tx as usize]];
                    assert!((a - b).abs() < 1e-5, "bin {k} at ({y},{x}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn all_valid_scores_stay_bounded() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 60, 24, 3, 0.5).unwrap();
        let g = Graph::new(&store);
        let fa = Tensor::constant(random_map(61, 3, 5, 5).mapv(|v| v * 10.0));
        let fb = Tensor::constant(random_map(62, 3, 5, 5).mapv(|v| v * 10.0));
        let lat = DisplacementLattice::new(5, 1.0).unwrap();
        let vol = m.build_volume(&g, &fa, &fb, &lat).unwrap();
        for v in vol.scores.value().iter() {
            assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12, "score {v}");
        }
    }

    #[test]
    fn gradients_flow_back_into_both_feature_maps() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 70, 8, 2, 1.0).unwrap();
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        let fa0 = random_map(71, 2, 3, 3);
        let fb0 = random_map(72, 2, 3, 3);
        let rel = crate::tensor::finite_diff_check(&[fa0, fb0], 1e-6, &|ins| {
            let g = Graph::new(&store);
            let vol = m.build_volume(&g, &ins[0], &ins[1], &lat).unwrap();
            vol.scores.mean()
        });
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn frozen_projection_receives_no_gradient() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 80, 8, 2, 1.0).unwrap();
        let g = Graph::new(&store);
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        let fa = Tensor::leaf(random_map(81, 2, 3, 3));
        let vol = m.build_volume(&g, &fa, &fa, &lat).unwrap();
        vol.scores.mean().backward();
        assert!(g.take_grads().is_empty());
        assert!(fa.grad().is_some());
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let mut store = ParamStore::new();
        let m = Matcher::register(&mut store, 90, 8, 3, 1.0).unwrap();
        let g = Graph::new(&store);
        let lat = DisplacementLattice::new(3, 1.0).unwrap();
        let a = Tensor::constant(random_map(91, 3, 4, 4));
        let b = Tensor::constant(random_map(92, 3, 4, 5));
        assert!(m.build_volume(&g, &a, &b, &lat).is_err());
        let c = Tensor::constant(random_map(93, 2, 4, 4));
        assert!(m.build_volume(&g, &c, &c, &lat).is_err());
    }
}
