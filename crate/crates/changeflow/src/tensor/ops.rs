use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, Slice, Zip};

use super::Tensor;
use crate::geometry::BilinearSample;

fn as2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

// dot() emits a column-major result when both row strides are 1, which
// happens whenever the inner dimension collapses to a single element.
// Reshapes downstream require C order, so normalize eagerly.
fn c_order<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let value = self.value() + other.value();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate(g);
                }
                if b.requires_grad() {
                    b.accumulate(g);
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let value = self.value() - other.value();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate(g);
                }
                if b.requires_grad() {
                    b.accumulate(&-g);
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let value = self.value() * other.value();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate(&(g * b.value()));
                }
                if b.requires_grad() {
                    b.accumulate(&(g * a.value()));
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let value = self.value() * c;
        let a = self.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * c))),
        )
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        let value = self.value() + c;
        let a = self.clone();
        Tensor::from_op(value, vec![self.clone()], Box::new(move |g| a.accumulate(g)))
    }

    pub fn abs(&self) -> Tensor {
        let value = self.value().mapv(f64::abs);
        let a = self.clone();
        let sign = self.value().mapv(f64::signum);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * &sign))),
        )
    }

    pub fn silu(&self) -> Tensor {
        let value = self.value().mapv(|x| x * sigmoid(x));
        let a = self.clone();
        let deriv = self.value().mapv(|x| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        });
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * &deriv))),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let value = self.value().mapv(sigmoid);
        let a = self.clone();
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * &(&y * &y.mapv(|v| 1.0 - v))))),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let value = self.value().mapv(f64::tanh);
        let a = self.clone();
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * &y.mapv(|v| 1.0 - v * v)))),
        )
    }

    pub fn exp(&self) -> Tensor {
        let value = self.value().mapv(f64::exp);
        let a = self.clone();
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * &y))),
        )
    }

    pub fn cos(&self) -> Tensor {
        let value = self.value().mapv(f64::cos);
        let a = self.clone();
        let neg_sin = self.value().mapv(|x| -x.sin());
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * &neg_sin))),
        )
    }

    pub fn sin(&self) -> Tensor {
        let value = self.value().mapv(f64::sin);
        let a = self.clone();
        let cos = self.value().mapv(f64::cos);
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g * &cos))),
        )
    }

    /// sqrt(x + eps), smooth at the origin for small positive eps.
    pub fn sqrt_eps(&self, eps: f64) -> Tensor {
        let value = self.value().mapv(|x| (x + eps).sqrt());
        let a = self.clone();
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| a.accumulate(&(g / &(y.mapv(|v| 2.0 * v))))),
        )
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.value().sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        let a = self.clone();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().expect("scalar grad");
                a.accumulate(&ArrayD::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let value = self.value().sum_axis(Axis(axis));
        let a = self.clone();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            value.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let expanded = g
                    .view()
                    .insert_axis(Axis(axis))
                    .broadcast(IxDyn(&shape))
                    .expect("broadcast grad")
                    .to_owned();
                a.accumulate(&expanded);
            }),
        )
    }

    /// Mean of `x` over the true entries of `mask` (same shape); yields a
    /// gradient-free zero when the mask is empty.
    pub fn masked_mean(&self, mask: &ArrayD<f64>) -> Tensor {
        assert_eq!(self.shape(), mask.shape(), "masked_mean shape mismatch");
        let n: f64 = mask.sum();
        if n == 0.0 {
            return Tensor::scalar_const(0.0);
        }
        let total = (self.value() * mask).sum();
        let a = self.clone();
        let mask = mask.clone();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total / n),
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().expect("scalar grad");
                a.accumulate(&(&mask * (gv / n)));
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let value = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let a = self.clone();
        let orig = self.shape().to_vec();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad");
                a.accumulate(&back);
            }),
        )
    }

    pub fn transpose2(&self) -> Tensor {
        let value = as2(self.value()).t().as_standard_layout().to_owned();
        let a = self.clone();
        Tensor::from_op(
            value.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let gt = as2(g).t().as_standard_layout().to_owned();
                a.accumulate(&gt.into_dyn());
            }),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let a = self.clone();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                a.accumulate(&full);
            }),
        )
    }

    /// out = self @ other for rank-2 operands [m,k] x [k,n].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let value = c_order(as2(self.value()).dot(&as2(other.value())));
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            value.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let gv = as2(g);
                if a.requires_grad() {
                    a.accumulate(&gv.dot(&as2(b.value()).t()).into_dyn());
                }
                if b.requires_grad() {
                    b.accumulate(&as2(a.value()).t().dot(&gv).into_dyn());
                }
            }),
        )
    }

    /// out = self @ other^T for rank-2 operands [m,k] x [n,k].
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let value = c_order(as2(self.value()).dot(&as2(other.value()).t()));
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            value.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let gv = as2(g);
                if a.requires_grad() {
                    a.accumulate(&gv.dot(&as2(b.value())).into_dyn());
                }
                if b.requires_grad() {
                    b.accumulate(&gv.t().dot(&as2(a.value())).into_dyn());
                }
            }),
        )
    }

    /// Adds a [C] bias across rows of a [N,C] matrix.
    pub fn add_row_bias(&self, bias: &Tensor) -> Tensor {
        let (n, c) = as2(self.value()).dim();
        assert_eq!(bias.shape(), [c], "row bias width mismatch");
        let mut value = self.value().clone();
        {
            let mut v = value.view_mut().into_dimensionality::<Ix2>().unwrap();
            let bv = bias.value().view().into_dimensionality::<Ix1>().unwrap();
            for mut row in v.rows_mut() {
                row += &bv;
            }
        }
        let (a, b) = (self.clone(), bias.clone());
        let _ = n;
        Tensor::from_op(
            value,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate(g);
                }
                if b.requires_grad() {
                    b.accumulate(&as2(g).sum_axis(Axis(0)).into_dyn());
                }
            }),
        )
    }

    /// Adds a [C] bias to every spatial position of a [C,H,W] field.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Tensor {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 3, "channel bias expects [C,H,W]");
        assert_eq!(bias.shape(), [shape[0]], "channel bias width mismatch");
        let mut value = self.value().clone();
        for c in 0..shape[0] {
            let b = bias.value()[[c]];
            value.index_axis_mut(Axis(0), c).mapv_inplace(|x| x + b);
        }
        let (a, bt) = (self.clone(), bias.clone());
        Tensor::from_op(
            value,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate(g);
                }
                if bt.requires_grad() {
                    let c = g.shape()[0];
                    let mut db = ArrayD::zeros(IxDyn(&[c]));
                    for i in 0..c {
                        db[[i]] = g.index_axis(Axis(0), i).sum();
                    }
                    bt.accumulate(&db);
                }
            }),
        )
    }

    /// Multiplies each channel of a [C,H,W] field by a [C] gate.
    pub fn mul_channel(&self, gate: &Tensor) -> Tensor {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 3, "channel gate expects [C,H,W]");
        assert_eq!(gate.shape(), [shape[0]], "channel gate width mismatch");
        let mut value = self.value().clone();
        for c in 0..shape[0] {
            let s = gate.value()[[c]];
            value.index_axis_mut(Axis(0), c).mapv_inplace(|x| x * s);
        }
        let (a, gt) = (self.clone(), gate.clone());
        Tensor::from_op(
            value,
            vec![self.clone(), gate.clone()],
            Box::new(move |g| {
                let c = g.shape()[0];
                if a.requires_grad() {
                    let mut dx = g.clone();
                    for i in 0..c {
                        let s = gt.value()[[i]];
                        dx.index_axis_mut(Axis(0), i).mapv_inplace(|x| x * s);
                    }
                    a.accumulate(&dx);
                }
                if gt.requires_grad() {
                    let mut dg = ArrayD::zeros(IxDyn(&[c]));
                    for i in 0..c {
                        dg[[i]] = (&g.index_axis(Axis(0), i) * &a.value().index_axis(Axis(0), i))
                            .sum();
                    }
                    gt.accumulate(&dg);
                }
            }),
        )
    }

    /// Global average pool of a [C,H,W] field to [C].
    pub fn global_avg_pool(&self) -> Tensor {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 3, "pool expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let inv = 1.0 / (h * w) as f64;
        let mut value = ArrayD::zeros(IxDyn(&[c]));
        for i in 0..c {
            value[[i]] = self.value().index_axis(Axis(0), i).sum() * inv;
        }
        let a = self.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                for i in 0..c {
                    let gi = g[[i]] * inv;
                    dx.index_axis_mut(Axis(0), i).fill(gi);
                }
                a.accumulate(&dx);
            }),
        )
    }

    pub fn softmax(&self, axis: usize) -> Tensor {
        let mut value = self.value().clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - max).exp());
            let total = lane.sum();
            lane.mapv_inplace(|x| x / total);
        }
        let a = self.clone();
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let weighted = (&y * g).sum_axis(Axis(axis));
                let shape = y.shape().to_vec();
                let broad = weighted
                    .view()
                    .insert_axis(Axis(axis))
                    .broadcast(IxDyn(&shape))
                    .expect("softmax grad broadcast")
                    .to_owned();
                a.accumulate(&(&y * &(g - &broad)));
            }),
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let mut value = self.value().clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = lane.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            lane.mapv_inplace(|x| x - lse);
        }
        let a = self.clone();
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let gsum = g.sum_axis(Axis(axis));
                let shape = y.shape().to_vec();
                let broad = gsum
                    .view()
                    .insert_axis(Axis(axis))
                    .broadcast(IxDyn(&shape))
                    .expect("log_softmax grad broadcast")
                    .to_owned();
                a.accumulate(&(g - &(&y.mapv(f64::exp) * &broad)));
            }),
        )
    }

    /// Layer normalization over the last axis with learned affine.
    pub fn layer_norm_last(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let rank = self.shape().len();
        let axis = rank - 1;
        let n = self.shape()[axis];
        assert_eq!(gamma.shape(), [n], "layer norm gamma width");
        assert_eq!(beta.shape(), [n], "layer norm beta width");
        let mut zhat = self.value().clone();
        let mut istd = Vec::new();
        for mut lane in zhat.lanes_mut(Axis(axis)) {
            let mu = lane.sum() / n as f64;
            let var = lane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            istd.push(inv);
            lane.mapv_inplace(|x| (x - mu) * inv);
        }
        let mut value = zhat.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            for (i, x) in lane.iter_mut().enumerate() {
                *x = *x * gamma.value()[[i]] + beta.value()[[i]];
            }
        }
        let (a, gm, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                if gm.requires_grad() {
                    let mut dgamma = ArrayD::zeros(IxDyn(&[n]));
                    let mut dbeta = ArrayD::zeros(IxDyn(&[n]));
                    for (glane, zlane) in g.lanes(Axis(axis)).into_iter().zip(zhat.lanes(Axis(axis))) {
                        for i in 0..n {
                            dgamma[[i]] += glane[i] * zlane[i];
                            dbeta[[i]] += glane[i];
                        }
                    }
                    gm.accumulate(&dgamma);
                    bt.accumulate(&dbeta);
                }
                if a.requires_grad() {
                    let mut dx = g.clone();
                    for ((mut dlane, zlane), inv) in dx
                        .lanes_mut(Axis(axis))
                        .into_iter()
                        .zip(zhat.lanes(Axis(axis)))
                        .zip(istd.iter())
                    {
                        // dzhat_i = g_i * gamma_i, then the standard LN pullback.
                        let mut dz: Vec<f64> = (0..n)
                            .map(|i| dlane[i] * gm.value()[[i]])
                            .collect();
                        let mean_dz = dz.iter().sum::<f64>() / n as f64;
                        let mean_dzz = dz
                            .iter()
                            .zip(zlane.iter())
                            .map(|(d, z)| d * z)
                            .sum::<f64>()
                            / n as f64;
                        for i in 0..n {
                            dz[i] = (dz[i] - mean_dz - zlane[i] * mean_dzz) * inv;
                        }
                        for (i, x) in dlane.iter_mut().enumerate() {
                            *x = dz[i];
                        }
                    }
                    a.accumulate(&dx);
                }
            }),
        )
    }

    /// L2-normalizes each lane along the last axis.
    pub fn l2_normalize_last(&self, eps: f64) -> Tensor {
        let rank = self.shape().len();
        let axis = rank - 1;
        let mut value = self.value().clone();
        let mut scales = Vec::new();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let norm2: f64 = lane.iter().map(|x| x * x).sum();
            let r = 1.0 / (norm2 + eps).sqrt();
            scales.push(r);
            lane.mapv_inplace(|x| x * r);
        }
        let a = self.clone();
        let y = value.clone();
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = g.clone();
                for ((mut dlane, ylane), r) in dx
                    .lanes_mut(Axis(axis))
                    .into_iter()
                    .zip(y.lanes(Axis(axis)))
                    .zip(scales.iter())
                {
                    let dot: f64 = dlane.iter().zip(ylane.iter()).map(|(a, b)| a * b).sum();
                    for (d, yv) in dlane.iter_mut().zip(ylane.iter()) {
                        *d = (*d - yv * dot) * r;
                    }
                }
                a.accumulate(&dx);
            }),
        )
    }
}

/// Concatenates along `axis`.
pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let owned: Vec<Tensor> = parts.to_vec();
    Tensor::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g| {
            let mut start = 0;
            for (p, &len) in owned.iter().zip(sizes.iter()) {
                if p.requires_grad() {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    p.accumulate(&piece);
                }
                start += len;
            }
        }),
    )
}

/// Stacks equal-shaped tensors along a new leading axis.
pub fn stack0(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = ndarray::stack(Axis(0), &views).expect("stack shape mismatch");
    let owned: Vec<Tensor> = parts.to_vec();
    Tensor::from_op(
        value.into_dyn(),
        parts.to_vec(),
        Box::new(move |g| {
            for (k, p) in owned.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate(&g.index_axis(Axis(0), k).to_owned());
                }
            }
        }),
    )
}

/// out = sum_t w[t] * xs[t], a convex combination when `w` is a softmax.
pub fn weighted_sum(xs: &[Tensor], w: &Tensor) -> Tensor {
    assert_eq!(w.shape(), [xs.len()], "weight count mismatch");
    let mut value = xs[0].value() * w.value()[[0]];
    for (t, x) in xs.iter().enumerate().skip(1) {
        value = value + x.value() * w.value()[[t]];
    }
    let owned: Vec<Tensor> = xs.to_vec();
    let wt = w.clone();
    let mut parents = xs.to_vec();
    parents.push(w.clone());
    Tensor::from_op(
        value,
        parents,
        Box::new(move |g| {
            for (t, x) in owned.iter().enumerate() {
                if x.requires_grad() {
                    x.accumulate(&(g * wt.value()[[t]]));
                }
            }
            if wt.requires_grad() {
                let mut dw = ArrayD::zeros(IxDyn(&[owned.len()]));
                for (t, x) in owned.iter().enumerate() {
                    dw[[t]] = (g * x.value()).sum();
                }
                wt.accumulate(&dw);
            }
        }),
    )
}

/// 2-D convolution of a [Cin,H,W] field with [Cout,Cin,k,k] weights,
/// implemented as im2col followed by one matrix product.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = {
        let s = x.shape();
        assert_eq!(s.len(), 3, "conv input must be [C,H,W]");
        (s[0], s[1], s[2])
    };
    let (cout, wcin, k) = {
        let s = weight.shape();
        assert_eq!(s.len(), 4, "conv weight must be [Cout,Cin,k,k]");
        assert_eq!(s[2], s[3], "square kernels only");
        (s[0], s[1], s[2])
    };
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert!(stride >= 1);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;

    let mut col = ndarray::Array2::<f64>::zeros((cin * k * k, ho * wo));
    for oy in 0..ho {
        for ox in 0..wo {
            let out_idx = oy * wo + ox;
            for c in 0..cin {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[((c * k + ky) * k + kx, out_idx)] =
                            x.value()[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }

    let wmat = weight
        .value()
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .expect("conv weight reshape");
    let out = c_order(wmat.dot(&col));
    let value = out
        .into_shape_with_order(IxDyn(&[cout, ho, wo]))
        .expect("conv output reshape");

    let (xt, wt) = (x.clone(), weight.clone());
    Tensor::from_op(
        value,
        vec![x.clone(), weight.clone()],
        Box::new(move |g| {
            let gmat = g
                .view()
                .into_shape_with_order((cout, ho * wo))
                .expect("conv grad reshape");
            if wt.requires_grad() {
                let dw = c_order(gmat.dot(&col.t()));
                wt.accumulate(
                    &dw.into_shape_with_order(IxDyn(&[cout, cin, k, k]))
                        .expect("conv dw reshape"),
                );
            }
            if xt.requires_grad() {
                let wmat = wt
                    .value()
                    .view()
                    .into_shape_with_order((cout, cin * k * k))
                    .expect("conv weight reshape");
                let dcol = wmat.t().dot(&gmat);
                let mut dx = ArrayD::zeros(IxDyn(&[cin, h, w]));
                for oy in 0..ho {
                    for ox in 0..wo {
                        let out_idx = oy * wo + ox;
                        for c in 0..cin {
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    dx[[c, iy as usize, ix as usize]] +=
                                        dcol[((c * k + ky) * k + kx, out_idx)];
                                }
                            }
                        }
                    }
                }
                xt.accumulate(&dx);
            }
        }),
    )
}

/// Bilinear resize of a [C,H,W] field to (nh, nw) with half-pixel-aligned
/// sampling and edge clamping. Values are interpolated, not rescaled.
pub fn bilinear_resize(x: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (c, h, w) = {
        let s = x.shape();
        assert_eq!(s.len(), 3, "resize input must be [C,H,W]");
        (s[0], s[1], s[2])
    };
    let mut taps = Vec::with_capacity(nh * nw);
    for oy in 0..nh {
        for ox in 0..nw {
            let sx = (ox as f64 + 0.5) * (w as f64 / nw as f64) - 0.5;
            let sy = (oy as f64 + 0.5) * (h as f64 / nh as f64) - 0.5;
            taps.push(crate::geometry::flow_corner_weights(sx, sy, h, w));
        }
    }
    let mut value = ArrayD::zeros(IxDyn(&[c, nh, nw]));
    for ch in 0..c {
        let plane = x.value().index_axis(Axis(0), ch);
        for oy in 0..nh {
            for ox in 0..nw {
                let mut acc = 0.0;
                for &(iy, ix, wt) in &taps[oy * nw + ox] {
                    if wt != 0.0 {
                        acc += wt * plane[[iy, ix]];
                    }
                }
                value[[ch, oy, ox]] = acc;
            }
        }
    }
    let xt = x.clone();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ch in 0..c {
                for oy in 0..nh {
                    for ox in 0..nw {
                        let gv = g[[ch, oy, ox]];
                        if gv == 0.0 {
                            continue;
                        }
                        for &(iy, ix, wt) in &taps[oy * nw + ox] {
                            if wt != 0.0 {
                                dx[[ch, iy, ix]] += wt * gv;
                            }
                        }
                    }
                }
            }
            xt.accumulate(&dx);
        }),
    )
}

/// Differentiable bilinear warp of `f` [C,H,W] by `flow` [2,H,W] (u then v),
/// gradients flowing into both the field and the flow. Returns the warped
/// field and the non-differentiable coverage mask.
pub fn warp(f: &Tensor, flow: &Tensor) -> (Tensor, ndarray::Array2<bool>) {
    let (c, h, w) = {
        let s = f.shape();
        assert_eq!(s.len(), 3, "warp input must be [C,H,W]");
        (s[0], s[1], s[2])
    };
    assert_eq!(flow.shape(), [2, h, w], "warp flow must be [2,H,W]");

    let mut value = ArrayD::zeros(IxDyn(&[c, h, w]));
    let mut covered = ndarray::Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 + flow.value()[[0, y, x]];
            let sy = y as f64 + flow.value()[[1, y, x]];
            let s = BilinearSample::at(sx, sy, h, w);
            if !s.covered {
                continue;
            }
            covered[(y, x)] = true;
            for ch in 0..c {
                let mut acc = 0.0;
                for &(iy, ix, wt) in &s.corners {
                    if wt != 0.0 {
                        acc += wt * f.value()[[ch, iy, ix]];
                    }
                }
                value[[ch, y, x]] = acc;
            }
        }
    }

    let (ft, ut) = (f.clone(), flow.clone());
    let out = Tensor::from_op(
        value,
        vec![f.clone(), flow.clone()],
        Box::new(move |g| {
            let mut df = ArrayD::zeros(IxDyn(&[c, h, w]));
            let mut dflow = ArrayD::zeros(IxDyn(&[2, h, w]));
            let fv = ft.value();
            for y in 0..h {
                for x in 0..w {
                    let sx = x as f64 + ut.value()[[0, y, x]];
                    let sy = y as f64 + ut.value()[[1, y, x]];
                    let s = BilinearSample::at(sx, sy, h, w);
                    if !s.covered {
                        continue;
                    }
                    let [(y0, x0, _), (_, x1, _), (y1, _, _), _] = s.corners;
                    let (mut dsx, mut dsy) = (0.0, 0.0);
                    for ch in 0..c {
                        let gv = g[[ch, y, x]];
                        if gv == 0.0 {
                            continue;
                        }
                        for &(iy, ix, wt) in &s.corners {
                            if wt != 0.0 {
                                df[[ch, iy, ix]] += wt * gv;
                            }
                        }
                        dsx += gv
                            * ((fv[[ch, y0, x1]] - fv[[ch, y0, x0]]) * (1.0 - s.fy)
                                + (fv[[ch, y1, x1]] - fv[[ch, y1, x0]]) * s.fy);
                        dsy += gv
                            * ((fv[[ch, y1, x0]] - fv[[ch, y0, x0]]) * (1.0 - s.fx)
                                + (fv[[ch, y1, x1]] - fv[[ch, y0, x1]]) * s.fx);
                    }
                    dflow[[0, y, x]] = dsx;
                    dflow[[1, y, x]] = dsy;
                }
            }
            if ft.requires_grad() {
                ft.accumulate(&df);
            }
            if ut.requires_grad() {
                ut.accumulate(&dflow);
            }
        }),
    );
    (out, covered)
}

/// Samples a [C,H,W] field at a constant offset `(dy, dx)` from every pixel
/// with bilinear interpolation; out-of-grid samples read as zero. Integral
/// offsets reduce to an exact shifted gather.
pub fn offset_sample(x: &Tensor, dy: f64, dx: f64) -> Tensor {
    let (c, h, w) = {
        let s = x.shape();
        assert_eq!(s.len(), 3, "offset sample input must be [C,H,W]");
        (s[0], s[1], s[2])
    };
    let mut value = ArrayD::zeros(IxDyn(&[c, h, w]));
    for y in 0..h {
        for xx in 0..w {
            let s = BilinearSample::at(xx as f64 + dx, y as f64 + dy, h, w);
            if !s.covered {
                continue;
            }
            for ch in 0..c {
                let mut acc = 0.0;
                for &(iy, ix, wt) in &s.corners {
                    if wt != 0.0 {
                        acc += wt * x.value()[[ch, iy, ix]];
                    }
                }
                value[[ch, y, xx]] = acc;
            }
        }
    }
    let xt = x.clone();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            let mut dxv = ArrayD::zeros(IxDyn(&[c, h, w]));
            for y in 0..h {
                for xx in 0..w {
                    let s = BilinearSample::at(xx as f64 + dx, y as f64 + dy, h, w);
                    if !s.covered {
                        continue;
                    }
                    for ch in 0..c {
                        let gv = g[[ch, y, xx]];
                        if gv == 0.0 {
                            continue;
                        }
                        for &(iy, ix, wt) in &s.corners {
                            if wt != 0.0 {
                                dxv[[ch, iy, ix]] += wt * gv;
                            }
                        }
                    }
                }
            }
            xt.accumulate(&dxv);
        }),
    )
}

/// Mean binary cross-entropy with logits over the true entries of `mask`,
/// computed in the numerically stable max-form. Empty masks yield a
/// gradient-free zero.
pub fn bce_with_logits_masked(s: &Tensor, y: &ArrayD<f64>, mask: &ArrayD<f64>) -> Tensor {
    assert_eq!(s.shape(), y.shape(), "bce target shape mismatch");
    assert_eq!(s.shape(), mask.shape(), "bce mask shape mismatch");
    let n: f64 = mask.sum();
    if n == 0.0 {
        return Tensor::scalar_const(0.0);
    }
    let mut total = 0.0;
    Zip::from(s.value()).and(y).and(mask).for_each(|&sv, &yv, &mv| {
        if mv != 0.0 {
            total += mv * (sv.max(0.0) - sv * yv + (-sv.abs()).exp().ln_1p());
        }
    });
    let st = s.clone();
    let y = y.clone();
    let mask = mask.clone();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[]), total / n),
        vec![s.clone()],
        Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            let mut dx = ArrayD::zeros(IxDyn(st.shape()));
            Zip::from(&mut dx)
                .and(st.value())
                .and(&y)
                .and(&mask)
                .for_each(|d, &sv, &yv, &mv| {
                    if mv != 0.0 {
                        *d = gv * mv * (sigmoid(sv) - yv) / n;
                    }
                });
            st.accumulate(&dx);
        }),
    )
}
