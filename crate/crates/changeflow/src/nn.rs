//! Small neural building blocks over the tensor engine: linear maps,
//! convolutions, layer norm, multi-head self-attention, and pre-norm
//! transformer blocks. Construction registers parameters into a
//! [`ParamStore`] under dotted names; application pulls them back out of a
//! [`Graph`] so the same definitions serve training and inference.
//!
//! Initialization is keyed by `(seed, parameter name)` so a rebuilt model
//! reproduces its weights exactly regardless of registration order.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::Result;
use crate::seeding;
use crate::tensor::{concat, conv2d, Graph, ParamStore, Tensor};

fn uniform_init(seed: u64, name: &str, shape: &[usize], bound: f64) -> ArrayD<f64> {
    let mut rng = seeding::rng(seed, name);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

/// Fills a tensor with independent draws from N(0, std^2).
pub fn gaussian_init(seed: u64, name: &str, shape: &[usize], std: f64) -> ArrayD<f64> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = seeding::rng(seed, name);
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(&mut rng))
}

/// Fully connected map on token matrices: [N, in] -> [N, out].
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let weight = if zero_init {
            ArrayD::zeros(IxDyn(&[out_dim, in_dim]))
        } else {
            let bound = (1.0 / in_dim as f64).sqrt();
            uniform_init(seed, &wname, &[out_dim, in_dim], bound)
        };
        store.register(&wname, weight, false)?;
        store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])), false)?;
        Ok(Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        })
    }

    pub fn apply(&self, g: &Graph, x: &Tensor) -> Tensor {
        let w = g.param(&format!("{}.weight", self.name));
        let b = g.param(&format!("{}.bias", self.name));
        x.matmul_nt(&w).add_row_bias(&b)
    }
}

/// Square-kernel 2-D convolution on [C, H, W] fields with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let shape = [cout, cin, kernel, kernel];
        let weight = if zero_init {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            let bound = (1.0 / (cin * kernel * kernel) as f64).sqrt();
            uniform_init(seed, &wname, &shape, bound)
        };
        store.register(&wname, weight, false)?;
        store.register(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), false)?;
        Ok(Conv {
            name: name.to_string(),
            cin,
            cout,
            kernel,
            stride,
            pad,
        })
    }

    pub fn apply(&self, g: &Graph, x: &Tensor) -> Tensor {
        let w = g.param(&format!("{}.weight", self.name));
        let b = g.param(&format!("{}.bias", self.name));
        conv2d(x, &w, self.stride, self.pad).add_channel_bias(&b)
    }
}

/// Layer normalization over the trailing feature axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        store.register(
            &format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[dim]), 1.0),
            false,
        )?;
        store.register(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])), false)?;
        Ok(LayerNorm {
            name: name.to_string(),
            dim,
        })
    }

    pub fn apply(&self, g: &Graph, x: &Tensor) -> Tensor {
        let gamma = g.param(&format!("{}.gamma", self.name));
        let beta = g.param(&format!("{}.beta", self.name));
        x.layer_norm_last(&gamma, &beta, 1e-5)
    }
}

/// Multi-head self-attention over a token matrix [N, C].
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
}

impl MultiHeadAttention {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        assert!(heads >= 1 && dim % heads == 0, "head count must divide width");
        Ok(MultiHeadAttention {
            dim,
            heads,
            q: Linear::register(store, seed, &format!("{name}.q"), dim, dim, false)?,
            k: Linear::register(store, seed, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::register(store, seed, &format!("{name}.v"), dim, dim, false)?,
            proj: Linear::register(store, seed, &format!("{name}.proj"), dim, dim, false)?,
        })
    }

    pub fn apply(&self, g: &Graph, x: &Tensor) -> Tensor {
        let q = self.q.apply(g, x);
        let k = self.k.apply(g, x);
        let v = self.v.apply(g, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh);
            let kh = k.narrow(1, h * dh, dh);
            let vh = v.narrow(1, h * dh, dh);
            let attn = qh.matmul_nt(&kh).scale(scale).softmax(1);
            outs.push(attn.matmul(&vh));
        }
        let merged = concat(1, &outs);
        self.proj.apply(g, &merged)
    }
}

/// Pre-norm transformer block: attention and a SiLU MLP, each residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::register(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::register(store, seed, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::register(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::register(store, seed, &format!("{name}.fc1"), dim, mlp_dim, false)?,
            fc2: Linear::register(store, seed, &format!("{name}.fc2"), mlp_dim, dim, false)?,
        })
    }

    pub fn apply(&self, g: &Graph, x: &Tensor) -> Tensor {
        let x = x.add(&self.attn.apply(g, &self.ln1.apply(g, x)));
        let mlp = self.fc2.apply(g, &self.fc1.apply(g, &self.ln2.apply(g, &x)).silu());
        x.add(&mlp)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tokens(n: usize, c: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[n, c]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_forward_matches_manual_product() {
        let mut store = ParamStore::new();
        let lin = Linear::register(&mut store, 7, "lin", 3, 2, false).unwrap();
        let x = tokens(4, 3, 1);
        let g = Graph::new(&store);
        let y = lin.apply(&g, &Tensor::constant(x.clone()));
        let w = store.value("lin.weight");
        for i in 0..4 {
            for o in 0..2 {
                let want: f64 = (0..3).map(|j| x[[i, j]] * w[[o, j]]).sum();
                assert!((y.value()[[i, o]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initialization_is_keyed_by_seed_and_name() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        Linear::register(&mut s1, 7, "b", 4, 4, false).unwrap();
        Linear::register(&mut s1, 7, "a", 4, 4, false).unwrap();
        Linear::register(&mut s2, 7, "a", 4, 4, false).unwrap();
        Linear::register(&mut s2, 7, "b", 4, 4, false).unwrap();
        assert_eq!(s1.value("a.weight"), s2.value("a.weight"));
        assert_eq!(s1.value("b.weight"), s2.value("b.weight"));
        assert_ne!(s1.value("a.weight"), s1.value("b.weight"));

        let mut s3 = ParamStore::new();
        Linear::register(&mut s3, 8, "a", 4, 4, false).unwrap();
        assert_ne!(s1.value("a.weight"), s3.value("a.weight"));
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let mut store = ParamStore::new();
        Linear::register(&mut store, 3, "wide", 64, 8, false).unwrap();
        let bound = (1.0f64 / 64.0).sqrt();
        assert!(store
            .value("wide.weight")
            .iter()
            .all(|v| v.abs() < bound));
        assert!(store.value("wide.bias").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_init_produces_exact_zeros() {
        let mut store = ParamStore::new();
        Linear::register(&mut store, 3, "last", 8, 2, true).unwrap();
        Conv::register(&mut store, 3, "head", 4, 1, 3, 1, 1, true).unwrap();
        assert!(store.value("last.weight").iter().all(|&v| v == 0.0));
        assert!(store.value("head.weight").iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_layer_adds_bias_per_channel() {
        let mut store = ParamStore::new();
        let conv = Conv::register(&mut store, 5, "c", 2, 3, 3, 1, 1, false).unwrap();
        store.set_value(
            "c.bias",
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, -0.2, 0.3]).unwrap(),
        );
        let x = ArrayD::zeros(IxDyn(&[2, 4, 4]));
        let g = Graph::new(&store);
        let y = conv.apply(&g, &Tensor::constant(x));
        assert!((y.value()[[0, 2, 2]] - 0.1).abs() < 1e-15);
        assert!((y.value()[[1, 0, 3]] + 0.2).abs() < 1e-15);
        assert!((y.value()[[2, 3, 1]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn single_token_attention_reduces_to_value_projection() {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::register(&mut store, 11, "mha", 6, 2).unwrap();
        let x = tokens(1, 6, 2);
        let g = Graph::new(&store);
        let got = attn.apply(&g, &Tensor::constant(x.clone()));
        let v = attn.v.apply(&g, &Tensor::constant(x));
        let want = attn.proj.apply(&g, &v);
        for j in 0..6 {
            assert!((got.value()[[0, j]] - want.value()[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_and_block_are_permutation_equivariant() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::register(&mut store, 13, "blk", 8, 2, 16).unwrap();
        let x = tokens(5, 8, 3);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = ArrayD::zeros(IxDyn(&[5, 8]));
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                xp[[dst, j]] = x[[src, j]];
            }
        }
        let g = Graph::new(&store);
        let y = block.apply(&g, &Tensor::constant(x));
        let yp = block.apply(&g, &Tensor::constant(xp));
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp.value()[[dst, j]] - y.value()[[src, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn block_gradients_reach_every_parameter() {
        let mut store = ParamStore::new();
        let block = TransformerBlock::register(&mut store, 17, "blk", 4, 1, 8).unwrap();
        let x = tokens(3, 4, 4);
        let g = Graph::new(&store);
        let y = block.apply(&g, &Tensor::constant(x));
        y.mul(&y).sum().backward();
        let grads = g.take_grads();
        let names: Vec<&str> = grads.iter().map(|(n, _)| n.as_str()).collect();
        for expect in [
            "blk.ln1.gamma",
            "blk.attn.q.weight",
            "blk.attn.proj.bias",
            "blk.ln2.beta",
            "blk.fc1.weight",
            "blk.fc2.bias",
        ] {
            assert!(names.contains(&expect), "missing gradient for {expect}");
        }
        for (name, grad) in &grads {
            assert!(
                grad.iter().all(|v| v.is_finite()),
                "non-finite gradient in {name}"
            );
        }
    }
}
