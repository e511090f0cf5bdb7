//! Residual upsampling from the coarse flow grid to image resolution.
//! The bilinear base path converts coarse-pixel units into image pixels;
//! a small convolutional block adds a tanh-bounded correction on top.

use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::tensor::{bilinear_resize, stack0, Graph, ParamStore, Tensor};

/// Two-convolution correction head over the upsampled flow. The output
/// convolution is zero-initialized, so a fresh head reproduces plain
/// bilinear upsampling exactly.
#[derive(Debug, Clone)]
pub struct RefineHead {
    c1: Conv,
    c2: Conv,
}

impl RefineHead {
    /// Correction ceiling per component, in image pixels.
    pub const MAX_CORRECTION: f64 = 2.0;

    pub fn register(store: &mut ParamStore, seed: u64, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::validation("refine head width must be positive"));
        }
        Ok(RefineHead {
            c1: Conv::register(store, seed, "flow.refine.c1", 2, width, 3, 1, 1, false)?,
            c2: Conv::register(store, seed, "flow.refine.c2", width, 2, 3, 1, 1, true)?,
        })
    }

    /// Coarse (u, v) planes [H, W] in coarse-pixel units to full-resolution
    /// planes [H*factor, W*factor] in image pixels.
    pub fn apply(
        &self,
        g: &Graph,
        u: &Tensor,
        v: &Tensor,
        factor: usize,
    ) -> Result<(Tensor, Tensor)> {
        if u.shape().len() != 2 || u.shape() != v.shape() {
            return Err(Error::validation(format!(
                "coarse flow planes must be matching [H, W], got {:?} and {:?}",
                u.shape(),
                v.shape()
            )));
        }
        if factor == 0 {
            return Err(Error::validation("upsampling factor must be positive"));
        }
        let (h, w) = (u.shape()[0], u.shape()[1]);
        let (nh, nw) = (h * factor, w * factor);
        let base = bilinear_resize(&stack0(&[u.clone(), v.clone()]), nh, nw)
            .scale(factor as f64);
        let correction = self
            .c2
            .apply(g, &self.c1.apply(g, &base).silu())
            .tanh()
            .scale(Self::MAX_CORRECTION);
        let refined = base.add(&correction);
        let u_full = refined.narrow(0, 0, 1).reshape(&[nh, nw]);
        let v_full = refined.narrow(0, 1, 1).reshape(&[nh, nw]);
        Ok((u_full, v_full))
    }
}
