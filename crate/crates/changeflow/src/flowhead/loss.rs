//! Flow supervision: per-pixel KL against the smoothed target plus a
//! weighted endpoint-error term on the decoded flow, with the certainty
//! channel trained against the in-range mask.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::geometry::DenseFlow;
use crate::lattice::DisplacementLattice;
use crate::tensor::{bce_with_logits_masked, Tensor};

use super::{argsoftmax_decode, gaussian_target, FlowDistribution};

/// Scalar loss with per-term snapshots for logging. `empty` is raised when
/// no pixel is both valid and in lattice range, in which case the KL term
/// is defined as zero.
pub struct FlowLossTerms {
    pub total: Tensor,
    pub kl: f64,
    pub epe: f64,
    pub aux: f64,
    pub empty: bool,
}

/// Distribution matching over valid in-range pixels, endpoint error over
/// all valid pixels, and certainty BCE everywhere:
/// `KL + alpha * EPE + aux_weight * BCE`.
pub fn flow_loss(
    dist: &FlowDistribution,
    aux_logits: &Tensor,
    w_star: &DenseFlow,
    lattice: &DisplacementLattice,
    sigma: f64,
    alpha: f64,
    aux_weight: f64,
) -> Result<FlowLossTerms> {
    let shape = dist.logits.shape().to_vec();
    let (h, w) = (w_star.height(), w_star.width());
    if shape[0] != lattice.num_bins() {
        return Err(Error::validation(format!(
            "distribution has {} bins but the lattice has {}",
            shape[0],
            lattice.num_bins()
        )));
    }
    if shape[1] != h || shape[2] != w {
        return Err(Error::validation(format!(
            "distribution grid {}x{} does not match ground truth {}x{}",
            shape[1], shape[2], h, w
        )));
    }
    if aux_logits.shape() != [h, w] {
        return Err(Error::validation(format!(
            "certainty logits must be [{h}, {w}], got {:?}",
            aux_logits.shape()
        )));
    }
    for (name, value) in [("alpha", alpha), ("aux weight", aux_weight)] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::validation(format!(
                "{name} must be finite and nonnegative, got {value}"
            )));
        }
    }

    let (target, in_range) = gaussian_target(w_star, lattice, sigma)?;
    let mut kl_mask = ArrayD::zeros(ndarray::IxDyn(&[h, w]));
    let mut valid_mask = ArrayD::zeros(ndarray::IxDyn(&[h, w]));
    let mut labels = ArrayD::zeros(ndarray::IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            let ok = w_star.valid[(y, x)];
            let supervised = ok && in_range[(y, x)];
            valid_mask[[y, x]] = if ok { 1.0 } else { 0.0 };
            kl_mask[[y, x]] = if supervised { 1.0 } else { 0.0 };
            labels[[y, x]] = if supervised { 1.0 } else { 0.0 };
        }
    }
    let empty = kl_mask.sum() == 0.0;

    let probs = dist.probs();
    let log_probs = dist.log_probs();
    let log_target = Tensor::constant(target.mapv(|p| p.max(1e-300).ln()));
    let kl_term = probs
        .mul(&log_probs.sub(&log_target))
        .sum_axis(0)
        .masked_mean(&kl_mask);

    let (u_hat, v_hat) = argsoftmax_decode(&probs, lattice);
    let du = u_hat.sub(&Tensor::constant(w_star.u.clone().into_dyn()));
    let dv = v_hat.sub(&Tensor::constant(w_star.v.clone().into_dyn()));
    let epe_term = du
        .mul(&du)
        .add(&dv.mul(&dv))
        .sqrt_eps(1e-12)
        .masked_mean(&valid_mask);

    let ones = ArrayD::from_elem(ndarray::IxDyn(&[h, w]), 1.0);
    let aux_term = bce_with_logits_masked(aux_logits, &labels, &ones);

    let total = kl_term
        .add(&epe_term.scale(alpha))
        .add(&aux_term.scale(aux_weight));
    Ok(FlowLossTerms {
        total,
        kl: kl_term.item(),
        epe: epe_term.item(),
        aux: aux_term.item(),
        empty,
    })
}
