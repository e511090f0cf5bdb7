//! Change detection over warp-aligned feature pyramids: per-timestep
//! difference/correlation descriptors, squeeze-excitation gating, learned
//! convex aggregation across timesteps, and hierarchical coarse-to-fine
//! decoding to one change logit per image pixel.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Conv, Linear};
use crate::tensor::{
    bce_with_logits_masked, bilinear_resize, concat, warp, weighted_sum, Graph, ParamStore,
    Tensor,
};

pub const DEFAULT_DECODER_WIDTHS: [usize; 5] = [64, 64, 96, 96, 128];
pub const DEFAULT_SE_RATIO: usize = 8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Resamples the full-resolution flow to every pyramid scale (rescaling
/// displacement units to match) and warps each post-change feature map
/// into the pre-change frame. Returns the warped pyramid in the same
/// `[timestep][scale]` layout plus one coverage mask per scale.
pub fn align_pyramid(
    pyr_b: &[Vec<Tensor>],
    flow: &Tensor,
) -> Result<(Vec<Vec<Tensor>>, Vec<Array2<bool>>)> {
    if pyr_b.is_empty() || pyr_b[0].is_empty() {
        return Err(Error::validation("alignment needs a non-empty pyramid"));
    }
    let scales = pyr_b[0].len();
    for maps in pyr_b {
        if maps.len() != scales {
            return Err(Error::validation(
                "every timestep must carry the same scale count",
            ));
        }
    }
    let (h0, w0) = (pyr_b[0][0].shape()[1], pyr_b[0][0].shape()[2]);
    if flow.shape() != [2, h0, w0] {
        return Err(Error::validation(format!(
            "flow must be [2, {h0}, {w0}] to match the finest scale, got {:?}",
            flow.shape()
        )));
    }
    let mut warped = vec![Vec::with_capacity(scales); pyr_b.len()];
    let mut coverage = Vec::with_capacity(scales);
    for i in 0..scales {
        let (hi, wi) = (pyr_b[0][i].shape()[1], pyr_b[0][i].shape()[2]);
        if hi != h0 >> i || wi != w0 >> i {
            return Err(Error::validation(format!(
                "scale {i} is {hi}x{wi}, expected {}x{}",
                h0 >> i,
                w0 >> i
            )));
        }
        let factor = hi as f64 / h0 as f64;
        let flow_i = if i == 0 {
            flow.clone()
        } else {
            bilinear_resize(flow, hi, wi).scale(factor)
        };
        let mut covered_i = None;
        for (t, maps) in pyr_b.iter().enumerate() {
            if maps[i].shape()[1] != hi || maps[i].shape()[2] != wi {
                return Err(Error::validation(format!(
                    "timestep {t} disagrees on the scale {i} resolution"
                )));
            }
            let (out, covered) = warp(&maps[i], &flow_i);
            warped[t].push(out);
            covered_i.get_or_insert(covered);
        }
        coverage.push(covered_i.expect("at least one timestep"));
    }
    Ok((warped, coverage))
}

/// Per-(timestep, scale) descriptor `[|fa - fb| ; fa * fb]` with twice the
/// feature channels: the difference half flags additive discrepancies and
/// the product half carries agreement strength.
pub fn build_descriptors(
    fa: &[Vec<Tensor>],
    fb_warped: &[Vec<Tensor>],
) -> Result<Vec<Vec<Tensor>>> {
    if fa.len() != fb_warped.len() || fa.is_empty() {
        return Err(Error::validation(
            "descriptor inputs must pair up timestep for timestep",
        ));
    }
    let mut out = Vec::with_capacity(fa.len());
    for (t, (a_maps, b_maps)) in fa.iter().zip(fb_warped).enumerate() {
        if a_maps.len() != b_maps.len() {
            return Err(Error::validation(format!(
                "timestep {t} has {} scales on one side and {} on the other",
                a_maps.len(),
                b_maps.len()
            )));
        }
        let mut row = Vec::with_capacity(a_maps.len());
        for (i, (a, b)) in a_maps.iter().zip(b_maps).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::validation(format!(
                    "scale {i} shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            row.push(concat(0, &[a.sub(b).abs(), a.mul(b)]));
        }
        out.push(row);
    }
    Ok(out)
}

/// Channel gating by a two-layer bottleneck over the global average pool.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
}

impl SqueezeExcite {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 || channels < ratio {
            return Err(Error::validation(format!(
                "squeeze-excitation needs at least {ratio} channels, got {channels}"
            )));
        }
        let hidden = (channels / ratio).max(1);
        Ok(SqueezeExcite {
            fc1: Linear::register(store, seed, &format!("{name}.fc1"), channels, hidden, false)?,
            fc2: Linear::register(store, seed, &format!("{name}.fc2"), hidden, channels, false)?,
            channels,
        })
    }

    pub fn apply(&self, g: &Graph, u: &Tensor) -> Tensor {
        let s = u.shape().to_vec();
        assert_eq!(s.len(), 3, "squeeze-excitation expects [C,H,W]");
        assert_eq!(s[0], self.channels, "channel width mismatch");
        let hw = s[1] * s[2];
        let pooled = u
            .reshape(&[s[0], hw])
            .sum_axis(1)
            .scale(1.0 / hw as f64)
            .reshape(&[1, s[0]]);
        let gate = self
            .fc2
            .apply(g, &self.fc1.apply(g, &pooled).silu())
            .sigmoid()
            .reshape(&[s[0]]);
        u.mul_channel(&gate)
    }
}

#[derive(Debug, Clone)]
struct DecodeStage {
    c1: Conv,
    c2: Conv,
}

impl DecodeStage {
    fn register(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Ok(DecodeStage {
            c1: Conv::register(store, seed, &format!("{name}.c1"), cin, cout, 3, 1, 1, false)?,
            c2: Conv::register(store, seed, &format!("{name}.c2"), cout, cout, 3, 1, 1, false)?,
        })
    }

    fn apply(&self, g: &Graph, x: &Tensor) -> Tensor {
        self.c2.apply(g, &self.c1.apply(g, x).silu()).silu()
    }
}

/// The decision half of the pipeline. Registers, per scale `i`,
/// `cd.se.s{i}.*`, the timestep logits `cd.gamma.s{i}`, and the decoder
/// stage `cd.dec.s{i}.*`, plus the zero-initialized projection `cd.out`,
/// so an untrained head scores every pixel exactly 0.5.
#[derive(Debug, Clone)]
pub struct ChangeHead {
    se: Vec<SqueezeExcite>,
    stages: Vec<DecodeStage>,
    out: Conv,
    feature_widths: Vec<usize>,
    num_timesteps: usize,
}

impl ChangeHead {
    /// `feature_widths` lists the harmonized channel width per scale,
    /// finest first; `decoder_widths` lists stage outputs coarsest first.
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        feature_widths: &[usize],
        num_timesteps: usize,
        decoder_widths: &[usize],
        se_ratio: usize,
    ) -> Result<Self> {
        let scales = feature_widths.len();
        if scales < 2 {
            return Err(Error::validation(
                "hierarchical decoding needs at least two scales",
            ));
        }
        if decoder_widths.len() != scales {
            return Err(Error::validation(format!(
                "got {} decoder widths for {scales} scales",
                decoder_widths.len()
            )));
        }
        if num_timesteps == 0 {
            return Err(Error::validation("at least one timestep is required"));
        }
        if feature_widths.iter().chain(decoder_widths).any(|&w| w == 0) {
            return Err(Error::validation("channel widths must be positive"));
        }
        // Reorder stage outputs so stage_widths[i] belongs to scale i.
        let stage_widths: Vec<usize> = decoder_widths.iter().rev().copied().collect();
        let mut se = Vec::with_capacity(scales);
        let mut stages = Vec::with_capacity(scales);
        for i in 0..scales {
            let channels = 2 * feature_widths[i];
            se.push(SqueezeExcite::register(
                store,
                seed,
                &format!("cd.se.s{i}"),
                channels,
                se_ratio,
            )?);
            store.register(
                &format!("cd.gamma.s{i}"),
                ArrayD::zeros(IxDyn(&[num_timesteps])),
                false,
            )?;
            let cin = if i == scales - 1 {
                channels
            } else {
                stage_widths[i + 1] + channels
            };
            stages.push(DecodeStage::register(
                store,
                seed,
                &format!("cd.dec.s{i}"),
                cin,
                stage_widths[i],
            )?);
        }
        let out = Conv::register(store, seed, "cd.out", stage_widths[0], 1, 1, 1, 0, true)?;
        Ok(ChangeHead {
            se,
            stages,
            out,
            feature_widths: feature_widths.to_vec(),
            num_timesteps,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.feature_widths.len()
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    /// Convex timestep mixture per scale: softmax weights from the learned
    /// `cd.gamma.s{i}` logits over the gated descriptors.
    pub fn aggregate_timesteps(
        &self,
        g: &Graph,
        descriptors: &[Vec<Tensor>],
    ) -> Result<Vec<Tensor>> {
        if descriptors.len() != self.num_timesteps {
            return Err(Error::validation(format!(
                "expected {} timesteps, got {}",
                self.num_timesteps,
                descriptors.len()
            )));
        }
        let scales = self.num_scales();
        for (t, row) in descriptors.iter().enumerate() {
            if row.len() != scales {
                return Err(Error::validation(format!(
                    "timestep {t} carries {} scales, expected {scales}",
                    row.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(scales);
        for i in 0..scales {
            let parts: Vec<Tensor> = descriptors
                .iter()
                .map(|row| self.se[i].apply(g, &row[i]))
                .collect();
            let gamma = g.param(&format!("cd.gamma.s{i}")).softmax(0);
            out.push(weighted_sum(&parts, &gamma));
        }
        Ok(out)
    }

    /// Coarse-to-fine decode of the aggregated descriptors down to one
    /// logit per pixel at the finest-scale resolution.
    pub fn hierarchical_decode(&self, g: &Graph, aggregated: &[Tensor]) -> Result<Tensor> {
        let scales = self.num_scales();
        if aggregated.len() != scales {
            return Err(Error::validation(format!(
                "expected {scales} aggregated scales, got {}",
                aggregated.len()
            )));
        }
        let (h0, w0) = (aggregated[0].shape()[1], aggregated[0].shape()[2]);
        for (i, u) in aggregated.iter().enumerate() {
            let want = [2 * self.feature_widths[i], h0 >> i, w0 >> i];
            if u.shape() != want {
                return Err(Error::validation(format!(
                    "aggregated scale {i} is {:?}, expected {want:?}",
                    u.shape()
                )));
            }
        }
        let mut h = self.stages[scales - 1].apply(g, &aggregated[scales - 1]);
        for i in (0..scales - 1).rev() {
            let up = bilinear_resize(&h, h0 >> i, w0 >> i);
            h = self.stages[i].apply(g, &concat(0, &[up, aggregated[i].clone()]));
        }
        Ok(self.out.apply(g, &h).reshape(&[h0, w0]))
    }

    /// Descriptors, gating, aggregation and decoding in one pass: aligned
    /// pyramids in, full-resolution change logits out.
    pub fn forward(
        &self,
        g: &Graph,
        fa: &[Vec<Tensor>],
        fb_warped: &[Vec<Tensor>],
    ) -> Result<Tensor> {
        let descriptors = build_descriptors(fa, fb_warped)?;
        let aggregated = self.aggregate_timesteps(g, &descriptors)?;
        self.hierarchical_decode(g, &aggregated)
    }
}

/// Sigmoid probabilities and the thresholded binary mask.
pub fn change_map(logits: &Tensor, threshold: f64) -> (Array2<f64>, Array2<bool>) {
    let s = logits.shape().to_vec();
    assert_eq!(s.len(), 2, "change logits must be [H,W]");
    let probs = Array2::from_shape_fn((s[0], s[1]), |(y, x)| {
        let v = logits.value()[[y, x]];
        1.0 / (1.0 + (-v).exp())
    });
    let mask = probs.mapv(|p| p >= threshold);
    (probs, mask)
}

/// Masked binary cross-entropy on the change logits. `empty` is raised
/// when no pixel is supervisable, in which case the loss is zero.
pub struct CdLoss {
    pub total: Tensor,
    pub value: f64,
    pub empty: bool,
}

pub fn cd_loss(logits: &Tensor, labels: &Array2<bool>, mask: &Array2<bool>) -> Result<CdLoss> {
    let s = logits.shape().to_vec();
    if s.len() != 2 || labels.dim() != (s[0], s[1]) || mask.dim() != (s[0], s[1]) {
        return Err(Error::validation(format!(
            "change loss shapes disagree: logits {:?}, labels {:?}, mask {:?}",
            s,
            labels.dim(),
            mask.dim()
        )));
    }
    let y = ArrayD::from_shape_fn(IxDyn(&[s[0], s[1]]), |ix| {
        if labels[(ix[0], ix[1])] {
            1.0
        } else {
            0.0
        }
    });
    let m = ArrayD::from_shape_fn(IxDyn(&[s[0], s[1]]), |ix| {
        if mask[(ix[0], ix[1])] {
            1.0
        } else {
            0.0
        }
    });
    let empty = m.sum() == 0.0;
    let total = bce_with_logits_masked(logits, &y, &m);
    let value = total.item();
    Ok(CdLoss {
        total,
        value,
        empty,
    })
}
