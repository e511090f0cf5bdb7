//! Split evaluation: runs the full pipeline per sample with fixed noise,
//! scores flow and change against ground truth, micro-aggregates the
//! confusion counts, and writes the versioned report plus an optional
//! per-sample CSV. Ground-truth flow can be injected in place of the
//! predicted field to separate detection quality from registration.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use crate::cdhead::change_map;
use crate::config::RunConfig;
use crate::data::SamplePair;
use crate::encoder::EncoderBackend;
use crate::error::{Error, Result};
use crate::flowhead::decode_to_flow;
use crate::geometry::{scale_flow, DenseFlow};
use crate::metrics::{confusion, flow_epe, ConfusionCounts, EpeStats, MetricsReport};
use crate::pipeline::Model;
use crate::seeding;
use crate::tensor::{Graph, Tensor};

/// Everything measured on one sample, including the raw prediction fields
/// so callers can render panels without a second forward pass.
#[derive(Debug)]
pub struct SampleScore {
    pub index: usize,
    pub counts: ConfusionCounts,
    pub epe: EpeStats,
    /// Mean endpoint error of the coarse decode against the downscaled
    /// ground truth, when any coarse pixel is valid.
    pub epe_coarse: Option<f64>,
    pub probs: Array2<f64>,
    pub mask: Array2<bool>,
    pub flow: DenseFlow,
    pub scored_pixels: u64,
    /// True when neither the ground truth nor the prediction contains any
    /// change pixel, in which case F1 is 0 by the 0/0 convention.
    pub degenerate_change: bool,
}

/// Runs the pipeline on one pair. `noise_seed` is the split-level seed;
/// the per-sample noise is derived from it and `index`, so a fixed seed
/// makes the whole evaluation a pure function of checkpoint and data.
pub fn score_sample(
    model: &Model,
    backend: &EncoderBackend,
    cfg: &RunConfig,
    sample: &SamplePair,
    index: usize,
    noise_seed: u64,
    use_gt_flow: bool,
) -> Result<SampleScore> {
    let pyr_a = backend.extract(
        &sample.image_a,
        &cfg.encoder.timesteps,
        seeding::derive_seed(noise_seed, &format!("{index}/a")),
    )?;
    let pyr_b = backend.extract(
        &sample.image_b,
        &cfg.encoder.timesteps,
        seeding::derive_seed(noise_seed, &format!("{index}/b")),
    )?;
    let g = Graph::new(model.store());
    let fw = model.forward_flow(&g, &pyr_a, &pyr_b)?;
    let cf = if use_gt_flow {
        let (h, w) = sample.flow_gt.u.dim();
        let gt = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[2, h, w]), |ix| {
            if ix[0] == 0 {
                sample.flow_gt.u[(ix[1], ix[2])]
            } else {
                sample.flow_gt.v[(ix[1], ix[2])]
            }
        }));
        model.forward_change_with_flow(&g, &fw, &gt)?
    } else {
        model.forward_change(&g, &fw)?
    };

    let coarse_pred = decode_to_flow(&fw.dist, model.lattice());
    let gt_coarse = scale_flow(&sample.flow_gt, 1.0 / model.coarse_stride() as f64)?;
    let epe_coarse = flow_epe(&coarse_pred, &gt_coarse).ok().map(|s| s.mean);

    let plane = |t: &Tensor| -> Array2<f64> {
        t.value()
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("flow planes are rank 2")
    };
    let flow = DenseFlow::new(
        plane(&fw.full_u),
        plane(&fw.full_v),
        Array2::from_elem(sample.flow_gt.u.dim(), true),
    )?;
    let epe = flow_epe(&flow, &sample.flow_gt)?;

    let (probs, mask) = change_map(&cf.logits, cfg.cd.threshold);
    let scoring = Array2::from_shape_fn(sample.valid.dim(), |ix| {
        sample.valid[ix] && cf.covered[ix]
    });
    let counts = confusion(&mask, &sample.change_gt, &scoring)?;
    let degenerate = counts.true_positive + counts.false_positive + counts.false_negative == 0;
    Ok(SampleScore {
        index,
        counts,
        epe,
        epe_coarse,
        probs,
        mask,
        flow,
        scored_pixels: counts.total(),
        degenerate_change: degenerate,
    })
}

/// Split-level scores: micro-aggregated counts and pixel-weighted
/// endpoint-error statistics.
pub fn aggregate(scores: &[SampleScore]) -> (ConfusionCounts, EpeStats) {
    let mut counts = ConfusionCounts::default();
    let mut sum = 0.0;
    let mut b1 = 0.0;
    let mut b3 = 0.0;
    let mut vf = 0.0;
    for s in scores {
        counts.add(&s.counts);
        sum += s.epe.mean;
        b1 += s.epe.below_1px;
        b3 += s.epe.below_3px;
        vf += s.epe.valid_fraction;
    }
    let n = scores.len().max(1) as f64;
    (
        counts,
        EpeStats {
            mean: sum / n,
            below_1px: b1 / n,
            below_3px: b3 / n,
            valid_fraction: vf / n,
        },
    )
}

/// Scores every sample of a split and assembles the report.
pub fn evaluate_split(
    model: &Model,
    backend: &EncoderBackend,
    cfg: &RunConfig,
    samples: &[SamplePair],
    use_gt_flow: bool,
) -> Result<(MetricsReport, Vec<SampleScore>)> {
    if samples.is_empty() {
        return Err(Error::validation("cannot evaluate an empty split"));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        scores.push(score_sample(
            model,
            backend,
            cfg,
            sample,
            i,
            cfg.eval.noise_seed,
            use_gt_flow,
        )?);
    }
    let (counts, epe) = aggregate(&scores);
    let report = MetricsReport::new(
        &cfg.hash(),
        scores.len(),
        cfg.cd.threshold,
        counts,
        epe,
    );
    Ok((report, scores))
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-sample CSV with the degenerate-class convention made explicit.
pub fn write_csv(path: &Path, scores: &[SampleScore]) -> Result<()> {
    let mut out = String::from(
        "index,tp,fp,fn,tn,f1_change,oa,epe_mean,epe_coarse,scored_pixels,degenerate_change\n",
    );
    for s in scores {
        let m = crate::metrics::change_metrics(&s.counts);
        let coarse = s
            .epe_coarse
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.index,
            s.counts.true_positive,
            s.counts.false_positive,
            s.counts.false_negative,
            s.counts.true_negative,
            m.change.f1,
            m.oa,
            s.epe.mean,
            coarse,
            s.scored_pixels,
            s.degenerate_change,
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
