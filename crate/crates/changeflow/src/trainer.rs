//! Two-phase curriculum training. Phase I optimizes registration alone;
//! once the warm-up ends, the change loss fades in linearly. One iteration
//! processes one micro-batch; parameter updates fire every `accumulation`
//! iterations, and every random draw is derived from (seed, iteration), so
//! a resumed run replays the exact trajectory of an uninterrupted one.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{blobs_from_store, blobs_to_snapshots, ParamBlob};
use crate::config::RunConfig;
use crate::data::SamplePair;
use crate::encoder::{BackendFile, EncoderBackend};
use crate::error::{Error, Result};
use crate::evaluate::{aggregate, score_sample};
use crate::flowhead::{argsoftmax_decode, flow_loss, gaussian_target, FlowLossTerms};
use crate::geometry::scale_flow;
use crate::metrics::change_metrics;
use crate::pipeline::Model;
use crate::seeding;
use crate::tensor::{bce_with_logits_masked, cosine_lr, AdamW, Graph, Tensor};

/// Training variants that knock out one ingredient each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// The full curriculum.
    None,
    /// Change loss active from the first iteration.
    NoWarmup,
    /// Classification target replaced by a plain squared-error regression
    /// on the decoded displacement.
    Regression,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Ablation> {
        match s {
            "none" => Ok(Ablation::None),
            "nowarmup" => Ok(Ablation::NoWarmup),
            "regression" => Ok(Ablation::Regression),
            other => Err(Error::validation(format!(
                "unknown ablation '{other}', expected nowarmup or regression"
            ))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoWarmup => "nowarmup",
            Ablation::Regression => "regression",
        }
    }
}

/// Change-loss weight at iteration `t` (1-based): zero through the warm-up,
/// then a linear ramp reaching `lambda_max` after `ramp` more iterations.
pub fn lambda_cd(t: u64, warmup: u64, ramp: u64, lambda_max: f64) -> f64 {
    if t <= warmup {
        0.0
    } else {
        lambda_max * (((t - warmup) as f64 / ramp as f64).min(1.0))
    }
}

pub const CHECKPOINT_VERSION: &str = "changeflow-train/1";

/// Self-contained training state: configuration, the frozen extractor, and
/// every trainable parameter with optimizer moments. Evaluation needs only
/// this file plus the dataset.
#[derive(Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub ablation: String,
    pub iteration: u64,
    /// Absent until the first validation snapshot has run.
    pub best_mf1: Option<f64>,
    pub encoder: BackendFile,
    pub params: Vec<ParamBlob>,
}

impl TrainCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrainCheckpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: TrainCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "checkpoint version '{}' is not '{CHECKPOINT_VERSION}'",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model and extractor this checkpoint was saved from.
    pub fn instantiate(&self) -> Result<(Model, EncoderBackend)> {
        let backend = EncoderBackend::from_file(self.encoder.clone())?;
        let mut model = Model::build(&self.config, backend.widths())?;
        let snaps = blobs_to_snapshots(&self.params)?;
        model.store_mut().restore(&snaps)?;
        Ok((model, backend))
    }
}

#[derive(Serialize)]
struct LogHeader<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    version: &'a str,
    config_hash: &'a str,
    ablation: &'a str,
    start_iteration: u64,
    total_iterations: u64,
    warmup: u64,
    ramp: u64,
    lambda_max: f64,
    lr: f64,
    lr_floor: f64,
    batch: usize,
    accumulation: usize,
}

#[derive(Serialize, Deserialize)]
pub struct IterRecord {
    #[serde(rename = "type")]
    pub kind: String,
    pub iter: u64,
    pub lr: f64,
    pub lambda: f64,
    pub total: f64,
    pub flow: f64,
    /// KL term, or the squared-error term under the regression ablation.
    pub cls: f64,
    pub epe: f64,
    pub aux: f64,
    pub cd: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(rename = "type")]
    pub kind: String,
    pub iter: u64,
    pub epe_full: f64,
    pub epe_coarse: Option<f64>,
    pub mf1: f64,
    pub f1_change: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub iterations: u64,
    pub best_mf1: f64,
    pub log_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

/// The flow objective for one sample: the standard classification form, or
/// the regression variant with the KL slot replaced by mean squared error
/// on the decoded displacement.
fn flow_objective(
    model: &Model,
    fw: &crate::pipeline::FlowForward,
    gt_coarse: &crate::geometry::DenseFlow,
    cfg: &RunConfig,
    regression: bool,
) -> Result<FlowLossTerms> {
    if !regression {
        return flow_loss(
            &fw.dist,
            &fw.aux,
            gt_coarse,
            model.lattice(),
            cfg.flow.sigma,
            cfg.flow.alpha,
            cfg.flow.aux_weight,
        );
    }
    let (_, in_range) = gaussian_target(gt_coarse, model.lattice(), cfg.flow.sigma)?;
    let (h, w) = gt_coarse.u.dim();
    let valid = ArrayD::from_shape_fn(ndarray::IxDyn(&[h, w]), |ix| {
        if gt_coarse.valid[(ix[0], ix[1])] {
            1.0
        } else {
            0.0
        }
    });
    let labels = ArrayD::from_shape_fn(ndarray::IxDyn(&[h, w]), |ix| {
        if gt_coarse.valid[(ix[0], ix[1])] && in_range[(ix[0], ix[1])] {
            1.0
        } else {
            0.0
        }
    });
    let probs = fw.dist.probs();
    let (u_hat, v_hat) = argsoftmax_decode(&probs, model.lattice());
    let du = u_hat.sub(&Tensor::constant(gt_coarse.u.clone().into_dyn()));
    let dv = v_hat.sub(&Tensor::constant(gt_coarse.v.clone().into_dyn()));
    let sq = du.mul(&du).add(&dv.mul(&dv));
    let cls = sq.masked_mean(&valid);
    let epe = sq.sqrt_eps(1e-12).masked_mean(&valid);
    let ones = ArrayD::from_elem(ndarray::IxDyn(&[h, w]), 1.0);
    let aux = bce_with_logits_masked(&fw.aux, &labels, &ones);
    let empty = valid.sum() == 0.0;
    let total = cls
        .add(&epe.scale(cfg.flow.alpha))
        .add(&aux.scale(cfg.flow.aux_weight));
    Ok(FlowLossTerms {
        kl: cls.item(),
        epe: epe.item(),
        aux: aux.item(),
        empty,
        total,
    })
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

fn append_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    file.write_all(line.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

/// Runs the curriculum over in-memory splits and writes the JSON-lines log
/// plus best-by-validation-mF1 and last checkpoints into `out_dir`.
///
/// `stop_after` ends the run gracefully at the first update boundary at or
/// past that iteration; resuming from the written checkpoint replays the
/// remainder of the uninterrupted trajectory.
pub fn fit(
    cfg: &RunConfig,
    ablation: Ablation,
    backend: &EncoderBackend,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("training split is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_hash = cfg.hash();
    let encoder_digest = backend.digest();

    let (warmup, ramp) = match ablation {
        Ablation::NoWarmup => (0, 1),
        _ => (cfg.train.warmup, cfg.train.ramp),
    };
    let regression = ablation == Ablation::Regression;

    let mut model = Model::build(cfg, backend.widths())?;
    let mut start_iter = 0u64;
    let mut best_mf1 = f64::NEG_INFINITY;
    if let Some(path) = resume {
        let ck = TrainCheckpoint::load(path)?;
        if ck.config_hash != config_hash {
            return Err(Error::validation(format!(
                "checkpoint was trained under config {} but the current config hashes to {}",
                ck.config_hash, config_hash
            )));
        }
        if ck.ablation != ablation.tag() {
            return Err(Error::validation(format!(
                "checkpoint ablation '{}' does not match requested '{}'",
                ck.ablation,
                ablation.tag()
            )));
        }
        let resumed = EncoderBackend::from_file(ck.encoder.clone())?;
        if resumed.digest() != encoder_digest {
            return Err(Error::validation(
                "checkpoint embeds a different frozen extractor than the one provided",
            ));
        }
        let snaps = blobs_to_snapshots(&ck.params)?;
        model.store_mut().restore(&snaps)?;
        start_iter = ck.iteration;
        best_mf1 = ck.best_mf1.unwrap_or(f64::NEG_INFINITY);
    }

    let n = train_set.len();
    let per_epoch = n.div_ceil(cfg.train.batch) as u64;
    let total = per_epoch * cfg.train.epochs as u64;
    let accumulation = cfg.train.accumulation as u64;
    // Checkpoints must land on update boundaries or a resumed run would
    // lose the partially accumulated gradients.
    let eval_stride = cfg.train.eval_every.div_ceil(accumulation) * accumulation;

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let header = LogHeader {
        kind: "header",
        version: CHECKPOINT_VERSION,
        config_hash: &config_hash,
        ablation: ablation.tag(),
        start_iteration: start_iter,
        total_iterations: total,
        warmup,
        ramp,
        lambda_max: cfg.train.lambda_max,
        lr: cfg.train.lr,
        lr_floor: cfg.train.lr_floor,
        batch: cfg.train.batch,
        accumulation: cfg.train.accumulation,
    };
    append_line(&mut log, &log_path, &serde_json::to_string(&header).unwrap())?;

    let best_path = out_dir.join("best.ckpt.json");
    let last_path = out_dir.join("last.ckpt.json");
    let save = |model: &Model, iteration: u64, best: f64, path: &Path| -> Result<()> {
        TrainCheckpoint {
            version: CHECKPOINT_VERSION.to_string(),
            config: cfg.clone(),
            config_hash: config_hash.clone(),
            ablation: ablation.tag().to_string(),
            iteration,
            best_mf1: best.is_finite().then_some(best),
            encoder: backend.to_file(),
            params: blobs_from_store(model.store(), true, |_| true),
        }
        .save(path)
    };

    if total == 0 {
        save(&model, 0, f64::NEG_INFINITY, &last_path)?;
        save(&model, 0, f64::NEG_INFINITY, &best_path)?;
        return Ok(FitOutcome {
            iterations: 0,
            best_mf1: 0.0,
            log_path,
            best_path,
            last_path,
        });
    }

    let opt = AdamW::new(cfg.train.weight_decay);
    let coarse = 1.0 / model.coarse_stride() as f64;
    let mut order: Vec<usize> = Vec::new();
    let mut current_epoch = u64::MAX;

    for t in (start_iter + 1)..=total {
        let epoch = (t - 1) / per_epoch;
        if epoch != current_epoch {
            order = shuffled_indices(n, seeding::derive_seed(cfg.seed, &format!("order/{epoch}")));
            current_epoch = epoch;
        }
        let pos = ((t - 1) % per_epoch) as usize;
        let lo = pos * cfg.train.batch;
        let hi = (lo + cfg.train.batch).min(n);
        let lambda = lambda_cd(t, warmup, ramp, cfg.train.lambda_max);

        let g = Graph::new(model.store());
        let mut batch_total: Option<Tensor> = None;
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0); // flow, cls, epe, aux, cd
        let mut cd_seen = false;
        for &idx in &order[lo..hi] {
            let sample = &train_set[idx];
            let pyr_a = backend.extract(
                &sample.image_a,
                &cfg.encoder.timesteps,
                seeding::derive_seed(cfg.seed, &format!("noise/{t}/{idx}/a")),
            )?;
            let pyr_b = backend.extract(
                &sample.image_b,
                &cfg.encoder.timesteps,
                seeding::derive_seed(cfg.seed, &format!("noise/{t}/{idx}/b")),
            )?;
            let fw = model.forward_flow(&g, &pyr_a, &pyr_b)?;
            let gt_coarse = scale_flow(&sample.flow_gt, coarse)?;
            let terms = flow_objective(&model, &fw, &gt_coarse, cfg, regression)?;
            let mut sample_loss = terms.total.clone();
            sums.0 += terms.total.item();
            sums.1 += terms.kl;
            sums.2 += terms.epe;
            sums.3 += terms.aux;
            if lambda > 0.0 {
                let cf = model.forward_change(&g, &fw)?;
                let scoring = ndarray::Array2::from_shape_fn(sample.valid.dim(), |ix| {
                    sample.valid[ix] && cf.covered[ix]
                });
                let cd = crate::cdhead::cd_loss(&cf.logits, &sample.change_gt, &scoring)?;
                sums.4 += cd.value;
                cd_seen = true;
                sample_loss = sample_loss.add(&cd.total.scale(lambda));
            }
            batch_total = Some(match batch_total {
                Some(acc) => acc.add(&sample_loss),
                None => sample_loss,
            });
        }
        // The same reciprocal multiply the tensor path uses, so the logged
        // flow term in phase I is bit-identical to the logged total.
        let inv_n = 1.0 / (hi - lo) as f64;
        let batch_loss = batch_total.expect("batch is non-empty").scale(inv_n);
        let record = IterRecord {
            kind: "iter".to_string(),
            iter: t,
            lr: cosine_lr(t, total, cfg.train.lr, cfg.train.lr_floor),
            lambda,
            total: batch_loss.item(),
            flow: sums.0 * inv_n,
            cls: sums.1 * inv_n,
            epe: sums.2 * inv_n,
            aux: sums.3 * inv_n,
            cd: cd_seen.then_some(sums.4 * inv_n),
        };
        let finite = record.total.is_finite()
            && record.flow.is_finite()
            && record.cls.is_finite()
            && record.epe.is_finite()
            && record.aux.is_finite()
            && record.cd.map_or(true, f64::is_finite);
        if !finite {
            return Err(Error::numeric(format!(
                "non-finite loss at iteration {t}: total {}, cls {}, epe {}, aux {}, cd {:?}",
                record.total, record.cls, record.epe, record.aux, record.cd
            )));
        }

        let scaled = batch_loss.scale(1.0 / accumulation as f64);
        scaled.backward();
        let grads = g.take_grads();
        scaled.free_graph();
        for (name, grad) in grads {
            model.store_mut().add_grad(&name, &grad, 1.0);
        }

        if t <= warmup {
            let leak = model.store().max_abs_grad(|n| n.starts_with("cd."));
            if leak != 0.0 {
                return Err(Error::numeric(format!(
                    "change-head gradient {leak} leaked during warm-up at iteration {t}"
                )));
            }
        }

        if t % accumulation == 0 {
            let lr = cosine_lr(t, total, cfg.train.lr, cfg.train.lr_floor);
            let phase1 = t <= warmup;
            opt.step(model.store_mut(), lr, |name| {
                !(phase1 && name.starts_with("cd."))
            });
            model.store_mut().zero_grads();
        }

        append_line(&mut log, &log_path, &serde_json::to_string(&record).unwrap())?;

        if (t % eval_stride == 0 || t == total) && !val_set.is_empty() {
            let mut scores = Vec::with_capacity(val_set.len());
            for (i, sample) in val_set.iter().enumerate() {
                scores.push(score_sample(
                    &model,
                    backend,
                    cfg,
                    sample,
                    i,
                    cfg.eval.noise_seed,
                    false,
                )?);
            }
            let (counts, epe) = aggregate(&scores);
            let coarse_vals: Vec<f64> = scores.iter().filter_map(|s| s.epe_coarse).collect();
            let epe_coarse = if coarse_vals.is_empty() {
                None
            } else {
                Some(coarse_vals.iter().sum::<f64>() / coarse_vals.len() as f64)
            };
            let s = change_metrics(&counts);
            let rec = EvalRecord {
                kind: "eval".to_string(),
                iter: t,
                epe_full: epe.mean,
                epe_coarse,
                mf1: s.mf1,
                f1_change: s.change.f1,
            };
            append_line(&mut log, &log_path, &serde_json::to_string(&rec).unwrap())?;
            if t % accumulation == 0 {
                if s.mf1 > best_mf1 {
                    best_mf1 = s.mf1;
                    save(&model, t, best_mf1, &best_path)?;
                }
                save(&model, t, best_mf1, &last_path)?;
            }
        }

        if let Some(stop) = stop_after {
            if t >= stop && t % accumulation == 0 && t < total {
                save(&model, t, best_mf1, &last_path)?;
                return Ok(FitOutcome {
                    iterations: t,
                    best_mf1: best_mf1.max(0.0),
                    log_path,
                    best_path,
                    last_path,
                });
            }
        }
    }

    if backend.digest() != encoder_digest {
        return Err(Error::numeric(
            "frozen extractor parameters changed during training",
        ));
    }
    save(&model, total, best_mf1, &last_path)?;
    if !best_path.exists() {
        save(&model, total, best_mf1, &best_path)?;
    }
    Ok(FitOutcome {
        iterations: total,
        best_mf1: best_mf1.max(0.0),
        log_path,
        best_path,
        last_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_ramp_matches_its_closed_form() {
        assert_eq!(lambda_cd(1, 500, 1000, 1.0), 0.0);
        assert_eq!(lambda_cd(500, 500, 1000, 1.0), 0.0);
        assert!((lambda_cd(1000, 500, 1000, 1.0) - 0.5).abs() < 1e-12);
        assert_eq!(lambda_cd(1500, 500, 1000, 1.0), 1.0);
        assert_eq!(lambda_cd(2000, 500, 1000, 1.0), 1.0);
        assert!((lambda_cd(1000, 500, 1000, 0.7) - 0.35).abs() < 1e-12);
        // The no-warm-up setting is positive from the very first iteration.
        assert!(lambda_cd(1, 0, 1, 1.0) > 0.0);
        assert_eq!(lambda_cd(1, 0, 1, 1.0), 1.0);
    }

    #[test]
    fn the_ramp_is_nondecreasing_and_bounded() {
        let mut prev = 0.0;
        for t in 0..3000 {
            let v = lambda_cd(t, 500, 1000, 0.8);
            assert!(v >= prev);
            assert!(v <= 0.8);
            prev = v;
        }
    }

    #[test]
    fn ablation_names_parse_and_reject() {
        assert_eq!(Ablation::parse("nowarmup").unwrap(), Ablation::NoWarmup);
        assert_eq!(Ablation::parse("regression").unwrap(), Ablation::Regression);
        assert_eq!(Ablation::parse("none").unwrap(), Ablation::None);
        assert!(Ablation::parse("warmup").is_err());
    }
}
