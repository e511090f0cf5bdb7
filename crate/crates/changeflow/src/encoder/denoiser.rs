//! Small multi-scale denoiser. Its encoder path doubles as the feature
//! extractor: each downsampling stage taps one pyramid level, and the
//! decoder path exists only so the network can be pretrained to predict
//! the injected noise.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Conv, Linear};
use crate::seeding;
use crate::tensor::{bilinear_resize, concat, AdamW, Graph, ParamStore, Tensor};

use super::schedule::NoiseSchedule;

/// Number of pyramid levels produced by the encoder path.
pub const NUM_SCALES: usize = 5;

/// Dimension of the sinusoidal timestep embedding fed to each stage.
pub const TIMESTEP_EMBED_DIM: usize = 16;

/// Per-scale channel widths used when nothing else is configured.
pub const DEFAULT_WIDTHS: [usize; NUM_SCALES] = [32, 32, 64, 64, 128];

/// Noise-prediction network over a five-level feature ladder. Stage `i`
/// runs at resolution `H / 2^i` with `widths[i]` channels. All parameters
/// live under the `enc.` prefix of the owning store.
pub struct Denoiser {
    widths: Vec<usize>,
    stem: Conv,
    downs: Vec<Conv>,
    tembs: Vec<Linear>,
    ups: Vec<Conv>,
    out: Conv,
}

impl Denoiser {
    pub fn register(store: &mut ParamStore, seed: u64, widths: &[usize]) -> Result<Self> {
        if widths.len() != NUM_SCALES {
            return Err(Error::validation(format!(
                "denoiser needs {NUM_SCALES} channel widths, got {}",
                widths.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::validation("channel widths must be positive"));
        }
        let stem = Conv::register(store, seed, "enc.stem", 3, widths[0], 3, 1, 1, false)?;
        let mut downs = Vec::new();
        for i in 1..NUM_SCALES {
            downs.push(Conv::register(
                store,
                seed,
                &format!("enc.down{i}"),
                widths[i - 1],
                widths[i],
                3,
                2,
                1,
                false,
            )?);
        }
        let mut tembs = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            tembs.push(Linear::register(
                store,
                seed,
                &format!("enc.temb{i}"),
                TIMESTEP_EMBED_DIM,
                w,
                false,
            )?);
        }
        let mut ups = Vec::new();
        for i in 0..NUM_SCALES - 1 {
            ups.push(Conv::register(
                store,
                seed,
                &format!("enc.up{i}"),
                widths[i + 1] + widths[i],
                widths[i],
                3,
                1,
                1,
                false,
            )?);
        }
        let out = Conv::register(store, seed, "enc.out", widths[0], 3, 3, 1, 1, true)?;
        Ok(Denoiser {
            widths: widths.to_vec(),
            stem,
            downs,
            tembs,
            ups,
            out,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn timestep_embedding(&self, t: usize) -> Tensor {
        let e = TIMESTEP_EMBED_DIM;
        let mut v = ArrayD::zeros(IxDyn(&[1, e]));
        for k in 0..e / 2 {
            let freq = 10000f64.powf(-(2.0 * k as f64) / e as f64);
            v[[0, 2 * k]] = (t as f64 * freq).sin();
            v[[0, 2 * k + 1]] = (t as f64 * freq).cos();
        }
        Tensor::constant(v)
    }

    /// Encoder path only: the five per-scale activations for `x_t`, coarse
    /// stages last. Stage `i` halves the resolution of stage `i - 1`.
    pub fn features(&self, g: &Graph, x_t: &Tensor, t: usize) -> Vec<Tensor> {
        let emb = self.timestep_embedding(t);
        let mut feats: Vec<Tensor> = Vec::with_capacity(NUM_SCALES);
        for i in 0..NUM_SCALES {
            let prev = if i == 0 { x_t } else { &feats[i - 1] };
            let conv = if i == 0 { &self.stem } else { &self.downs[i - 1] };
            let bias = self.tembs[i].apply(g, &emb).reshape(&[self.widths[i]]);
            let f = conv.apply(g, prev).add_channel_bias(&bias).silu();
            feats.push(f);
        }
        feats
    }

    /// Full forward pass: encoder ladder, then a decoder that fuses each
    /// skip with the upsampled coarser state and emits a noise estimate at
    /// input resolution. The output head starts at zero, so an untrained
    /// network predicts no noise at all.
    pub fn predict_noise(&self, g: &Graph, x_t: &Tensor, t: usize) -> Tensor {
        let feats = self.features(g, x_t, t);
        let mut h = feats[NUM_SCALES - 1].clone();
        for i in (0..NUM_SCALES - 1).rev() {
            let skip = &feats[i];
            let (th, tw) = (skip.shape()[1], skip.shape()[2]);
            let up = bilinear_resize(&h, th, tw);
            h = self.ups[i].apply(g, &concat(0, &[up, skip.clone()])).silu();
        }
        self.out.apply(g, &h)
    }
}

/// Noise-prediction pretraining over a fixed corpus of `[3, H, W]` images
/// in `[0, 1]`. Each step draws one image, one timestep, and fresh noise,
/// all derived from `seed`, and minimizes the mean squared error of the
/// noise estimate. Returns the per-step losses.
pub fn pretrain(
    store: &mut ParamStore,
    denoiser: &Denoiser,
    corpus: &[ndarray::Array3<f64>],
    schedule: &NoiseSchedule,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::validation("pretraining corpus is empty"));
    }
    let opt = AdamW::new(0.0);
    let mut losses = Vec::with_capacity(steps);
    for k in 0..steps {
        let pick = (seeding::derive_seed(seed, &format!("pretrain/pick/{k}")) as usize)
            % corpus.len();
        let t = (seeding::derive_seed(seed, &format!("pretrain/t/{k}")) as usize)
            % schedule.len();
        let eps_seed = seeding::derive_seed(seed, &format!("pretrain/eps/{k}"));
        let (x_t, eps) = schedule.noise_pair(&corpus[pick], t, eps_seed)?;
        let g = Graph::new(store);
        let pred = denoiser.predict_noise(&g, &Tensor::constant(x_t.into_dyn()), t);
        let diff = pred.sub(&Tensor::constant(eps.into_dyn()));
        let loss = diff.mul(&diff).mean();
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "pretraining loss became {value} at step {k} (image {pick}, timestep {t})"
            )));
        }
        losses.push(value);
        loss.backward();
        let grads = g.take_grads();
        loss.free_graph();
        for (name, grad) in grads {
            store.add_grad(&name, &grad, 1.0);
        }
        opt.step(store, lr, |_| true);
        store.zero_grads();
    }
    Ok(losses)
}
