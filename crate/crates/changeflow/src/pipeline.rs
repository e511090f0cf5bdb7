//! Joint model assembly: harmonization, kernel matching, flow decoding,
//! refinement, and change detection share one parameter store, while the
//! frozen feature extractor stays outside and its pyramids enter the graph
//! as constants. This keeps gradient isolation structural rather than
//! policed.

use ndarray::Array2;

use crate::cdhead::{align_pyramid, ChangeHead};
use crate::config::RunConfig;
use crate::encoder::{FeaturePyramid, Harmonizer, NUM_SCALES};
use crate::error::{Error, Result};
use crate::flowhead::{argsoftmax_decode, DecoderStack, FlowDistribution, RefineHead};
use crate::lattice::DisplacementLattice;
use crate::matcher::Matcher;
use crate::tensor::{stack0, Graph, ParamStore, Tensor};

/// Everything the coarse flow pass produces, kept as live graph nodes so
/// both losses and the change branch can extend the same graph.
pub struct FlowForward {
    pub dist: FlowDistribution,
    pub aux: Tensor,
    pub coarse_u: Tensor,
    pub coarse_v: Tensor,
    pub full_u: Tensor,
    pub full_v: Tensor,
    /// Harmonized pyramids, `[timestep][scale]`.
    pub fa: Vec<Vec<Tensor>>,
    pub fb: Vec<Vec<Tensor>>,
}

pub struct ChangeForward {
    /// One change logit per image pixel.
    pub logits: Tensor,
    /// Finest-scale warp coverage; change supervision is restricted to it.
    pub covered: Array2<bool>,
}

/// The trainable half of the pipeline. The parameter store owns
/// `harm.*`, `matcher.w` (registered frozen), `flow.*`, and `cd.*`.
pub struct Model {
    store: ParamStore,
    harmonizer: Harmonizer,
    matcher: Matcher,
    decoder: DecoderStack,
    refine: RefineHead,
    cd: ChangeHead,
    lattice: DisplacementLattice,
    tau: f64,
    num_timesteps: usize,
}

impl Model {
    /// Registers every trainable component against a fresh store.
    /// `encoder_widths` are the raw channel counts the frozen extractor
    /// emits per scale, finest first.
    pub fn build(cfg: &RunConfig, encoder_widths: &[usize]) -> Result<Model> {
        cfg.validate()?;
        if encoder_widths.len() != NUM_SCALES {
            return Err(Error::validation(format!(
                "expected {NUM_SCALES} encoder widths, got {}",
                encoder_widths.len()
            )));
        }
        let mut store = ParamStore::new();
        let harmonizer = Harmonizer::register(
            &mut store,
            cfg.seed,
            encoder_widths,
            &cfg.encoder.harmonized_widths,
        )?;
        let coarse_channels = *cfg
            .encoder
            .harmonized_widths
            .last()
            .expect("validated width list");
        let matcher = Matcher::register(
            &mut store,
            cfg.matcher.seed,
            cfg.matcher.num_features,
            coarse_channels,
            cfg.matcher.length_scale,
        )?;
        let lattice = DisplacementLattice::new(cfg.flow.r, cfg.flow.delta)?;
        let decoder = DecoderStack::register(
            &mut store,
            cfg.seed,
            lattice.num_bins(),
            coarse_channels,
            cfg.flow.width,
            cfg.flow.blocks,
            cfg.flow.heads,
        )?;
        let refine = RefineHead::register(&mut store, cfg.seed, cfg.flow.refine_width)?;
        let cd = ChangeHead::register(
            &mut store,
            cfg.seed,
            &cfg.encoder.harmonized_widths,
            cfg.encoder.timesteps.len(),
            &cfg.cd.decoder_widths,
            cfg.cd.se_ratio,
        )?;
        Ok(Model {
            store,
            harmonizer,
            matcher,
            decoder,
            refine,
            cd,
            lattice,
            tau: cfg.flow.tau,
            num_timesteps: cfg.encoder.timesteps.len(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn lattice(&self) -> &DisplacementLattice {
        &self.lattice
    }

    /// Image pixels per coarse-grid pixel.
    pub fn coarse_stride(&self) -> usize {
        1 << (self.harmonizer.num_scales() - 1)
    }

    /// Projects a raw pyramid into the matching space, scale by scale.
    pub fn harmonize(&self, g: &Graph, pyramid: &FeaturePyramid) -> Result<Vec<Vec<Tensor>>> {
        if pyramid.num_scales() != self.harmonizer.num_scales() {
            return Err(Error::validation(format!(
                "pyramid has {} scales, model expects {}",
                pyramid.num_scales(),
                self.harmonizer.num_scales()
            )));
        }
        if pyramid.num_timesteps() != self.num_timesteps {
            return Err(Error::validation(format!(
                "pyramid has {} timesteps, model expects {}",
                pyramid.num_timesteps(),
                self.num_timesteps
            )));
        }
        let mut out = Vec::with_capacity(pyramid.num_timesteps());
        for t in 0..pyramid.num_timesteps() {
            let mut row = Vec::with_capacity(pyramid.num_scales());
            for i in 0..pyramid.num_scales() {
                let raw = Tensor::constant(pyramid.map(t, i).clone().into_dyn());
                row.push(self.harmonizer.apply(g, i, &raw));
            }
            out.push(row);
        }
        Ok(out)
    }

    /// Coarse matching and flow decoding, then refinement to image
    /// resolution. The matcher and decoder read the largest-timestep
    /// coarsest maps; the full pyramids ride along for the change branch.
    pub fn forward_flow(
        &self,
        g: &Graph,
        pyr_a: &FeaturePyramid,
        pyr_b: &FeaturePyramid,
    ) -> Result<FlowForward> {
        let fa = self.harmonize(g, pyr_a)?;
        let fb = self.harmonize(g, pyr_b)?;
        let coarse = self.harmonizer.num_scales() - 1;
        let semantic = self.num_timesteps - 1;
        let fa_coarse = &fa[semantic][coarse];
        let fb_coarse = &fb[semantic][coarse];
        let volume = self
            .matcher
            .build_volume(g, fa_coarse, fb_coarse, &self.lattice)?;
        let (logits, aux) = self.decoder.decode_tokens(g, &volume.scores, fa_coarse)?;
        let dist = FlowDistribution::new(logits, self.tau)?;
        let probs = dist.probs();
        let (coarse_u, coarse_v) = argsoftmax_decode(&probs, &self.lattice);
        let factor = 1usize << coarse;
        let (full_u, full_v) = self
            .refine
            .apply(g, &coarse_u, &coarse_v, factor)?;
        Ok(FlowForward {
            dist,
            aux,
            coarse_u,
            coarse_v,
            full_u,
            full_v,
            fa,
            fb,
        })
    }

    /// Change branch on the predicted flow; gradients reach the flow head
    /// through the alignment warp.
    pub fn forward_change(&self, g: &Graph, fw: &FlowForward) -> Result<ChangeForward> {
        let flow = stack0(&[fw.full_u.clone(), fw.full_v.clone()]);
        self.forward_change_with_flow(g, fw, &flow)
    }

    /// Change branch with an externally supplied `[2, H, W]` flow, used to
    /// isolate detection quality from registration quality.
    pub fn forward_change_with_flow(
        &self,
        g: &Graph,
        fw: &FlowForward,
        flow: &Tensor,
    ) -> Result<ChangeForward> {
        let (warped, coverage) = align_pyramid(&fw.fb, flow)?;
        let logits = self.cd.forward(g, &fw.fa, &warped)?;
        Ok(ChangeForward {
            logits,
            covered: coverage.into_iter().next().expect("at least one scale"),
        })
    }
}
