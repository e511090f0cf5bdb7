//! Per-scale projection that maps raw encoder activations into a common
//! matching space: a learned linear map over channels followed by
//! per-pixel layer normalization.

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Tensor};

/// One projection + normalization pair per pyramid scale. Scale `i` maps
/// `in_widths[i]` channels to `out_widths[i]`. Parameters live under
/// `harm.s{i}.` and train jointly with the rest of the model.
pub struct Harmonizer {
    projs: Vec<Linear>,
    norms: Vec<LayerNorm>,
    in_widths: Vec<usize>,
    out_widths: Vec<usize>,
}

impl Harmonizer {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        in_widths: &[usize],
        out_widths: &[usize],
    ) -> Result<Self> {
        if in_widths.len() != out_widths.len() || in_widths.is_empty() {
            return Err(Error::validation(format!(
                "harmonizer widths must be non-empty and match: {} in, {} out",
                in_widths.len(),
                out_widths.len()
            )));
        }
        let mut projs = Vec::new();
        let mut norms = Vec::new();
        for (i, (&cin, &cout)) in in_widths.iter().zip(out_widths).enumerate() {
            projs.push(Linear::register(
                store,
                seed,
                &format!("harm.s{i}.proj"),
                cin,
                cout,
                false,
            )?);
            norms.push(LayerNorm::register(store, &format!("harm.s{i}.ln"), cout)?);
        }
        Ok(Harmonizer {
            projs,
            norms,
            in_widths: in_widths.to_vec(),
            out_widths: out_widths.to_vec(),
        })
    }

    pub fn num_scales(&self) -> usize {
        self.projs.len()
    }

    pub fn out_widths(&self) -> &[usize] {
        &self.out_widths
    }

    /// Projects one `[C, H, W]` feature map at the given scale into the
    /// matching space, returning `[D, H, W]`. Every pixel's channel vector
    /// is normalized independently.
    pub fn apply(&self, g: &Graph, scale: usize, feature: &Tensor) -> Tensor {
        let shape = feature.shape().to_vec();
        assert_eq!(shape.len(), 3, "harmonizer expects [C, H, W]");
        assert_eq!(
            shape[0], self.in_widths[scale],
            "scale {scale} expects {} channels, got {}",
            self.in_widths[scale], shape[0]
        );
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let tokens = feature.reshape(&[c, h * w]).transpose2();
        let projected = self.projs[scale].apply(g, &tokens);
        let normed = self.norms[scale].apply(g, &projected);
        normed
            .transpose2()
            .reshape(&[self.out_widths[scale], h, w])
    }
}
