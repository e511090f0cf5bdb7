//! Transformer decoding of coarse tokens. Each coarse pixel becomes one
//! token carrying its correlation scores and context features; a stack of
//! self-attention blocks mixes the tokens and a zero-initialized output
//! projection produces bin logits plus one certainty channel.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::tensor::{concat, Graph, ParamStore, Tensor};

/// Fixed 2-D sinusoidal table for an `h` x `w` grid, row-major tokens.
/// The first `dim/2` channels encode x, the rest y, each as interleaved
/// sin/cos pairs over a geometric frequency ladder.
pub fn posenc_2d(h: usize, w: usize, dim: usize) -> Result<ArrayD<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::validation(format!(
            "positional encoding width must be a positive multiple of 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let quarter = dim / 4;
    let mut table = ArrayD::zeros(IxDyn(&[h * w, dim]));
    for y in 0..h {
        for x in 0..w {
            let n = y * w + x;
            for k in 0..quarter {
                let freq = 10000f64.powf(-(2.0 * k as f64) / half as f64);
                table[[n, 2 * k]] = (x as f64 * freq).sin();
                table[[n, 2 * k + 1]] = (x as f64 * freq).cos();
                table[[n, half + 2 * k]] = (y as f64 * freq).sin();
                table[[n, half + 2 * k + 1]] = (y as f64 * freq).cos();
            }
        }
    }
    Ok(table)
}

/// Token-transformer flow decoder. Registers `flow.in`, `flow.block{j}`,
/// and the zero-initialized `flow.out`, so a fresh model starts from
/// uniform bin distributions.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    in_proj: Linear,
    blocks: Vec<TransformerBlock>,
    out_proj: Linear,
    bins: usize,
    context_channels: usize,
    width: usize,
}

impl DecoderStack {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        bins: usize,
        context_channels: usize,
        width: usize,
        num_blocks: usize,
        heads: usize,
    ) -> Result<Self> {
        if bins == 0 || num_blocks == 0 {
            return Err(Error::validation(
                "decoder needs at least one bin and one block",
            ));
        }
        if width == 0 || width % 4 != 0 {
            return Err(Error::validation(format!(
                "token width must be a positive multiple of 4, got {width}"
            )));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::validation(format!(
                "head count {heads} must divide token width {width}"
            )));
        }
        let in_proj = Linear::register(
            store,
            seed,
            "flow.in",
            bins + context_channels,
            width,
            false,
        )?;
        let mut blocks = Vec::with_capacity(num_blocks);
        for j in 0..num_blocks {
            blocks.push(TransformerBlock::register(
                store,
                seed,
                &format!("flow.block{j}"),
                width,
                heads,
                4 * width,
            )?);
        }
        let out_proj = Linear::register(store, seed, "flow.out", width, bins + 1, true)?;
        Ok(DecoderStack {
            in_proj,
            blocks,
            out_proj,
            bins,
            context_channels,
            width,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Attention blocks plus output projection on a prepared token matrix
    /// [N, width]; permutation-equivariant by construction.
    pub fn run_tokens(&self, g: &Graph, tokens: &Tensor) -> Tensor {
        let mut x = tokens.clone();
        for block in &self.blocks {
            x = block.apply(g, &x);
        }
        self.out_proj.apply(g, &x)
    }

    /// Full decode: correlation volume [bins, H, W] and context features
    /// [C_f, H, W] to bin logits [bins, H, W] and a certainty field [H, W].
    pub fn decode_tokens(
        &self,
        g: &Graph,
        volume: &Tensor,
        context: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let vs = volume.shape().to_vec();
        let cs = context.shape().to_vec();
        if vs.len() != 3 || cs.len() != 3 {
            return Err(Error::validation(
                "decoder inputs must be [channels, H, W] fields",
            ));
        }
        if vs[1] != cs[1] || vs[2] != cs[2] {
            return Err(Error::validation(format!(
                "correlation volume is {}x{} but context is {}x{}",
                vs[1], vs[2], cs[1], cs[2]
            )));
        }
        if vs[0] != self.bins || cs[0] != self.context_channels {
            return Err(Error::validation(format!(
                "decoder expects {} + {} channels, got {} + {}",
                self.bins, self.context_channels, vs[0], cs[0]
            )));
        }
        let (h, w) = (vs[1], vs[2]);
        let stacked = concat(0, &[volume.clone(), context.clone()]);
        let tokens = stacked
            .reshape(&[self.bins + self.context_channels, h * w])
            .transpose2();
        let pos = Tensor::constant(posenc_2d(h, w, self.width)?);
        let x = self.in_proj.apply(g, &tokens).add(&pos);
        let out = self.run_tokens(g, &x).transpose2();
        let logits = out.narrow(0, 0, self.bins).reshape(&[self.bins, h, w]);
        let aux = out.narrow(0, self.bins, 1).reshape(&[h, w]);
        Ok((logits, aux))
    }
}
