//! Conformer encoder with an appended summary slot.
//!
//! The summary vector is a learned row appended after the last frame. It
//! takes part in every self-attention (through a dedicated relative-position
//! bucket) and skips every convolution module. At adapter layers the
//! output `h0` of the second feed-forward module is routed to per-language
//! experts before the final layer normalization.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Attention, FeedForward, Linear, Norm};
use crate::numerics::{Graph, ParamId, SoftmaxMask, Tensor, Var};
use crate::routing::{self, lidconcat_augment, AdapterLayerParams, Granularity, LidMask, RoutingVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    /// 1-based layer indices, strictly increasing.
    pub adapter_layers: Vec<usize>,
    pub rel_pos_clip: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            d_model: 32,
            num_heads: 2,
            ffn_dim: 64,
            conv_kernel: 7,
            adapter_layers: alloc::vec![2, 4],
            rel_pos_clip: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.num_layers == 0 || self.d_model == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("encoder dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!("d_model {} not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.rel_pos_clip == 0 {
            return fail("rel_pos_clip must be positive".into());
        }
        if self.adapter_layers.windows(2).any(|w| w[0] >= w[1]) {
            return fail("adapter_layers must be strictly increasing".into());
        }
        if self.adapter_layers.iter().any(|&l| l == 0 || l > self.num_layers) {
            return fail(format!("adapter_layers must lie in 1..={}", self.num_layers));
        }
        Ok(())
    }

    /// Rows of each layer's relative-bias table: clipped distances
    /// `-clip..=clip` plus one bucket for pairs involving the summary slot.
    pub fn num_rel_buckets(&self) -> usize {
        2 * self.rel_pos_clip + 2
    }
}

/// Bias-table row for query `i` and key `j` among `n` rows whose last row
/// is the summary slot.
pub fn relative_bucket(i: usize, j: usize, n: usize, clip: usize) -> usize {
    if i == n - 1 || j == n - 1 {
        return 2 * clip + 1;
    }
    let d = (j as i64 - i as i64).clamp(-(clip as i64), clip as i64);
    (d + clip as i64) as usize
}

pub fn relative_bias_indices(n: usize, clip: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(relative_bucket(i, j, n, clip));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvModuleParams {
    pub norm: Norm,
    pub pointwise_in: Linear,
    /// `kernel × d_model`
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: Norm,
    pub pointwise_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformerLayerParams {
    pub ff1: FeedForward,
    pub attn_norm: Norm,
    pub attention: Attention,
    /// `num_rel_buckets × num_heads`
    pub rel_bias: ParamId,
    pub conv: ConvModuleParams,
    pub ff2: FeedForward,
    pub final_norm: Norm,
    pub adapters: Option<AdapterLayerParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub input: Linear,
    pub theta_sv: ParamId,
    pub layers: Vec<ConformerLayerParams>,
}

/// Weights used at one adapter layer.
#[derive(Clone, Copy, Debug)]
pub struct RoutingRecord {
    /// 1-based encoder layer.
    pub layer: usize,
    pub alpha: Var,
    pub logits: Option<Var>,
    pub granularity: Granularity,
}

pub struct EncoderOutput {
    /// `(T+1) × d_model`; row `T` is the summary slot.
    pub frames: Var,
    /// Summary row of `h0` at each adapter layer, the classifier input.
    pub sv_snapshots: Vec<Var>,
    pub routing_records: Vec<RoutingRecord>,
    /// Per layer, per head self-attention probabilities.
    pub attention: Vec<Vec<Var>>,
}

impl EncoderOutput {
    pub fn num_rows(&self, g: &Graph) -> usize {
        g.shape(self.frames).0
    }

    /// Unmasked classifier logits per adapter layer (learnable routing only).
    pub fn language_logits(&self) -> Vec<Var> {
        self.routing_records.iter().filter_map(|r| r.logits).collect()
    }
}

/// Appends `theta_sv` as a final row.
pub fn append_summary(g: &mut Graph, frames: Var, theta_sv: Var) -> Result<Var> {
    let (t, d) = g.shape(frames);
    if t == 0 {
        return Err(Error::EmptyUtterance);
    }
    if g.shape(theta_sv) != (1, d) {
        return Err(Error::Shape(format!("summary vector {:?} does not match d_model {d}", g.shape(theta_sv))));
    }
    Ok(g.concat_rows(&[frames, theta_sv]))
}

/// Convolution module with its residual, applied to frame rows only. The
/// summary row is copied through unchanged.
pub fn conv_module(g: &mut Graph, params: &ConvModuleParams, x: Var) -> Var {
    let n = g.shape(x).0;
    let frames = g.slice_rows(x, 0, n - 1);
    let summary = g.slice_rows(x, n - 1, 1);
    let h = params.norm.forward(g, frames);
    let h = params.pointwise_in.forward(g, h);
    let h = g.glu(h);
    let w = g.param(params.depthwise);
    let h = g.depthwise_conv1d(h, w);
    let b = g.param(params.depthwise_bias);
    let h = g.add(h, b);
    let h = params.mid_norm.forward(g, h);
    let h = g.swish(h);
    let h = params.pointwise_out.forward(g, h);
    let frames = g.add(frames, h);
    g.concat_rows(&[frames, summary])
}

/// Per-head `n × n` relative position biases gathered from the layer table.
pub fn relative_bias(g: &mut Graph, table: ParamId, indices: &[usize], n: usize, heads: usize) -> Vec<Var> {
    let table = g.param(table);
    let gathered = g.gather(table, indices);
    (0..heads)
        .map(|h| {
            let col = if heads == 1 { gathered } else { g.slice_cols(gathered, h, 1) };
            g.reshape(col, n, n)
        })
        .collect()
}

/// Prompt and routing scheme for an adapter layer.
#[derive(Clone, Copy, Debug)]
pub struct AdapterContext<'a> {
    pub mask: &'a LidMask,
    pub variant: RoutingVariant,
}

pub struct LayerTrace {
    pub output: Var,
    pub h0: Var,
    pub attention: Vec<Var>,
    pub routing: Option<(Var, routing::Route)>,
}

/// One macaron Conformer layer: half-step feed-forward, relative-position
/// self-attention, convolution module, half-step feed-forward producing
/// `h0`, optional expert combination, final normalization.
pub fn conformer_layer(
    g: &mut Graph,
    params: &ConformerLayerParams,
    config: &EncoderConfig,
    x: Var,
    rel_indices: &[usize],
    adapter: Option<AdapterContext<'_>>,
) -> Result<LayerTrace> {
    let (n, d) = g.shape(x);
    if d != config.d_model {
        return Err(Error::Shape(format!("layer input width {d}, d_model {}", config.d_model)));
    }
    if rel_indices.len() != n * n {
        return Err(Error::Shape(format!("{} relative indices for {n} rows", rel_indices.len())));
    }

    let ff = params.ff1.forward(g, x);
    let ff = g.scale(ff, 0.5);
    let x = g.add(x, ff);

    let normed = params.attn_norm.forward(g, x);
    let bias = relative_bias(g, params.rel_bias, rel_indices, n, config.num_heads);
    let attn = params.attention.forward(g, normed, normed, Some(&bias), &SoftmaxMask::None);
    let x = g.add(x, attn.output);

    let x = conv_module(g, &params.conv, x);

    let ff = params.ff2.forward(g, x);
    let ff = g.scale(ff, 0.5);
    let h0 = g.add(x, ff);

    let (h, routing) = match (adapter, &params.adapters) {
        (Some(ctx), Some(layer)) if ctx.variant.uses_adapters() => {
            let sv_state = g.slice_rows(h0, n - 1, 1);
            let route = routing::route(g, h0, sv_state, ctx.mask, ctx.variant, layer.classifier.as_ref())?;
            let experts: Vec<Var> = layer.experts.iter().map(|e| routing::adapter_forward(g, h0, e)).collect();
            (routing::combine(g, h0, &experts, route.alpha)?, Some((sv_state, route)))
        }
        _ => (h0, None),
    };
    let output = params.final_norm.forward(g, h);
    Ok(LayerTrace { output, h0, attention: attn.probs, routing })
}

/// Input projection, summary append and the full layer stack.
pub fn encode(
    g: &mut Graph,
    params: &EncoderParams,
    config: &EncoderConfig,
    features: &Tensor,
    mask: &LidMask,
    variant: RoutingVariant,
) -> Result<EncoderOutput> {
    let input = if variant == RoutingVariant::LidConcat { lidconcat_augment(features, mask) } else { features.clone() };
    let expected = g.shape(g.param(params.input.weight)).0;
    if input.cols() != expected {
        return Err(Error::Shape(format!("features have {} columns, projection expects {expected}", input.cols())));
    }
    let x = g.constant(input);
    let x = params.input.forward(g, x);
    let sv = g.param(params.theta_sv);
    let mut x = append_summary(g, x, sv)?;
    let n = g.shape(x).0;
    let rel_indices = relative_bias_indices(n, config.rel_pos_clip);

    let mut out = EncoderOutput {
        frames: x,
        sv_snapshots: Vec::new(),
        routing_records: Vec::new(),
        attention: Vec::with_capacity(params.layers.len()),
    };
    for (i, layer) in params.layers.iter().enumerate() {
        let ctx = AdapterContext { mask, variant };
        let trace = conformer_layer(g, layer, config, x, &rel_indices, Some(ctx))?;
        if let Some((sv_state, route)) = trace.routing {
            out.sv_snapshots.push(sv_state);
            out.routing_records.push(RoutingRecord {
                layer: i + 1,
                alpha: route.alpha,
                logits: route.logits,
                granularity: route.granularity,
            });
        }
        out.attention.push(trace.attention);
        x = trace.output;
    }
    out.frames = x;
    Ok(out)
}
