//! Parameter handles and forward passes for the building blocks shared by
//! the encoder, the decoder and the adapters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, SoftmaxMask, Tensor, Var};

/// Affine map with an `in × out` weight and `1 × out` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.affine(x, w, b)
    }
}

/// Layer normalization followed by a learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul(y, gain);
        g.add(y, bias)
    }
}

/// `down(swish(up(norm(x))))`; the caller owns the residual.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub norm: Norm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let h = self.up.forward(g, h);
        let h = g.swish(h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

/// Attention output plus the per-head probability matrices (`queries × keys`).
pub struct AttentionTrace {
    pub output: Var,
    pub probs: Vec<Var>,
}

impl Attention {
    /// Scaled dot-product attention of `queries` over `keys`. `bias`, when
    /// given, holds one `queries × keys` additive score bias per head.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        bias: Option<&[Var]>,
        mask: &SoftmaxMask,
    ) -> AttentionTrace {
        let d_model = g.shape(queries).1;
        let head_dim = d_model / self.num_heads;
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let mut heads = Vec::with_capacity(self.num_heads);
        let mut probs = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let mut scores = g.scale(scores, scale);
            if let Some(bias) = bias {
                scores = g.add(scores, bias[h]);
            }
            let p = g.masked_softmax(scores, mask);
            heads.push(g.matmul(p, vh));
            probs.push(p);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        AttentionTrace { output: self.output.forward(g, joined), probs }
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamBuilder<'_> {
    pub fn tensor(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.store.insert(name, value, true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(rows, cols))
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                z * std
            })
            .collect();
        self.tensor(name, Tensor::from_parts(rows, cols, data))
    }

    /// Glorot-uniform weight and zero bias.
    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        let limit = libm::sqrt(6.0 / (inputs + outputs) as f64);
        let data = (0..inputs * outputs).map(|_| self.rng.random_range(-limit..limit)).collect();
        let weight = self.tensor(format!("{name}.weight"), Tensor::from_parts(inputs, outputs, data))?;
        let bias = self.zeros(format!("{name}.bias"), 1, outputs)?;
        Ok(Linear { weight, bias })
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zero_linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        let weight = self.zeros(format!("{name}.weight"), inputs, outputs)?;
        let bias = self.zeros(format!("{name}.bias"), 1, outputs)?;
        Ok(Linear { weight, bias })
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        let gain = self.tensor(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?;
        let bias = self.zeros(format!("{name}.bias"), 1, dim)?;
        Ok(Norm { gain, bias })
    }

    pub fn feed_forward(&mut self, name: &str, d_model: usize, hidden: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            norm: self.norm(&format!("{name}.norm"), d_model)?,
            up: self.linear(&format!("{name}.up"), d_model, hidden)?,
            down: self.linear(&format!("{name}.down"), hidden, d_model)?,
        })
    }

    pub fn attention(&mut self, name: &str, d_model: usize, num_heads: usize) -> Result<Attention> {
        Ok(Attention {
            query: self.linear(&format!("{name}.query"), d_model, d_model)?,
            key: self.linear(&format!("{name}.key"), d_model, d_model)?,
            value: self.linear(&format!("{name}.value"), d_model, d_model)?,
            output: self.linear(&format!("{name}.output"), d_model, d_model)?,
            num_heads,
        })
    }
}
