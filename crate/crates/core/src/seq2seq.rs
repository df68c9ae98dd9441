//! Attention decoder, autoregressive beam search and CTC greedy decoding.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Attention, FeedForward, Linear, Norm};
use crate::numerics::{log_sum_exp_slice, Graph, ParamId, SoftmaxMask, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Content tokens plus blank, sos and eos.
    pub vocab_size: usize,
    pub max_decode_len: usize,
    pub beam_width: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 32,
            num_heads: 2,
            ffn_dim: 64,
            vocab_size: 33,
            max_decode_len: 32,
            beam_width: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.num_layers == 0 || self.d_model == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config("decoder d_model not divisible by num_heads".into()));
        }
        if self.max_decode_len == 0 || self.beam_width == 0 {
            return Err(Error::Config("max_decode_len and beam_width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams {
    pub self_norm: Norm,
    pub self_attention: Attention,
    pub cross_norm: Norm,
    pub cross_attention: Attention,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `vocab × d_model`
    pub embedding: ParamId,
    /// `max_decode_len × d_model`
    pub positions: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub final_norm: Norm,
    pub output: Linear,
}

pub struct DecoderTrace {
    /// `prefix_len × vocab`
    pub logits: Var,
    /// Per layer, per head cross-attention probabilities over encoder rows.
    pub cross_attention: Vec<Vec<Var>>,
}

/// Vocabulary logits for every prefix position under causal self-attention
/// and cross-attention over all encoder rows, including the summary slot.
pub fn decoder_forward(
    g: &mut Graph,
    params: &DecoderParams,
    config: &DecoderConfig,
    encoder_frames: Var,
    prefix: &[usize],
    sos: usize,
) -> Result<DecoderTrace> {
    if prefix.first() != Some(&sos) {
        return Err(Error::MissingSos);
    }
    if prefix.len() > config.max_decode_len {
        return Err(Error::PrefixTooLong { len: prefix.len(), max: config.max_decode_len });
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Config(format!("token {bad} outside vocabulary of {}", config.vocab_size)));
    }
    let positions: Vec<usize> = (0..prefix.len()).collect();
    let table = g.param(params.embedding);
    let tokens = g.gather(table, prefix);
    let pos_table = g.param(params.positions);
    let pos = g.gather(pos_table, &positions);
    let mut x = g.add(tokens, pos);
    let mut cross = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let h = layer.self_norm.forward(g, x);
        let sa = layer.self_attention.forward(g, h, h, None, &SoftmaxMask::Causal);
        x = g.add(x, sa.output);
        let h = layer.cross_norm.forward(g, x);
        let ca = layer.cross_attention.forward(g, h, encoder_frames, None, &SoftmaxMask::None);
        x = g.add(x, ca.output);
        let ff = layer.ff.forward(g, x);
        x = g.add(x, ff);
        cross.push(ca.probs);
    }
    let x = params.final_norm.forward(g, x);
    Ok(DecoderTrace { logits: params.output.forward(g, x), cross_attention: cross })
}

/// Next-token log-probabilities for a prefix (the last logits row,
/// log-normalized).
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

pub fn log_normalize(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp_slice(row);
    row.iter().map(|v| v - lse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after sos, including a trailing eos when present.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn ends_with_eos(&self, eos: usize) -> bool {
        self.tokens.last() == Some(&eos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub sos: usize,
    pub eos: usize,
    /// Tokens never proposed (blank, sos).
    pub banned: [usize; 2],
    pub length_normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Transcript without sos or eos.
    pub transcript: Vec<usize>,
    pub log_prob: f64,
    /// Set when no hypothesis emitted eos within `max_len`.
    pub unterminated: bool,
}

fn score(h: &Hypothesis, normalize: bool) -> f64 {
    if normalize {
        h.log_prob / h.tokens.len().max(1) as f64
    } else {
        h.log_prob
    }
}

/// Best first; ties go to the shorter, then lexicographically smaller sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, normalize: bool) -> Ordering {
    score(b, normalize)
        .partial_cmp(&score(a, normalize))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over a step scorer. Candidates are pruned to `width` per step
/// by raw log-probability; hypotheses ending in eos leave the beam. The
/// search stops once `width` hypotheses have finished or the beam empties.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut beam = alloc::vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut prefix = Vec::with_capacity(cfg.max_len + 1);
    for step in 0..cfg.max_len {
        let mut candidates = Vec::with_capacity(beam.len() * 8);
        for hyp in &beam {
            prefix.clear();
            prefix.push(cfg.sos);
            prefix.extend_from_slice(&hyp.tokens);
            let lp = scorer.next_log_probs(&prefix)?;
            for (token, &l) in lp.iter().enumerate() {
                if cfg.banned.contains(&token) {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(token);
                candidates.push(Hypothesis { tokens, log_prob: hyp.log_prob + l, finished: false });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, false));
        candidates.truncate(cfg.width);
        beam.clear();
        for mut c in candidates {
            if c.ends_with_eos(cfg.eos) || step + 1 == cfg.max_len {
                c.finished = true;
                finished.push(c);
            } else {
                beam.push(c);
            }
        }
        if beam.is_empty() || finished.iter().filter(|h| h.ends_with_eos(cfg.eos)).count() >= cfg.width {
            break;
        }
    }
    let terminated: Vec<&Hypothesis> = finished.iter().filter(|h| h.ends_with_eos(cfg.eos)).collect();
    let pool: Vec<&Hypothesis> =
        if terminated.is_empty() { finished.iter().chain(&beam).collect() } else { terminated };
    let best = pool
        .into_iter()
        .min_by(|a, b| rank(a, b, cfg.length_normalize))
        .ok_or_else(|| Error::Config("beam search produced no hypothesis".into()))?;
    let unterminated = !best.ends_with_eos(cfg.eos);
    let mut transcript = best.tokens.clone();
    if !unterminated {
        transcript.pop();
    }
    Ok(BeamResult { transcript, log_prob: best.log_prob, unterminated })
}

/// Repeated argmax until eos or `max_len` tokens.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<BeamResult> {
    let mut prefix = alloc::vec![cfg.sos];
    let mut log_prob = 0.0;
    for _ in 0..cfg.max_len {
        let lp = scorer.next_log_probs(&prefix)?;
        let (token, l) = lp
            .iter()
            .enumerate()
            .filter(|(t, _)| !cfg.banned.contains(t))
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &l)| if l > best.1 { (t, l) } else { best });
        log_prob += l;
        if token == cfg.eos {
            return Ok(BeamResult { transcript: prefix[1..].to_vec(), log_prob, unterminated: false });
        }
        prefix.push(token);
    }
    Ok(BeamResult { transcript: prefix[1..].to_vec(), log_prob, unterminated: true })
}

/// Frame-wise argmax (lowest index on ties), merge repeats, drop blanks.
pub fn ctc_greedy(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut previous = None;
    for row in log_probs.iter_rows() {
        let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        if Some(best) != previous && best != blank {
            out.push(best);
        }
        previous = Some(best);
    }
    out
}
