//! CTC, attention-decoder, language-classification and combined losses.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the language loss.
    pub lambda: f64,
    /// Weight of CTC within the ASR part.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.5, beta: 0.3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(alloc::format!(
                "lambda {} and beta {} must lie in [0, 1]",
                self.lambda,
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub att: f64,
    pub lang: f64,
    pub total: f64,
}

/// `(1-λ)(β·ctc + (1-β)·att) + λ·lang`
pub fn total_loss(ctc: f64, att: f64, lang: f64, config: &LossConfig) -> LossBreakdown {
    let asr = config.beta * ctc + (1.0 - config.beta) * att;
    let total = (1.0 - config.lambda) * asr + config.lambda * lang;
    LossBreakdown { ctc, att, lang, total }
}

/// Same arithmetic as [`total_loss`], recorded on the tape.
pub fn total_loss_var(g: &mut Graph, ctc: Var, att: Var, lang: Option<Var>, config: &LossConfig) -> Var {
    let c = g.scale(ctc, config.beta);
    let a = g.scale(att, 1.0 - config.beta);
    let asr = g.add(c, a);
    let asr = g.scale(asr, 1.0 - config.lambda);
    let lang = match lang {
        Some(l) => l,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let l = g.scale(lang, config.lambda);
    g.add(asr, l)
}

/// Frames needed to emit `target`: one per token plus one blank between
/// each pair of equal neighbours.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcOutput {
    pub loss: f64,
    /// `∂loss/∂log_probs`, when requested.
    pub grad: Option<Tensor>,
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(libm::exp(a - m) + libm::exp(b - m))
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(libm::exp(a - m) + libm::exp(b - m) + libm::exp(c - m))
}

/// Negative log-likelihood of `target` under per-frame log-probabilities,
/// summed over all alignments by the log-space forward recursion. The
/// backward recursion supplies the gradient.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize], blank: usize, with_grad: bool) -> Result<CtcOutput> {
    let (frames, vocab) = log_probs.shape();
    if let Some(&bad) = target.iter().find(|&&t| t >= vocab || t == blank) {
        return Err(Error::Config(alloc::format!("ctc target token {bad} is blank or outside the vocabulary")));
    }
    let required = ctc_required_frames(target);
    if required > frames {
        return Err(Error::CtcInfeasible { target_len: target.len(), required, frames });
    }
    let ext: Vec<usize> = core::iter::once(blank).chain(target.iter().flat_map(|&t| [t, blank])).collect();
    let s_len = ext.len();
    let y = |t: usize, s: usize| log_probs.get(t, ext[s]);
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * s_len];
    alpha[0] = y(0, 0);
    if s_len > 1 {
        alpha[1] = y(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { neg };
            let c = if skip(s) { prev[s - 2] } else { neg };
            let v = lse3(a, b, c);
            alpha[t * s_len + s] = if v == neg { neg } else { v + y(t, s) };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_likelihood = if s_len > 1 { lse2(last[s_len - 1], last[s_len - 2]) } else { last[0] };
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }
    let loss = -log_likelihood;
    if !with_grad {
        return Ok(CtcOutput { loss, grad: None });
    }

    let mut beta = vec![neg; frames * s_len];
    let tl = frames - 1;
    beta[tl * s_len + s_len - 1] = y(tl, s_len - 1);
    if s_len > 1 {
        beta[tl * s_len + s_len - 2] = y(tl, s_len - 2);
    }
    for t in (0..tl).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { neg };
            let c = if s + 2 < s_len && skip(s + 2) { next[s + 2] } else { neg };
            let v = lse3(a, b, c);
            beta[t * s_len + s] = if v == neg { neg } else { v + y(t, s) };
        }
    }

    // ∂(-log P)/∂log y_t(k) = -Σ_{s: ext[s]=k} exp(α_t(s) + β_t(s) - log y_t(k) - log P)
    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == neg {
                continue;
            }
            grad[t * vocab + ext[s]] -= libm::exp(ab - y(t, s) - log_likelihood);
        }
    }
    Ok(CtcOutput { loss, grad: Some(Tensor::from_parts(frames, vocab, grad)) })
}

/// CTC loss as a tape node over `log_probs`.
pub fn ctc_loss_var(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let with_grad = g.requires_grad(log_probs);
    let out = ctc_loss(g.value(log_probs), target, blank, with_grad)?;
    let grad = match out.grad {
        Some(t) => t.into_data(),
        None => vec![0.0; g.value(log_probs).len()],
    };
    Ok(g.scalar_loss(log_probs, out.loss, grad))
}

/// Mean token cross-entropy of teacher-forced decoder logits against the
/// gold continuation (transcript followed by eos).
pub fn attention_loss(g: &mut Graph, logits: Var, gold_with_eos: &[usize]) -> Result<Var> {
    let rows = g.shape(logits).0;
    if rows != gold_with_eos.len() {
        return Err(Error::LengthMismatch { refs: gold_with_eos.len(), hyps: rows });
    }
    Ok(g.cross_entropy(logits, gold_with_eos))
}

/// Cross-entropy of unmasked classifier logits against the true language,
/// averaged over the rows of each layer (one row for the summary vector,
/// every frame for framewise routing) and then over layers. `None` when
/// there are no adapter layers.
pub fn language_loss(g: &mut Graph, per_layer_logits: &[Var], language: usize) -> Option<Var> {
    if per_layer_logits.is_empty() {
        return None;
    }
    let terms: Vec<(Var, f64)> = per_layer_logits
        .iter()
        .map(|&logits| {
            let rows = g.shape(logits).0;
            let targets = vec![language; rows];
            (g.cross_entropy(logits, &targets), 1.0 / per_layer_logits.len() as f64)
        })
        .collect();
    if terms.len() == 1 {
        return Some(terms[0].0);
    }
    let mut sum = terms[0].0;
    for &(v, _) in &terms[1..] {
        sum = g.add(sum, v);
    }
    Some(g.scale(sum, 1.0 / terms.len() as f64))
}
