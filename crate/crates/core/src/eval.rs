//! Token error rates, per-layer language classification and prompt sweeps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::Model;
use crate::numerics::{ParamStore, Tensor};
use crate::routing::{LidMask, RoutingVariant};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Total edits over total reference tokens, as a percentage.
pub fn wer<T: PartialEq>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<f64> {
    let (edits, tokens) = wer_counts(references, hypotheses)?;
    Ok(percent(edits, tokens))
}

fn wer_counts<T: PartialEq>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<(usize, usize)> {
    if references.len() != hypotheses.len() {
        return Err(Error::LengthMismatch { refs: references.len(), hyps: hypotheses.len() });
    }
    let tokens: usize = references.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Err(Error::EmptyReference);
    }
    let edits = references.iter().zip(hypotheses).map(|(r, h)| edit_distance(r, h)).sum();
    Ok((edits, tokens))
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Attention-decoder beam search.
    #[serde(rename = "AR")]
    Ar,
    /// Greedy collapse of the CTC output.
    #[serde(rename = "NAR")]
    Nar,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 2] = [DecodeMode::Ar, DecodeMode::Nar];

    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Ar => "AR",
            DecodeMode::Nar => "NAR",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

/// The language-ID mask presented at inference.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Prompt {
    /// The utterance's own language only.
    OneHot,
    AllHot,
    Explicit(LidMask),
}

impl Prompt {
    /// `1hot`, `allhot` or `mask=<bits>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1hot" => Ok(Prompt::OneHot),
            "allhot" => Ok(Prompt::AllHot),
            _ => match s.strip_prefix("mask=") {
                Some(bits) => Ok(Prompt::Explicit(LidMask::from_bitstring(bits)?)),
                None => Err(Error::Config(format!("unknown prompt `{s}`; expected 1hot, allhot or mask=<bits>"))),
            },
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Prompt::OneHot => "1hot".into(),
            Prompt::AllHot => "allhot".into(),
            Prompt::Explicit(m) => format!("mask={}", m.to_bitstring()),
        }
    }

    pub fn mask_for(&self, language: usize, num_languages: usize) -> Result<LidMask> {
        match self {
            Prompt::OneHot => Ok(LidMask::one_hot(language, num_languages)),
            Prompt::AllHot => Ok(LidMask::all_hot(num_languages)),
            Prompt::Explicit(m) => {
                m.expect_len(num_languages)?;
                Ok(m.clone())
            }
        }
    }
}

/// Decoding settings shared by the evaluation entry points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub beam_width: usize,
}

/// Transcript of one utterance under an explicit mask.
pub fn decode(
    model: &Model,
    params: &ParamStore,
    features: &Tensor,
    mask: &LidMask,
    opts: DecodeOptions,
) -> Result<Vec<usize>> {
    match opts.mode {
        DecodeMode::Nar => model.decode_nar(params, features, mask),
        DecodeMode::Ar => Ok(model.decode_ar(params, features, mask, &model.beam_config(opts.beam_width))?.transcript),
    }
}

/// Decodes every utterance under its prompt-derived mask.
pub fn decode_all<E: Executor>(
    model: &Model,
    params: &ParamStore,
    utterances: &[Utterance],
    prompt: &Prompt,
    opts: DecodeOptions,
    exec: &E,
) -> Result<Vec<Vec<usize>>> {
    let langs = model.config.num_languages();
    exec.map(utterances, |u| {
        let mask = prompt.mask_for(u.language_id, langs)?;
        decode(model, params, &u.features, &mask, opts)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageWer {
    pub language: usize,
    pub edits: usize,
    pub reference_tokens: usize,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WerReport {
    pub variant: RoutingVariant,
    pub prompt: Prompt,
    pub mode: DecodeMode,
    /// Languages present in the evaluated set, ascending.
    pub per_language: Vec<LanguageWer>,
    /// Total edits over total reference tokens.
    pub aggregate: f64,
}

/// Per-language and pooled WER of already decoded hypotheses.
pub fn wer_breakdown(utterances: &[Utterance], hypotheses: &[Vec<usize>]) -> Result<(Vec<LanguageWer>, f64)> {
    if utterances.len() != hypotheses.len() {
        return Err(Error::LengthMismatch { refs: utterances.len(), hyps: hypotheses.len() });
    }
    let max_lang = utterances.iter().map(|u| u.language_id).max().ok_or(Error::EmptyReference)?;
    let mut counts = vec![(0usize, 0usize, false); max_lang + 1];
    for (u, h) in utterances.iter().zip(hypotheses) {
        let c = &mut counts[u.language_id];
        c.0 += edit_distance(&u.transcript, h);
        c.1 += u.transcript.len();
        c.2 = true;
    }
    let (edits, tokens) = counts.iter().fold((0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1));
    if tokens == 0 {
        return Err(Error::EmptyReference);
    }
    let per_language = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.2 && c.1 > 0)
        .map(|(language, &(edits, reference_tokens, _))| LanguageWer {
            language,
            edits,
            reference_tokens,
            wer: percent(edits, reference_tokens),
        })
        .collect();
    Ok((per_language, percent(edits, tokens)))
}

pub fn wer_report<E: Executor>(
    model: &Model,
    params: &ParamStore,
    utterances: &[Utterance],
    prompt: &Prompt,
    opts: DecodeOptions,
    exec: &E,
) -> Result<WerReport> {
    let hyps = decode_all(model, params, utterances, prompt, opts, exec)?;
    let (per_language, aggregate) = wer_breakdown(utterances, &hyps)?;
    Ok(WerReport { variant: model.config.variant, prompt: prompt.clone(), mode: opts.mode, per_language, aggregate })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted language from one layer's logits: the argmax of a single row,
/// or the majority of per-row argmaxes (lowest language on ties).
pub fn predict_language(logits: &Tensor) -> usize {
    if logits.rows() == 1 {
        return argmax(logits.row(0));
    }
    let mut votes = vec![0usize; logits.cols()];
    for row in logits.iter_rows() {
        votes[argmax(row)] += 1;
    }
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate().skip(1) {
        if v > votes[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracy {
    /// 1-based encoder layer.
    pub layer: usize,
    /// `(language, accuracy %)` for languages present in the evaluated set.
    pub per_language: Vec<(usize, f64)>,
    pub overall: f64,
}

/// Classification accuracy of every adapter layer's unmasked classifier.
pub fn layer_classification_accuracy<E: Executor>(
    model: &Model,
    params: &ParamStore,
    utterances: &[Utterance],
    prompt: &Prompt,
    exec: &E,
) -> Result<Vec<LayerAccuracy>> {
    let variant = model.config.variant;
    if !variant.uses_classifier() {
        return Err(Error::NoClassifier(variant.name()));
    }
    if utterances.is_empty() {
        return Err(Error::EmptyReference);
    }
    let langs = model.config.num_languages();
    let predictions: Vec<Vec<usize>> = exec
        .map(utterances, |u| {
            let mask = prompt.mask_for(u.language_id, langs)?;
            let a = model.analyze(params, &u.features, &mask)?;
            Ok(a.language_logits.iter().map(predict_language).collect())
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let layers: Vec<usize> = model
        .encoder
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.adapters.as_ref().is_some_and(|a| a.classifier.is_some()))
        .map(|(i, _)| i + 1)
        .collect();
    let mut out = Vec::with_capacity(layers.len());
    for (slot, &layer) in layers.iter().enumerate() {
        let mut per = vec![(0usize, 0usize); langs];
        for (u, p) in utterances.iter().zip(&predictions) {
            per[u.language_id].1 += 1;
            per[u.language_id].0 += usize::from(p[slot] == u.language_id);
        }
        let correct: usize = per.iter().map(|c| c.0).sum();
        out.push(LayerAccuracy {
            layer,
            per_language: per
                .iter()
                .enumerate()
                .filter(|(_, c)| c.1 > 0)
                .map(|(l, c)| (l, percent(c.0, c.1)))
                .collect(),
            overall: percent(correct, utterances.len()),
        });
    }
    Ok(out)
}

/// Every mask holding `language` plus exactly `extra` other languages, in
/// lexicographic order of the added languages.
pub fn masks_with_extra(language: usize, num_languages: usize, extra: usize) -> Vec<LidMask> {
    let others: Vec<usize> = (0..num_languages).filter(|&l| l != language).collect();
    let mut out = Vec::new();
    let mut chosen = Vec::with_capacity(extra);
    fn walk(
        others: &[usize],
        start: usize,
        left: usize,
        chosen: &mut Vec<usize>,
        base: usize,
        n: usize,
        out: &mut Vec<LidMask>,
    ) {
        if left == 0 {
            let mut bits = vec![false; n];
            bits[base] = true;
            for &c in chosen.iter() {
                bits[c] = true;
            }
            out.push(LidMask::new(bits).expect("mask holds the ground truth"));
            return;
        }
        for i in start..others.len() {
            if others.len() - i < left {
                break;
            }
            chosen.push(others[i]);
            walk(others, i + 1, left - 1, chosen, base, n, out);
            chosen.pop();
        }
    }
    if extra <= others.len() {
        walk(&others, 0, extra, &mut chosen, language, num_languages, &mut out);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Languages added to the ground truth.
    pub k: usize,
    pub num_masks: usize,
    pub mean_wer: f64,
    /// 1.96 × standard error over masks; 0 for a single mask.
    pub ci95: f64,
    pub per_mask: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSweepResult {
    pub variant: RoutingVariant,
    pub language: usize,
    pub mode: DecodeMode,
    pub rows: Vec<SweepRow>,
}

/// Mean and 1.96 × standard error (sample standard deviation).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * libm::sqrt(var / n as f64))
}

/// WER on utterances of `language` under every mask containing it, grouped
/// by the number of added languages.
pub fn prompt_sweep<E: Executor>(
    model: &Model,
    params: &ParamStore,
    utterances: &[Utterance],
    language: usize,
    opts: DecodeOptions,
    exec: &E,
) -> Result<PromptSweepResult> {
    let langs = model.config.num_languages();
    if langs < 2 {
        return Err(Error::Config("a prompt sweep needs at least two languages".into()));
    }
    if let Some(u) = utterances.iter().find(|u| u.language_id != language) {
        return Err(Error::Config(format!("utterance {} is not in language {language}", u.utterance_id)));
    }
    let refs: Vec<Vec<usize>> = utterances.iter().map(|u| u.transcript.clone()).collect();
    let mut rows = Vec::with_capacity(langs);
    for k in 0..langs {
        let mut per_mask = Vec::new();
        for mask in masks_with_extra(language, langs, k) {
            let hyps = decode_all(model, params, utterances, &Prompt::Explicit(mask.clone()), opts, exec)?;
            per_mask.push((mask.to_bitstring(), wer(&refs, &hyps)?));
        }
        let values: Vec<f64> = per_mask.iter().map(|m| m.1).collect();
        let (mean_wer, ci95) = mean_ci95(&values);
        rows.push(SweepRow { k, num_masks: per_mask.len(), mean_wer, ci95, per_mask });
    }
    Ok(PromptSweepResult { variant: model.config.variant, language, mode: opts.mode, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoHotEntry {
    pub ground_truth: usize,
    /// Second prompted language; equal to `ground_truth` on the 1-hot diagonal.
    pub added: usize,
    pub wer: f64,
}

/// WER on each language `j` prompted with `{i, j}` for every `i`.
pub fn two_hot_matrix<E: Executor>(
    model: &Model,
    params: &ParamStore,
    utterances: &[Utterance],
    opts: DecodeOptions,
    exec: &E,
) -> Result<Vec<TwoHotEntry>> {
    let langs = model.config.num_languages();
    let mut out = Vec::with_capacity(langs * langs);
    for j in 0..langs {
        let subset: Vec<Utterance> = utterances.iter().filter(|u| u.language_id == j).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let refs: Vec<Vec<usize>> = subset.iter().map(|u| u.transcript.clone()).collect();
        for i in 0..langs {
            let mut bits = vec![false; langs];
            bits[i] = true;
            bits[j] = true;
            let mask = LidMask::new(bits)?;
            let hyps = decode_all(model, params, &subset, &Prompt::Explicit(mask), opts, exec)?;
            out.push(TwoHotEntry { ground_truth: j, added: i, wer: wer(&refs, &hyps)? });
        }
    }
    Ok(out)
}
