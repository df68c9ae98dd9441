//! Language-ID masks, expert weighting and the adapter residual combination.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{masked_softmax_row, Graph, SoftmaxMask, Tensor, Var};

/// Which languages a prompt admits. At least one entry is set.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<bool>", into = "Vec<bool>")]
pub struct LidMask {
    bits: Vec<bool>,
}

impl LidMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { bits })
    }

    pub fn one_hot(language: usize, num_languages: usize) -> Self {
        assert!(language < num_languages);
        let mut bits = vec![false; num_languages];
        bits[language] = true;
        Self { bits }
    }

    pub fn all_hot(num_languages: usize) -> Self {
        assert!(num_languages > 0);
        Self { bits: vec![true; num_languages] }
    }

    /// Parses strings such as `"101"`; the first character is language 0.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Config(format!("invalid mask character {other:?} in {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_active(&self, language: usize) -> bool {
        self.bits[language]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn expect_len(&self, num_languages: usize) -> Result<()> {
        if self.bits.len() != num_languages {
            return Err(Error::MaskLength { expected: num_languages, got: self.bits.len() });
        }
        Ok(())
    }

    pub(crate) fn softmax_mask(&self) -> SoftmaxMask {
        SoftmaxMask::Columns(self.bits.clone())
    }
}

impl TryFrom<Vec<bool>> for LidMask {
    type Error = Error;

    fn try_from(bits: Vec<bool>) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<LidMask> for Vec<bool> {
    fn from(mask: LidMask) -> Self {
        mask.bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One weight vector per utterance.
    Utterance,
    /// One weight vector per frame (including the summary slot).
    Framewise,
}

/// Expert weights: `1 × L` or `rows × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingWeights {
    pub granularity: Granularity,
    pub alpha: Tensor,
}

impl RoutingWeights {
    /// Inactive entries must be exactly zero and each row must sum to one.
    pub fn check(&self, mask: &LidMask, tolerance: f64) -> Result<()> {
        if self.alpha.cols() != mask.len() {
            return Err(Error::MaskLength { expected: self.alpha.cols(), got: mask.len() });
        }
        for (r, row) in self.alpha.iter_rows().enumerate() {
            let mut sum = 0.0;
            for (i, &a) in row.iter().enumerate() {
                if !mask.is_active(i) && a != 0.0 {
                    return Err(Error::Shape(format!("row {r}: inactive language {i} has weight {a}")));
                }
                if a < 0.0 {
                    return Err(Error::Shape(format!("row {r}: negative weight {a}")));
                }
                sum += a;
            }
            if libm::fabs(sum - 1.0) > tolerance {
                return Err(Error::Shape(format!("row {r}: weights sum to {sum}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingVariant {
    /// Shared backbone only, no prompt.
    Baseline,
    /// Prompt appended to every input frame, no experts.
    #[serde(rename = "lidconcat")]
    LidConcat,
    /// Experts weighted uniformly over the prompted languages.
    Uniform,
    /// Experts weighted per frame by a learned classifier.
    Framewise,
    /// Experts weighted per utterance from the summary vector.
    #[serde(rename = "csv")]
    SummaryVector,
}

impl RoutingVariant {
    pub const ALL: [RoutingVariant; 5] = [
        RoutingVariant::Baseline,
        RoutingVariant::LidConcat,
        RoutingVariant::Uniform,
        RoutingVariant::Framewise,
        RoutingVariant::SummaryVector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoutingVariant::Baseline => "baseline",
            RoutingVariant::LidConcat => "lidconcat",
            RoutingVariant::Uniform => "uniform",
            RoutingVariant::Framewise => "framewise",
            RoutingVariant::SummaryVector => "csv",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, RoutingVariant::Uniform | RoutingVariant::Framewise | RoutingVariant::SummaryVector)
    }

    pub fn uses_classifier(self) -> bool {
        matches!(self, RoutingVariant::Framewise | RoutingVariant::SummaryVector)
    }

    pub fn granularity(self) -> Granularity {
        match self {
            RoutingVariant::Framewise => Granularity::Framewise,
            _ => Granularity::Utterance,
        }
    }
}

impl core::fmt::Display for RoutingVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Softmax over the logits of prompted languages; the rest get exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &LidMask) -> Result<RoutingWeights> {
    mask.expect_len(logits.len())?;
    let mut alpha = vec![0.0; logits.len()];
    if !masked_softmax_row(logits, |i| mask.is_active(i), &mut alpha) {
        return Err(Error::EmptyMask);
    }
    Ok(RoutingWeights { granularity: Granularity::Utterance, alpha: Tensor::row_vector(&alpha) })
}

/// `α_i = m_i / popcount(m)`.
pub fn uniform_alpha(mask: &LidMask) -> RoutingWeights {
    let n = mask.popcount() as f64;
    let alpha: Vec<f64> = mask.to_f64().into_iter().map(|m| m / n).collect();
    RoutingWeights { granularity: Granularity::Utterance, alpha: Tensor::row_vector(&alpha) }
}

/// Appends the mask to every frame: `T × d` becomes `T × (d + L)`.
pub fn lidconcat_augment(features: &Tensor, mask: &LidMask) -> Tensor {
    let bits = mask.to_f64();
    let (rows, cols) = features.shape();
    let mut data = Vec::with_capacity(rows * (cols + bits.len()));
    for row in features.iter_rows() {
        data.extend_from_slice(row);
        data.extend_from_slice(&bits);
    }
    Tensor::from_parts(rows, cols + bits.len(), data)
}

/// One language's expert: down projection, swish, up projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub down: Linear,
    pub up: Linear,
}

/// Experts of one adapter layer and, for learnable routing, its classifier
/// (an affine map `d_model → L`).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayerParams {
    pub experts: Vec<AdapterParams>,
    pub classifier: Option<Linear>,
}

/// `up(swish(down(h0)))` with no internal residual.
pub fn adapter_forward(g: &mut Graph, h0: Var, adapter: &AdapterParams) -> Var {
    let h = adapter.down.forward(g, h0);
    let h = g.swish(h);
    adapter.up.forward(g, h)
}

/// `h = h0 + Σ α_i h_i`. `alpha` is `1 × L` (shared by every row) or has one
/// row per row of `h0`.
pub fn combine(g: &mut Graph, h0: Var, experts: &[Var], alpha: Var) -> Result<Var> {
    let shape = g.shape(h0);
    let (ar, ac) = g.shape(alpha);
    if ac != experts.len() || (ar != 1 && ar != shape.0) {
        return Err(Error::Shape(format!(
            "routing weights {ar}x{ac} incompatible with {} experts over {} rows",
            experts.len(),
            shape.0
        )));
    }
    if let Some(&bad) = experts.iter().find(|&&e| g.shape(e) != shape) {
        return Err(Error::Shape(format!("expert output {:?} differs from h0 {:?}", g.shape(bad), shape)));
    }
    let mut h = h0;
    for (i, &expert) in experts.iter().enumerate() {
        let weight = g.slice_cols(alpha, i, 1);
        let weighted = g.mul(expert, weight);
        h = g.add(h, weighted);
    }
    Ok(h)
}

/// Weights chosen for one adapter layer.
#[derive(Clone, Copy, Debug)]
pub struct Route {
    pub alpha: Var,
    /// Unmasked classifier outputs; absent for uniform routing.
    pub logits: Option<Var>,
    pub granularity: Granularity,
}

/// Computes expert weights for one adapter layer. `h0` includes the summary
/// row; `sv_state` is that row on its own.
pub fn route(
    g: &mut Graph,
    h0: Var,
    sv_state: Var,
    mask: &LidMask,
    variant: RoutingVariant,
    classifier: Option<&Linear>,
) -> Result<Route> {
    match variant {
        RoutingVariant::Uniform => {
            let alpha = g.constant(uniform_alpha(mask).alpha);
            Ok(Route { alpha, logits: None, granularity: Granularity::Utterance })
        }
        RoutingVariant::SummaryVector | RoutingVariant::Framewise => {
            let classifier = classifier.ok_or(Error::NoClassifier(variant.name()))?;
            let input = if variant == RoutingVariant::SummaryVector { sv_state } else { h0 };
            let logits = classifier.forward(g, input);
            mask.expect_len(g.shape(logits).1)?;
            let alpha = g.masked_softmax(logits, &mask.softmax_mask());
            Ok(Route { alpha, logits: Some(logits), granularity: variant.granularity() })
        }
        RoutingVariant::Baseline | RoutingVariant::LidConcat => {
            Err(Error::Config(format!("variant {variant} has no adapter routing")))
        }
    }
}
