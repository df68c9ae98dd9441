//! The complete hybrid CTC/attention model: parameter layout, losses and
//! inference.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, Vocabulary};
use crate::encoder::{encode, ConformerLayerParams, ConvModuleParams, EncoderConfig, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::layers::{Linear, ParamBuilder};
use crate::losses::{attention_loss, ctc_loss_var, language_loss, total_loss_var, LossConfig};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::routing::{AdapterLayerParams, AdapterParams, Granularity, LidMask, RoutingVariant};
use crate::seq2seq::{
    beam_search, decoder_forward, log_normalize, BeamConfig, BeamResult, DecoderConfig, DecoderLayerParams,
    DecoderParams,
};

const SUMMARY_INIT_STD: f64 = 0.1;
const POSITION_INIT_STD: f64 = 0.1;
const EMBEDDING_INIT_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocabulary: Vocabulary,
    pub d_feat: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Bottleneck width of each adapter expert.
    pub adapter_dim: usize,
    pub variant: RoutingVariant,
}

impl ModelConfig {
    /// Default architecture sized for a corpus.
    pub fn for_corpus(corpus: &CorpusConfig, variant: RoutingVariant) -> Self {
        let vocabulary = corpus.vocabulary();
        Self {
            vocabulary,
            d_feat: corpus.d_feat,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig { vocab_size: vocabulary.size(), ..DecoderConfig::default() },
            adapter_dim: 8,
            variant,
        }
    }

    pub fn num_languages(&self) -> usize {
        self.vocabulary.num_languages
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.vocab_size != self.vocabulary.size() {
            return Err(Error::Config(format!(
                "decoder vocab_size {} but the vocabulary has {} entries",
                self.decoder.vocab_size,
                self.vocabulary.size()
            )));
        }
        if self.decoder.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "decoder d_model {} differs from encoder d_model {}",
                self.decoder.d_model, self.encoder.d_model
            )));
        }
        if self.adapter_dim == 0 || self.d_feat == 0 || self.num_languages() == 0 {
            return Err(Error::Config("adapter_dim, d_feat and the language count must be positive".into()));
        }
        Ok(())
    }

    /// Width of the input projection.
    pub fn input_dim(&self) -> usize {
        match self.variant {
            RoutingVariant::LidConcat => self.d_feat + self.num_languages(),
            _ => self.d_feat,
        }
    }
}

/// Parameter handles of the whole model; the values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// Projection of every encoder row, summary included, onto the vocabulary.
    pub ctc: Linear,
}

/// Tape handles of the loss terms for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ctc: Var,
    pub att: Var,
    pub lang: Option<Var>,
    pub total: Var,
}

/// Read-only quantities of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    /// `(T+1) × vocab` log-probabilities.
    pub ctc_log_probs: Tensor,
    /// `(T+1) × d_model`
    pub frames: Tensor,
    /// Unmasked classifier logits per adapter layer.
    pub language_logits: Vec<Tensor>,
    /// Routing weights per adapter layer.
    pub alphas: Vec<(Granularity, Tensor)>,
}

impl Model {
    /// Builds the parameter layout with seeded initial values. Adapter
    /// up-projections start at zero so every expert begins as a no-op.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder { store: &mut store, rng: &mut rng };
        let enc = &config.encoder;
        let d = enc.d_model;
        let langs = config.num_languages();

        let input = b.linear("encoder.input", config.input_dim(), d)?;
        let theta_sv = b.normal("encoder.theta_sv", 1, d, SUMMARY_INIT_STD)?;
        let mut layers = Vec::with_capacity(enc.num_layers);
        for i in 1..=enc.num_layers {
            let p = format!("encoder.layers.{i}");
            let ff1 = b.feed_forward(&format!("{p}.ff1"), d, enc.ffn_dim)?;
            let attn_norm = b.norm(&format!("{p}.attn_norm"), d)?;
            let attention = b.attention(&format!("{p}.attention"), d, enc.num_heads)?;
            let rel_bias = b.zeros(format!("{p}.rel_bias"), enc.num_rel_buckets(), enc.num_heads)?;
            let conv = ConvModuleParams {
                norm: b.norm(&format!("{p}.conv.norm"), d)?,
                pointwise_in: b.linear(&format!("{p}.conv.pointwise_in"), d, 2 * d)?,
                depthwise: b.normal(
                    format!("{p}.conv.depthwise"),
                    enc.conv_kernel,
                    d,
                    1.0 / libm::sqrt(enc.conv_kernel as f64),
                )?,
                depthwise_bias: b.zeros(format!("{p}.conv.depthwise_bias"), 1, d)?,
                mid_norm: b.norm(&format!("{p}.conv.mid_norm"), d)?,
                pointwise_out: b.linear(&format!("{p}.conv.pointwise_out"), d, d)?,
            };
            let ff2 = b.feed_forward(&format!("{p}.ff2"), d, enc.ffn_dim)?;
            let final_norm = b.norm(&format!("{p}.final_norm"), d)?;
            let adapters = if config.variant.uses_adapters() && enc.adapter_layers.contains(&i) {
                let experts = (0..langs)
                    .map(|l| {
                        Ok(AdapterParams {
                            down: b.linear(&format!("{p}.adapters.{l}.down"), d, config.adapter_dim)?,
                            up: b.zero_linear(&format!("{p}.adapters.{l}.up"), config.adapter_dim, d)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let classifier = if config.variant.uses_classifier() {
                    Some(b.linear(&format!("{p}.classifier"), d, langs)?)
                } else {
                    None
                };
                Some(AdapterLayerParams { experts, classifier })
            } else {
                None
            };
            layers.push(ConformerLayerParams { ff1, attn_norm, attention, rel_bias, conv, ff2, final_norm, adapters });
        }
        let encoder = EncoderParams { input, theta_sv, layers };

        let dec = &config.decoder;
        let embedding = b.normal("decoder.embedding", dec.vocab_size, dec.d_model, EMBEDDING_INIT_STD)?;
        let positions = b.normal("decoder.positions", dec.max_decode_len, dec.d_model, POSITION_INIT_STD)?;
        let mut dec_layers = Vec::with_capacity(dec.num_layers);
        for i in 1..=dec.num_layers {
            let p = format!("decoder.layers.{i}");
            dec_layers.push(DecoderLayerParams {
                self_norm: b.norm(&format!("{p}.self_norm"), dec.d_model)?,
                self_attention: b.attention(&format!("{p}.self_attention"), dec.d_model, dec.num_heads)?,
                cross_norm: b.norm(&format!("{p}.cross_norm"), dec.d_model)?,
                cross_attention: b.attention(&format!("{p}.cross_attention"), dec.d_model, dec.num_heads)?,
                ff: b.feed_forward(&format!("{p}.ff"), dec.d_model, dec.ffn_dim)?,
            });
        }
        let decoder = DecoderParams {
            embedding,
            positions,
            layers: dec_layers,
            final_norm: b.norm("decoder.final_norm", dec.d_model)?,
            output: b.linear("decoder.output", dec.d_model, dec.vocab_size)?,
        };
        let ctc = b.linear("ctc", d, config.vocabulary.size())?;
        Ok((Self { config, encoder, decoder, ctc }, store))
    }

    /// Checks that `params` carries every tensor of this layout with the
    /// expected shape.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let (_, reference) = Self::init(self.config.clone(), 0)?;
        if reference.len() != params.len() {
            return Err(Error::CheckpointMismatch {
                name: "<all>".into(),
                reason: format!("{} tensors, layout has {}", params.len(), reference.len()),
            });
        }
        for (want, got) in reference.entries().iter().zip(params.entries()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::CheckpointMismatch {
                    name: got.name.clone(),
                    reason: format!("expected {} {:?}, found {:?}", want.name, want.value.shape(), got.value.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, features: &Tensor, mask: &LidMask) -> Result<EncoderOutput> {
        mask.expect_len(self.config.num_languages())?;
        if features.cols() != self.config.d_feat {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.config.d_feat
            )));
        }
        encode(g, &self.encoder, &self.config.encoder, features, mask, self.config.variant)
    }

    /// Per-row CTC log-probabilities over all encoder rows.
    pub fn ctc_log_probs(&self, g: &mut Graph, frames: Var) -> Var {
        let logits = self.ctc.forward(g, frames);
        g.log_softmax(logits)
    }

    /// Records the full training objective for one utterance.
    pub fn losses(
        &self,
        g: &mut Graph,
        features: &Tensor,
        transcript: &[usize],
        language: usize,
        mask: &LidMask,
        config: &LossConfig,
    ) -> Result<LossVars> {
        let vocab = self.config.vocabulary;
        if language >= vocab.num_languages {
            return Err(Error::Config(format!("language {language} out of range")));
        }
        let enc = self.encode(g, features, mask)?;
        let log_probs = self.ctc_log_probs(g, enc.frames);
        let ctc = ctc_loss_var(g, log_probs, transcript, vocab.blank())?;

        let mut prefix = Vec::with_capacity(transcript.len() + 1);
        prefix.push(vocab.sos());
        prefix.extend_from_slice(transcript);
        let mut gold = transcript.to_vec();
        gold.push(vocab.eos());
        let trace = decoder_forward(g, &self.decoder, &self.config.decoder, enc.frames, &prefix, vocab.sos())?;
        let att = attention_loss(g, trace.logits, &gold)?;

        let lang = language_loss(g, &enc.language_logits(), language);
        let total = total_loss_var(g, ctc, att, lang, config);
        g.check_finite()?;
        Ok(LossVars { ctc, att, lang, total })
    }

    /// Forward pass without gradient tracking.
    pub fn analyze(&self, params: &ParamStore, features: &Tensor, mask: &LidMask) -> Result<Analysis> {
        let mut g = Graph::with_params(params, false);
        let enc = self.encode(&mut g, features, mask)?;
        let lp = self.ctc_log_probs(&mut g, enc.frames);
        g.check_finite()?;
        Ok(Analysis {
            ctc_log_probs: g.value(lp).clone(),
            frames: g.value(enc.frames).clone(),
            language_logits: enc.language_logits().iter().map(|&v| g.value(v).clone()).collect(),
            alphas: enc.routing_records.iter().map(|r| (r.granularity, g.value(r.alpha).clone())).collect(),
        })
    }

    /// Non-autoregressive transcript: greedy collapse of the CTC output.
    pub fn decode_nar(&self, params: &ParamStore, features: &Tensor, mask: &LidMask) -> Result<Vec<usize>> {
        let a = self.analyze(params, features, mask)?;
        Ok(crate::seq2seq::ctc_greedy(&a.ctc_log_probs, self.config.vocabulary.blank()))
    }

    pub fn beam_config(&self, width: usize) -> BeamConfig {
        let vocab = self.config.vocabulary;
        BeamConfig {
            width,
            max_len: self.config.decoder.max_decode_len,
            sos: vocab.sos(),
            eos: vocab.eos(),
            banned: [vocab.blank(), vocab.sos()],
            length_normalize: true,
        }
    }

    /// Autoregressive transcript from attention-decoder beam search.
    pub fn decode_ar(
        &self,
        params: &ParamStore,
        features: &Tensor,
        mask: &LidMask,
        beam: &BeamConfig,
    ) -> Result<BeamResult> {
        let mut g = Graph::with_params(params, false);
        let enc = self.encode(&mut g, features, mask)?;
        g.check_finite()?;
        let mark = g.len();
        let sos = self.config.vocabulary.sos();
        let mut scorer = |prefix: &[usize]| -> Result<Vec<f64>> {
            let trace = decoder_forward(&mut g, &self.decoder, &self.config.decoder, enc.frames, prefix, sos)?;
            g.check_finite()?;
            let logits = g.value(trace.logits);
            let row = log_normalize(logits.row(logits.rows() - 1));
            g.truncate(mark);
            Ok(row)
        };
        beam_search(&mut scorer, beam)
    }
}
