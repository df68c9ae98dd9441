//! Finite-difference check of the full training loss on a micro model.

use csvmasr_core::corpus::{generate_corpus, CorpusConfig};
use csvmasr_core::encoder::EncoderConfig;
use csvmasr_core::losses::LossConfig;
use csvmasr_core::model::{Model, ModelConfig};
use csvmasr_core::numerics::{compare_gradients, finite_diff_grad, value_and_grad, GradComparison, Graph, ParamStore};
use csvmasr_core::routing::{LidMask, RoutingVariant};
use csvmasr_core::seq2seq::DecoderConfig;
use csvmasr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckSettings {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { epsilon: 1e-4, tolerance: 1e-4, floor: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct VariantGradcheck {
    pub variant: RoutingVariant,
    pub comparison: GradComparison,
    pub num_params: usize,
    pub passed: bool,
}

/// d_model 8, two encoder layers with one adapter layer at layer 2, one
/// decoder layer, three languages.
pub fn micro_config(variant: RoutingVariant) -> ModelConfig {
    let mut c = ModelConfig::for_corpus(&CorpusConfig::default(), variant);
    c.encoder = EncoderConfig { num_layers: 2, d_model: 8, ffn_dim: 16, adapter_layers: vec![2], ..c.encoder };
    c.decoder = DecoderConfig { num_layers: 1, d_model: 8, ffn_dim: 16, ..c.decoder };
    c.adapter_dim = 4;
    c
}

/// Seeded initialization plus uniform noise, so zero-initialized tensors
/// are exercised away from their special values.
pub fn micro_model(variant: RoutingVariant, seed: u64) -> Result<(Model, ParamStore), Error> {
    let (model, mut store) = Model::init(micro_config(variant), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok((model, store))
}

/// Checks every routing variant on one six-frame utterance under a
/// two-language prompt.
pub fn run_gradcheck(settings: &GradcheckSettings) -> Result<Vec<VariantGradcheck>, Error> {
    let corpus = generate_corpus(&CorpusConfig {
        transcript_len_range: [2, 2],
        train_per_language: 1,
        val_per_language: 1,
        test_per_language: 1,
        seed: settings.seed,
        ..Default::default()
    })?;
    let utt = &corpus.train[1];
    let mask = LidMask::from_bitstring("110")?;
    RoutingVariant::ALL
        .into_iter()
        .map(|variant| {
            let (model, store) = micro_model(variant, settings.seed.wrapping_add(21))?;
            let program = |g: &mut Graph| {
                let l =
                    model.losses(g, &utt.features, &utt.transcript, utt.language_id, &mask, &LossConfig::default())?;
                Ok::<_, Error>(l.total)
            };
            let (_, analytic) = value_and_grad(&store, program)?;
            let numeric = finite_diff_grad(&store, settings.epsilon, program)?;
            let comparison = compare_gradients(&analytic, &numeric, settings.floor);
            let passed = comparison.compared == store.num_scalars() && comparison.max_rel_error < settings.tolerance;
            Ok(VariantGradcheck { variant, comparison, num_params: store.num_scalars(), passed })
        })
        .collect()
}
