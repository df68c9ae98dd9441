#![allow(dead_code)]

use csvmasr_core::corpus::{generate_corpus, CorpusConfig, Utterance};
use csvmasr_core::encoder::EncoderConfig;
use csvmasr_core::model::{Model, ModelConfig};
use csvmasr_core::numerics::ParamStore;
use csvmasr_core::routing::RoutingVariant;
use csvmasr_core::seq2seq::DecoderConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// d_model 8, two encoder layers with adapters at layer 2, one decoder layer.
pub fn micro_config(variant: RoutingVariant) -> ModelConfig {
    let mut c = ModelConfig::for_corpus(&CorpusConfig::default(), variant);
    c.encoder = EncoderConfig { num_layers: 2, d_model: 8, ffn_dim: 16, adapter_layers: vec![2], ..c.encoder };
    c.decoder = DecoderConfig { num_layers: 1, d_model: 8, ffn_dim: 16, ..c.decoder };
    c.adapter_dim = 4;
    c
}

/// Utterances of exactly `tokens` tokens (3 frames each).
pub fn utterances(tokens: usize, per_language: usize, seed: u64) -> Vec<Utterance> {
    let config = CorpusConfig {
        transcript_len_range: [tokens, tokens],
        train_per_language: per_language,
        val_per_language: 1,
        test_per_language: 1,
        seed,
        ..Default::default()
    };
    generate_corpus(&config).unwrap().train
}

/// Adds uniform noise to every parameter so that no tensor sits at its
/// structured initial value.
pub fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub fn micro_model(variant: RoutingVariant, seed: u64) -> (Model, ParamStore) {
    let (model, mut store) = Model::init(micro_config(variant), seed).unwrap();
    perturb(&mut store, seed ^ 0x5eed, 0.3);
    (model, store)
}
