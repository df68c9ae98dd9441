//! Multihot prompt sampling, Adam training and checkpoint averaging.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::eval::{self, DecodeMode, DecodeOptions, Prompt};
use crate::exec::Executor;
use crate::losses::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::numerics::{Gradients, Graph, ParamStore, Tensor};
use crate::routing::{LidMask, RoutingVariant};

const SHUFFLE_STREAM: u64 = 0;
const MASK_STREAM: u64 = 1;

/// Ground truth plus each other language independently with probability `p`.
pub fn sample_lid_mask<R: Rng + ?Sized>(ground_truth: usize, num_languages: usize, p: f64, rng: &mut R) -> LidMask {
    let bits = (0..num_languages).map(|l| if l == ground_truth { true } else { rng.random::<f64>() < p }).collect();
    LidMask::new(bits).expect("ground truth is always set")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    /// Parameters are rounded to single precision after every update.
    #[serde(rename = "32")]
    Single,
    #[serde(rename = "64")]
    Double,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::Single),
            64 => Some(Precision::Double),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub p_insert: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub k_average: usize,
    pub seed: u64,
    pub variant: RoutingVariant,
    pub precision: Precision,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_insert: 0.5,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            k_average: 3,
            seed: 0,
            variant: RoutingVariant::SummaryVector,
            precision: Precision::Double,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_insert) {
            return Err(Error::Config(format!("p_insert {} outside [0, 1]", self.p_insert)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k_average == 0 {
            return Err(Error::Config("epochs, batch_size and k_average must be positive".into()));
        }
        if self.k_average > self.epochs {
            return Err(Error::Config(format!("k_average {} exceeds epochs {}", self.k_average, self.epochs)));
        }
        self.loss.validate()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.learning_rate * mhat / (libm::sqrt(vhat) + self.epsilon);
            }
        }
    }
}

fn round_to_single(params: &mut ParamStore) {
    for id in params.ids().collect::<Vec<_>>() {
        for v in params.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// `100 − WER` of non-autoregressive decoding under 1-hot prompts.
    pub val_token_acc: f64,
    /// Last adapter layer under all-hot prompts, when the variant has a classifier.
    pub val_lang_acc: Option<f64>,
    pub config_hash: String,
    pub model: ModelConfig,
    /// Epochs whose parameters were averaged into this checkpoint.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub averaged_epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub ctc: f64,
    pub att: f64,
    pub lang: f64,
    pub val_token_acc: f64,
    pub val_lang_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<EpochLog>,
}

/// 64-bit FNV-1a of the configuration's debug rendering, as hex.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = format!("{model:?}|{train:?}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct StepResult {
    grads: Vec<Option<Tensor>>,
    ctc: f64,
    att: f64,
    lang: f64,
    total: f64,
}

fn utterance_step(
    model: &Model,
    params: &ParamStore,
    utt: &Utterance,
    mask: &LidMask,
    loss: &LossConfig,
) -> Result<StepResult> {
    let mut g = Graph::with_params(params, true);
    let l = model.losses(&mut g, &utt.features, &utt.transcript, utt.language_id, mask, loss)?;
    let grads = g.param_grads(l.total)?;
    if grads.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "backward" });
    }
    Ok(StepResult {
        grads,
        ctc: g.scalar(l.ctc),
        att: g.scalar(l.att),
        lang: l.lang.map_or(0.0, |v| g.scalar(v)),
        total: g.scalar(l.total),
    })
}

/// Validation token accuracy (NAR, 1-hot) and last-layer language accuracy
/// (all-hot).
pub fn validate<E: Executor>(
    model: &Model,
    params: &ParamStore,
    val: &[Utterance],
    exec: &E,
) -> Result<(f64, Option<f64>)> {
    let opts = DecodeOptions { mode: DecodeMode::Nar, beam_width: 1 };
    let hyps = eval::decode_all(model, params, val, &Prompt::OneHot, opts, exec)?;
    let refs: Vec<Vec<usize>> = val.iter().map(|u| u.transcript.clone()).collect();
    let token_acc = 100.0 - eval::wer(&refs, &hyps)?;
    let lang_acc = if model.config.variant.uses_classifier() {
        let layers = eval::layer_classification_accuracy(model, params, val, &Prompt::AllHot, exec)?;
        layers.last().map(|l| l.overall)
    } else {
        None
    };
    Ok((token_acc, lang_acc))
}

/// Trains from a seeded initialization. `on_epoch` sees every checkpoint as
/// it is produced.
pub fn train<E, F>(
    train_set: &[Utterance],
    val_set: &[Utterance],
    model_config: ModelConfig,
    config: &TrainConfig,
    exec: &E,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    E: Executor,
    F: FnMut(&EpochLog, &Checkpoint) -> Result<()>,
{
    config.validate()?;
    if model_config.variant != config.variant {
        return Err(Error::Config(format!(
            "model variant {} differs from training variant {}",
            model_config.variant, config.variant
        )));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyReference);
    }
    let vocab = model_config.vocabulary;
    for u in train_set.iter().chain(val_set) {
        if u.language_id >= vocab.num_languages
            || u.transcript.iter().any(|&t| vocab.language_of(t) != Some(u.language_id))
        {
            return Err(Error::ForeignToken {
                token: u.transcript.iter().copied().find(|&t| vocab.language_of(t) != Some(u.language_id)).unwrap_or(0),
                language: u.language_id,
            });
        }
    }
    let hash = config_hash(&model_config, config);
    let (model, mut params) = Model::init(model_config, config.seed)?;
    if config.precision == Precision::Single {
        round_to_single(&mut params);
    }
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mask_rng.set_stream(MASK_STREAM);
    let langs = vocab.num_languages;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 4];
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let jobs: Vec<(&Utterance, LidMask)> = batch
                .iter()
                .map(|&i| {
                    let u = &train_set[i];
                    (u, sample_lid_mask(u.language_id, langs, config.p_insert, &mut mask_rng))
                })
                .collect();
            let results = exec.map(&jobs, |(u, mask)| utterance_step(&model, &params, u, mask, &config.loss));
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, step: step + 1, source: Box::new(e) },
                other => other,
            };
            let mut acc: Option<Gradients> = None;
            for r in results {
                let r = r.map_err(diverged)?;
                sums[0] += r.total;
                sums[1] += r.ctc;
                sums[2] += r.att;
                sums[3] += r.lang;
                let g = Gradients::new(&params, r.grads);
                match &mut acc {
                    Some(a) => a.accumulate(&g),
                    None => acc = Some(g),
                }
            }
            let mut grads = acc.expect("batches are non-empty");
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut params, &grads);
            if config.precision == Precision::Single {
                round_to_single(&mut params);
            }
            if params.entries().iter().any(|e| !e.value.is_finite()) {
                return Err(diverged(Error::NonFinite { op: "adam" }));
            }
        }
        let n = train_set.len() as f64;
        let (val_token_acc, val_lang_acc) = validate(&model, &params, val_set, exec)?;
        let entry = EpochLog {
            epoch,
            train_loss: sums[0] / n,
            ctc: sums[1] / n,
            att: sums[2] / n,
            lang: sums[3] / n,
            val_token_acc,
            val_lang_acc,
        };
        let checkpoint = Checkpoint {
            meta: CheckpointMeta {
                epoch,
                val_token_acc,
                val_lang_acc,
                config_hash: hash.clone(),
                model: model.config.clone(),
                averaged_epochs: Vec::new(),
            },
            params: params.clone(),
        };
        on_epoch(&entry, &checkpoint)?;
        log.push(entry);
        checkpoints.push(checkpoint);
    }
    Ok(TrainOutcome { model, checkpoints, log })
}

fn compare_params(a: &ParamStore, b: &ParamStore) -> Ordering {
    for (x, y) in a.entries().iter().zip(b.entries()) {
        for (p, q) in x.value.data().iter().zip(y.value.data()) {
            match p.total_cmp(q) {
                Ordering::Equal => {}
                o => return o,
            }
        }
    }
    Ordering::Equal
}

/// Best first: higher validation token accuracy, then earlier epoch, then
/// parameter values, which makes the order independent of input order.
fn selection_order(a: &Checkpoint, b: &Checkpoint) -> Ordering {
    b.meta
        .val_token_acc
        .total_cmp(&a.meta.val_token_acc)
        .then(a.meta.epoch.cmp(&b.meta.epoch))
        .then_with(|| compare_params(&a.params, &b.params))
}

/// Element-wise mean of the `k` best checkpoints.
pub fn average_checkpoints(checkpoints: &[Checkpoint], k: usize) -> Result<Checkpoint> {
    if k == 0 || checkpoints.len() < k {
        return Err(Error::NotEnoughCheckpoints { needed: k.max(1), got: checkpoints.len() });
    }
    let reference = &checkpoints[0].params;
    for c in &checkpoints[1..] {
        if c.params.len() != reference.len() {
            return Err(Error::CheckpointMismatch {
                name: "<all>".into(),
                reason: format!("{} tensors versus {}", c.params.len(), reference.len()),
            });
        }
        for (want, got) in reference.entries().iter().zip(c.params.entries()) {
            if want.name != got.name {
                return Err(Error::CheckpointMismatch {
                    name: got.name.clone(),
                    reason: format!("expected tensor {} at this position", want.name),
                });
            }
            if want.value.shape() != got.value.shape() {
                return Err(Error::CheckpointMismatch {
                    name: got.name.clone(),
                    reason: format!("shape {:?} versus {:?}", got.value.shape(), want.value.shape()),
                });
            }
        }
    }
    let mut ranked: Vec<&Checkpoint> = checkpoints.iter().collect();
    ranked.sort_by(|a, b| selection_order(a, b));
    ranked.truncate(k);

    // Incremental mean: identical inputs leave the running value untouched.
    let mut params = ranked[0].params.clone();
    for (i, c) in ranked.iter().enumerate().skip(1) {
        let w = 1.0 / (i + 1) as f64;
        for id in c.params.ids().collect::<Vec<_>>() {
            let src = c.params.get(id).data();
            for (m, &x) in params.get_mut(id).data_mut().iter_mut().zip(src) {
                *m += (x - *m) * w;
            }
        }
    }
    let best = &ranked[0].meta;
    let mean = |f: &dyn Fn(&CheckpointMeta) -> f64| ranked.iter().map(|c| f(&c.meta)).sum::<f64>() / k as f64;
    let lang = if ranked.iter().all(|c| c.meta.val_lang_acc.is_some()) {
        Some(mean(&|m| m.val_lang_acc.unwrap_or(0.0)))
    } else {
        None
    };
    let mut epochs: Vec<usize> = ranked.iter().map(|c| c.meta.epoch).collect();
    epochs.sort_unstable();
    Ok(Checkpoint {
        meta: CheckpointMeta {
            epoch: epochs[epochs.len() - 1],
            val_token_acc: mean(&|m| m.val_token_acc),
            val_lang_acc: lang,
            config_hash: best.config_hash.clone(),
            model: best.model.clone(),
            averaged_epochs: epochs,
        },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::encoder::EncoderConfig;
    use crate::exec::Sequential;
    use crate::seq2seq::DecoderConfig;

    #[test]
    fn mask_sampling_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            assert_eq!(sample_lid_mask(2, 5, 0.0, &mut rng), LidMask::one_hot(2, 5));
            assert_eq!(sample_lid_mask(4, 5, 1.0, &mut rng), LidMask::all_hot(5));
        }
    }

    #[test]
    fn mask_sampling_keeps_ground_truth_and_mean_popcount() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [0.0, 0.25, 0.5, 1.0] {
            for i in 0..1_000_000usize {
                let gt = i % 7;
                assert!(sample_lid_mask(gt, 7, p, &mut rng).is_active(gt));
            }
        }
        let n = 100_000;
        let total: usize = (0..n).map(|i| sample_lid_mask(i % 7, 7, 0.5, &mut rng).popcount()).sum();
        let mean = total as f64 / n as f64;
        // popcount − 1 ~ Binomial(6, 0.5): variance 1.5
        let sigma = libm::sqrt(1.5 / n as f64);
        assert!((mean - 4.0).abs() < 3.0 * sigma, "mean popcount {mean}");
    }

    fn checkpoint(epoch: usize, acc: f64, value: f64) -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::filled(2, 2, value), true).unwrap();
        params.insert("b", Tensor::filled(1, 3, -value), true).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                epoch,
                val_token_acc: acc,
                val_lang_acc: Some(acc),
                config_hash: "h".into(),
                model: ModelConfig::for_corpus(&CorpusConfig::default(), RoutingVariant::SummaryVector),
                averaged_epochs: Vec::new(),
            },
            params,
        }
    }

    #[test]
    fn averaging_examples() {
        let avg = average_checkpoints(&[checkpoint(1, 50.0, 0.0), checkpoint(2, 50.0, 2.0)], 2).unwrap();
        assert_eq!(avg.params.by_name("a").unwrap().data(), &[1.0; 4]);
        assert_eq!(avg.meta.averaged_epochs, [1, 2]);

        let x = 0.1 + 0.2;
        let same: Vec<Checkpoint> = (1..=3).map(|e| checkpoint(e, 80.0, x)).collect();
        let avg = average_checkpoints(&same, 3).unwrap();
        assert_eq!(avg.params, same[0].params);

        let picked =
            average_checkpoints(&[checkpoint(1, 10.0, 5.0), checkpoint(2, 90.0, 1.0), checkpoint(3, 90.0, 3.0)], 2)
                .unwrap();
        assert_eq!(picked.params.by_name("a").unwrap().data(), &[2.0; 4]);
        let tie = average_checkpoints(&[checkpoint(3, 90.0, 3.0), checkpoint(2, 90.0, 1.0)], 1).unwrap();
        assert_eq!(tie.meta.averaged_epochs, [2]);
    }

    #[test]
    fn averaging_rejects_mismatch_by_name() {
        let mut bad = checkpoint(2, 1.0, 1.0);
        bad.params.set(bad.params.id("b").unwrap(), Tensor::zeros(1, 3)).unwrap();
        let mut other = ParamStore::new();
        other.insert("a", Tensor::zeros(2, 2), true).unwrap();
        other.insert("b", Tensor::zeros(3, 1), true).unwrap();
        bad.params = other;
        match average_checkpoints(&[checkpoint(1, 1.0, 0.0), bad], 2) {
            Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            average_checkpoints(&[checkpoint(1, 1.0, 0.0)], 2),
            Err(Error::NotEnoughCheckpoints { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn averaging_is_permutation_invariant() {
        let cs: Vec<Checkpoint> = [(1, 70.0, 0.3), (2, 75.0, 0.7), (3, 75.0, 1.9), (4, 60.0, -2.0), (5, 80.0, 0.11)]
            .iter()
            .map(|&(e, a, v)| checkpoint(e, a, v))
            .collect();
        let base = average_checkpoints(&cs, 3).unwrap();
        let perms = [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 2, 3, 4, 0]];
        for p in perms {
            let shuffled: Vec<Checkpoint> = p.iter().map(|&i| cs[i].clone()).collect();
            assert_eq!(average_checkpoints(&shuffled, 3).unwrap(), base);
        }
    }

    fn tiny_setup(variant: RoutingVariant) -> (Vec<Utterance>, Vec<Utterance>, ModelConfig) {
        let corpus_cfg =
            CorpusConfig { train_per_language: 3, val_per_language: 1, test_per_language: 1, ..Default::default() };
        let corpus = generate_corpus(&corpus_cfg).unwrap();
        let mut m = ModelConfig::for_corpus(&corpus_cfg, variant);
        m.encoder = EncoderConfig { num_layers: 2, d_model: 8, ffn_dim: 16, adapter_layers: vec![1, 2], ..m.encoder };
        m.decoder = DecoderConfig { num_layers: 1, d_model: 8, ffn_dim: 16, ..m.decoder };
        (corpus.train, corpus.val, m)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (tr, va, m) = tiny_setup(RoutingVariant::SummaryVector);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, k_average: 1, batch_size: 4, ..Default::default() };
        let (_, init) = Model::init(m.clone(), cfg.seed).unwrap();
        let out = train(&tr, &va, m, &cfg, &Sequential, |_, _| Ok(())).unwrap();
        assert_eq!(out.checkpoints[0].params, init);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let (tr, va, m) = tiny_setup(RoutingVariant::Framewise);
        let cfg = TrainConfig {
            epochs: 2,
            k_average: 2,
            batch_size: 4,
            variant: RoutingVariant::Framewise,
            ..Default::default()
        };
        let mut seen = 0;
        let a = train(&tr, &va, m.clone(), &cfg, &Sequential, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        let b = train(&tr, &va, m, &cfg, &Sequential, |_, _| Ok(())).unwrap();
        assert_eq!(seen, 2);
        assert_eq!(a.log[0].train_loss.to_bits(), b.log[0].train_loss.to_bits());
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_ne!(a.checkpoints[0].params, a.checkpoints[1].params);
        assert!(a.log.iter().all(|l| l.val_lang_acc.is_some() && l.lang > 0.0));
    }

    #[test]
    fn single_precision_rounds_parameters() {
        let (tr, va, m) = tiny_setup(RoutingVariant::Uniform);
        let cfg = TrainConfig {
            epochs: 1,
            k_average: 1,
            variant: RoutingVariant::Uniform,
            precision: Precision::Single,
            ..Default::default()
        };
        let out = train(&tr, &va, m, &cfg, &Sequential, |_, _| Ok(())).unwrap();
        for e in out.checkpoints[0].params.entries() {
            assert!(e.value.data().iter().all(|&v| v as f32 as f64 == v), "{}", e.name);
        }
        assert!(out.log[0].val_lang_acc.is_none());
    }

    #[test]
    fn divergence_names_epoch_and_step() {
        let (tr, va, m) = tiny_setup(RoutingVariant::SummaryVector);
        let cfg = TrainConfig { learning_rate: 1e300, epochs: 2, k_average: 1, batch_size: 2, ..Default::default() };
        match train(&tr, &va, m, &cfg, &Sequential, |_, _| Ok(())) {
            Err(Error::Diverged { epoch, step, .. }) => assert!(epoch >= 1 && step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { p_insert: 1.5, ..Default::default() },
            TrainConfig { k_average: 60, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
