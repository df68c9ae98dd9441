//! Deterministic synthetic multilingual corpus.
//!
//! Each language owns a disjoint block of token ids, a prototype feature
//! pattern per token (`frames_per_token × d_feat`), and an additive channel
//! bias shared by all its utterances. Features for a transcript are the
//! concatenated prototypes plus the bias plus Gaussian noise, so language
//! identity is recoverable both acoustically and lexically.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_languages: usize,
    pub tokens_per_language: usize,
    pub d_feat: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    /// Inclusive bounds on transcript length.
    pub transcript_len_range: [usize; 2],
    pub train_per_language: usize,
    pub val_per_language: usize,
    pub test_per_language: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_languages: 3,
            tokens_per_language: 10,
            d_feat: 16,
            frames_per_token: 3,
            noise_sigma: 0.1,
            transcript_len_range: [3, 10],
            train_per_language: 200,
            val_per_language: 40,
            test_per_language: 40,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_languages < 2 {
            return fail("num_languages must be at least 2");
        }
        if self.tokens_per_language == 0 || self.d_feat == 0 || self.frames_per_token == 0 {
            return fail("tokens_per_language, d_feat and frames_per_token must be positive");
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return fail("noise_sigma must be a non-negative real");
        }
        let [lo, hi] = self.transcript_len_range;
        if lo == 0 || lo > hi {
            return fail("transcript_len_range must be a nonempty range of positive lengths");
        }
        if self.train_per_language == 0 || self.val_per_language == 0 || self.test_per_language == 0 {
            return fail("per-split utterance counts must be positive");
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary { num_languages: self.num_languages, tokens_per_language: self.tokens_per_language }
    }
}

/// Global token ids: blank is 0, language `l` owns
/// `1 + l·V .. 1 + (l+1)·V`, then sos and eos.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_languages: usize,
    pub tokens_per_language: usize,
}

impl Vocabulary {
    pub const BLANK: usize = 0;

    pub fn blank(&self) -> usize {
        Self::BLANK
    }

    pub fn num_content(&self) -> usize {
        self.num_languages * self.tokens_per_language
    }

    pub fn sos(&self) -> usize {
        self.num_content() + 1
    }

    pub fn eos(&self) -> usize {
        self.num_content() + 2
    }

    pub fn size(&self) -> usize {
        self.num_content() + 3
    }

    pub fn content_token(&self, language: usize, index: usize) -> usize {
        assert!(language < self.num_languages && index < self.tokens_per_language);
        1 + language * self.tokens_per_language + index
    }

    pub fn token_range(&self, language: usize) -> core::ops::Range<usize> {
        let start = 1 + language * self.tokens_per_language;
        start..start + self.tokens_per_language
    }

    pub fn language_of(&self, token: usize) -> Option<usize> {
        (1..=self.num_content()).contains(&token).then(|| (token - 1) / self.tokens_per_language)
    }

    pub fn is_content(&self, token: usize) -> bool {
        self.language_of(token).is_some()
    }

    /// Human-readable symbol, e.g. `L1_T04`.
    pub fn symbol(&self, token: usize) -> String {
        match token {
            0 => "<blank>".into(),
            t if t == self.sos() => "<sos>".into(),
            t if t == self.eos() => "<eos>".into(),
            t => match self.language_of(t) {
                Some(l) => format!("L{}_T{:02}", l, (t - 1) % self.tokens_per_language),
                None => format!("<unk:{t}>"),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub language_id: usize,
    /// First global id of this language's token block.
    pub token_start: usize,
    pub num_tokens: usize,
    pub channel_bias: Vec<f64>,
    /// One `frames_per_token × d_feat` pattern per token.
    pub token_prototypes: Vec<Tensor>,
}

impl LanguageSpec {
    pub fn owns(&self, token: usize) -> bool {
        (self.token_start..self.token_start + self.num_tokens).contains(&token)
    }

    pub fn frames_per_token(&self) -> usize {
        self.token_prototypes[0].rows()
    }

    pub fn d_feat(&self) -> usize {
        self.channel_bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub language_id: usize,
    pub transcript: Vec<usize>,
    pub features: Tensor,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub languages: Vec<LanguageSpec>,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn vocabulary(&self) -> Vocabulary {
        self.config.vocabulary()
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

/// Prototypes and biases for every language, drawn from stream 0 of the
/// configured seed (prototype std 1, bias std 1).
pub fn build_language_specs(config: &CorpusConfig) -> Result<Vec<LanguageSpec>> {
    config.validate()?;
    let vocab = config.vocabulary();
    let mut rng = stream(config.seed, 0);
    let specs = (0..config.num_languages)
        .map(|language_id| {
            let channel_bias = (0..config.d_feat).map(|_| gaussian(&mut rng, 1.0)).collect();
            let token_prototypes = (0..config.tokens_per_language)
                .map(|_| {
                    let data = (0..config.frames_per_token * config.d_feat).map(|_| gaussian(&mut rng, 1.0)).collect();
                    Tensor::from_parts(config.frames_per_token, config.d_feat, data)
                })
                .collect();
            LanguageSpec {
                language_id,
                token_start: vocab.token_range(language_id).start,
                num_tokens: config.tokens_per_language,
                channel_bias,
                token_prototypes,
            }
        })
        .collect();
    Ok(specs)
}

/// Features for `transcript` spoken in `spec`'s language.
pub fn synthesize_utterance<R: Rng + ?Sized>(
    spec: &LanguageSpec,
    transcript: &[usize],
    noise_sigma: f64,
    utterance_id: impl Into<String>,
    rng: &mut R,
) -> Result<Utterance> {
    if transcript.is_empty() {
        return Err(Error::EmptyUtterance);
    }
    if let Some(&token) = transcript.iter().find(|&&t| !spec.owns(t)) {
        return Err(Error::ForeignToken { token, language: spec.language_id });
    }
    let k = spec.frames_per_token();
    let d = spec.d_feat();
    let mut data = Vec::with_capacity(transcript.len() * k * d);
    for &token in transcript {
        let proto = &spec.token_prototypes[token - spec.token_start];
        for row in proto.iter_rows() {
            for (c, &p) in row.iter().enumerate() {
                let noise = if noise_sigma > 0.0 { gaussian(rng, noise_sigma) } else { 0.0 };
                data.push(p + spec.channel_bias[c] + noise);
            }
        }
    }
    Ok(Utterance {
        utterance_id: utterance_id.into(),
        language_id: spec.language_id,
        transcript: transcript.to_vec(),
        features: Tensor::from_parts(transcript.len() * k, d, data),
    })
}

fn split_count(config: &CorpusConfig, split: Split) -> usize {
    match split {
        Split::Train => config.train_per_language,
        Split::Val => config.val_per_language,
        Split::Test => config.test_per_language,
    }
}

/// Global position of an utterance; its RNG stream is this index plus one.
fn utterance_index(config: &CorpusConfig, split: Split, language: usize, i: usize) -> u64 {
    let mut offset = 0;
    for s in Split::ALL {
        if s == split {
            break;
        }
        offset += split_count(config, s) * config.num_languages;
    }
    (offset + language * split_count(config, split) + i) as u64
}

/// One utterance, generated from its own RNG stream so that any subset can
/// be produced independently and in any order.
pub fn generate_utterance(
    config: &CorpusConfig,
    specs: &[LanguageSpec],
    split: Split,
    language: usize,
    i: usize,
) -> Result<Utterance> {
    let spec = &specs[language];
    let mut rng = stream(config.seed, 1 + utterance_index(config, split, language, i));
    let [lo, hi] = config.transcript_len_range;
    let len = rng.random_range(lo..=hi);
    let transcript: Vec<usize> = (0..len).map(|_| spec.token_start + rng.random_range(0..spec.num_tokens)).collect();
    let id = format!("{}-L{}-{:05}", split.as_str(), language, i);
    synthesize_utterance(spec, &transcript, config.noise_sigma, id, &mut rng)
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let languages = build_language_specs(config)?;
    let mut splits: [Vec<Utterance>; 3] = Default::default();
    for (slot, split) in splits.iter_mut().zip(Split::ALL) {
        let n = split_count(config, split);
        for language in 0..config.num_languages {
            for i in 0..n {
                slot.push(generate_utterance(config, &languages, split, language, i)?);
            }
        }
    }
    let [train, val, test] = splits;
    Ok(Corpus { config: config.clone(), languages, train, val, test })
}
