//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use csvmasr_core::corpus::{generate_corpus, Corpus, CorpusConfig, Split, Utterance};
use csvmasr_core::encoder::EncoderConfig;
use csvmasr_core::eval::{
    layer_classification_accuracy, prompt_sweep, two_hot_matrix, wer_report, DecodeMode, DecodeOptions, Prompt,
};
use csvmasr_core::losses::LossConfig;
use csvmasr_core::model::ModelConfig;
use csvmasr_core::routing::RoutingVariant;
use csvmasr_core::seq2seq::DecoderConfig;
use csvmasr_core::trainer::{average_checkpoints, train, Precision, TrainConfig};
use serde_json::json;

use crate::checkpoint_io::{load_checkpoint, save_checkpoint};
use crate::corpus_io::{load_corpus, save_corpus};
use crate::error::{CliError, CliResult};
use crate::gradcheck::{run_gradcheck, GradcheckSettings};
use crate::manifest::{unix_now, RunManifest};
use crate::report::{self, write_csv};
use crate::threads::Threaded;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "csvmasr", version, about = "Synthetic multilingual ASR with prompt-routed language adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus file.
    GenData(GenDataArgs),
    /// Train a model and write per-epoch and averaged checkpoints.
    Train(TrainArgs),
    /// Word error rates and per-layer language accuracy for a checkpoint.
    Eval(EvalArgs),
    /// Error rate as a function of the number of extra prompted languages.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients on a micro model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct ThreadArgs {
    /// Worker threads; results do not depend on this value.
    #[arg(long, env = "CSVMASR_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output corpus file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub languages: usize,
    /// Content tokens per language.
    #[arg(long, default_value_t = 10)]
    pub tokens: usize,
    #[arg(long, default_value_t = 16)]
    pub d_feat: usize,
    #[arg(long, default_value_t = 3)]
    pub frames_per_token: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Shortest transcript, inclusive.
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    /// Longest transcript, inclusive.
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    /// Training utterances per language.
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    /// Validation utterances per language.
    #[arg(long, default_value_t = 40)]
    pub val: usize,
    /// Test utterances per language.
    #[arg(long, default_value_t = 40)]
    pub test: usize,
}

impl GenDataArgs {
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            num_languages: self.languages,
            tokens_per_language: self.tokens,
            d_feat: self.d_feat,
            frames_per_token: self.frames_per_token,
            noise_sigma: self.noise,
            transcript_len_range: [self.min_len, self.max_len],
            train_per_language: self.train,
            val_per_language: self.val,
            test_per_language: self.test,
            seed: self.seed,
        }
    }
}

fn parse_variant(s: &str) -> Result<RoutingVariant, String> {
    RoutingVariant::parse(s)
        .ok_or_else(|| format!("unknown variant `{s}`; expected baseline, lidconcat, uniform, framewise or csv"))
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().ok().and_then(Precision::from_bits).ok_or_else(|| format!("precision must be 32 or 64, got `{s}`"))
}

fn parse_prompt(s: &str) -> Result<Prompt, String> {
    Prompt::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<DecodeMode, String> {
    DecodeMode::parse(s).ok_or_else(|| format!("unknown decode mode `{s}`; expected AR or NAR"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for checkpoints, the log and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// baseline, lidconcat, uniform, framewise or csv.
    #[arg(long, default_value = "csv", value_parser = parse_variant)]
    pub variant: RoutingVariant,
    /// 1-based encoder layers that carry language adapters.
    #[arg(long, default_value = "2,4", value_delimiter = ',')]
    pub adapters: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ffn_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub conv_kernel: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_layers: usize,
    #[arg(long, default_value_t = 8)]
    pub adapter_dim: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long = "lr", default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Number of best epochs averaged into avg.ckpt.
    #[arg(long, default_value_t = 3)]
    pub k_average: usize,
    /// Probability of adding each wrong language to a training prompt.
    #[arg(long, default_value_t = 0.5)]
    pub p_insert: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameter precision in bits: 32 or 64.
    #[arg(long, default_value = "64", value_parser = parse_precision)]
    pub precision: Precision,
    /// CTC weight in the hybrid loss.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Language-classification loss weight.
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    #[command(flatten)]
    pub threads: ThreadArgs,
}

impl TrainArgs {
    pub fn configs(&self, corpus: &CorpusConfig) -> (ModelConfig, TrainConfig) {
        let mut model = ModelConfig::for_corpus(corpus, self.variant);
        model.encoder = EncoderConfig {
            num_layers: self.layers,
            d_model: self.d_model,
            num_heads: self.heads,
            ffn_dim: self.ffn_dim,
            conv_kernel: self.conv_kernel,
            adapter_layers: self.adapters.clone(),
            ..model.encoder
        };
        model.decoder = DecoderConfig {
            num_layers: self.decoder_layers,
            d_model: self.d_model,
            num_heads: self.heads,
            ffn_dim: self.ffn_dim,
            ..model.decoder
        };
        model.adapter_dim = self.adapter_dim;
        let train = TrainConfig {
            p_insert: self.p_insert,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            k_average: self.k_average,
            seed: self.seed,
            variant: self.variant,
            precision: self.precision,
            loss: LossConfig { lambda: self.lambda, beta: self.beta },
        };
        (model, train)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// 1hot, allhot or mask=<bits>; repeatable.
    #[arg(long, default_values = ["1hot", "allhot"], value_parser = parse_prompt)]
    pub prompt: Vec<Prompt>,
    /// AR or NAR; repeatable.
    #[arg(long, default_values = ["AR", "NAR"], value_parser = parse_mode)]
    pub mode: Vec<DecodeMode>,
    /// Prompt used for per-layer language accuracy.
    #[arg(long, default_value = "allhot", value_parser = parse_prompt)]
    pub lca_prompt: Prompt,
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    #[command(flatten)]
    pub threads: ThreadArgs,
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| format!("unknown split `{s}`; expected train, val or test"))
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Ground-truth language to sweep; repeatable. Every language when absent.
    #[arg(long)]
    pub language: Vec<usize>,
    #[arg(long, default_value = "NAR", value_parser = parse_mode)]
    pub mode: DecodeMode,
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
    /// Also write two_hot.csv with every ground-truth/added-language pair.
    #[arg(long)]
    pub two_hot: bool,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    #[command(flatten)]
    pub threads: ThreadArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    #[arg(long, default_value_t = 1e-3)]
    pub floor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first) and runs the subcommand, returning
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Manifest path for a single-file output: `<file>.manifest.json` beside it.
pub fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let started = unix_now();
    let config = a.corpus_config();
    let corpus = generate_corpus(&config)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_corpus(&corpus, &a.out)?;
    RunManifest::new("gen-data", json!({ "corpus": config }), started).write(&sidecar_manifest(&a.out))?;
    println!(
        "wrote {} ({} train, {} val, {} test utterances)",
        a.out.display(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    Ok(())
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let started = unix_now();
    let corpus = load_corpus(&a.corpus)?;
    let (model_config, train_config) = a.configs(&corpus.config);
    model_config.validate()?;
    train_config.validate()?;
    create_dir(&a.out)?;
    let exec = Threaded::new(a.threads.threads.into());

    let log_path = a.out.join("train_log.csv");
    let mut log_rows = Vec::new();
    let mut io_error = None;
    let outcome = train(&corpus.train, &corpus.val, model_config.clone(), &train_config, &exec, |entry, ckpt| {
        let row = report::TrainLogRow::from(entry);
        let lang = row.val_lang_acc.map_or_else(|| "-".into(), |v| format!("{v:.2}"));
        eprintln!(
            "epoch {:>3}  loss {:.4}  ctc {:.4}  att {:.4}  lang {:.4}  val acc {:.2}  lang acc {lang}",
            row.epoch, row.train_loss, row.ctc, row.att, row.lang, row.val_token_acc
        );
        log_rows.push(row);
        let written = save_checkpoint(ckpt, &a.out.join(checkpoint_name(entry.epoch)))
            .and_then(|()| write_csv(&log_path, &report::TRAIN_LOG_HEADER, &log_rows));
        written.map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            csvmasr_core::Error::Config(msg)
        })
    });
    let outcome = match (outcome, io_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    let avg = average_checkpoints(&outcome.checkpoints, train_config.k_average)?;
    save_checkpoint(&avg, &a.out.join("avg.ckpt"))?;
    eprintln!("averaged epochs {:?}: val acc {:.2}", avg.meta.averaged_epochs, avg.meta.val_token_acc);
    let mut manifest = RunManifest::new(
        "train",
        json!({
            "corpus": corpus.config,
            "model": model_config,
            "train": train_config,
            "config_hash": avg.meta.config_hash,
            "threads": a.threads.threads,
        }),
        started,
    );
    manifest.add_input(&a.corpus)?;
    manifest.write(&a.out.join(MANIFEST))
}

fn eval_split<'a>(corpus: &'a Corpus, split: Split, path: &Path) -> CliResult<&'a [Utterance]> {
    let utts = corpus.split(split);
    if utts.is_empty() {
        return Err(CliError::format(path, format!("split {} is empty", split.as_str())));
    }
    Ok(utts)
}

fn check_compatible(corpus: &Corpus, model: &ModelConfig, path: &Path) -> CliResult<()> {
    if corpus.vocabulary() != model.vocabulary || corpus.config.d_feat != model.d_feat {
        return Err(CliError::format(path, "corpus vocabulary or feature width differs from the checkpoint's model"));
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let started = unix_now();
    let (model, ckpt) = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    check_compatible(&corpus, &model.config, &a.corpus)?;
    let utts = eval_split(&corpus, a.split, &a.corpus)?;
    let exec = Threaded::new(a.threads.threads.into());
    create_dir(&a.out)?;

    let mut wer_rows = Vec::new();
    for prompt in &a.prompt {
        for &mode in &a.mode {
            let opts = DecodeOptions { mode, beam_width: a.beam_width };
            let r = wer_report(&model, &ckpt.params, utts, prompt, opts, &exec)?;
            println!(
                "{:<10} {:<8} {:<4} WER {:.2}",
                model.config.variant.name(),
                prompt.descriptor(),
                mode.name(),
                r.aggregate
            );
            wer_rows.extend(report::wer_rows(&r));
        }
    }
    write_csv(&a.out.join("wer_report.csv"), &report::WER_HEADER, &wer_rows)?;

    let lca_rows = if model.config.variant.uses_classifier() {
        let layers = layer_classification_accuracy(&model, &ckpt.params, utts, &a.lca_prompt, &exec)?;
        for l in &layers {
            println!("layer {} language accuracy {:.2}", l.layer, l.overall);
        }
        report::lca_rows(model.config.variant, &layers)
    } else {
        Vec::new()
    };
    write_csv(&a.out.join("lca_report.csv"), &report::LCA_HEADER, &lca_rows)?;

    let prompts: Vec<String> = a.prompt.iter().map(Prompt::descriptor).collect();
    let modes: Vec<&str> = a.mode.iter().map(|m| m.name()).collect();
    let mut manifest = RunManifest::new(
        "eval",
        json!({
            "model": model.config,
            "checkpoint": ckpt.meta,
            "split": a.split,
            "prompts": prompts,
            "modes": modes,
            "lca_prompt": a.lca_prompt.descriptor(),
            "beam_width": a.beam_width,
            "threads": a.threads.threads,
        }),
        started,
    );
    manifest.add_input(&a.ckpt)?;
    manifest.add_input(&a.corpus)?;
    manifest.write(&a.out.join(MANIFEST))
}

fn sweep_cmd(a: &SweepArgs) -> CliResult<()> {
    let started = unix_now();
    let (model, ckpt) = load_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    check_compatible(&corpus, &model.config, &a.corpus)?;
    let utts = eval_split(&corpus, a.split, &a.corpus)?;
    let exec = Threaded::new(a.threads.threads.into());
    let opts = DecodeOptions { mode: a.mode, beam_width: a.beam_width };
    let langs = model.config.num_languages();
    let languages: Vec<usize> = if a.language.is_empty() { (0..langs).collect() } else { a.language.clone() };
    if let Some(&bad) = languages.iter().find(|&&l| l >= langs) {
        return Err(csvmasr_core::Error::Config(format!("language {bad} out of range for {langs} languages")).into());
    }
    create_dir(&a.out)?;

    let mut sweeps = Vec::new();
    for &language in &languages {
        let subset: Vec<Utterance> = utts.iter().filter(|u| u.language_id == language).cloned().collect();
        let s = prompt_sweep(&model, &ckpt.params, &subset, language, opts, &exec)?;
        for r in &s.rows {
            println!("language {language} k {} masks {:>3} WER {:.2} ± {:.2}", r.k, r.num_masks, r.mean_wer, r.ci95);
        }
        sweeps.push(s);
    }
    let rows: Vec<_> = sweeps.iter().flat_map(report::sweep_rows).collect();
    write_csv(&a.out.join("sweep.csv"), &report::SWEEP_HEADER, &rows)?;
    let svg_path = a.out.join("sweep.svg");
    fs::write(&svg_path, report::sweep_svg(&sweeps)).map_err(|e| CliError::io(&svg_path, e))?;
    if a.two_hot {
        let entries = two_hot_matrix(&model, &ckpt.params, utts, opts, &exec)?;
        let rows = report::two_hot_rows(model.config.variant, a.mode.name(), &entries);
        write_csv(&a.out.join("two_hot.csv"), &report::TWO_HOT_HEADER, &rows)?;
    }

    let mut manifest = RunManifest::new(
        "sweep",
        json!({
            "model": model.config,
            "checkpoint": ckpt.meta,
            "split": a.split,
            "languages": languages,
            "mode": a.mode,
            "beam_width": a.beam_width,
            "two_hot": a.two_hot,
            "threads": a.threads.threads,
        }),
        started,
    );
    manifest.add_input(&a.ckpt)?;
    manifest.add_input(&a.corpus)?;
    manifest.write(&a.out.join(MANIFEST))
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CliResult<()> {
    let settings = GradcheckSettings { epsilon: a.epsilon, tolerance: a.tolerance, floor: a.floor, seed: a.seed };
    let results = run_gradcheck(&settings)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<10} {:>6} params  max rel err {:.3e}  max abs err {:.3e}  worst {}  {}",
            r.variant.name(),
            r.num_params,
            r.comparison.max_rel_error,
            r.comparison.max_abs_error,
            r.comparison.worst_param.as_deref().unwrap_or("-"),
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.variant.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
