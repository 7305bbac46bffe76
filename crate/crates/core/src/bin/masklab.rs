//! Command-line surface for the masking-policy laboratory: corpus
//! generation, policy training, the two training stages, closed-book
//! evaluation, mask analytics, and the one-manifest experiment driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use masklab::analysis::{
    mask_frequency, pos_csv_name, pos_mask_distribution, read_mask_jsonl, sample_corpus,
    write_mask_jsonl, write_pos_csv, write_zipf_csv, zipf_csv_name, zipf_table, MaskSample,
};
use masklab::corpus::{freq_rank, generate_corpus, CorpusConfig};
use masklab::diffcore::{ParamStore, RngStream};
use masklab::experiment::{
    build_policy, load_corpus_dir, run_experiment, save_corpus_dir, ExperimentManifest, LmSize,
    PolicySpec, SUMMARY_HEADER,
};
use masklab::lmodel::{init_lm_params, LmConfig};
use masklab::policynets::{MetaPolicyConfig, SupPolicyConfig};
use masklab::trainers::{
    evaluate, finetune, intermediate_pretrain, run_meta_training, top1_span_accuracy,
    train_supervised_policy, MetaConfig, StageConfig, SupTrainConfig,
};

#[derive(Parser)]
#[command(
    name = "masklab",
    version,
    about = "Masking-policy laboratory for denoising seq2seq pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

/// Every subcommand reads one JSON config and writes into one directory.
#[derive(Args)]
struct CommonArgs {
    /// Path to this subcommand's JSON config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's base seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus directory (corpus.jsonl, triplets.jsonl, vocab.json, entity-split.json)
    GenCorpus(CommonArgs),
    /// Stage 1: intermediate pre-training of the LM with a masking policy
    Pretrain(CommonArgs),
    /// Train the supervised span-labeling policy on QA triplets
    TrainSupPolicy(CommonArgs),
    /// Train the meta-learned masking policy (bilevel loop)
    TrainMetaPolicy(CommonArgs),
    /// Apply a policy to a corpus sample and dump the mask decisions as JSONL
    ApplyPolicy(CommonArgs),
    /// Stage 2: fine-tune a (pre-trained) LM on the QA train split
    Finetune(CommonArgs),
    /// Evaluate fine-tuned checkpoints closed-book and report exact match
    Eval(CommonArgs),
    /// POS-tag distribution of a mask dump, as CSV
    AnalyzePos(CommonArgs),
    /// Mask-frequency vs. corpus-frequency table of a mask dump, as CSV
    AnalyzeZipf(CommonArgs),
    /// Run a full experiment manifest (corpus → stages → evaluation)
    RunExperiment(CommonArgs),
}

enum CliError {
    /// Contract violations: bad flags, bad configs, failed invariants.
    Contract(String),
    /// Filesystem problems: missing files, unwritable directories.
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Contract(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Contract(m) | CliError::Io(m) => m,
        }
    }
}

/// An error counts as I/O when a `std::io::Error` sits anywhere in its chain.
fn classify<E: std::error::Error + 'static>(e: E) -> CliError {
    let mut cursor: Option<&(dyn std::error::Error + 'static)> = Some(&e);
    while let Some(c) = cursor {
        if c.is::<std::io::Error>() {
            return CliError::Io(e.to_string());
        }
        cursor = c.source();
    }
    CliError::Contract(e.to_string())
}

fn contract(message: impl Into<String>) -> CliError {
    CliError::Contract(message.into())
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(classify)?;
    serde_json::from_str(&text)
        .map_err(|e| contract(format!("{}: {e}", path.display())))
}

fn require_config<T: for<'de> Deserialize<'de>>(args: &CommonArgs) -> Result<T, CliError> {
    match &args.config {
        Some(path) => read_config(path),
        None => Err(contract("this subcommand requires --config <path>")),
    }
}

fn require_out(args: &CommonArgs) -> Result<PathBuf, CliError> {
    let out = args
        .out
        .clone()
        .ok_or_else(|| contract("this subcommand requires --out <dir>"))?;
    std::fs::create_dir_all(&out).map_err(classify)?;
    Ok(out)
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| contract(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(classify)
}

// --- subcommand configs ----------------------------------------------------

#[derive(Deserialize)]
struct PretrainFile {
    corpus: PathBuf,
    policy: PolicySpec,
    #[serde(default)]
    lm: LmSize,
    #[serde(default)]
    stage1: StageConfig,
    /// Start from this LM checkpoint instead of a fresh initialization.
    #[serde(default)]
    lm_checkpoint: Option<PathBuf>,
}

#[derive(Deserialize)]
struct SupPolicyFile {
    corpus: PathBuf,
    #[serde(default)]
    config: SupPolicyConfig,
    #[serde(default)]
    train: SupTrainConfig,
}

#[derive(Deserialize)]
struct MetaPolicyFile {
    corpus: PathBuf,
    #[serde(default)]
    config: MetaPolicyConfig,
    #[serde(default)]
    train: MetaConfig,
    #[serde(default)]
    lm: LmSize,
}

#[derive(Deserialize)]
struct ApplyPolicyFile {
    corpus: PathBuf,
    policy: PolicySpec,
    /// Fraction of the corpus to sample for the dump.
    #[serde(default = "default_fraction")]
    fraction: f64,
}

fn default_fraction() -> f64 {
    0.01
}

#[derive(Deserialize)]
struct FinetuneFile {
    corpus: PathBuf,
    lm_checkpoint: PathBuf,
    #[serde(default)]
    stage2: StageConfig,
    /// Prefix for the produced checkpoint files.
    #[serde(default = "default_name")]
    name: String,
}

fn default_name() -> String {
    "model".to_string()
}

#[derive(Deserialize)]
struct ModelEntry {
    seed: u64,
    path: PathBuf,
}

#[derive(Deserialize)]
struct EvalFile {
    corpus: PathBuf,
    models: Vec<ModelEntry>,
    #[serde(default = "default_split")]
    split: String,
}

fn default_split() -> String {
    "test".to_string()
}

#[derive(Deserialize)]
struct AnalyzeFile {
    corpus: PathBuf,
    /// Mask dump produced by `apply-policy`.
    masks: PathBuf,
}

// --- subcommand bodies -----------------------------------------------------

fn cmd_gen_corpus(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: CorpusConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => CorpusConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = require_out(args)?;
    let corpus = generate_corpus(&cfg).map_err(classify)?.into();
    save_corpus_dir(&out, &corpus).map_err(classify)?;
    println!(
        "corpus: {} documents, {} triplets, vocab {} -> {}",
        corpus.documents.len(),
        corpus.triplets.len(),
        corpus.vocab.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: &CommonArgs) -> Result<(), CliError> {
    let file: PretrainFile = require_config(args)?;
    let out = require_out(args)?;
    let seed = args.seed.unwrap_or(0);
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let (train_triplets, _) = masklab::experiment::split_triplets(&corpus);
    let lm_cfg = LmConfig {
        vocab: corpus.vocab.len(),
        d_embed: file.lm.d_embed,
        hidden: file.lm.hidden,
    };
    let lm_init = match &file.lm_checkpoint {
        Some(path) => ParamStore::load(path).map_err(classify)?,
        None => init_lm_params(&lm_cfg, 0).map_err(classify)?,
    };
    let policy = build_policy(
        &file.policy,
        &train_triplets,
        &lm_init,
        corpus.vocab.len(),
        &out,
    )
    .map_err(classify)?
    .ok_or_else(|| contract("pretrain needs a masking policy; \"none\" has no Stage 1"))?;
    let (store, report) =
        intermediate_pretrain(&lm_init, &policy, &corpus.documents, &file.stage1, seed)
            .map_err(classify)?;
    let name = file.policy.name();
    store
        .save(&out.join(format!("{name}-pretrained.json")))
        .map_err(classify)?;
    save_json(&out.join(format!("{name}-stage1-report.json")), &report)?;
    println!(
        "pretrained {name}: {} updates, final loss {:.4}",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_train_sup_policy(args: &CommonArgs) -> Result<(), CliError> {
    let file: SupPolicyFile = require_config(args)?;
    let out = require_out(args)?;
    let mut train_cfg = file.train;
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let (train_triplets, _) = masklab::experiment::split_triplets(&corpus);
    let n_val = (train_triplets.len() / 10).max(1);
    let (train, val) = train_triplets.split_at(train_triplets.len() - n_val);
    let mut config = file.config;
    config.vocab = corpus.vocab.len();
    let (store, report) =
        train_supervised_policy(train, val, &config, &train_cfg).map_err(classify)?;
    store
        .save(&out.join("sup-policy.json"))
        .map_err(classify)?;
    save_json(&out.join("sup-train-report.json"), &report)?;
    let acc = top1_span_accuracy(&store, val, config.max_span_len).map_err(classify)?;
    println!(
        "supervised policy: best epoch {}, val loss {:.4}, top-1 {:.3}",
        report.best_epoch, report.val_losses[report.best_epoch], acc
    );
    Ok(())
}

fn cmd_train_meta_policy(args: &CommonArgs) -> Result<(), CliError> {
    let file: MetaPolicyFile = require_config(args)?;
    let out = require_out(args)?;
    let seed = args.seed.unwrap_or(0);
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let (train_triplets, _) = masklab::experiment::split_triplets(&corpus);
    let lm_cfg = LmConfig {
        vocab: corpus.vocab.len(),
        d_embed: file.lm.d_embed,
        hidden: file.lm.hidden,
    };
    let lm_init = init_lm_params(&lm_cfg, 0).map_err(classify)?;
    let mut config = file.config;
    config.vocab = corpus.vocab.len();
    let policy_init = masklab::policynets::init_meta_params(&config, seed).map_err(classify)?;
    let outcome = run_meta_training(&train_triplets, &lm_init, &policy_init, &file.train, seed)
        .map_err(classify)?;
    outcome
        .policy
        .save(&out.join("meta-policy.json"))
        .map_err(classify)?;
    outcome
        .lm
        .save(&out.join("meta-lm.json"))
        .map_err(classify)?;
    println!(
        "meta policy: {} outer steps, {} aborted",
        outcome.report.steps.len(),
        outcome.report.abort_count
    );
    Ok(())
}

fn cmd_apply_policy(args: &CommonArgs) -> Result<(), CliError> {
    let file: ApplyPolicyFile = require_config(args)?;
    let out = require_out(args)?;
    let seed = args.seed.unwrap_or(0);
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let (train_triplets, _) = masklab::experiment::split_triplets(&corpus);
    let lm_init = init_lm_params(
        &LmConfig {
            vocab: corpus.vocab.len(),
            ..LmConfig::default()
        },
        0,
    )
    .map_err(classify)?;
    let policy = build_policy(
        &file.policy,
        &train_triplets,
        &lm_init,
        corpus.vocab.len(),
        &out,
    )
    .map_err(classify)?
    .ok_or_else(|| contract("apply-policy needs a masking policy, not \"none\""))?;

    let mut stream = RngStream::new(seed, "apply");
    let sampled = sample_corpus(&corpus.documents, file.fraction, &mut stream);
    let mut decisions = Vec::with_capacity(sampled.len());
    for doc in &sampled {
        let mut doc_stream = stream.child(&format!("mask{}", doc.doc_id));
        let (d, _, _) = policy.mask_plan(doc, &mut doc_stream).map_err(classify)?;
        decisions.push((doc.doc_id, d));
    }
    let sample = MaskSample {
        policy: policy.name().to_string(),
        decisions,
    };
    let path = out.join(format!("{}-masks.jsonl", policy.name()));
    write_mask_jsonl(&path, &sample).map_err(classify)?;
    println!(
        "applied {} to {} documents -> {}",
        policy.name(),
        sampled.len(),
        path.display()
    );
    Ok(())
}

fn cmd_finetune(args: &CommonArgs) -> Result<(), CliError> {
    let file: FinetuneFile = require_config(args)?;
    let out = require_out(args)?;
    let seed = args.seed.unwrap_or(0);
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let (train_triplets, _) = masklab::experiment::split_triplets(&corpus);
    let lm = ParamStore::load(&file.lm_checkpoint).map_err(classify)?;
    let tuned = finetune(&lm, &train_triplets, &file.stage2, seed).map_err(classify)?;
    let path = out.join(format!("{}-seed{seed}-finetuned.json", file.name));
    tuned.save(&path).map_err(classify)?;
    println!("finetuned -> {}", path.display());
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<(), CliError> {
    let file: EvalFile = require_config(args)?;
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let (train_triplets, test_triplets) = masklab::experiment::split_triplets(&corpus);
    let qa = match file.split.as_str() {
        "test" => test_triplets,
        "train" => train_triplets,
        other => {
            return Err(contract(format!(
                "unknown split {other:?}; expected \"train\" or \"test\""
            )))
        }
    };
    let mut models = Vec::with_capacity(file.models.len());
    for entry in &file.models {
        models.push((entry.seed, ParamStore::load(&entry.path).map_err(classify)?));
    }
    let report = evaluate(&models, &qa, &corpus.vocab, &file.split).map_err(classify)?;
    println!("EM {}", format_em(report.em_mean / 100.0));
    println!(
        "split {}: mean {}% std {} over {} seeds",
        report.split,
        report.em_mean,
        report.em_std,
        report.per_seed.len()
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(classify)?;
        save_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

/// Exact-match rate with at least one decimal: 1 → "1.0", 0.6125 → "0.6125".
fn format_em(rate: f64) -> String {
    let s = format!("{rate}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

fn cmd_analyze_pos(args: &CommonArgs) -> Result<(), CliError> {
    let file: AnalyzeFile = require_config(args)?;
    let out = require_out(args)?;
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let sample = read_mask_jsonl(&file.masks).map_err(classify)?;
    let dist = pos_mask_distribution(&sample, &corpus.documents).map_err(classify)?;
    let path = out.join(pos_csv_name(&sample.policy));
    write_pos_csv(&path, &dist).map_err(classify)?;
    println!("pos distribution -> {}", path.display());
    Ok(())
}

fn cmd_analyze_zipf(args: &CommonArgs) -> Result<(), CliError> {
    let file: AnalyzeFile = require_config(args)?;
    let out = require_out(args)?;
    let corpus = load_corpus_dir(&file.corpus).map_err(classify)?;
    let sample = read_mask_jsonl(&file.masks).map_err(classify)?;
    let ranks = freq_rank(&corpus.documents);
    let freq = mask_frequency(&sample, &corpus.documents).map_err(classify)?;
    let rows = zipf_table(&ranks, &freq, &corpus.vocab);
    let path = out.join(zipf_csv_name(&sample.policy));
    write_zipf_csv(&path, &rows).map_err(classify)?;
    println!("zipf table ({} rows) -> {}", rows.len(), path.display());
    Ok(())
}

fn cmd_run_experiment(args: &CommonArgs) -> Result<(), CliError> {
    let mut manifest: ExperimentManifest = require_config(args)?;
    if let Some(out) = &args.out {
        manifest.out_dir = out.clone();
    }
    let outcome = run_experiment(&manifest).map_err(classify)?;
    println!("{SUMMARY_HEADER}");
    println!("{}", outcome.row.csv_line());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::TrainSupPolicy(a) => cmd_train_sup_policy(a),
        Cmd::TrainMetaPolicy(a) => cmd_train_meta_policy(a),
        Cmd::ApplyPolicy(a) => cmd_apply_policy(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::AnalyzePos(a) => cmd_analyze_pos(a),
        Cmd::AnalyzeZipf(a) => cmd_analyze_zipf(a),
        Cmd::RunExperiment(a) => cmd_run_experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful parses in clap terms
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
