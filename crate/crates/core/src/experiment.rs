//! One-manifest experiment driver. A JSON manifest names the corpus (inline
//! config or a directory of generated files), the masking policy, the Stage-1
//! and Stage-2 training configs, and the seed list; `run_experiment` executes
//! corpus → optional policy training → intermediate pre-training → per-seed
//! fine-tuning → closed-book evaluation and writes every checkpoint, the
//! evaluation report, and a summary CSV row under the output directory.
//! Identical manifests produce byte-identical reports; a failed stage leaves
//! partial outputs behind plus a `FAILED` marker naming the stage.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    generate_corpus, load_documents_jsonl, load_triplets_jsonl, save_documents_jsonl,
    save_triplets_jsonl, CorpusConfig, Document, EntitySplit, GeneratedCorpus, Triplet, Vocab,
};
use crate::lmodel::{init_lm_params, LmConfig};
use crate::policynets::{init_meta_params, MetaPolicyConfig, SpanChoice, SupPolicyConfig};
use crate::trainers::{
    evaluate, finetune, intermediate_pretrain, run_meta_training, train_supervised_policy,
    EvalReport, MaskPolicy, MetaConfig, StageConfig, SupTrainConfig,
};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SPLIT_FILE: &str = "entity-split.json";
pub const FAILED_MARKER: &str = "FAILED";
pub const SUMMARY_HEADER: &str = "policy,seed,split,em_mean,em_std,updates,notes";

/// LM initialization and the shared Stage-1 / policy-training streams are
/// fixed so that the masking policy is the only variable across arms.
const LM_INIT_SEED: u64 = 0;
const STAGE1_SEED: u64 = 0;
const POLICY_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{stage} stage failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn stage_err<E: std::error::Error + 'static>(stage: &'static str) -> impl Fn(E) -> ExperimentError {
    move |e| {
        // Keep filesystem failures classifiable as such for callers that map
        // errors to exit codes or status enums.
        let mut cursor: Option<&(dyn std::error::Error + 'static)> = Some(&e);
        while let Some(err) = cursor {
            if let Some(io) = err.downcast_ref::<std::io::Error>() {
                return ExperimentError::Io(std::io::Error::new(
                    io.kind(),
                    format!("{stage} stage: {e}"),
                ));
            }
            cursor = err.source();
        }
        ExperimentError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

/// Corpus input: an inline generation config or a directory produced by
/// `gen-corpus` (corpus.jsonl, triplets.jsonl, vocab.json, entity-split.json).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusSource {
    Path(PathBuf),
    Config(CorpusConfig),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Config(CorpusConfig::default())
    }
}

/// LM width; the corpus fixes the vocabulary size at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmSize {
    pub d_embed: usize,
    pub hidden: usize,
}

impl Default for LmSize {
    fn default() -> Self {
        let d = LmConfig::default();
        Self {
            d_embed: d.d_embed,
            hidden: d.hidden,
        }
    }
}

/// A learned-policy arm: network + training config, or a saved checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupArm {
    #[serde(default)]
    pub config: SupPolicyConfig,
    #[serde(default)]
    pub train: SupTrainConfig,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_sup_budget")]
    pub mask_budget: f64,
}

fn default_sup_budget() -> f64 {
    0.3
}

impl Default for SupArm {
    fn default() -> Self {
        Self {
            config: SupPolicyConfig::default(),
            train: SupTrainConfig::default(),
            checkpoint: None,
            mask_budget: default_sup_budget(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetaArm {
    #[serde(default)]
    pub config: MetaPolicyConfig,
    #[serde(default)]
    pub train: MetaConfig,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Post-processing budget; defaults to the training budget.
    #[serde(default)]
    pub mask_budget: Option<f64>,
}

/// The masking-policy arm of an experiment, as named in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum PolicySpec {
    /// Baseline: no intermediate pre-training at all.
    None,
    Orig {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_coverage")]
        coverage: f64,
        #[serde(default = "default_max_span")]
        max_span: usize,
    },
    Rand {
        #[serde(default = "default_rate")]
        rate: f64,
    },
    Ssm,
    MaskRandomSent {
        #[serde(default = "default_sent_fraction")]
        fraction: f64,
    },
    MaskFirstSent,
    SupervisedTop1 {
        #[serde(flatten)]
        arm: SupArm,
    },
    SupervisedTop5 {
        #[serde(flatten)]
        arm: SupArm,
    },
    Meta {
        #[serde(flatten)]
        arm: MetaArm,
    },
}

fn default_lambda() -> f64 {
    3.0
}
fn default_coverage() -> f64 {
    0.15
}
fn default_max_span() -> usize {
    8
}
fn default_rate() -> f64 {
    0.15
}
fn default_sent_fraction() -> f64 {
    0.3
}

impl PolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::None => "none",
            PolicySpec::Orig { .. } => "orig",
            PolicySpec::Rand { .. } => "rand",
            PolicySpec::Ssm => "ssm",
            PolicySpec::MaskRandomSent { .. } => "mask-random-sent",
            PolicySpec::MaskFirstSent => "mask-first-sent",
            PolicySpec::SupervisedTop1 { .. } => "supervised-top1",
            PolicySpec::SupervisedTop5 { .. } => "supervised-top5",
            PolicySpec::Meta { .. } => "meta",
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            PolicySpec::SupervisedTop1 { arm } | PolicySpec::SupervisedTop5 { arm } => {
                arm.checkpoint.as_deref()
            }
            PolicySpec::Meta { arm } => arm.checkpoint.as_deref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    #[serde(default)]
    pub corpus: CorpusSource,
    pub policy: PolicySpec,
    #[serde(default)]
    pub lm: LmSize,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default)]
    pub stage2: StageConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ExperimentError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| ExperimentError::Manifest(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Manifest("seed list is empty".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(ExperimentError::Manifest("out_dir is not set".into()));
        }
        if let CorpusSource::Path(p) = &self.corpus {
            if !p.is_dir() {
                return Err(ExperimentError::Manifest(format!(
                    "corpus directory {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(ckpt) = self.policy.checkpoint() {
            if !ckpt.is_file() {
                return Err(ExperimentError::Manifest(format!(
                    "policy checkpoint {} does not exist",
                    ckpt.display()
                )));
            }
        }
        self.stage1.validate().map_err(stage_err("manifest"))?;
        self.stage2.validate().map_err(stage_err("manifest"))?;
        Ok(())
    }
}

/// A corpus as the experiment consumes it, whether generated or loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentCorpus {
    pub documents: Vec<Document>,
    pub triplets: Vec<Triplet>,
    pub vocab: Vocab,
    pub entity_split: EntitySplit,
}

impl From<GeneratedCorpus> for ExperimentCorpus {
    fn from(g: GeneratedCorpus) -> Self {
        Self {
            documents: g.documents,
            triplets: g.triplets,
            vocab: g.vocab,
            entity_split: g.entity_split,
        }
    }
}

pub fn save_corpus_dir(dir: &Path, corpus: &ExperimentCorpus) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    save_documents_jsonl(&corpus.documents, &corpus.vocab, &dir.join(CORPUS_FILE))
        .map_err(stage_err("corpus"))?;
    save_triplets_jsonl(&corpus.triplets, &corpus.vocab, &dir.join(TRIPLETS_FILE))
        .map_err(stage_err("corpus"))?;
    corpus.vocab.save(&dir.join(VOCAB_FILE)).map_err(stage_err("corpus"))?;
    let split = serde_json::to_string_pretty(&corpus.entity_split)
        .map_err(stage_err("corpus"))?;
    fs::write(dir.join(SPLIT_FILE), split + "\n")?;
    Ok(())
}

pub fn load_corpus_dir(dir: &Path) -> Result<ExperimentCorpus, ExperimentError> {
    let documents = load_documents_jsonl(&dir.join(CORPUS_FILE)).map_err(stage_err("corpus"))?;
    let triplets = load_triplets_jsonl(&dir.join(TRIPLETS_FILE)).map_err(stage_err("corpus"))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE)).map_err(stage_err("corpus"))?;
    let split_text = fs::read_to_string(dir.join(SPLIT_FILE))?;
    let entity_split: EntitySplit =
        serde_json::from_str(&split_text).map_err(stage_err("corpus"))?;
    Ok(ExperimentCorpus {
        documents,
        triplets,
        vocab,
        entity_split,
    })
}

/// Triplets for fine-tune-train entities vs. the held-out closed-book split.
pub fn split_triplets(corpus: &ExperimentCorpus) -> (Vec<Triplet>, Vec<Triplet>) {
    let train_keys: HashSet<usize> = corpus.entity_split.train.iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for t in &corpus.triplets {
        if train_keys.contains(&t.entity_key) {
            train.push(t.clone());
        } else {
            test.push(t.clone());
        }
    }
    (train, test)
}

fn sup_val_split(triplets: &[Triplet]) -> (Vec<Triplet>, Vec<Triplet>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        if i % 10 == 9 {
            val.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    if val.is_empty() && train.len() > 1 {
        val.push(train.pop().expect("non-empty"));
    }
    (train, val)
}

/// One row of the summary CSV; `seeds` are joined with `;` in the seed column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub seeds: Vec<u64>,
    pub split: String,
    pub em_mean: f64,
    pub em_std: f64,
    pub updates: usize,
    pub notes: String,
}

impl SummaryRow {
    pub fn csv_line(&self) -> String {
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{}",
            self.policy, seeds, self.split, self.em_mean, self.em_std, self.updates, self.notes
        )
    }
}

/// Appends a row, writing the header first when the file does not exist yet.
pub fn append_summary_row(path: &Path, row: &SummaryRow) -> Result<(), ExperimentError> {
    let mut text = if path.exists() {
        fs::read_to_string(path)?
    } else {
        format!("{SUMMARY_HEADER}\n")
    };
    text.push_str(&row.csv_line());
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub row: SummaryRow,
    pub eval_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Instantiates the masking policy named by the spec, training the learned
/// ones on the fine-tune-train triplets (or loading their checkpoint). The
/// `none` arm yields no policy at all. Writes nothing to disk.
pub fn instantiate_policy(
    spec: &PolicySpec,
    train_triplets: &[Triplet],
    lm_init: &crate::diffcore::ParamStore,
    vocab_len: usize,
) -> Result<Option<MaskPolicy>, ExperimentError> {
    let policy = match spec {
        PolicySpec::None => return Ok(None),
        PolicySpec::Orig {
            lambda,
            coverage,
            max_span,
        } => MaskPolicy::Orig {
            lambda: *lambda,
            coverage: *coverage,
            max_span: *max_span,
        },
        PolicySpec::Rand { rate } => MaskPolicy::Rand { rate: *rate },
        PolicySpec::Ssm => MaskPolicy::Ssm,
        PolicySpec::MaskRandomSent { fraction } => MaskPolicy::RandomSentences {
            fraction: *fraction,
        },
        PolicySpec::MaskFirstSent => MaskPolicy::FirstSentence,
        PolicySpec::SupervisedTop1 { arm } | PolicySpec::SupervisedTop5 { arm } => {
            let choice = if matches!(spec, PolicySpec::SupervisedTop1 { .. }) {
                SpanChoice::Top1
            } else {
                SpanChoice::Top5
            };
            let mut config = arm.config.clone();
            config.vocab = vocab_len;
            let params = match &arm.checkpoint {
                Some(path) => crate::diffcore::ParamStore::load(path)
                    .map_err(stage_err("policy"))?,
                None => {
                    let (train, val) = sup_val_split(train_triplets);
                    let (params, _) = train_supervised_policy(&train, &val, &config, &arm.train)
                        .map_err(stage_err("policy"))?;
                    params
                }
            };
            MaskPolicy::Supervised {
                params,
                choice,
                max_span_len: config.max_span_len,
                mask_budget: arm.mask_budget,
            }
        }
        PolicySpec::Meta { arm } => {
            let mut config = arm.config.clone();
            config.vocab = vocab_len;
            let params = match &arm.checkpoint {
                Some(path) => crate::diffcore::ParamStore::load(path)
                    .map_err(stage_err("policy"))?,
                None => {
                    let policy_init =
                        init_meta_params(&config, POLICY_SEED).map_err(stage_err("policy"))?;
                    let outcome = run_meta_training(
                        train_triplets,
                        lm_init,
                        &policy_init,
                        &arm.train,
                        POLICY_SEED,
                    )
                    .map_err(stage_err("policy"))?;
                    outcome.policy
                }
            };
            MaskPolicy::Meta {
                params,
                temperature: arm.train.temperature,
                mask_budget: arm.mask_budget.unwrap_or(arm.train.budget),
            }
        }
    };
    Ok(Some(policy))
}

/// [`instantiate_policy`], plus a `{policy}-policy.json` checkpoint in
/// `out_dir` for the learned arms.
pub fn build_policy(
    spec: &PolicySpec,
    train_triplets: &[Triplet],
    lm_init: &crate::diffcore::ParamStore,
    vocab_len: usize,
    out_dir: &Path,
) -> Result<Option<MaskPolicy>, ExperimentError> {
    let policy = instantiate_policy(spec, train_triplets, lm_init, vocab_len)?;
    if let Some(MaskPolicy::Supervised { params, .. } | MaskPolicy::Meta { params, .. }) = &policy
    {
        let ckpt = out_dir.join(format!("{}-policy.json", spec.name()));
        params.save(&ckpt).map_err(stage_err("policy"))?;
    }
    Ok(policy)
}

fn run_stages(manifest: &ExperimentManifest) -> Result<ExperimentOutcome, ExperimentError> {
    let out_dir = &manifest.out_dir;
    let policy_name = manifest.policy.name();

    let corpus: ExperimentCorpus = match &manifest.corpus {
        CorpusSource::Config(cfg) => {
            let generated: ExperimentCorpus = generate_corpus(cfg)
                .map_err(stage_err("corpus"))?
                .into();
            save_corpus_dir(&out_dir.join("corpus"), &generated)?;
            generated
        }
        CorpusSource::Path(dir) => load_corpus_dir(dir)?,
    };
    let (train_triplets, test_triplets) = split_triplets(&corpus);

    let lm_cfg = LmConfig {
        vocab: corpus.vocab.len(),
        d_embed: manifest.lm.d_embed,
        hidden: manifest.lm.hidden,
    };
    let lm_init = init_lm_params(&lm_cfg, LM_INIT_SEED).map_err(stage_err("stage1"))?;

    let policy = build_policy(
        &manifest.policy,
        &train_triplets,
        &lm_init,
        corpus.vocab.len(),
        out_dir,
    )?;

    let (pretrained, updates) = match &policy {
        Some(policy) => {
            let (store, report) = intermediate_pretrain(
                &lm_init,
                policy,
                &corpus.documents,
                &manifest.stage1,
                STAGE1_SEED,
            )
            .map_err(stage_err("stage1"))?;
            let report_text = serde_json::to_string_pretty(&report)
                .map_err(stage_err("stage1"))?;
            fs::write(
                out_dir.join(format!("{policy_name}-stage1-report.json")),
                report_text + "\n",
            )?;
            (store, report.losses.len())
        }
        None => (lm_init.clone(), 0),
    };
    pretrained
        .save(&out_dir.join(format!("{policy_name}-pretrained.json")))
        .map_err(stage_err("stage1"))?;

    let mut models = Vec::with_capacity(manifest.seeds.len());
    for &seed in &manifest.seeds {
        let tuned = finetune(&pretrained, &train_triplets, &manifest.stage2, seed)
            .map_err(stage_err("stage2"))?;
        tuned
            .save(&out_dir.join(format!("{policy_name}-seed{seed}-finetuned.json")))
            .map_err(stage_err("stage2"))?;
        models.push((seed, tuned));
    }

    let report = evaluate(&models, &test_triplets, &corpus.vocab, "test")
        .map_err(stage_err("eval"))?;
    let eval_path = out_dir.join(format!("{policy_name}-eval.json"));
    let report_text = serde_json::to_string_pretty(&report).map_err(stage_err("eval"))?;
    fs::write(&eval_path, report_text + "\n")?;

    let row = SummaryRow {
        policy: policy_name.to_string(),
        seeds: manifest.seeds.clone(),
        split: report.split.clone(),
        em_mean: report.em_mean,
        em_std: report.em_std,
        updates,
        notes: if policy.is_none() {
            "stage 1 skipped".to_string()
        } else {
            String::new()
        },
    };
    let summary_path = out_dir.join("summary.csv");
    fs::write(&summary_path, format!("{SUMMARY_HEADER}\n{}\n", row.csv_line()))?;

    Ok(ExperimentOutcome {
        report,
        row,
        eval_path,
        summary_path,
    })
}

/// Runs the whole pipeline for one manifest. The manifest is archived into
/// the output directory first; on failure the partial outputs stay in place
/// and a `FAILED` file records the stage-tagged diagnostic.
pub fn run_experiment(
    manifest: &ExperimentManifest,
) -> Result<ExperimentOutcome, ExperimentError> {
    manifest.validate()?;
    fs::create_dir_all(&manifest.out_dir)?;
    manifest.save(&manifest.out_dir.join("manifest.json"))?;
    match run_stages(manifest) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            let _ = fs::write(manifest.out_dir.join(FAILED_MARKER), format!("{e}\n"));
            Err(e)
        }
    }
}
