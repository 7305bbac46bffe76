//! Training loops: supervised policy training, the bilevel meta-learning
//! outer loop, Stage-1 intermediate pre-training, Stage-2 fine-tuning, and
//! evaluation.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{find_subsequence, Document, Triplet, Vocab, MASK_ID};
use crate::diffcore::{
    backward, DiffError, Graph, ParamStore, RngStream, StoreError, Tensor, Var,
};
use crate::lmodel::{DecodeMode, LmModel, SourceInput};
use crate::masking::{
    masked_pair, policy_orig, policy_rand, policy_sentence, policy_ssm, postprocess,
    MaskDecisions, MaskError, SentenceMode, TargetMode,
};
use crate::nnblocks::{embed_mixture, sample_gumbel_noise, softmax_xent, NnError, TokenId};
use crate::policynets::{
    harden, rank_spans, MetaPolicy, SoftDecisions, SpanChoice, SupPolicyConfig, SupervisedPolicy,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("target span does not occur in the context")]
    TargetNotInContext,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0}")]
    EmptyInput(&'static str),
}

// ---------------------------------------------------------------------------
// Span labels and supervised policy training

/// Inclusive (start, end) indices of the first occurrence of `target` in
/// `context`.
pub fn make_label(
    context: &[TokenId],
    target: &[TokenId],
) -> Result<(usize, usize), TrainError> {
    if context.is_empty() || target.is_empty() {
        return Err(TrainError::EmptyInput("span label input"));
    }
    let start = find_subsequence(context, target).ok_or(TrainError::TargetNotInContext)?;
    Ok((start, start + target.len() - 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SupTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupTrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Softmax cross-entropy over the positions of a `T×1` logit column.
fn position_xent(column: &Var, target: usize) -> Result<Var, TrainError> {
    let t = column.shape()[0];
    let mut eye = vec![0.0; t * t];
    for i in 0..t {
        eye[i * t + i] = 1.0;
    }
    let eye = column
        .graph()
        .constant(Tensor::new(vec![t, t], eye).expect("square identity"));
    let row = column.matmul(&eye, true, false)?;
    Ok(softmax_xent(&row, target as TokenId)?)
}

fn sup_batch_loss(
    policy: &SupervisedPolicy,
    triplets: &[Triplet],
    labels: &[(usize, usize)],
    indices: &[usize],
) -> Result<Var, TrainError> {
    let mut total: Option<Var> = None;
    for &i in indices {
        let (y_st, y_ed) = policy.forward(&triplets[i].context)?;
        let (st, ed) = labels[i];
        let loss = position_xent(&y_st, st)?.add(&position_xent(&y_ed, ed)?)?;
        total = Some(match total {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    Ok(total
        .expect("non-empty batch")
        .scalar_mul(1.0 / indices.len() as f64))
}

fn sup_split_loss(
    store: &ParamStore,
    triplets: &[Triplet],
    labels: &[(usize, usize)],
) -> Result<f64, TrainError> {
    let graph = Graph::new();
    let vars = store.bind(&graph);
    let policy = SupervisedPolicy::bind(&vars)?;
    let indices: Vec<usize> = (0..triplets.len()).collect();
    Ok(sup_batch_loss(&policy, triplets, labels, &indices)?.item()?)
}

/// Trains the span extractor on (context, target) supervision and returns
/// the checkpoint with the lowest validation loss.
pub fn train_supervised_policy(
    train: &[Triplet],
    val: &[Triplet],
    policy_cfg: &SupPolicyConfig,
    cfg: &SupTrainConfig,
) -> Result<(ParamStore, SupTrainReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyInput("triplet split"));
    }
    let train_labels: Vec<(usize, usize)> = train
        .iter()
        .map(|t| make_label(&t.context, &t.target))
        .collect::<Result<_, _>>()?;
    let val_labels: Vec<(usize, usize)> = val
        .iter()
        .map(|t| make_label(&t.context, &t.target))
        .collect::<Result<_, _>>()?;

    let mut store = crate::policynets::init_supervised_params(policy_cfg, cfg.seed)?;
    let mut stream = RngStream::new(cfg.seed, "sup-train");
    let mut report = SupTrainReport {
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        stream.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let graph = Graph::new();
            let vars = store.bind(&graph);
            let policy = SupervisedPolicy::bind(&vars)?;
            let loss = sup_batch_loss(&policy, train, &train_labels, chunk)?;
            let refs: Vec<&Var> = vars.values().collect();
            let grads = backward(&loss, &refs)?;
            let update: IndexMap<String, Tensor> = vars
                .keys()
                .cloned()
                .zip(grads.iter().map(Var::value))
                .collect();
            store.sgd_step(cfg.lr, &update)?;
            epoch_loss += loss.item()?;
            batches += 1.0;
        }
        report.train_losses.push(epoch_loss / batches);
        let val_loss = sup_split_loss(&store, val, &val_labels)?;
        report.val_losses.push(val_loss);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, store.clone()));
            report.best_epoch = epoch;
        }
    }
    Ok((best.expect("at least one epoch").1, report))
}

/// Fraction of triplets whose top-ranked span equals the first occurrence of
/// the target in the context.
pub fn top1_span_accuracy(
    store: &ParamStore,
    triplets: &[Triplet],
    max_span_len: usize,
) -> Result<f64, TrainError> {
    if triplets.is_empty() {
        return Err(TrainError::EmptyInput("triplet split"));
    }
    let graph = Graph::new();
    let vars = store.bind(&graph);
    let policy = SupervisedPolicy::bind(&vars)?;
    let mut hits = 0usize;
    for t in triplets {
        let gold = make_label(&t.context, &t.target)?;
        let (y_st, y_ed) = policy.forward(&t.context)?;
        let top = rank_spans(y_st.value().data(), y_ed.value().data(), max_span_len)[0];
        if (top.start, top.end) == gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / triplets.len() as f64)
}

/// Synthetic triplets whose answer span is identifiable from the context
/// alone: answers draw on a token range that never appears as filler.
pub fn planted_span_triplets(n: usize, seed: u64) -> Vec<Triplet> {
    const FILLER_LO: u32 = 5;
    const FILLER_N: usize = 40;
    const ANSWER_LO: u32 = 45;
    const ANSWER_N: usize = 15;
    let mut stream = RngStream::new(seed, "planted");
    (0..n)
        .map(|i| {
            let len = 8 + stream.gen_range(7);
            let span_len = 1 + stream.gen_range(3);
            let start = stream.gen_range(len - span_len + 1);
            let context: Vec<TokenId> = (0..len)
                .map(|pos| {
                    if pos >= start && pos < start + span_len {
                        ANSWER_LO + stream.gen_range(ANSWER_N) as TokenId
                    } else {
                        FILLER_LO + stream.gen_range(FILLER_N) as TokenId
                    }
                })
                .collect();
            let target = context[start..start + span_len].to_vec();
            let source = vec![
                FILLER_LO + stream.gen_range(FILLER_N) as TokenId,
                FILLER_LO + stream.gen_range(FILLER_N) as TokenId,
            ];
            Triplet {
                context,
                source,
                target,
                entity_key: i,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Bilevel meta-learning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// α₀, the inner pre-train learning rate.
    pub inner_pretrain_lr: f64,
    /// α₁, the inner fine-tune learning rate.
    pub inner_finetune_lr: f64,
    /// α₂, the outer policy learning rate.
    pub outer_lr: f64,
    /// β, weight of the budget regularizer.
    pub reg_weight: f64,
    /// γ, the target mask fraction.
    pub budget: f64,
    /// ε, the dead-zone tolerance around the budget.
    pub tolerance: f64,
    /// τ, the Gumbel-Softmax temperature.
    pub temperature: f64,
    pub outer_steps: usize,
    pub batch_size: usize,
    /// Treat the pre-fine-tune loss term as a constant when differentiating
    /// the meta-loss.
    pub detach_baseline: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_pretrain_lr: 1e-2,
            inner_finetune_lr: 1e-2,
            outer_lr: 1e-3,
            reg_weight: 0.1,
            budget: 0.15,
            tolerance: 0.05,
            temperature: 1.0,
            outer_steps: 200,
            batch_size: 8,
            detach_baseline: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("inner_pretrain_lr", self.inner_pretrain_lr),
            ("inner_finetune_lr", self.inner_finetune_lr),
            ("outer_lr", self.outer_lr),
            ("temperature", self.temperature),
        ] {
            if v <= 0.0 {
                return Err(TrainError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("budget", self.budget), ("tolerance", self.tolerance)] {
            if !(0.0..1.0).contains(&v) || v == 0.0 {
                return Err(TrainError::Config(format!(
                    "{name} must lie in (0,1), got {v}"
                )));
            }
        }
        if self.reg_weight < 0.0 {
            return Err(TrainError::Config("reg_weight must be ≥ 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub struct InnerPretrain {
    /// θ′, still on the graph so gradients reach the policy.
    pub theta_prime: IndexMap<String, Var>,
    pub soft: SoftDecisions,
    pub denoise_loss: Var,
    /// ∇_θ of the denoise loss, extracted for the persistent update.
    pub denoise_grads: IndexMap<String, Tensor>,
}

/// One masked-denoising step on the context: θ′ = θ − α₀·∇L_denoise, with the
/// mask given by the policy's relaxed decisions on the supplied noise.
pub fn inner_pretrain_step(
    lm_vars: &IndexMap<String, Var>,
    policy: &MetaPolicy,
    context: &[TokenId],
    lr: f64,
    temperature: f64,
    noise: &Tensor,
) -> Result<InnerPretrain, TrainError> {
    let lm = LmModel::bind(lm_vars)?;
    let soft = policy.forward_with_noise(context, temperature, noise)?;
    step_theta_with_soft(lm_vars, &lm, soft, context, lr)
}

/// The denoise step with caller-supplied relaxed decisions.
pub fn inner_pretrain_step_with_soft(
    lm_vars: &IndexMap<String, Var>,
    soft: SoftDecisions,
    context: &[TokenId],
    lr: f64,
) -> Result<InnerPretrain, TrainError> {
    let lm = LmModel::bind(lm_vars)?;
    step_theta_with_soft(lm_vars, &lm, soft, context, lr)
}

fn step_theta_with_soft(
    lm_vars: &IndexMap<String, Var>,
    lm: &LmModel,
    soft: SoftDecisions,
    context: &[TokenId],
    lr: f64,
) -> Result<InnerPretrain, TrainError> {
    let x_src = embed_mixture(&lm.embed, context, MASK_ID, soft.var())?;
    let loss = lm.denoise_loss(SourceInput::Embeddings(x_src), context)?;
    let refs: Vec<&Var> = lm_vars.values().collect();
    let grads = backward(&loss, &refs)?;
    let mut theta_prime = IndexMap::new();
    let mut denoise_grads = IndexMap::new();
    for ((name, var), g) in lm_vars.iter().zip(&grads) {
        theta_prime.insert(name.clone(), var.sub(&g.scalar_mul(lr))?);
        denoise_grads.insert(name.clone(), g.value());
    }
    Ok(InnerPretrain {
        theta_prime,
        soft,
        denoise_loss: loss,
        denoise_grads,
    })
}

pub struct InnerFinetune {
    /// θ″, still differentiable through θ′.
    pub theta_double: IndexMap<String, Var>,
    /// The (s, t) loss at θ′, before the step.
    pub baseline_loss: Var,
}

/// One seq2seq step on (s, t): θ″ = θ′ − α₁·∇L_seq2seq(θ′).
pub fn inner_finetune_step(
    theta_prime: &IndexMap<String, Var>,
    source: &[TokenId],
    target: &[TokenId],
    lr: f64,
) -> Result<InnerFinetune, TrainError> {
    let lm = LmModel::bind(theta_prime)?;
    let loss = lm.seq2seq_loss(source, target)?;
    let refs: Vec<&Var> = theta_prime.values().collect();
    let grads = backward(&loss, &refs)?;
    let mut theta_double = IndexMap::new();
    for ((name, var), g) in theta_prime.iter().zip(&grads) {
        theta_double.insert(name.clone(), var.sub(&g.scalar_mul(lr))?);
    }
    Ok(InnerFinetune {
        theta_double,
        baseline_loss: loss,
    })
}

/// L′ = L(s,t; θ″) − L(s,t; θ′): the change in loss caused by the fine-tune
/// step. Both terms stay on the differentiable path unless
/// `detach_baseline`.
pub fn meta_loss(
    theta_double: &IndexMap<String, Var>,
    baseline_loss: &Var,
    source: &[TokenId],
    target: &[TokenId],
    detach_baseline: bool,
) -> Result<Var, TrainError> {
    let lm = LmModel::bind(theta_double)?;
    let after = lm.seq2seq_loss(source, target)?;
    let baseline = if detach_baseline {
        baseline_loss.graph().detach(baseline_loss)
    } else {
        baseline_loss.clone()
    };
    Ok(after.sub(&baseline)?)
}

/// Softened L2 budget penalty: zero while |γ·l(x) − Σd̃| ≤ ε·l(x), else the
/// squared violation of the budget center.
pub fn budget_loss(
    x_len: usize,
    soft: &SoftDecisions,
    budget: f64,
    tolerance: f64,
) -> Result<Var, TrainError> {
    if soft.len() != x_len {
        return Err(TrainError::Config(format!(
            "decision length {} does not match sequence length {x_len}",
            soft.len()
        )));
    }
    let masked = soft.var().sum();
    let center = budget * x_len as f64;
    let dead_zone = tolerance * x_len as f64;
    if (center - masked.item()?).abs() <= dead_zone {
        return Ok(masked.sub(&masked)?);
    }
    let diff = masked
        .graph()
        .constant(Tensor::full(&masked.shape(), center))
        .sub(&masked)?;
    Ok(diff.mul(&diff)?)
}

/// Outer policy update φ ← φ − α₂·∇_φ(L′ + β·L_reg). Returns `false` without
/// touching φ when the gradient is non-finite.
pub fn meta_outer_step(
    store: &mut ParamStore,
    phi_vars: &IndexMap<String, Var>,
    meta: &Var,
    reg: &Var,
    reg_weight: f64,
    lr: f64,
) -> Result<bool, TrainError> {
    let total = meta.add(&reg.scalar_mul(reg_weight))?;
    let refs: Vec<&Var> = phi_vars.values().collect();
    let grads = backward(&total, &refs)?;
    let mut update = IndexMap::new();
    for (name, g) in phi_vars.keys().zip(&grads) {
        let t = g.value();
        if !t.data().iter().all(|v| v.is_finite()) {
            return Ok(false);
        }
        update.insert(name.clone(), t);
    }
    store.sgd_step(lr, &update)?;
    Ok(true)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaStepRecord {
    pub triplet_indices: Vec<usize>,
    /// Relaxed decisions per batch instance, recorded for replay.
    pub soft_decisions: Vec<Vec<f64>>,
    pub meta_loss: f64,
    pub reg_loss: f64,
    pub theta_aborted: bool,
    pub phi_aborted: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetaTrainReport {
    pub steps: Vec<MetaStepRecord>,
    /// Outer updates skipped by the non-finite-gradient guard.
    pub abort_count: usize,
}

pub struct MetaTrainOutcome {
    pub policy: ParamStore,
    pub lm: ParamStore,
    pub report: MetaTrainReport,
}

fn add_scaled(acc: &mut IndexMap<String, Tensor>, name: &str, t: &Tensor) {
    match acc.get_mut(name) {
        Some(slot) => {
            for (a, b) in slot.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        None => {
            acc.insert(name.to_string(), t.clone());
        }
    }
}

fn scale_all(acc: &mut IndexMap<String, Tensor>, k: f64) {
    for t in acc.values_mut() {
        for v in t.data_mut() {
            *v *= k;
        }
    }
}

fn all_finite(acc: &IndexMap<String, Tensor>) -> bool {
    acc.values()
        .all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// The outer meta-learning loop. Each step samples a triplet batch, runs the
/// two inner steps per instance on its own graph, averages ∇_φ(L′ + β·L_reg)
/// over the batch, updates φ, and carries the pre-train progress forward:
/// the persistent θ takes only the denoise step, never the fine-tune step.
pub fn run_meta_training(
    triplets: &[Triplet],
    lm_init: &ParamStore,
    policy_init: &ParamStore,
    cfg: &MetaConfig,
    seed: u64,
) -> Result<MetaTrainOutcome, TrainError> {
    if triplets.is_empty() {
        return Err(TrainError::EmptyInput("triplet set"));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let mut lm_store = lm_init.clone();
    let mut policy_store = policy_init.clone();
    let mut report = MetaTrainReport::default();
    let root = RngStream::new(seed, "policy");

    for p in 0..cfg.outer_steps {
        let mut step_stream = root.child(&format!("step{p}"));
        let batch = if triplets.len() <= cfg.batch_size {
            (0..triplets.len()).collect::<Vec<_>>()
        } else {
            step_stream.sample_distinct(triplets.len(), cfg.batch_size)
        };

        let mut phi_acc: IndexMap<String, Tensor> = IndexMap::new();
        let mut theta_acc: IndexMap<String, Tensor> = IndexMap::new();
        let mut soft_decisions = Vec::with_capacity(batch.len());
        let mut meta_sum = 0.0;
        let mut reg_sum = 0.0;

        for &idx in &batch {
            let t = &triplets[idx];
            let graph = Graph::new();
            let lm_vars = lm_store.bind(&graph);
            let phi_vars = policy_store.bind(&graph);
            let policy = MetaPolicy::bind(&phi_vars)?;
            let noise = sample_gumbel_noise(t.context.len(), &mut step_stream);
            let pre = inner_pretrain_step(
                &lm_vars,
                &policy,
                &t.context,
                cfg.inner_pretrain_lr,
                cfg.temperature,
                &noise,
            )?;
            let fin = inner_finetune_step(
                &pre.theta_prime,
                &t.source,
                &t.target,
                cfg.inner_finetune_lr,
            )?;
            let lp = meta_loss(
                &fin.theta_double,
                &fin.baseline_loss,
                &t.source,
                &t.target,
                cfg.detach_baseline,
            )?;
            let lreg = budget_loss(t.context.len(), &pre.soft, cfg.budget, cfg.tolerance)?;
            let total = lp.add(&lreg.scalar_mul(cfg.reg_weight))?;
            let refs: Vec<&Var> = phi_vars.values().collect();
            let grads = backward(&total, &refs)?;
            for (name, g) in phi_vars.keys().zip(&grads) {
                add_scaled(&mut phi_acc, name, &g.value());
            }
            for (name, g) in &pre.denoise_grads {
                add_scaled(&mut theta_acc, name, g);
            }
            soft_decisions.push(pre.soft.values());
            meta_sum += lp.item()?;
            reg_sum += lreg.item()?;
        }

        let inv = 1.0 / batch.len() as f64;
        scale_all(&mut phi_acc, inv);
        scale_all(&mut theta_acc, inv);

        let theta_aborted = !all_finite(&theta_acc);
        if !theta_aborted {
            lm_store.sgd_step(cfg.inner_pretrain_lr, &theta_acc)?;
        }
        let phi_aborted = !all_finite(&phi_acc);
        if !phi_aborted {
            policy_store.sgd_step(cfg.outer_lr, &phi_acc)?;
        } else {
            report.abort_count += 1;
        }
        report.steps.push(MetaStepRecord {
            triplet_indices: batch,
            soft_decisions,
            meta_loss: meta_sum * inv,
            reg_loss: reg_sum * inv,
            theta_aborted,
            phi_aborted,
        });
    }

    Ok(MetaTrainOutcome {
        policy: policy_store,
        lm: lm_store,
        report,
    })
}

// ---------------------------------------------------------------------------
// Stage 1: intermediate pre-training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub total_updates: usize,
    pub warmup_fraction: f64,
    pub seeds: Vec<u64>,
    pub max_epochs: usize,
    pub validation_interval: usize,
    /// Fraction of the fine-tuning pairs kept (low-resource runs).
    pub train_fraction: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            batch_size: 32,
            total_updates: 3000,
            warmup_fraction: 0.06,
            seeds: vec![0, 1, 2],
            max_epochs: 12,
            validation_interval: 100,
            train_fraction: 1.0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::Config(format!(
                "warmup_fraction must lie in [0,1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "train_fraction must lie in (0,1], got {}",
                self.train_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::Config("seed list must be non-empty".into()));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 → peak over the warmup steps, then back to 0
/// at the final step.
pub fn triangular_lr(step: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let last = total - 1;
    let warmup = (warmup_fraction * last as f64).round() as usize;
    if step <= warmup {
        if warmup == 0 {
            peak
        } else {
            peak * step as f64 / warmup as f64
        }
    } else {
        peak * (last - step) as f64 / (last - warmup) as f64
    }
}

/// A frozen masking policy applied during Stage-1 pre-training.
pub enum MaskPolicy {
    /// Span denoising with Poisson-length spans, full-sequence targets.
    Orig {
        lambda: f64,
        coverage: f64,
        max_span: usize,
    },
    /// Uniform token masking, masked-token targets.
    Rand { rate: f64 },
    /// Salient-span masking; documents without entities fall back to `Rand`.
    Ssm,
    RandomSentences { fraction: f64 },
    FirstSentence,
    Supervised {
        params: ParamStore,
        choice: SpanChoice,
        max_span_len: usize,
        mask_budget: f64,
    },
    Meta {
        params: ParamStore,
        temperature: f64,
        mask_budget: f64,
    },
}

/// Fallback rate when SSM meets a document without entity spans.
const SSM_FALLBACK_RATE: f64 = 0.15;
/// A vanishing fraction; `ceil` clamps it to one leading sentence.
const FIRST_SENT_FRACTION: f64 = 1e-9;

impl MaskPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MaskPolicy::Orig { .. } => "orig",
            MaskPolicy::Rand { .. } => "rand",
            MaskPolicy::Ssm => "ssm",
            MaskPolicy::RandomSentences { .. } => "mask-random-sent",
            MaskPolicy::FirstSentence => "mask-first-sent",
            MaskPolicy::Supervised {
                choice: SpanChoice::Top1,
                ..
            } => "supervised-top1",
            MaskPolicy::Supervised { .. } => "supervised-top5",
            MaskPolicy::Meta { .. } => "meta",
        }
    }

    /// Whether masks come from a bound network (worth precomputing per
    /// document) rather than a cheap sampler.
    pub fn is_neural(&self) -> bool {
        matches!(
            self,
            MaskPolicy::Supervised { .. } | MaskPolicy::Meta { .. }
        )
    }

    /// Produces the decisions plus the target mode and infill switch this
    /// policy trains with.
    pub fn mask_plan(
        &self,
        doc: &Document,
        stream: &mut RngStream,
    ) -> Result<(MaskDecisions, TargetMode, bool), TrainError> {
        Ok(match self {
            MaskPolicy::Orig {
                lambda,
                coverage,
                max_span,
            } => (
                policy_orig(&doc.tokens, *lambda, *coverage, *max_span, stream)?,
                TargetMode::FullSequence,
                true,
            ),
            MaskPolicy::Rand { rate } => (
                policy_rand(&doc.tokens, *rate, stream)?,
                TargetMode::MaskedTokens,
                false,
            ),
            MaskPolicy::Ssm => {
                let d = match policy_ssm(doc, stream) {
                    Err(MaskError::NoSalientSpan) => {
                        policy_rand(&doc.tokens, SSM_FALLBACK_RATE, stream)?
                    }
                    other => other?,
                };
                (d, TargetMode::MaskedTokens, true)
            }
            MaskPolicy::RandomSentences { fraction } => (
                policy_sentence(doc, SentenceMode::Random, *fraction, stream)?,
                TargetMode::MaskedTokens,
                true,
            ),
            MaskPolicy::FirstSentence => (
                policy_sentence(doc, SentenceMode::First, FIRST_SENT_FRACTION, stream)?,
                TargetMode::MaskedTokens,
                true,
            ),
            MaskPolicy::Supervised {
                params,
                choice,
                max_span_len,
                mask_budget,
            } => {
                let graph = Graph::new();
                let vars = params.bind(&graph);
                let policy = SupervisedPolicy::bind(&vars)?;
                let d = policy.infer_mask(&doc.tokens, *choice, *max_span_len, stream)?;
                let d = postprocess(&d, &doc.word_ids, *mask_budget, stream)?;
                (d, TargetMode::MaskedTokens, true)
            }
            MaskPolicy::Meta {
                params,
                temperature,
                mask_budget,
            } => {
                let graph = Graph::new();
                let vars = params.bind(&graph);
                let policy = MetaPolicy::bind(&vars)?;
                let soft = policy.forward(&doc.tokens, *temperature, stream)?;
                let d = postprocess(&harden(&soft), &doc.word_ids, *mask_budget, stream)?;
                (d, TargetMode::FullSequence, true)
            }
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

/// Stage-1 denoising with the policy's masks and the triangular lr schedule.
/// Neural policies get one precomputed mask per document (doc-keyed
/// streams); samplers draw a fresh mask per visit.
pub fn intermediate_pretrain(
    lm_init: &ParamStore,
    policy: &MaskPolicy,
    documents: &[Document],
    cfg: &StageConfig,
    seed: u64,
) -> Result<(ParamStore, StageReport), TrainError> {
    cfg.validate()?;
    if documents.is_empty() {
        return Err(TrainError::EmptyInput("corpus"));
    }
    let mut store = lm_init.clone();
    let mut report = StageReport::default();
    let mut stream = RngStream::new(seed, "stage1");

    let precomputed: Option<Vec<(MaskDecisions, TargetMode, bool)>> = if policy.is_neural() {
        Some(
            documents
                .iter()
                .map(|doc| {
                    let mut doc_stream = stream.child(&format!("mask{}", doc.doc_id));
                    policy.mask_plan(doc, &mut doc_stream)
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };

    for step in 0..cfg.total_updates {
        let lr = triangular_lr(step, cfg.total_updates, cfg.warmup_fraction, cfg.lr);
        let graph = Graph::new();
        let vars = store.bind(&graph);
        let lm = LmModel::bind(&vars)?;
        let mut losses: Vec<Var> = Vec::with_capacity(cfg.batch_size);
        let mut attempts = 0usize;
        while losses.len() < cfg.batch_size {
            attempts += 1;
            if attempts > 20 * cfg.batch_size {
                return Err(TrainError::Config(
                    "policy produced no usable masked pairs".into(),
                ));
            }
            let di = stream.gen_range(documents.len());
            let doc = &documents[di];
            let (d, mode, infill) = match &precomputed {
                Some(table) => table[di].clone(),
                None => policy.mask_plan(doc, &mut stream)?,
            };
            let pair = masked_pair(&doc.tokens, &d, mode, infill)?;
            if pair.x_tar.is_empty() {
                continue;
            }
            losses.push(lm.denoise_loss(SourceInput::Ids(&pair.x_src), &pair.x_tar)?);
        }
        let mut total = losses[0].clone();
        for l in &losses[1..] {
            total = total.add(l)?;
        }
        let loss = total.scalar_mul(1.0 / losses.len() as f64);
        let refs: Vec<&Var> = vars.values().collect();
        let grads = backward(&loss, &refs)?;
        let update: IndexMap<String, Tensor> = vars
            .keys()
            .cloned()
            .zip(grads.iter().map(Var::value))
            .collect();
        store.sgd_step(lr, &update)?;
        report.losses.push(loss.item()?);
        report.lrs.push(lr);
    }
    Ok((store, report))
}

// ---------------------------------------------------------------------------
// Stage 2: fine-tuning and evaluation

/// Fine-tunes on the (source, target) pairs at a constant learning rate,
/// after keeping `train_fraction` of the pairs.
pub fn finetune(
    lm_init: &ParamStore,
    triplets: &[Triplet],
    cfg: &StageConfig,
    seed: u64,
) -> Result<ParamStore, TrainError> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(TrainError::EmptyInput("fine-tuning pairs"));
    }
    let mut stream = RngStream::new(seed, "stage2");
    let n_keep = ((cfg.train_fraction * triplets.len() as f64).round() as usize)
        .clamp(1, triplets.len());
    let kept: Vec<usize> = if n_keep == triplets.len() {
        (0..triplets.len()).collect()
    } else {
        stream.sample_distinct(triplets.len(), n_keep)
    };

    let mut store = lm_init.clone();
    let mut order = kept;
    for _ in 0..cfg.max_epochs {
        stream.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let graph = Graph::new();
            let vars = store.bind(&graph);
            let lm = LmModel::bind(&vars)?;
            let mut total: Option<Var> = None;
            for &i in chunk {
                let loss = lm.seq2seq_loss(&triplets[i].source, &triplets[i].target)?;
                total = Some(match total {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let loss = total
                .expect("non-empty chunk")
                .scalar_mul(1.0 / chunk.len() as f64);
            let refs: Vec<&Var> = vars.values().collect();
            let grads = backward(&loss, &refs)?;
            let update: IndexMap<String, Tensor> = vars
                .keys()
                .cloned()
                .zip(grads.iter().map(Var::value))
                .collect();
            store.sgd_step(cfg.lr, &update)?;
        }
    }
    Ok(store)
}

fn normalize_answer(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(String::from)
        .collect()
}

/// Exact match after lowercasing, stripping punctuation, and dropping
/// articles.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub em: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub per_seed: Vec<SeedScore>,
    pub em_mean: f64,
    pub em_std: f64,
}

impl EvalReport {
    pub fn from_scores(split: &str, per_seed: Vec<SeedScore>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().map(|s| s.em).sum::<f64>() / n;
        let var = per_seed
            .iter()
            .map(|s| (s.em - mean).powi(2))
            .sum::<f64>()
            / n;
        Self {
            split: split.to_string(),
            per_seed,
            em_mean: mean,
            em_std: var.sqrt(),
        }
    }
}

pub const EVAL_BEAM_WIDTH: usize = 4;
pub const EVAL_MAX_LEN: usize = 20;

/// Decodes every question closed-book (beam 4, max length 20) and scores
/// exact match in percent, aggregated over the per-seed models.
pub fn evaluate(
    models: &[(u64, ParamStore)],
    qa: &[Triplet],
    vocab: &Vocab,
    split: &str,
) -> Result<EvalReport, TrainError> {
    if models.is_empty() || qa.is_empty() {
        return Err(TrainError::EmptyInput("evaluation input"));
    }
    let mut per_seed = Vec::with_capacity(models.len());
    for (seed, store) in models {
        let mut hits = 0usize;
        for q in qa {
            let graph = Graph::new();
            let vars = store.bind(&graph);
            let lm = LmModel::bind(&vars)?;
            let pred = lm.decode(&q.source, DecodeMode::Beam(EVAL_BEAM_WIDTH), EVAL_MAX_LEN)?;
            let pred = vocab.surfaces(&pred).join(" ");
            let gold = vocab.surfaces(&q.target).join(" ");
            if exact_match(&pred, &gold) {
                hits += 1;
            }
        }
        per_seed.push(SeedScore {
            seed: *seed,
            em: 100.0 * hits as f64 / qa.len() as f64,
        });
    }
    Ok(EvalReport::from_scores(split, per_seed))
}
