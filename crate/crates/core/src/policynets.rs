//! The two learned masking policies: a supervised Bi-LSTM span extractor and
//! a meta-learned convolutional Gumbel policy.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, RngStream, StoreError, Tensor, Var};
use crate::masking::MaskDecisions;
use crate::nnblocks::{
    bound_var, embed, gumbel_softmax_with_noise, sample_gumbel_noise, uniform_init, BiLstm,
    Conv1d, Linear, NnError, TokenId,
};

/// Relaxed per-token mask decisions d̃ ∈ [0,1], shape `T×1`, carried on a
/// graph so gradients flow back into the policy.
pub struct SoftDecisions {
    soft: Var,
}

impl SoftDecisions {
    pub fn new(soft: Var) -> Result<Self, NnError> {
        let shape = soft.shape();
        if shape.len() != 2 || shape[1] != 1 {
            return Err(NnError::LengthMismatch {
                have: *shape.last().unwrap_or(&0),
                want: 1,
            });
        }
        if let Some((index, &value)) = soft
            .value()
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(NnError::SoftDecisionOutOfRange { index, value });
        }
        Ok(Self { soft })
    }

    pub fn var(&self) -> &Var {
        &self.soft
    }

    pub fn len(&self) -> usize {
        self.soft.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        self.soft.value().data().to_vec()
    }
}

/// Discretizes d̃ at threshold 0.5.
pub fn harden(soft: &SoftDecisions) -> MaskDecisions {
    MaskDecisions::from_flags(&soft.values().iter().map(|&v| v >= 0.5).collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// Supervised span extractor

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupPolicyConfig {
    pub vocab: usize,
    pub d_embed: usize,
    pub hidden: usize,
    /// Maximum candidate span length for ranking and inference.
    pub max_span_len: usize,
}

impl Default for SupPolicyConfig {
    fn default() -> Self {
        Self {
            vocab: 400,
            d_embed: 16,
            hidden: 16,
            max_span_len: 10,
        }
    }
}

const SUP_LAYERS: usize = 2;

/// Fresh extractor parameters; checkpoint kind is `"supervised-policy"`.
pub fn init_supervised_params(cfg: &SupPolicyConfig, seed: u64) -> Result<ParamStore, StoreError> {
    let mut store = ParamStore::new("supervised-policy", seed);
    let mut stream = RngStream::new(seed, "sup-init");
    let bound = 1.0 / (cfg.d_embed as f64).sqrt();
    store.insert(
        "embed",
        uniform_init(&[cfg.vocab, cfg.d_embed], bound, &mut stream),
    )?;
    BiLstm::init(&mut store, "enc", cfg.d_embed, cfg.hidden, SUP_LAYERS, &mut stream)?;
    Linear::init(&mut store, "start", 2 * cfg.hidden, 1, &mut stream)?;
    Linear::init(&mut store, "end", 2 * cfg.hidden, 1, &mut stream)?;
    Ok(store)
}

pub struct SupervisedPolicy {
    pub embed: Var,
    pub encoder: BiLstm,
    pub start_head: Linear,
    pub end_head: Linear,
}

impl SupervisedPolicy {
    pub fn bind(map: &IndexMap<String, Var>) -> Result<Self, NnError> {
        let hidden = bound_var(map, "enc.l0.fwd.wh")?.shape()[0];
        Ok(Self {
            embed: bound_var(map, "embed")?,
            encoder: BiLstm::bind(map, "enc", hidden, SUP_LAYERS)?,
            start_head: Linear::bind(map, "start")?,
            end_head: Linear::bind(map, "end")?,
        })
    }

    /// Per-position start and end logits, each `T×1`.
    pub fn forward(&self, x: &[TokenId]) -> Result<(Var, Var), NnError> {
        if x.is_empty() {
            return Err(NnError::EmptySequence("sequence"));
        }
        let states = self.encoder.apply(&embed(&self.embed, x)?)?;
        Ok((
            self.start_head.apply(&states)?,
            self.end_head.apply(&states)?,
        ))
    }

    /// Masks exactly one contiguous span: the top-ranked one, or a uniform
    /// draw among the top `min(5, #spans)`.
    pub fn infer_mask(
        &self,
        x: &[TokenId],
        choice: SpanChoice,
        max_span_len: usize,
        stream: &mut RngStream,
    ) -> Result<MaskDecisions, NnError> {
        let (y_st, y_ed) = self.forward(x)?;
        let ranked = rank_spans(y_st.value().data(), y_ed.value().data(), max_span_len);
        let span = match choice {
            SpanChoice::Top1 => &ranked[0],
            SpanChoice::Top5 => &ranked[stream.gen_range(ranked.len().min(5))],
        };
        let mut d = MaskDecisions::zeros(x.len());
        for i in span.start..=span.end {
            d.set(i, true);
        }
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanChoice {
    Top1,
    Top5,
}

/// Candidate span with inclusive endpoints, scored by the sum of its start
/// and end logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanScore {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

/// All spans with `end − start < max_span_len`, sorted by score descending;
/// ties break by (start asc, end asc).
pub fn rank_spans(y_st: &[f64], y_ed: &[f64], max_span_len: usize) -> Vec<SpanScore> {
    let t = y_st.len().min(y_ed.len());
    let mut spans = Vec::new();
    for i in 0..t {
        for j in i..t.min(i + max_span_len) {
            spans.push(SpanScore {
                start: i,
                end: j,
                score: y_st[i] + y_ed[j],
            });
        }
    }
    spans.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    spans
}

// ---------------------------------------------------------------------------
// Meta-learned Gumbel policy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaPolicyConfig {
    pub vocab: usize,
    pub d_embed: usize,
    pub channels: usize,
}

impl Default for MetaPolicyConfig {
    fn default() -> Self {
        Self {
            vocab: 400,
            d_embed: 16,
            channels: 16,
        }
    }
}

/// Fresh meta-policy parameters; checkpoint kind is `"meta-policy"`.
pub fn init_meta_params(cfg: &MetaPolicyConfig, seed: u64) -> Result<ParamStore, StoreError> {
    let mut store = ParamStore::new("meta-policy", seed);
    let mut stream = RngStream::new(seed, "meta-init");
    let bound = 1.0 / (cfg.d_embed as f64).sqrt();
    store.insert(
        "embed",
        uniform_init(&[cfg.vocab, cfg.d_embed], bound, &mut stream),
    )?;
    Conv1d::init(&mut store, "conv", cfg.d_embed, cfg.channels, &mut stream)?;
    Linear::init(&mut store, "fc1", cfg.channels, cfg.channels, &mut stream)?;
    Linear::init(&mut store, "fc2", cfg.channels, 2, &mut stream)?;
    Ok(store)
}

pub struct MetaPolicy {
    pub embed: Var,
    pub conv: Conv1d,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MetaPolicy {
    pub fn bind(map: &IndexMap<String, Var>) -> Result<Self, NnError> {
        Ok(Self {
            embed: bound_var(map, "embed")?,
            conv: Conv1d::bind(map, "conv")?,
            fc1: Linear::bind(map, "fc1")?,
            fc2: Linear::bind(map, "fc2")?,
        })
    }

    /// Two mask/keep logits per token, `T×2`.
    pub fn logits(&self, x: &[TokenId]) -> Result<Var, NnError> {
        if x.is_empty() {
            return Err(NnError::EmptySequence("sequence"));
        }
        let emb = embed(&self.embed, x)?;
        let hidden = self.conv.apply(&emb)?.tanh();
        let hidden = self.fc1.apply(&hidden)?.tanh();
        self.fc2.apply(&hidden)
    }

    /// Relaxed decisions via Gumbel-Softmax with freshly sampled noise.
    pub fn forward(
        &self,
        x: &[TokenId],
        temperature: f64,
        stream: &mut RngStream,
    ) -> Result<SoftDecisions, NnError> {
        let noise = sample_gumbel_noise(x.len(), stream);
        self.forward_with_noise(x, temperature, &noise)
    }

    /// Relaxed decisions with caller-supplied Gumbel noise; deterministic,
    /// used for replay and finite-difference verification.
    pub fn forward_with_noise(
        &self,
        x: &[TokenId],
        temperature: f64,
        noise: &Tensor,
    ) -> Result<SoftDecisions, NnError> {
        let logits = self.logits(x)?;
        SoftDecisions::new(gumbel_softmax_with_noise(&logits, temperature, noise)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradients, DiffError, Graph};

    fn sup_tiny() -> SupPolicyConfig {
        SupPolicyConfig {
            vocab: 15,
            d_embed: 4,
            hidden: 3,
            max_span_len: 10,
        }
    }

    fn meta_tiny() -> MetaPolicyConfig {
        MetaPolicyConfig {
            vocab: 15,
            d_embed: 4,
            channels: 5,
        }
    }

    fn brute_force(y_st: &[f64], y_ed: &[f64], max_span: usize) -> Vec<(usize, usize)> {
        let t = y_st.len();
        let mut all = Vec::new();
        for i in 0..t {
            for j in i..t {
                if j - i < max_span {
                    all.push((i, j, y_st[i] + y_ed[j]));
                }
            }
        }
        all.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        all.into_iter().map(|(i, j, _)| (i, j)).collect()
    }

    #[test]
    fn single_token_has_single_span() {
        let spans = rank_spans(&[0.3], &[-0.2], 10);
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (0, 0));
    }

    #[test]
    fn paper_ranking_example() {
        let spans = rank_spans(&[2.0, 0.0], &[0.0, 3.0], 2);
        assert_eq!((spans[0].start, spans[0].end), (0, 1));
        assert_eq!(spans[0].score, 5.0);
        assert_eq!(spans.len(), 3);
    }

    #[test]
    fn zero_logits_tie_break_is_first_span() {
        let spans = rank_spans(&[0.0; 3], &[0.0; 3], 10);
        assert_eq!((spans[0].start, spans[0].end), (0, 0));
        // full tie order: (start asc, end asc)
        let order: Vec<(usize, usize)> = spans.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn ranking_matches_brute_force_up_to_t12() {
        let mut stream = RngStream::new(3, "spans");
        for t in 1..=12usize {
            for _ in 0..50 {
                let y_st: Vec<f64> = (0..t).map(|_| stream.standard_normal()).collect();
                let y_ed: Vec<f64> = (0..t).map(|_| stream.standard_normal()).collect();
                for max_span in [1, 3, 10] {
                    let got: Vec<(usize, usize)> = rank_spans(&y_st, &y_ed, max_span)
                        .iter()
                        .map(|s| (s.start, s.end))
                        .collect();
                    assert_eq!(got, brute_force(&y_st, &y_ed, max_span));
                }
            }
        }
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let cfg = sup_tiny();
        let mut store = init_supervised_params(&cfg, 1).unwrap();
        store
            .set("start.w", Tensor::zeros(&[2 * cfg.hidden, 1]))
            .unwrap();
        store.set("start.b", Tensor::zeros(&[1, 1])).unwrap();
        store
            .set("end.w", Tensor::zeros(&[2 * cfg.hidden, 1]))
            .unwrap();
        store.set("end.b", Tensor::zeros(&[1, 1])).unwrap();
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = SupervisedPolicy::bind(&map).unwrap();
        let (y_st, y_ed) = policy.forward(&[3, 4, 5]).unwrap();
        assert!(y_st.value().data().iter().all(|&v| v == 0.0));
        assert!(y_ed.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sup_forward_gradcheck() {
        let store = init_supervised_params(&sup_tiny(), 5).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let x = [3u32, 9, 4, 12, 7, 3];
        let mut ws = RngStream::new(8, "weights");
        let w_st = uniform_init(&[6, 1], 1.0, &mut ws);
        let w_ed = uniform_init(&[6, 1], 1.0, &mut ws);
        let report = check_gradients(
            |g, vs| {
                let map: IndexMap<String, Var> =
                    names.iter().cloned().zip(vs.iter().cloned()).collect();
                let policy = SupervisedPolicy::bind(&map)
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                let (y_st, y_ed) = policy
                    .forward(&x)
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                let a = y_st.mul(&g.constant(w_st.clone()))?.sum();
                let b = y_ed.mul(&g.constant(w_ed.clone()))?.sum();
                Ok(a.add(&b)?)
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn infer_mask_is_one_contiguous_span() {
        let store = init_supervised_params(&sup_tiny(), 9).unwrap();
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = SupervisedPolicy::bind(&map).unwrap();
        let mut stream = RngStream::new(4, "infer");
        for len in [1usize, 2, 5, 14] {
            let x: Vec<TokenId> = (0..len).map(|_| 3 + stream.gen_range(10) as TokenId).collect();
            for choice in [SpanChoice::Top1, SpanChoice::Top5] {
                let d = policy.infer_mask(&x, choice, 10, &mut stream).unwrap();
                let masked: Vec<usize> = d.masked_positions().collect();
                assert!(!masked.is_empty());
                assert!(masked.len() <= 10);
                assert!(masked.windows(2).all(|w| w[1] == w[0] + 1), "contiguous");
            }
        }
    }

    #[test]
    fn top5_sampling_is_uniform_over_ties() {
        // Zero heads: all spans tie, so the top 5 are the first five in tie
        // order: (0,0), (0,1), (1,1), (1,2), (2,2) at T=3, max_span 2.
        let cfg = sup_tiny();
        let mut store = init_supervised_params(&cfg, 1).unwrap();
        for name in ["start.w", "end.w"] {
            store.set(name, Tensor::zeros(&[2 * cfg.hidden, 1])).unwrap();
        }
        for name in ["start.b", "end.b"] {
            store.set(name, Tensor::zeros(&[1, 1])).unwrap();
        }
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = SupervisedPolicy::bind(&map).unwrap();
        let mut stream = RngStream::new(6, "top5");
        let mut counts: std::collections::HashMap<Vec<usize>, usize> = Default::default();
        let draws = 10_000;
        for _ in 0..draws {
            let d = policy.infer_mask(&[3, 4, 5], SpanChoice::Top5, 2, &mut stream).unwrap();
            *counts.entry(d.masked_positions().collect()).or_default() += 1;
        }
        assert_eq!(counts.len(), 5);
        for (span, &c) in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() <= 0.02, "span {span:?} frequency {freq}");
        }
    }

    #[test]
    fn top5_with_three_candidates_stays_in_set() {
        let store = init_supervised_params(&sup_tiny(), 12).unwrap();
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = SupervisedPolicy::bind(&map).unwrap();
        let mut stream = RngStream::new(7, "top5-three");
        // T=2, max_span 2 → spans (0,0), (0,1), (1,1)
        let allowed: std::collections::HashSet<Vec<usize>> =
            [vec![0], vec![0, 1], vec![1]].into_iter().collect();
        for _ in 0..500 {
            let d = policy.infer_mask(&[3, 4], SpanChoice::Top5, 2, &mut stream).unwrap();
            assert!(allowed.contains(&d.masked_positions().collect::<Vec<_>>()));
        }
    }

    #[test]
    fn meta_forward_outputs_open_interval() {
        let store = init_meta_params(&meta_tiny(), 3).unwrap();
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = MetaPolicy::bind(&map).unwrap();
        let mut stream = RngStream::new(0, "meta");
        let soft = policy.forward(&[3, 4, 5, 6], 1.0, &mut stream).unwrap();
        assert_eq!(soft.len(), 4);
        assert!(soft.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn strongly_negative_logits_saturate_low() {
        let cfg = meta_tiny();
        let mut store = init_meta_params(&cfg, 3).unwrap();
        store.set("fc2.w", Tensor::zeros(&[cfg.channels, 2])).unwrap();
        store
            .set("fc2.b", Tensor::new(vec![1, 2], vec![0.0, -1000.0]).unwrap())
            .unwrap();
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = MetaPolicy::bind(&map).unwrap();
        let mut stream = RngStream::new(1, "saturate");
        for _ in 0..20 {
            let soft = policy.forward(&[5, 6, 7], 1.0, &mut stream).unwrap();
            assert!(soft.values().iter().all(|&v| v < 1e-6));
        }
    }

    #[test]
    fn meta_gradcheck_with_frozen_noise() {
        let store = init_meta_params(&meta_tiny(), 17).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let x = [3u32, 8, 12, 5];
        let mut ns = RngStream::new(2, "noise");
        let noise = sample_gumbel_noise(x.len(), &mut ns);
        let report = check_gradients(
            |_, vs| {
                let map: IndexMap<String, Var> =
                    names.iter().cloned().zip(vs.iter().cloned()).collect();
                let policy = MetaPolicy::bind(&map)
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                let soft = policy
                    .forward_with_noise(&x, 1.0, &noise)
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                Ok(soft.var().sum())
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn frozen_noise_is_deterministic() {
        let store = init_meta_params(&meta_tiny(), 19).unwrap();
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = MetaPolicy::bind(&map).unwrap();
        let mut ns = RngStream::new(3, "noise");
        let noise = sample_gumbel_noise(3, &mut ns);
        let a = policy.forward_with_noise(&[4, 5, 6], 0.7, &noise).unwrap();
        let b = policy.forward_with_noise(&[4, 5, 6], 0.7, &noise).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn harden_threshold_and_idempotence() {
        let graph = Graph::new();
        let soft = SoftDecisions::new(
            graph.constant(Tensor::new(vec![3, 1], vec![0.49, 0.5, 0.51]).unwrap()),
        )
        .unwrap();
        let d = harden(&soft);
        assert_eq!(d.as_slice(), &[0, 1, 1]);

        let rehard = harden(
            &SoftDecisions::new(
                graph.constant(Tensor::new(
                    vec![3, 1],
                    d.as_slice().iter().map(|&v| f64::from(v)).collect(),
                )
                .unwrap()),
            )
            .unwrap(),
        );
        assert_eq!(rehard, d);
    }

    #[test]
    fn saturated_policy_hardening_preserves_mask_rate() {
        let cfg = meta_tiny();
        let mut store = init_meta_params(&cfg, 23).unwrap();
        // Scale the output layer so the policy is near-deterministic.
        for name in ["fc2.w", "fc2.b"] {
            let scaled = {
                let t = store.get(name).unwrap();
                let data: Vec<f64> = t.data().iter().map(|v| v * 50.0).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            };
            store.set(name, scaled).unwrap();
        }
        let graph = Graph::new();
        let map = store.bind(&graph);
        let policy = MetaPolicy::bind(&map).unwrap();
        let mut stream = RngStream::new(4, "rate");
        let mut soft_sum = 0.0;
        let mut hard_sum = 0.0;
        let mut n = 0.0;
        for _ in 0..1000 {
            let len = 5 + stream.gen_range(10);
            let x: Vec<TokenId> = (0..len).map(|_| 3 + stream.gen_range(12) as TokenId).collect();
            let soft = policy.forward(&x, 0.5, &mut stream).unwrap();
            let hard = harden(&soft);
            soft_sum += soft.values().iter().sum::<f64>();
            hard_sum += hard.count_masked() as f64;
            n += len as f64;
        }
        assert!(
            (soft_sum / n - hard_sum / n).abs() <= 0.05,
            "soft mean {} vs hard mean {}",
            soft_sum / n,
            hard_sum / n
        );
    }
}
