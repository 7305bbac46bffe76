//! The tiny denoising sequence-to-sequence LM: GRU encoder, GRU decoder with
//! dot-product attention over encoder states, shared embedding table, untied
//! output projection.
//!
//! Losses are teacher-forced mean token cross-entropies of generating the
//! target with a BOS prefix and EOS suffix. The source side accepts either
//! token ids or a precomputed embedding matrix, so relaxed mask decisions can
//! flow gradients into a policy.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS_ID, EOS_ID};
use crate::diffcore::{Graph, ParamStore, RngStream, StoreError, Tensor, Var};
use crate::nnblocks::{bound_var, embed, GruCell, Linear, NnError, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_embed: usize,
    pub hidden: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 400,
            d_embed: 16,
            hidden: 32,
        }
    }
}

/// Fresh LM parameters; checkpoint kind is `"lm"`.
pub fn init_lm_params(cfg: &LmConfig, seed: u64) -> Result<ParamStore, StoreError> {
    let mut store = ParamStore::new("lm", seed);
    let mut stream = RngStream::new(seed, "lm-init");
    let bound = 1.0 / (cfg.d_embed as f64).sqrt();
    store.insert(
        "embed",
        crate::nnblocks::uniform_init(&[cfg.vocab, cfg.d_embed], bound, &mut stream),
    )?;
    GruCell::init(&mut store, "enc", cfg.d_embed, cfg.hidden, &mut stream)?;
    GruCell::init(
        &mut store,
        "dec",
        cfg.d_embed + cfg.hidden,
        cfg.hidden,
        &mut stream,
    )?;
    Linear::init(&mut store, "proj", 2 * cfg.hidden, cfg.vocab, &mut stream)?;
    Ok(store)
}

/// Source side of a loss: hard token ids, or an embedding matrix (the relaxed
/// path used by the meta inner loop).
pub enum SourceInput<'a> {
    Ids(&'a [TokenId]),
    Embeddings(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// LM parameters bound into one graph.
pub struct LmModel {
    pub embed: Var,
    pub encoder: GruCell,
    pub decoder: GruCell,
    pub proj: Linear,
}

struct Encoded {
    states: Var,
    last: Var,
}

impl LmModel {
    pub fn bind(map: &IndexMap<String, Var>) -> Result<Self, NnError> {
        let enc_wh = bound_var(map, "enc.wh")?;
        let hidden = enc_wh.shape()[0];
        Ok(Self {
            embed: bound_var(map, "embed")?,
            encoder: GruCell::bind(map, "enc", hidden)?,
            decoder: GruCell::bind(map, "dec", hidden)?,
            proj: Linear::bind(map, "proj")?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.encoder.hidden
    }

    fn graph(&self) -> Graph {
        self.embed.graph().clone()
    }

    fn source_embeddings(&self, source: SourceInput<'_>) -> Result<Var, NnError> {
        match source {
            SourceInput::Ids(ids) => embed(&self.embed, ids),
            SourceInput::Embeddings(e) => Ok(e),
        }
    }

    fn encode(&self, emb: &Var) -> Result<Encoded, NnError> {
        let s = emb.shape()[0];
        if s == 0 {
            return Err(NnError::EmptySequence("source"));
        }
        let graph = self.graph();
        let mut h = graph.constant(Tensor::zeros(&[1, self.hidden()]));
        let mut states = Vec::with_capacity(s);
        for i in 0..s {
            let row = emb.slice(0, i, 1)?;
            h = self.encoder.step(&row, &h)?;
            states.push(h.clone());
        }
        let refs: Vec<&Var> = states.iter().collect();
        let states = if refs.len() == 1 {
            states[0].clone()
        } else {
            graph.concat(&refs, 0)?
        };
        Ok(Encoded { states, last: h })
    }

    /// One decoder step: input-fed GRU, dot-product attention, projection.
    fn decode_step(
        &self,
        prev_emb: &Var,
        h: &Var,
        ctx: &Var,
        enc_states: &Var,
    ) -> Result<(Var, Var, Var), NnError> {
        let graph = self.graph();
        let input = graph.concat(&[prev_emb, ctx], 1)?;
        let h_next = self.decoder.step(&input, h)?;
        let scores = h_next.matmul(enc_states, false, true)?;
        let attn = scores.softmax()?;
        let ctx_next = attn.matmul(enc_states, false, false)?;
        let logits = self.proj.apply(&graph.concat(&[&h_next, &ctx_next], 1)?)?;
        Ok((logits, h_next, ctx_next))
    }

    /// Teacher-forced logits for generating `target` (BOS-prefixed inputs):
    /// one row per step, including the EOS step.
    fn teacher_logits(&self, source: SourceInput<'_>, target: &[TokenId]) -> Result<Var, NnError> {
        if target.is_empty() {
            return Err(NnError::EmptySequence("target"));
        }
        let emb = self.source_embeddings(source)?;
        let enc = self.encode(&emb)?;
        let graph = self.graph();

        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(BOS_ID);
        inputs.extend_from_slice(target);

        let mut h = enc.last;
        let mut ctx = graph.constant(Tensor::zeros(&[1, self.hidden()]));
        let mut rows = Vec::with_capacity(inputs.len());
        for &tok in &inputs {
            let prev = embed(&self.embed, &[tok])?;
            let (logits, h2, ctx2) = self.decode_step(&prev, &h, &ctx, &enc.states)?;
            rows.push(logits);
            h = h2;
            ctx = ctx2;
        }
        let refs: Vec<&Var> = rows.iter().collect();
        Ok(if refs.len() == 1 {
            rows[0].clone()
        } else {
            graph.concat(&refs, 0)?
        })
    }

    fn sequence_loss(&self, source: SourceInput<'_>, target: &[TokenId]) -> Result<Var, NnError> {
        let logits = self.teacher_logits(source, target)?;
        let mut wanted = Vec::with_capacity(target.len() + 1);
        wanted.extend_from_slice(target);
        wanted.push(EOS_ID);
        let per_token = crate::nnblocks::softmax_xent_rows(&logits, &wanted)?;
        Ok(per_token.mean()?)
    }

    /// Mean token cross-entropy of reconstructing `x_tar` from the disturbed
    /// source.
    pub fn denoise_loss(&self, source: SourceInput<'_>, x_tar: &[TokenId]) -> Result<Var, NnError> {
        self.sequence_loss(source, x_tar)
    }

    /// Mean token cross-entropy of predicting `t` given `s`.
    pub fn seq2seq_loss(&self, s: &[TokenId], t: &[TokenId]) -> Result<Var, NnError> {
        self.sequence_loss(SourceInput::Ids(s), t)
    }

    /// Decodes an output for `s`. Greedy picks the argmax token per step;
    /// beam search keeps `width` hypotheses ranked by summed log-probability
    /// and returns the best finished one under length penalty 1.0. EOS is
    /// banned on the first step (minimum length 1), and outputs never exceed
    /// `max_len` tokens.
    pub fn decode(
        &self,
        s: &[TokenId],
        mode: DecodeMode,
        max_len: usize,
    ) -> Result<Vec<TokenId>, NnError> {
        if s.is_empty() {
            return Err(NnError::EmptySequence("source"));
        }
        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(w) => w.max(1),
        };
        let emb = self.source_embeddings(SourceInput::Ids(s))?;
        let enc = self.encode(&emb)?;
        let graph = self.graph();
        let ctx0 = graph.constant(Tensor::zeros(&[1, self.hidden()]));

        struct Hyp {
            tokens: Vec<TokenId>,
            logp: f64,
            h: Var,
            ctx: Var,
        }
        // Length penalty 1.0: rank by mean log-probability, counting EOS.
        fn score(logp: f64, len: usize, finished: bool) -> f64 {
            logp / (len + usize::from(finished)) as f64
        }

        let mut active = vec![Hyp {
            tokens: Vec::new(),
            logp: 0.0,
            h: enc.last.clone(),
            ctx: ctx0,
        }];
        let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();

        for step in 0..max_len {
            if active.is_empty() {
                break;
            }
            // (candidate logp, hyp index, token, state)
            let mut candidates: Vec<(f64, usize, TokenId, Var, Var)> = Vec::new();
            for (i, hyp) in active.iter().enumerate() {
                let prev_tok = *hyp.tokens.last().unwrap_or(&BOS_ID);
                let prev = embed(&self.embed, &[prev_tok])?;
                let (logits, h2, ctx2) = self.decode_step(&prev, &hyp.h, &hyp.ctx, &enc.states)?;
                let logprobs = log_softmax(logits.value().data());
                for (tok, &lp) in logprobs.iter().enumerate() {
                    if step == 0 && tok as TokenId == EOS_ID {
                        continue;
                    }
                    candidates.push((hyp.logp + lp, i, tok as TokenId, h2.clone(), ctx2.clone()));
                }
            }
            candidates
                .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
            let slots = width - finished.len().min(width - 1);
            let mut next = Vec::with_capacity(slots);
            for (logp, i, tok, h2, ctx2) in candidates.into_iter().take(slots) {
                if tok == EOS_ID {
                    finished.push((active[i].tokens.clone(), score(logp, active[i].tokens.len(), true)));
                } else {
                    let mut tokens = active[i].tokens.clone();
                    tokens.push(tok);
                    next.push(Hyp {
                        tokens,
                        logp,
                        h: h2,
                        ctx: ctx2,
                    });
                }
            }
            active = next;
            if finished.len() >= width {
                break;
            }
        }
        for hyp in active {
            finished.push((hyp.tokens.clone(), score(hyp.logp, hyp.tokens.len(), false)));
        }
        finished.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        Ok(finished
            .into_iter()
            .next()
            .map(|(tokens, _)| tokens)
            .unwrap_or_default())
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MASK_ID;
    use crate::diffcore::{backward, check_gradients, DiffError};
    use crate::masking::{apply_mask, MaskDecisions};
    use crate::nnblocks::embed_mixture;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            vocab: 12,
            d_embed: 4,
            hidden: 4,
        }
    }

    fn model_for(store: &ParamStore, graph: &Graph) -> (IndexMap<String, Var>, LmModel) {
        let map = store.bind(graph);
        let model = LmModel::bind(&map).unwrap();
        (map, model)
    }

    fn sgd_on<F>(store: &mut ParamStore, steps: usize, lr: f64, mut loss_of: F) -> f64
    where
        F: FnMut(&LmModel) -> Var,
    {
        let mut last = f64::INFINITY;
        for _ in 0..steps {
            let graph = Graph::new();
            let (map, model) = model_for(store, &graph);
            let loss = loss_of(&model);
            last = loss.value().item().unwrap();
            let wrt: Vec<&Var> = map.values().collect();
            let grads = backward(&loss, &wrt).unwrap();
            let named: IndexMap<String, Tensor> = map
                .keys()
                .cloned()
                .zip(grads.iter().map(|g| g.value().clone()))
                .collect();
            store.sgd_step(lr, &named).unwrap();
        }
        last
    }

    #[test]
    fn zeroed_projection_gives_uniform_loss() {
        let cfg = tiny_cfg();
        let mut store = init_lm_params(&cfg, 0).unwrap();
        store
            .set("proj.w", Tensor::zeros(&[2 * cfg.hidden, cfg.vocab]))
            .unwrap();
        store.set("proj.b", Tensor::zeros(&[1, cfg.vocab])).unwrap();
        let graph = Graph::new();
        let (_, model) = model_for(&store, &graph);
        let ln_v = (cfg.vocab as f64).ln();
        let d = model
            .denoise_loss(SourceInput::Ids(&[5, 6, 7]), &[5, 6, 7])
            .unwrap();
        assert!((d.value().item().unwrap() - ln_v).abs() < 1e-9);
        let s = model.seq2seq_loss(&[5, 6], &[7]).unwrap();
        assert!((s.value().item().unwrap() - ln_v).abs() < 1e-9);
    }

    #[test]
    fn id_path_equals_embedding_path_for_hard_decisions() {
        let store = init_lm_params(&tiny_cfg(), 3).unwrap();
        let graph = Graph::new();
        let (map, model) = model_for(&store, &graph);
        let x: Vec<TokenId> = vec![5, 6, 7, 8, 9, 6, 5];
        let d = MaskDecisions::new(vec![0, 1, 1, 0, 0, 1, 0]).unwrap();

        let masked = apply_mask(&x, &d, false).unwrap();
        let via_ids = model
            .denoise_loss(SourceInput::Ids(&masked), &x)
            .unwrap()
            .value()
            .item()
            .unwrap();

        let soft: Vec<f64> = d.as_slice().iter().map(|&v| f64::from(v)).collect();
        let soft_d = graph.constant(Tensor::new(vec![x.len(), 1], soft).unwrap());
        let mixed = embed_mixture(&map["embed"], &x, MASK_ID, &soft_d).unwrap();
        let via_emb = model
            .denoise_loss(SourceInput::Embeddings(mixed), &x)
            .unwrap()
            .value()
            .item()
            .unwrap();

        let rel = (via_ids - via_emb).abs() / via_ids.abs().max(1e-8);
        assert!(rel <= 1e-12, "rel diff {rel}");
    }

    #[test]
    fn denoise_gradcheck_over_parameters() {
        let store = init_lm_params(
            &LmConfig {
                vocab: 10,
                d_embed: 4,
                hidden: 4,
            },
            7,
        )
        .unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let src = [4u32, 9, 1, 5, 4];
        let tar = [4u32, 9, 8, 5];
        let report = check_gradients(
            |_, vs| {
                let map: IndexMap<String, Var> =
                    names.iter().cloned().zip(vs.iter().cloned()).collect();
                let model =
                    LmModel::bind(&map).map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                model
                    .denoise_loss(SourceInput::Ids(&src), &tar)
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mixture_gradcheck_wrt_soft_decisions() {
        let store = init_lm_params(&tiny_cfg(), 11).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let x = [5u32, 6, 7, 8, 9];
        let soft = Tensor::new(vec![5, 1], vec![0.2, 0.8, 0.5, 0.1, 0.65]).unwrap();
        inputs.push(soft);
        let report = check_gradients(
            |_, vs| {
                let map: IndexMap<String, Var> = names
                    .iter()
                    .cloned()
                    .zip(vs[..names.len()].iter().cloned())
                    .collect();
                let model =
                    LmModel::bind(&map).map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                let mixed = embed_mixture(&map["embed"], &x, MASK_ID, &vs[names.len()])
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                model
                    .denoise_loss(SourceInput::Embeddings(mixed), &x)
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn seq2seq_gradcheck_over_parameters() {
        let store = init_lm_params(&tiny_cfg(), 13).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        let report = check_gradients(
            |_, vs| {
                let map: IndexMap<String, Var> =
                    names.iter().cloned().zip(vs.iter().cloned()).collect();
                let model =
                    LmModel::bind(&map).map_err(|e| DiffError::ContractViolation(e.to_string()))?;
                model
                    .seq2seq_loss(&[5, 6, 7], &[8, 9])
                    .map_err(|e| DiffError::ContractViolation(e.to_string()))
            },
            &tensors,
            1e-3,
        )
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn empty_sides_rejected() {
        let store = init_lm_params(&tiny_cfg(), 0).unwrap();
        let graph = Graph::new();
        let (_, model) = model_for(&store, &graph);
        assert!(matches!(
            model.denoise_loss(SourceInput::Ids(&[5]), &[]),
            Err(NnError::EmptySequence("target"))
        ));
        assert!(matches!(
            model.denoise_loss(SourceInput::Ids(&[]), &[5]),
            Err(NnError::EmptySequence("source"))
        ));
        assert!(matches!(
            model.decode(&[], DecodeMode::Greedy, 5),
            Err(NnError::EmptySequence("source"))
        ));
    }

    #[test]
    fn overfits_one_example() {
        let mut store = init_lm_params(
            &LmConfig {
                vocab: 14,
                d_embed: 8,
                hidden: 8,
            },
            21,
        )
        .unwrap();
        let src = [5u32, 1, 7, 8];
        let tar = [5u32, 6, 7, 8];
        let last = sgd_on(&mut store, 500, 0.5, |m| {
            m.denoise_loss(SourceInput::Ids(&src), &tar).unwrap()
        });
        assert!(last < 0.01, "loss {last}");
    }

    #[test]
    fn overfits_eight_examples_below_point_one() {
        let mut store = init_lm_params(
            &LmConfig {
                vocab: 20,
                d_embed: 8,
                hidden: 8,
            },
            23,
        )
        .unwrap();
        let mut stream = RngStream::new(5, "examples");
        let examples: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..8)
            .map(|_| {
                let len = 3 + stream.gen_range(4);
                let x: Vec<TokenId> =
                    (0..len).map(|_| 5 + stream.gen_range(15) as TokenId).collect();
                let mut src = x.clone();
                src[stream.gen_range(len)] = MASK_ID;
                (src, x)
            })
            .collect();
        let last = sgd_on(&mut store, 1000, 0.5, |m| {
            let mut acc: Option<Var> = None;
            for (src, tar) in &examples {
                let l = m
                    .denoise_loss(SourceInput::Ids(src), tar)
                    .unwrap()
                    .scalar_mul(1.0 / 8.0);
                acc = Some(match acc {
                    None => l,
                    Some(a) => a.add(&l).unwrap(),
                });
            }
            acc.unwrap()
        });
        assert!(last < 0.1, "loss {last}");
    }

    #[test]
    fn decode_reproduces_overfit_target() {
        let mut store = init_lm_params(
            &LmConfig {
                vocab: 14,
                d_embed: 8,
                hidden: 8,
            },
            29,
        )
        .unwrap();
        let s = [4u32, 5, 6];
        let t = [9u32, 10, 11];
        sgd_on(&mut store, 400, 0.5, |m| m.seq2seq_loss(&s, &t).unwrap());
        let graph = Graph::new();
        let (_, model) = model_for(&store, &graph);
        assert_eq!(model.decode(&s, DecodeMode::Greedy, 20).unwrap(), t.to_vec());
        assert_eq!(model.decode(&s, DecodeMode::Beam(4), 20).unwrap(), t.to_vec());
    }

    #[test]
    fn beam_one_equals_greedy_on_random_models() {
        let mut stream = RngStream::new(31, "beam-models");
        for trial in 0..100 {
            let store = init_lm_params(&tiny_cfg(), 1000 + trial).unwrap();
            let graph = Graph::new();
            let (_, model) = model_for(&store, &graph);
            let len = 1 + stream.gen_range(6);
            let s: Vec<TokenId> = (0..len).map(|_| 4 + stream.gen_range(8) as TokenId).collect();
            let greedy = model.decode(&s, DecodeMode::Greedy, 8).unwrap();
            let beam = model.decode(&s, DecodeMode::Beam(1), 8).unwrap();
            assert_eq!(greedy, beam, "trial {trial}");
            assert!(greedy.len() <= 8);
        }
    }
}
