//! Neural building blocks shared by the policies and the language model:
//! embeddings, linear maps, 1-D convolution, GRU/LSTM cells, a 2-layer
//! Bi-LSTM, Gumbel-Softmax, and cross-entropy.
//!
//! Every block is a pure function of graph [`Var`]s, so gradients (including
//! second-order ones) flow through all of them. Parameters follow one
//! convention: `Block::init` writes freshly initialized tensors into a
//! [`ParamStore`] under a name prefix, `Block::bind` picks the corresponding
//! graph vars back out of a bound store.

mod recurrent;

pub use recurrent::{BiLstm, GruCell, LstmCell};

use indexmap::IndexMap;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, RngStream, StoreError, Tensor, Var};

/// Token identifier; every id used anywhere must be below the vocab size.
pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("{0}: empty sequence")]
    EmptySequence(&'static str),
    #[error("soft decision {value} at index {index} outside [0, 1]")]
    SoftDecisionOutOfRange { index: usize, value: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("parameter {0} missing from bound store")]
    MissingParam(String),
    #[error("sequence length {have} does not match decisions length {want}")]
    LengthMismatch { have: usize, want: usize },
}

pub(crate) fn bound_var(map: &IndexMap<String, Var>, name: &str) -> Result<Var, NnError> {
    map.get(name)
        .cloned()
        .ok_or_else(|| NnError::MissingParam(name.to_string()))
}

/// Uniform(-bound, bound) tensor.
pub(crate) fn uniform_init(
    shape: &[usize],
    bound: f64,
    stream: &mut RngStream,
) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| (2.0 * stream.uniform01() - 1.0) * bound)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Constant one-hot matrix with row `i` hot at `ids[i]`.
pub fn one_hot_rows(
    graph: &Graph,
    ids: &[TokenId],
    width: usize,
) -> Result<Var, NnError> {
    let mut data = vec![0.0; ids.len() * width];
    for (i, id) in ids.iter().enumerate() {
        let idx = *id as usize;
        if idx >= width {
            return Err(NnError::TokenOutOfRange {
                id: *id,
                vocab: width,
            });
        }
        data[i * width + idx] = 1.0;
    }
    Ok(graph.constant(Tensor::new(vec![ids.len(), width], data)?))
}

/// Repeats a `[1, n]` row `rows` times via a ones-column product.
pub(crate) fn broadcast_rows(row: &Var, rows: usize) -> Result<Var, DiffError> {
    if rows == 1 {
        return Ok(row.clone());
    }
    let ones = row.graph().constant(Tensor::full(&[rows, 1], 1.0));
    ones.matmul(row, false, false)
}

/// Embedding lookup: row `i` of the output is `table[ids[i]]`.
///
/// `table` is `V×d_e`; the output is `T×d_e` (possibly `0×d_e`). Gradient
/// multiplicity for repeated ids falls out of the one-hot product.
pub fn embed(table: &Var, ids: &[TokenId]) -> Result<Var, NnError> {
    let vocab = table.shape()[0];
    let hot = one_hot_rows(table.graph(), ids, vocab)?;
    Ok(hot.matmul(table, false, false)?)
}

/// Soft-masked embedding: row `i` is
/// `(1−d̃ᵢ)·table[ids[i]] + d̃ᵢ·table[mask_id]`.
///
/// `soft_d` is a `T×1` graph var with values in `[0, 1]`; the output is
/// differentiable in both `soft_d` and the table.
pub fn embed_mixture(
    table: &Var,
    ids: &[TokenId],
    mask_id: TokenId,
    soft_d: &Var,
) -> Result<Var, NnError> {
    let t = ids.len();
    if soft_d.shape() != [t, 1] {
        return Err(NnError::LengthMismatch {
            have: soft_d.numel(),
            want: t,
        });
    }
    for (i, v) in soft_d.value().data().iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(NnError::SoftDecisionOutOfRange {
                index: i,
                value: *v,
            });
        }
    }
    let vocab = table.shape()[0];
    if (mask_id as usize) >= vocab {
        return Err(NnError::TokenOutOfRange {
            id: mask_id,
            vocab,
        });
    }
    let selected = embed(table, ids)?;
    let mask_row = table.slice(0, mask_id as usize, 1)?;
    let mask_full = broadcast_rows(&mask_row, t)?;
    let d_e = table.shape()[1];
    let ones_row = table.graph().constant(Tensor::full(&[1, d_e], 1.0));
    let d_full = soft_d.matmul(&ones_row, false, false)?;
    let delta = mask_full.sub(&selected)?;
    Ok(selected.add(&d_full.mul(&delta)?)?)
}

/// Affine map `x·W + b` with `W: in×out`, `b: 1×out`, `x: m×in`.
#[derive(Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn init(
        store: &mut crate::diffcore::ParamStore,
        prefix: &str,
        inp: usize,
        out: usize,
        stream: &mut RngStream,
    ) -> Result<(), StoreError> {
        let bound = 1.0 / (inp as f64).sqrt();
        store.insert(&format!("{prefix}.w"), uniform_init(&[inp, out], bound, stream))?;
        store.insert(&format!("{prefix}.b"), Tensor::zeros(&[1, out]))?;
        Ok(())
    }

    pub fn bind(map: &IndexMap<String, Var>, prefix: &str) -> Result<Self, NnError> {
        Ok(Self {
            w: bound_var(map, &format!("{prefix}.w"))?,
            b: bound_var(map, &format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, x: &Var) -> Result<Var, NnError> {
        let rows = x.shape()[0];
        let wx = x.matmul(&self.w, false, false)?;
        Ok(wx.add(&broadcast_rows(&self.b, rows)?)?)
    }
}

/// Width-3 same-padded 1-D convolution over a `T×in` sequence.
///
/// One weight matrix per tap: `k_prev`, `k_center`, `k_next` are `in×out`.
#[derive(Clone)]
pub struct Conv1d {
    pub k_prev: Var,
    pub k_center: Var,
    pub k_next: Var,
    pub b: Var,
}

impl Conv1d {
    pub fn init(
        store: &mut crate::diffcore::ParamStore,
        prefix: &str,
        inp: usize,
        out: usize,
        stream: &mut RngStream,
    ) -> Result<(), StoreError> {
        let bound = 1.0 / (3.0 * inp as f64).sqrt();
        for tap in ["k_prev", "k_center", "k_next"] {
            store.insert(
                &format!("{prefix}.{tap}"),
                uniform_init(&[inp, out], bound, stream),
            )?;
        }
        store.insert(&format!("{prefix}.b"), Tensor::zeros(&[1, out]))?;
        Ok(())
    }

    pub fn bind(map: &IndexMap<String, Var>, prefix: &str) -> Result<Self, NnError> {
        Ok(Self {
            k_prev: bound_var(map, &format!("{prefix}.k_prev"))?,
            k_center: bound_var(map, &format!("{prefix}.k_center"))?,
            k_next: bound_var(map, &format!("{prefix}.k_next"))?,
            b: bound_var(map, &format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, x: &Var) -> Result<Var, NnError> {
        let t = x.shape()[0];
        if t == 0 {
            return Err(NnError::EmptySequence("conv1d"));
        }
        let inp = x.shape()[1];
        let graph = x.graph().clone();
        let zero_row = graph.constant(Tensor::zeros(&[1, inp]));
        let shifted_back = if t == 1 {
            zero_row.clone()
        } else {
            graph.concat(&[&zero_row, &x.slice(0, 0, t - 1)?], 0)?
        };
        let shifted_fwd = if t == 1 {
            zero_row
        } else {
            graph.concat(&[&x.slice(0, 1, t - 1)?, &zero_row], 0)?
        };
        let out = shifted_back
            .matmul(&self.k_prev, false, false)?
            .add(&x.matmul(&self.k_center, false, false)?)?
            .add(&shifted_fwd.matmul(&self.k_next, false, false)?)?;
        Ok(out.add(&broadcast_rows(&self.b, t)?)?)
    }
}

/// Gumbel-Softmax over `T×2` logits with externally supplied noise; returns
/// the `T×1` column of class-1 probabilities.
pub fn gumbel_softmax_with_noise(
    logits: &Var,
    temperature: f64,
    noise: &Tensor,
) -> Result<Var, NnError> {
    if temperature <= 0.0 {
        return Err(NnError::BadTemperature(temperature));
    }
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(NnError::Diff(DiffError::InvalidShape {
            op: "gumbel_softmax",
            shape,
            reason: "logits must be T×2".to_string(),
        }));
    }
    if noise.shape() != logits.shape().as_slice() {
        return Err(NnError::Diff(DiffError::ShapeMismatch {
            op: "gumbel_softmax",
            lhs: logits.shape(),
            rhs: noise.shape().to_vec(),
        }));
    }
    let g = logits.graph();
    let noise_var = g.constant(noise.clone());
    let soft = logits
        .add(&noise_var)?
        .scalar_mul(1.0 / temperature)
        .softmax()?;
    Ok(soft.slice(1, 1, 1)?)
}

/// Samples fresh Gumbel(0,1) noise for `T×2` logits.
pub fn sample_gumbel_noise(t: usize, stream: &mut RngStream) -> Tensor {
    let data: Vec<f64> = (0..t * 2).map(|_| stream.gumbel01()).collect();
    Tensor::new(vec![t, 2], data).expect("consistent shape")
}

/// Gumbel-Softmax relaxed per-token mask probabilities (class 1).
pub fn gumbel_softmax(
    logits: &Var,
    temperature: f64,
    stream: &mut RngStream,
) -> Result<Var, NnError> {
    let t = logits.shape()[0];
    let noise = sample_gumbel_noise(t, stream);
    gumbel_softmax_with_noise(logits, temperature, &noise)
}

/// Per-row cross-entropy of `T×V` logits against one target id per row,
/// returned as a `T×1` column.
///
/// Built on the exact identity `xent = logΣexp(z−c) + c − z_target` with `c`
/// the constant row maximum, so the value is stable and all-order gradients
/// are exact.
pub fn softmax_xent_rows(logits: &Var, targets: &[TokenId]) -> Result<Var, NnError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(NnError::Diff(DiffError::InvalidShape {
            op: "softmax_xent",
            shape,
            reason: "logits must be rank 2".to_string(),
        }));
    }
    let (t, v) = (shape[0], shape[1]);
    if targets.len() != t {
        return Err(NnError::LengthMismatch {
            have: targets.len(),
            want: t,
        });
    }
    if t == 0 {
        return Err(NnError::EmptySequence("softmax_xent"));
    }
    let graph = logits.graph().clone();
    let values = logits.value();
    let mut row_max = Vec::with_capacity(t);
    for r in 0..t {
        let m = values.data()[r * v..(r + 1) * v]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        row_max.push(m);
    }
    let max_full = {
        let mut data = Vec::with_capacity(t * v);
        for m in &row_max {
            data.extend(std::iter::repeat(*m).take(v));
        }
        graph.constant(Tensor::new(vec![t, v], data)?)
    };
    let max_col = graph.constant(Tensor::new(vec![t, 1], row_max)?);
    let ones_col = graph.constant(Tensor::full(&[v, 1], 1.0));
    let shifted = logits.sub(&max_full)?;
    let lse = shifted
        .exp()
        .matmul(&ones_col, false, false)?
        .log()?
        .add(&max_col)?;
    let hot = one_hot_rows(&graph, targets, v)?;
    let picked = logits.mul(&hot)?.matmul(&ones_col, false, false)?;
    Ok(lse.sub(&picked)?)
}

/// Cross-entropy `−log softmax(logits)[target]` for a single logit row
/// (rank 1 `[V]` or rank 2 `[1,V]`).
pub fn softmax_xent(logits: &Var, target: TokenId) -> Result<Var, NnError> {
    let shape = logits.shape();
    let row = match shape.len() {
        1 => {
            let g = logits.graph().clone();
            let v = shape[0];
            if target as usize >= v {
                return Err(NnError::TokenOutOfRange {
                    id: target,
                    vocab: v,
                });
            }
            let values = logits.value();
            let max = values
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let max_c = g.constant(Tensor::full(&[v], max));
            let lse = logits
                .sub(&max_c)?
                .exp()
                .sum()
                .log()?
                .add(&g.constant(Tensor::scalar(max)))?;
            let mut hot = vec![0.0; v];
            hot[target as usize] = 1.0;
            let picked = logits.mul(&g.constant(Tensor::vector(&hot)))?.sum();
            return Ok(lse.sub(&picked)?);
        }
        2 => softmax_xent_rows(logits, &[target])?,
        _ => {
            return Err(NnError::Diff(DiffError::InvalidShape {
                op: "softmax_xent",
                shape,
                reason: "logits must be rank 1 or 2".to_string(),
            }))
        }
    };
    Ok(row.sum())
}
