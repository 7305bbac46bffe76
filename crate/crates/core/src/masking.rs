//! Masking decisions, the x⊕d operation, heuristic masking policies, and
//! deployment post-processing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, MASK_ID};
use crate::diffcore::RngStream;
use crate::nnblocks::TokenId;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("decision length {have} does not match sequence length {want}")]
    LengthMismatch { have: usize, want: usize },
    #[error("decision at {index} is {value}, expected 0 or 1")]
    InvalidDecision { index: usize, value: u8 },
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("document has no entity to mask")]
    NoSalientSpan,
}

/// Binary mask decisions, one per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskDecisions(Vec<u8>);

impl MaskDecisions {
    pub fn new(d: Vec<u8>) -> Result<Self, MaskError> {
        if let Some((index, &value)) = d.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(MaskError::InvalidDecision { index, value });
        }
        Ok(Self(d))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        Self(flags.iter().map(|&b| u8::from(b)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn set(&mut self, i: usize, masked: bool) {
        self.0[i] = u8::from(masked);
    }

    pub fn count_masked(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.count_masked() as f64 / self.0.len() as f64
        }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
    }

    fn check_len(&self, want: usize) -> Result<(), MaskError> {
        if self.0.len() != want {
            return Err(MaskError::LengthMismatch {
                have: self.0.len(),
                want,
            });
        }
        Ok(())
    }
}

/// What the denoising decoder reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Reconstruct the full original sequence.
    FullSequence,
    /// Reconstruct only the masked tokens, in original order.
    MaskedTokens,
}

/// Masked source plus reconstruction target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedPair {
    pub x_src: Vec<TokenId>,
    pub x_tar: Vec<TokenId>,
    pub target_mode: TargetMode,
}

/// x⊕d: replaces masked tokens with `<mask>`; with `infill`, each maximal run
/// of masked positions collapses to a single `<mask>`.
pub fn apply_mask(
    x: &[TokenId],
    d: &MaskDecisions,
    infill: bool,
) -> Result<Vec<TokenId>, MaskError> {
    d.check_len(x.len())?;
    let mut out = Vec::with_capacity(x.len());
    let mut in_run = false;
    for (i, &tok) in x.iter().enumerate() {
        if d.is_masked(i) {
            if !(infill && in_run) {
                out.push(MASK_ID);
            }
            in_run = true;
        } else {
            out.push(tok);
            in_run = false;
        }
    }
    Ok(out)
}

/// Builds the reconstruction target for the given mode. A `MaskedTokens`
/// target with no masked positions comes back empty; callers skip such pairs.
pub fn build_target(
    x: &[TokenId],
    d: &MaskDecisions,
    mode: TargetMode,
) -> Result<Vec<TokenId>, MaskError> {
    d.check_len(x.len())?;
    Ok(match mode {
        TargetMode::FullSequence => x.to_vec(),
        TargetMode::MaskedTokens => x
            .iter()
            .enumerate()
            .filter_map(|(i, &tok)| d.is_masked(i).then_some(tok))
            .collect(),
    })
}

pub fn masked_pair(
    x: &[TokenId],
    d: &MaskDecisions,
    mode: TargetMode,
    infill: bool,
) -> Result<MaskedPair, MaskError> {
    Ok(MaskedPair {
        x_src: apply_mask(x, d, infill)?,
        x_tar: build_target(x, d, mode)?,
        target_mode: mode,
    })
}

/// Masks exactly `max(1, round(rate·len))` distinct positions uniformly.
pub fn policy_rand(
    x: &[TokenId],
    rate: f64,
    stream: &mut RngStream,
) -> Result<MaskDecisions, MaskError> {
    if x.is_empty() {
        return Err(MaskError::EmptyInput("sequence"));
    }
    if !(0.0..=1.0).contains(&rate) || rate <= 0.0 {
        return Err(MaskError::BadFraction(rate));
    }
    let k = ((rate * x.len() as f64).round() as usize).clamp(1, x.len());
    let mut d = MaskDecisions::zeros(x.len());
    for pos in stream.sample_distinct(x.len(), k) {
        d.set(pos, true);
    }
    Ok(d)
}

/// Span-denoising recipe: spans with Poisson(λ)-distributed lengths (zero
/// draws resampled, capped at `max_span`) at random starts until at least
/// `coverage` of the tokens are masked.
pub fn policy_orig(
    x: &[TokenId],
    lambda: f64,
    coverage: f64,
    max_span: usize,
    stream: &mut RngStream,
) -> Result<MaskDecisions, MaskError> {
    if x.is_empty() {
        return Err(MaskError::EmptyInput("sequence"));
    }
    if coverage <= 0.0 || coverage > 1.0 {
        return Err(MaskError::BadFraction(coverage));
    }
    let len = x.len();
    let required = ((coverage * len as f64).ceil() as usize).clamp(1, len);
    let mut d = MaskDecisions::zeros(len);
    let mut covered = 0usize;
    while covered < required {
        let mut span = 0usize;
        while span == 0 {
            span = stream.poisson(lambda);
        }
        let span = span.min(max_span).min(len);
        let start = stream.gen_range(len - span + 1);
        for i in start..start + span {
            if !d.is_masked(i) {
                d.set(i, true);
                covered += 1;
            }
        }
    }
    Ok(d)
}

/// Masks exactly one uniformly chosen entity span; errors when the document
/// has none (callers fall back to `policy_rand`).
pub fn policy_ssm(doc: &Document, stream: &mut RngStream) -> Result<MaskDecisions, MaskError> {
    if doc.entities.is_empty() {
        return Err(MaskError::NoSalientSpan);
    }
    let (start, end, _) = doc.entities[stream.gen_range(doc.entities.len())];
    let mut d = MaskDecisions::zeros(doc.len());
    for i in start..end {
        d.set(i, true);
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentenceMode {
    First,
    Random,
}

/// Masks `ceil(fraction · n_sentences)` whole sentences: the leading ones
/// (`First`) or a uniform subset (`Random`).
pub fn policy_sentence(
    doc: &Document,
    mode: SentenceMode,
    fraction: f64,
    stream: &mut RngStream,
) -> Result<MaskDecisions, MaskError> {
    if doc.is_empty() {
        return Err(MaskError::EmptyInput("document"));
    }
    if fraction <= 0.0 || fraction > 1.0 {
        return Err(MaskError::BadFraction(fraction));
    }
    let ranges = doc.sentence_ranges();
    let n_sent = ranges.len();
    let k = ((fraction * n_sent as f64).ceil() as usize).clamp(1, n_sent);
    let chosen: Vec<usize> = match mode {
        SentenceMode::First => (0..k).collect(),
        SentenceMode::Random => stream.sample_distinct(n_sent, k),
    };
    let mut d = MaskDecisions::zeros(doc.len());
    for s in chosen {
        for i in ranges[s].clone() {
            d.set(i, true);
        }
    }
    Ok(d)
}

/// Deployment post-processing: (1) expand masks to whole words; (2) if the
/// mask fraction then exceeds the budget, uniformly unmask whole words until
/// it does not.
pub fn postprocess(
    d: &MaskDecisions,
    word_ids: &[u32],
    budget: f64,
    stream: &mut RngStream,
) -> Result<MaskDecisions, MaskError> {
    d.check_len(word_ids.len())?;
    if budget <= 0.0 || budget > 1.0 {
        return Err(MaskError::BadFraction(budget));
    }
    let len = word_ids.len();
    if len == 0 {
        return Ok(d.clone());
    }

    // Words are maximal runs of equal word ids.
    let mut words: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    for i in 1..=len {
        if i == len || word_ids[i] != word_ids[i - 1] {
            words.push(start..i);
            start = i;
        }
    }

    let mut out = d.clone();
    for w in &words {
        if w.clone().any(|i| d.is_masked(i)) {
            for i in w.clone() {
                out.set(i, true);
            }
        }
    }

    let over_half = out.fraction() > 0.5;
    if over_half || out.fraction() > budget {
        let mut masked_words: Vec<usize> = (0..words.len())
            .filter(|&w| out.is_masked(words[w].start))
            .collect();
        stream.shuffle(&mut masked_words);
        while out.fraction() > budget {
            let w = masked_words.pop().expect("masked words remain while over budget");
            for i in words[w].clone() {
                out.set(i, false);
            }
        }
    }
    Ok(out)
}
