//! Mask-distribution analytics: which part-of-speech tags a policy masks and
//! how mask frequency tracks corpus token frequency, emitted as plot-ready
//! CSV. All analyses are pure functions of (sample, corpus), so identical
//! inputs yield byte-identical files.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, PosTag, Vocab};
use crate::diffcore::RngStream;
use crate::masking::MaskDecisions;
use crate::nnblocks::TokenId;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("sample contains no masked tokens")]
    EmptySample,
    #[error("doc {doc_id}: decisions length {decisions} != document length {document}")]
    LengthMismatch {
        doc_id: usize,
        decisions: usize,
        document: usize,
    },
    #[error("doc {0} not present in the corpus")]
    UnknownDocument(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Masking decisions a policy made over a corpus subset.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub policy: String,
    pub decisions: Vec<(usize, MaskDecisions)>,
}

/// One JSONL record of [`MaskSample`]; `d` holds the 0/1 decision per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub doc_id: usize,
    pub policy: String,
    pub d: MaskDecisions,
}

impl MaskSample {
    pub fn to_records(&self) -> Vec<MaskRecord> {
        self.decisions
            .iter()
            .map(|(doc_id, d)| MaskRecord {
                doc_id: *doc_id,
                policy: self.policy.clone(),
                d: d.clone(),
            })
            .collect()
    }

    pub fn from_records(policy: &str, records: Vec<MaskRecord>) -> Self {
        Self {
            policy: policy.to_string(),
            decisions: records.into_iter().map(|r| (r.doc_id, r.d)).collect(),
        }
    }
}

/// Fraction of all masked tokens carrying each tag; every tag is present (a
/// policy that never masks a tag reports 0), and fractions sum to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosDistribution {
    fractions: IndexMap<PosTag, f64>,
}

impl PosDistribution {
    fn from_counts(counts: &IndexMap<PosTag, usize>) -> Result<Self, AnalysisError> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(AnalysisError::EmptySample);
        }
        let fractions = PosTag::ALL
            .iter()
            .map(|&tag| {
                (
                    tag,
                    counts.get(&tag).copied().unwrap_or(0) as f64 / total as f64,
                )
            })
            .collect();
        Ok(Self { fractions })
    }

    pub fn fraction(&self, tag: PosTag) -> f64 {
        self.fractions.get(&tag).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PosTag, f64)> + '_ {
        self.fractions.iter().map(|(&t, &f)| (t, f))
    }

    /// Total-variation distance: half the L1 distance over all tags.
    pub fn total_variation(&self, other: &PosDistribution) -> f64 {
        PosTag::ALL
            .iter()
            .map(|&t| (self.fraction(t) - other.fraction(t)).abs())
            .sum::<f64>()
            / 2.0
    }
}

/// Uniform subset without replacement of size `round(fraction * N)`, at least
/// one document. Order follows the original corpus.
pub fn sample_corpus(
    documents: &[Document],
    fraction: f64,
    stream: &mut RngStream,
) -> Vec<Document> {
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "sample fraction must be in (0, 1], got {fraction}"
    );
    let n = documents.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut picks = stream.sample_distinct(n, k);
    picks.sort_unstable();
    picks.into_iter().map(|i| documents[i].clone()).collect()
}

fn doc_index(documents: &[Document]) -> HashMap<usize, &Document> {
    documents.iter().map(|d| (d.doc_id, d)).collect()
}

fn check_pair<'a>(
    doc_id: usize,
    decisions: &MaskDecisions,
    docs: &HashMap<usize, &'a Document>,
) -> Result<&'a Document, AnalysisError> {
    let doc = docs
        .get(&doc_id)
        .copied()
        .ok_or(AnalysisError::UnknownDocument(doc_id))?;
    if decisions.len() != doc.len() {
        return Err(AnalysisError::LengthMismatch {
            doc_id,
            decisions: decisions.len(),
            document: doc.len(),
        });
    }
    Ok(doc)
}

/// Distribution of gold part-of-speech tags over all masked tokens.
pub fn pos_mask_distribution(
    sample: &MaskSample,
    documents: &[Document],
) -> Result<PosDistribution, AnalysisError> {
    let docs = doc_index(documents);
    let mut counts: IndexMap<PosTag, usize> = IndexMap::new();
    for (doc_id, decisions) in &sample.decisions {
        let doc = check_pair(*doc_id, decisions, &docs)?;
        for i in 0..decisions.len() {
            if decisions.is_masked(i) {
                *counts.entry(doc.pos[i]).or_insert(0) += 1;
            }
        }
    }
    PosDistribution::from_counts(&counts)
}

/// Tag distribution of the corpus itself (every token counts once), the
/// reference point a uniform-random policy should match.
pub fn corpus_pos_distribution(documents: &[Document]) -> Result<PosDistribution, AnalysisError> {
    let mut counts: IndexMap<PosTag, usize> = IndexMap::new();
    for doc in documents {
        for &tag in &doc.pos {
            *counts.entry(tag).or_insert(0) += 1;
        }
    }
    PosDistribution::from_counts(&counts)
}

/// Per-token share of all masked occurrences, keyed by token id ascending.
pub fn mask_frequency(
    sample: &MaskSample,
    documents: &[Document],
) -> Result<IndexMap<TokenId, f64>, AnalysisError> {
    let docs = doc_index(documents);
    let mut counts: IndexMap<TokenId, usize> = IndexMap::new();
    let mut total = 0usize;
    for (doc_id, decisions) in &sample.decisions {
        let doc = check_pair(*doc_id, decisions, &docs)?;
        for i in 0..decisions.len() {
            if decisions.is_masked(i) {
                *counts.entry(doc.tokens[i]).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(AnalysisError::EmptySample);
    }
    counts.sort_unstable_keys();
    Ok(counts
        .into_iter()
        .map(|(tok, c)| (tok, c as f64 / total as f64))
        .collect())
}

/// One row of the frequency table: corpus rank and count of a token next to
/// the share of masks that landed on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfRow {
    pub rank: usize,
    pub surface: String,
    pub count: usize,
    pub mask_fraction: f64,
}

/// Joins corpus frequency ranks with a policy's mask frequencies. Every corpus
/// token yields exactly one row; tokens the policy never masked get 0.
pub fn zipf_table(
    freq_rank: &IndexMap<TokenId, (usize, usize)>,
    mask_frequency: &IndexMap<TokenId, f64>,
    vocab: &Vocab,
) -> Vec<ZipfRow> {
    let mut rows: Vec<ZipfRow> = freq_rank
        .iter()
        .map(|(&tok, &(count, rank))| ZipfRow {
            rank,
            surface: vocab.surface(tok).unwrap_or("<unk>").to_string(),
            count,
            mask_fraction: mask_frequency.get(&tok).copied().unwrap_or(0.0),
        })
        .collect();
    rows.sort_by_key(|r| r.rank);
    rows
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ties share the average of the ranks they span (1-based)
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mean;
        let dy = ry[i] - mean;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn float_cell(v: f64) -> String {
    // shortest round-trip form keeps files byte-stable across runs
    format!("{v}")
}

/// CSV with header `tag,fraction`, one row per tag in canonical order.
pub fn pos_csv_string(dist: &PosDistribution) -> String {
    let mut out = String::from("tag,fraction\n");
    for (tag, fraction) in dist.iter() {
        out.push_str(&format!("{tag},{}\n", float_cell(fraction)));
    }
    out
}

/// CSV with header `rank,surface,count,mask_fraction`, rows by rank ascending.
pub fn zipf_csv_string(rows: &[ZipfRow]) -> String {
    let mut out = String::from("rank,surface,count,mask_fraction\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.rank,
            r.surface,
            r.count,
            float_cell(r.mask_fraction)
        ));
    }
    out
}

/// Conventional file names: `{policy}-pos.csv` / `{policy}-zipf.csv`.
pub fn pos_csv_name(policy: &str) -> String {
    format!("{policy}-pos.csv")
}

pub fn zipf_csv_name(policy: &str) -> String {
    format!("{policy}-zipf.csv")
}

pub fn write_pos_csv(path: &Path, dist: &PosDistribution) -> Result<(), AnalysisError> {
    std::fs::write(path, pos_csv_string(dist))?;
    Ok(())
}

pub fn write_zipf_csv(path: &Path, rows: &[ZipfRow]) -> Result<(), AnalysisError> {
    std::fs::write(path, zipf_csv_string(rows))?;
    Ok(())
}

/// One JSON object per line, `{"doc_id":…,"policy":…,"d":[0,1,…]}`.
pub fn write_mask_jsonl(path: &Path, sample: &MaskSample) -> Result<(), AnalysisError> {
    let mut file = std::fs::File::create(path)?;
    for record in sample.to_records() {
        let line = serde_json::to_string(&record).expect("mask record serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn read_mask_jsonl(path: &Path) -> Result<MaskSample, AnalysisError> {
    let text = std::fs::read_to_string(path)?;
    let mut policy = String::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MaskRecord =
            serde_json::from_str(line).map_err(|e| AnalysisError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if policy.is_empty() {
            policy = record.policy.clone();
        }
        records.push(record);
    }
    Ok(MaskSample::from_records(&policy, records))
}
