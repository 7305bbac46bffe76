//! Synthetic annotated "micro-wiki" corpus with aligned closed-book QA
//! triplets.
//!
//! Documents carry gold token, word, POS, entity, and sentence annotations by
//! construction. Each entity has a fixed set of templated facts; every fact
//! yields question/answer triplets whose target span appears verbatim in the
//! context. Filler tokens follow a Zipf distribution so frequency analyses
//! have a known ground truth.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::RngStream;
use crate::nnblocks::TokenId;

/// Reserved token ids, fixed across every generated vocabulary.
pub const PAD_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;

const SPECIAL_SURFACES: [&str; 5] = ["<pad>", "<mask>", "<bos>", "<eos>", "<unk>"];

/// Fraction of documents that contain no entity facts at all.
const FILLER_DOC_RATE: f64 = 0.1;

/// Number of Zipf-distributed filler word types.
const N_FILLERS: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid record: {reason}")]
    Invalid { line: usize, reason: String },
}

/// Part-of-speech tags; entity tokens are always `Propn` or `Num`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Propn,
    Noun,
    Verb,
    Num,
    Adp,
    Det,
    Adj,
    Pron,
    Cconj,
    Punct,
}

impl PosTag {
    pub const ALL: [PosTag; 10] = [
        PosTag::Propn,
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Num,
        PosTag::Adp,
        PosTag::Det,
        PosTag::Adj,
        PosTag::Pron,
        PosTag::Cconj,
        PosTag::Punct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PosTag::Propn => "PROPN",
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Num => "NUM",
            PosTag::Adp => "ADP",
            PosTag::Det => "DET",
            PosTag::Adj => "ADJ",
            PosTag::Pron => "PRON",
            PosTag::Cconj => "CCONJ",
            PosTag::Punct => "PUNCT",
        }
    }
}

impl std::fmt::Display for PosTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityKind {
    Person,
    City,
    Date,
    Work,
    Number,
}

/// Entity mention: `(start, end-exclusive, kind)`, token-indexed.
pub type EntitySpan = (usize, usize, EntityKind);

/// Fully annotated document.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: usize,
    pub tokens: Vec<TokenId>,
    /// Same length as `tokens`; consecutive tokens of one word share an id.
    pub word_ids: Vec<u32>,
    pub pos: Vec<PosTag>,
    /// Non-overlapping spans aligned to whole words.
    pub entities: Vec<EntitySpan>,
    /// Sentence start indices; `sent_bounds[0] == 0`, strictly increasing.
    pub sent_bounds: Vec<usize>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ranges of the sentences, in order.
    pub fn sentence_ranges(&self) -> Vec<Range<usize>> {
        (0..self.sent_bounds.len())
            .map(|i| {
                let start = self.sent_bounds[i];
                let end = self
                    .sent_bounds
                    .get(i + 1)
                    .copied()
                    .unwrap_or(self.tokens.len());
                start..end
            })
            .collect()
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.tokens.len();
        if self.word_ids.len() != n || self.pos.len() != n {
            return Err(format!(
                "annotation lengths differ: {} tokens, {} word_ids, {} pos",
                n,
                self.word_ids.len(),
                self.pos.len()
            ));
        }
        if n == 0 {
            return Err("document has no tokens".into());
        }
        if self.sent_bounds.first() != Some(&0) {
            return Err("sent_bounds must start at 0".into());
        }
        for w in self.sent_bounds.windows(2) {
            if w[1] <= w[0] {
                return Err(format!("sent_bounds not strictly increasing at {}", w[1]));
            }
        }
        if let Some(&last) = self.sent_bounds.last() {
            if last >= n {
                return Err(format!("sentence start {last} out of range"));
            }
        }
        let mut prev_end = 0usize;
        for &(start, end, kind) in &self.entities {
            if start >= end || end > n {
                return Err(format!("entity span ({start}, {end}) out of bounds"));
            }
            if start < prev_end {
                return Err(format!("entity span ({start}, {end}) overlaps the previous span"));
            }
            prev_end = end;
            if start > 0 && self.word_ids[start] == self.word_ids[start - 1] {
                return Err(format!("entity span ({start}, {end}) starts mid-word"));
            }
            if end < n && self.word_ids[end - 1] == self.word_ids[end] {
                return Err(format!("entity span ({start}, {end}) ends mid-word"));
            }
            for t in start..end {
                if !matches!(self.pos[t], PosTag::Propn | PosTag::Num) {
                    return Err(format!(
                        "entity token at {t} ({kind:?}) has pos {}",
                        self.pos[t]
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Question/answer pair with the context paragraph the answer came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub context: Vec<TokenId>,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// Index of the entity the fact is about.
    pub entity_key: usize,
}

impl Triplet {
    pub fn validate(&self) -> Result<(), String> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err("source and target must be non-empty".into());
        }
        if find_subsequence(&self.context, &self.target).is_none() {
            return Err("target does not occur verbatim in context".into());
        }
        Ok(())
    }
}

/// First index at which `needle` occurs contiguously in `haystack`.
pub fn find_subsequence(haystack: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| &haystack[i..i + needle.len()] == needle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_entities: usize,
    pub n_documents: usize,
    /// Inclusive (min, max) sentences per document.
    pub sentences_per_doc: (usize, usize),
    /// Exponent of the Zipf law the filler vocabulary follows.
    pub zipf_exponent: f64,
    /// Fraction of entity names emitted as two subword tokens sharing a word.
    pub subword_rate: f64,
    /// Fraction of entities whose triplets go to the finetune-train split.
    pub finetune_entity_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_documents: 5000,
            sentences_per_doc: (1, 5),
            zipf_exponent: 1.0,
            subword_rate: 0.3,
            finetune_entity_fraction: 0.5,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_entities == 0 || self.n_documents == 0 {
            return Err(CorpusError::Config(
                "n_entities and n_documents must be at least 1".into(),
            ));
        }
        let (lo, hi) = self.sentences_per_doc;
        if lo == 0 || lo > hi {
            return Err(CorpusError::Config(format!(
                "sentences_per_doc range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        for (name, v) in [
            ("subword_rate", self.subword_rate),
            ("finetune_entity_fraction", self.finetune_entity_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CorpusError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !self.zipf_exponent.is_finite() || self.zipf_exponent < 0.0 {
            return Err(CorpusError::Config(format!(
                "zipf_exponent = {} must be finite and non-negative",
                self.zipf_exponent
            )));
        }
        Ok(())
    }
}

/// Partition of entity indices into finetune-train and finetune-test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntitySplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Token id blocks of a generated vocabulary, for analyses that need to tell
/// fact values, Zipf fillers, and entity names apart.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabLayout {
    /// Months, years, cities, works, numbers — the answer value pools.
    pub values: Range<TokenId>,
    /// Zipf-distributed filler words, ordered most frequent first.
    pub fillers: Range<TokenId>,
    /// Entity name tokens (whole names and name subwords).
    pub names: Range<TokenId>,
}

/// Token-id ↔ surface-string table.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Self {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_SURFACES {
            v.intern(s);
        }
        v
    }

    fn intern(&mut self, surface: &str) -> TokenId {
        if let Some(&id) = self.index.get(surface) {
            return id;
        }
        let id = self.entries.len() as TokenId;
        self.entries.push(surface.to_string());
        self.index.insert(surface.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surfaces(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.surface(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Writes the vocabulary as a JSON array, index → surface.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.entries)
            .map_err(|e| CorpusError::Generation(format!("cannot encode vocab: {e}")))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let entries: Vec<String> =
            serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| {
                CorpusError::Parse {
                    line: 1,
                    message: e.to_string(),
                }
            })?;
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Ok(Self { entries, index })
    }
}

/// Everything `generate_corpus` produces.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub documents: Vec<Document>,
    pub triplets: Vec<Triplet>,
    pub vocab: Vocab,
    pub entity_split: EntitySplit,
    pub layout: VocabLayout,
}

// ---------------------------------------------------------------------------
// Generation

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september",
    "october", "november", "december",
];
const CITIES: [&str; 12] = [
    "arvale", "brimworth", "calder", "dunmore", "elsmere", "farholt", "gilvan", "harlow",
    "ithmar", "jevren", "kastel", "lorvin",
];
const WORKS: [&str; 12] = [
    "aurora", "driftwood", "emberfall", "foxglove", "harvestsong", "lanternlight", "meridian",
    "nocturne", "quarry", "solstice", "thistledown", "vesper",
];
const N_YEARS: usize = 20;
const FIRST_YEAR: usize = 1950;
const N_NUMBERS: usize = 16;
const FIRST_NUMBER: usize = 2;

const FILLER_ONSETS: [&str; 20] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kr",
    "pl", "st",
];
const FILLER_RIMES: [&str; 8] = ["ar", "en", "il", "or", "ud", "an", "es", "ita"];
const FILLER_POS_CYCLE: [PosTag; 7] = [
    PosTag::Noun,
    PosTag::Verb,
    PosTag::Adj,
    PosTag::Det,
    PosTag::Adp,
    PosTag::Pron,
    PosTag::Cconj,
];

const NAME_ONSETS: [&str; 25] = [
    "Bal", "Cor", "Dag", "Eld", "Fen", "Gor", "Hal", "Ing", "Jor", "Kel", "Lor", "Mab", "Ned",
    "Oru", "Pel", "Quin", "Rag", "Sel", "Tor", "Ulm", "Vel", "Wren", "Xan", "Yor", "Zed",
];
const NAME_ENDS: [&str; 8] = ["an", "eth", "ia", "or", "us", "wyn", "ar", "el"];
const SUB_FIRST: [&str; 12] = [
    "Ka", "Mi", "Ro", "Ta", "Zu", "Bel", "Nim", "Osa", "Pra", "Vin", "Yara", "Del",
];
const SUB_LAST: [&str; 12] = [
    "ren", "dor", "lin", "mos", "tane", "vik", "sha", "bert", "nia", "gul", "wen", "rik",
];

/// Template and question word ids.
struct Lexicon {
    was: TokenId,
    born: TokenId,
    on: TokenId,
    in_: TokenId,
    created: TokenId,
    wrote: TokenId,
    songs: TokenId,
    period: TokenId,
    when_q: TokenId,
    where_q: TokenId,
    what_q: TokenId,
    did: TokenId,
    how_q: TokenId,
    many: TokenId,
    create: TokenId,
    write: TokenId,
    qmark: TokenId,
}

impl Lexicon {
    fn intern(vocab: &mut Vocab) -> Self {
        Self {
            was: vocab.intern("was"),
            born: vocab.intern("born"),
            on: vocab.intern("on"),
            in_: vocab.intern("in"),
            created: vocab.intern("created"),
            wrote: vocab.intern("wrote"),
            songs: vocab.intern("songs"),
            period: vocab.intern("."),
            when_q: vocab.intern("when"),
            where_q: vocab.intern("where"),
            what_q: vocab.intern("what"),
            did: vocab.intern("did"),
            how_q: vocab.intern("how"),
            many: vocab.intern("many"),
            create: vocab.intern("create"),
            write: vocab.intern("write"),
            qmark: vocab.intern("?"),
        }
    }
}

/// One entity's sampled fact values.
struct Entity {
    name: Vec<TokenId>,
    birth_month: TokenId,
    birth_year: TokenId,
    birth_city: TokenId,
    work: TokenId,
    work_year: TokenId,
    song_count: TokenId,
}

const FACTS_PER_ENTITY: usize = 3;

/// One sentence before document assembly; `word_starts[i]` is true when token
/// `i` begins a new word.
struct Sentence {
    tokens: Vec<TokenId>,
    pos: Vec<PosTag>,
    word_starts: Vec<bool>,
    entities: Vec<EntitySpan>,
}

struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize, exponent: f64) -> Self {
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            acc += ((i + 1) as f64).powf(-exponent);
            cdf.push(acc);
        }
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        Self { cdf }
    }

    fn sample(&self, stream: &mut RngStream) -> usize {
        let u = stream.uniform01();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn fact_sentence(e: &Entity, which: usize, lex: &Lexicon) -> Sentence {
    let nl = e.name.len();
    let mut tokens = e.name.clone();
    let mut pos = vec![PosTag::Propn; nl];
    let mut word_starts = vec![true; nl];
    for w in word_starts.iter_mut().skip(1) {
        *w = false; // multi-token names are one word
    }
    let mut entities = vec![(0, nl, EntityKind::Person)];
    match which {
        0 => {
            tokens.extend([
                lex.was,
                lex.born,
                lex.on,
                e.birth_month,
                e.birth_year,
                lex.in_,
                e.birth_city,
                lex.period,
            ]);
            pos.extend([
                PosTag::Verb,
                PosTag::Verb,
                PosTag::Adp,
                PosTag::Propn,
                PosTag::Num,
                PosTag::Adp,
                PosTag::Propn,
                PosTag::Punct,
            ]);
            entities.push((nl + 3, nl + 5, EntityKind::Date));
            entities.push((nl + 6, nl + 7, EntityKind::City));
        }
        1 => {
            tokens.extend([lex.created, e.work, lex.in_, e.work_year, lex.period]);
            pos.extend([
                PosTag::Verb,
                PosTag::Propn,
                PosTag::Adp,
                PosTag::Num,
                PosTag::Punct,
            ]);
            entities.push((nl + 1, nl + 2, EntityKind::Work));
            entities.push((nl + 3, nl + 4, EntityKind::Date));
        }
        _ => {
            tokens.extend([lex.wrote, e.song_count, lex.songs, lex.period]);
            pos.extend([PosTag::Verb, PosTag::Num, PosTag::Noun, PosTag::Punct]);
            entities.push((nl + 1, nl + 2, EntityKind::Number));
        }
    }
    word_starts.resize(tokens.len(), true);
    Sentence {
        tokens,
        pos,
        word_starts,
        entities,
    }
}

fn filler_sentence(
    zipf: &ZipfSampler,
    filler_base: TokenId,
    period: TokenId,
    stream: &mut RngStream,
) -> Sentence {
    let len = 4 + stream.gen_range(5);
    let mut tokens = Vec::with_capacity(len + 1);
    let mut pos = Vec::with_capacity(len + 1);
    for _ in 0..len {
        let r = zipf.sample(stream);
        tokens.push(filler_base + r as TokenId);
        pos.push(FILLER_POS_CYCLE[r % FILLER_POS_CYCLE.len()]);
    }
    tokens.push(period);
    pos.push(PosTag::Punct);
    let word_starts = vec![true; tokens.len()];
    Sentence {
        tokens,
        pos,
        word_starts,
        entities: Vec::new(),
    }
}

fn assemble_document(doc_id: usize, sentences: Vec<Sentence>) -> Document {
    let mut tokens = Vec::new();
    let mut word_ids = Vec::new();
    let mut pos = Vec::new();
    let mut entities = Vec::new();
    let mut sent_bounds = Vec::with_capacity(sentences.len());
    let mut next_word: u32 = 0;
    for s in sentences {
        let offset = tokens.len();
        sent_bounds.push(offset);
        for start in &s.word_starts {
            if *start {
                next_word += 1;
            }
            word_ids.push(next_word - 1);
        }
        for (start, end, kind) in s.entities {
            entities.push((start + offset, end + offset, kind));
        }
        tokens.extend(s.tokens);
        pos.extend(s.pos);
    }
    Document {
        doc_id,
        tokens,
        word_ids,
        pos,
        entities,
        sent_bounds,
    }
}

fn make_entity_names(
    cfg: &CorpusConfig,
    vocab: &mut Vocab,
    stream: &mut RngStream,
) -> Result<Vec<Vec<TokenId>>, CorpusError> {
    let n = cfg.n_entities;
    let is_subword: Vec<bool> = (0..n).map(|_| stream.uniform01() < cfg.subword_rate).collect();
    let n_sub = is_subword.iter().filter(|b| **b).count();

    // Subword pools sized so the rejection sampling below has slack.
    let pool = SUB_FIRST
        .len()
        .max(((2 * n_sub.max(1)) as f64).sqrt().ceil() as usize);
    let sub_surface = |base: &[&str], i: usize| -> String {
        let rep = i / base.len();
        if rep == 0 {
            base[i % base.len()].to_string()
        } else {
            format!("{}{}", base[i % base.len()], rep + 1)
        }
    };

    let mut used: HashSet<Vec<TokenId>> = HashSet::new();
    let mut names = Vec::with_capacity(n);
    let mut next_single = 0usize;
    for &sub in &is_subword {
        let name = if sub {
            let mut attempts = 0;
            loop {
                let a = stream.gen_range(pool);
                let b = stream.gen_range(pool);
                let candidate = vec![
                    vocab.intern(&sub_surface(&SUB_FIRST, a)),
                    vocab.intern(&sub_surface(&SUB_LAST, b)),
                ];
                if !used.contains(&candidate) {
                    break candidate;
                }
                attempts += 1;
                if attempts > 1000 * n {
                    return Err(CorpusError::Generation(
                        "exhausted distinct subword entity names".into(),
                    ));
                }
            }
        } else {
            loop {
                let k = next_single;
                next_single += 1;
                let onset = NAME_ONSETS[k % NAME_ONSETS.len()];
                let end = NAME_ENDS[(k / NAME_ONSETS.len()) % NAME_ENDS.len()];
                let rep = k / (NAME_ONSETS.len() * NAME_ENDS.len());
                let surface = if rep == 0 {
                    format!("{onset}{end}")
                } else {
                    format!("{onset}{end}{rep}")
                };
                let candidate = vec![vocab.intern(&surface)];
                if !used.contains(&candidate) {
                    break candidate;
                }
            }
        };
        used.insert(name.clone());
        names.push(name);
    }
    Ok(names)
}

/// Generates documents, QA triplets, vocabulary, and the entity split as a
/// pure function of the config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<GeneratedCorpus, CorpusError> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, "corpus");

    let mut vocab = Vocab::with_specials();
    let lex = Lexicon::intern(&mut vocab);

    let values_start = vocab.len() as TokenId;
    let months: Vec<TokenId> = MONTHS.iter().map(|m| vocab.intern(m)).collect();
    let years: Vec<TokenId> = (0..N_YEARS)
        .map(|i| vocab.intern(&(FIRST_YEAR + i).to_string()))
        .collect();
    let cities: Vec<TokenId> = CITIES.iter().map(|c| vocab.intern(c)).collect();
    let works: Vec<TokenId> = WORKS.iter().map(|w| vocab.intern(w)).collect();
    let numbers: Vec<TokenId> = (0..N_NUMBERS)
        .map(|i| vocab.intern(&(FIRST_NUMBER + i).to_string()))
        .collect();
    let values_end = vocab.len() as TokenId;

    let filler_base = vocab.len() as TokenId;
    for i in 0..N_FILLERS {
        let onset = FILLER_ONSETS[i % FILLER_ONSETS.len()];
        let rime = FILLER_RIMES[(i / FILLER_ONSETS.len()) % FILLER_RIMES.len()];
        vocab.intern(&format!("{onset}{rime}"));
    }
    let fillers_end = vocab.len() as TokenId;

    let names_start = vocab.len() as TokenId;
    let mut name_stream = root.child("names");
    let names = make_entity_names(cfg, &mut vocab, &mut name_stream)?;
    let names_end = vocab.len() as TokenId;

    let mut value_stream = root.child("values");
    let entities: Vec<Entity> = names
        .into_iter()
        .map(|name| Entity {
            name,
            birth_month: months[value_stream.gen_range(months.len())],
            birth_year: years[value_stream.gen_range(years.len())],
            birth_city: cities[value_stream.gen_range(cities.len())],
            work: works[value_stream.gen_range(works.len())],
            work_year: years[value_stream.gen_range(years.len())],
            song_count: numbers[value_stream.gen_range(numbers.len())],
        })
        .collect();

    let zipf = ZipfSampler::new(N_FILLERS, cfg.zipf_exponent);
    let (sent_lo, sent_hi) = cfg.sentences_per_doc;
    let mut doc_stream = root.child("docs");
    let mut documents = Vec::with_capacity(cfg.n_documents);
    for doc_id in 0..cfg.n_documents {
        let n_sents = sent_lo + doc_stream.gen_range(sent_hi - sent_lo + 1);
        // The first documents cover every (entity, fact) pair so the facts the
        // closed-book evaluation asks about are all in the pre-train corpus.
        let forced = if doc_id < cfg.n_entities * FACTS_PER_ENTITY {
            Some((doc_id / FACTS_PER_ENTITY, doc_id % FACTS_PER_ENTITY))
        } else {
            None
        };
        let filler_only = forced.is_none() && doc_stream.uniform01() < FILLER_DOC_RATE;
        let entity_idx = match forced {
            Some((e, _)) => e,
            None => doc_stream.gen_range(cfg.n_entities),
        };
        let forced_slot = forced.map(|_| doc_stream.gen_range(n_sents));
        let mut sentences = Vec::with_capacity(n_sents);
        for slot in 0..n_sents {
            if Some(slot) == forced_slot {
                sentences.push(fact_sentence(&entities[entity_idx], forced.unwrap().1, &lex));
            } else if !filler_only && doc_stream.uniform01() < 0.5 {
                let which = doc_stream.gen_range(FACTS_PER_ENTITY);
                sentences.push(fact_sentence(&entities[entity_idx], which, &lex));
            } else {
                sentences.push(filler_sentence(&zipf, filler_base, lex.period, &mut doc_stream));
            }
        }
        documents.push(assemble_document(doc_id, sentences));
    }

    let mut ctx_stream = root.child("contexts");
    let mut triplets = Vec::with_capacity(cfg.n_entities * 4);
    for (idx, e) in entities.iter().enumerate() {
        let questions: [(Vec<TokenId>, Vec<TokenId>, usize); 4] = [
            (
                [&[lex.when_q, lex.was][..], &e.name, &[lex.born, lex.qmark]].concat(),
                vec![e.birth_month, e.birth_year],
                0,
            ),
            (
                [&[lex.where_q, lex.was][..], &e.name, &[lex.born, lex.qmark]].concat(),
                vec![e.birth_city],
                0,
            ),
            (
                [&[lex.what_q, lex.did][..], &e.name, &[lex.create, lex.qmark]].concat(),
                vec![e.work],
                1,
            ),
            (
                [
                    &[lex.how_q, lex.many, lex.songs, lex.did][..],
                    &e.name,
                    &[lex.write, lex.qmark],
                ]
                .concat(),
                vec![e.song_count],
                2,
            ),
        ];
        for (source, target, fact) in questions {
            let fact_tokens = fact_sentence(e, fact, &lex).tokens;
            let mut pre = ctx_stream.gen_range(2);
            let post = ctx_stream.gen_range(2);
            if pre + post == 0 {
                pre = 1;
            }
            let mut context = Vec::new();
            for _ in 0..pre {
                context.extend(filler_sentence(&zipf, filler_base, lex.period, &mut ctx_stream).tokens);
            }
            context.extend(fact_tokens);
            for _ in 0..post {
                context.extend(filler_sentence(&zipf, filler_base, lex.period, &mut ctx_stream).tokens);
            }
            triplets.push(Triplet {
                context,
                source,
                target,
                entity_key: idx,
            });
        }
    }

    let mut split_stream = root.child("split");
    let mut order: Vec<usize> = (0..cfg.n_entities).collect();
    split_stream.shuffle(&mut order);
    let n_train = ((cfg.finetune_entity_fraction * cfg.n_entities as f64).round() as usize)
        .min(cfg.n_entities);
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    Ok(GeneratedCorpus {
        documents,
        triplets,
        vocab,
        entity_split: EntitySplit { train, test },
        layout: VocabLayout {
            values: values_start..values_end,
            fillers: filler_base..fillers_end,
            names: names_start..names_end,
        },
    })
}

// ---------------------------------------------------------------------------
// Frequency table

/// Token → (count, rank); rank 1 is the most frequent token, ties broken by
/// ascending token id. Iteration order is rank order.
pub fn freq_rank(documents: &[Document]) -> IndexMap<TokenId, (usize, usize)> {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for d in documents {
        for &t in &d.tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut items: Vec<(TokenId, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    items
        .into_iter()
        .enumerate()
        .map(|(i, (tok, count))| (tok, (count, i + 1)))
        .collect()
}

// ---------------------------------------------------------------------------
// JSONL persistence

#[derive(Serialize, Deserialize)]
struct DocumentLine {
    doc_id: usize,
    tokens: Vec<TokenId>,
    word_ids: Vec<u32>,
    pos: Vec<PosTag>,
    entities: Vec<EntitySpan>,
    sent_bounds: Vec<usize>,
    surface: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TripletLine {
    context: Vec<TokenId>,
    source: Vec<TokenId>,
    target: Vec<TokenId>,
    entity_key: usize,
    surface: Vec<String>,
}

pub fn save_documents_jsonl(
    documents: &[Document],
    vocab: &Vocab,
    path: &Path,
) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in documents {
        let line = DocumentLine {
            doc_id: d.doc_id,
            tokens: d.tokens.clone(),
            word_ids: d.word_ids.clone(),
            pos: d.pos.clone(),
            entities: d.entities.clone(),
            sent_bounds: d.sent_bounds.clone(),
            surface: vocab.surfaces(&d.tokens),
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(|e| CorpusError::Generation(format!("cannot encode document: {e}")))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_documents_jsonl(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: DocumentLine =
            serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let doc = Document {
            doc_id: parsed.doc_id,
            tokens: parsed.tokens,
            word_ids: parsed.word_ids,
            pos: parsed.pos,
            entities: parsed.entities,
            sent_bounds: parsed.sent_bounds,
        };
        doc.validate().map_err(|reason| CorpusError::Invalid {
            line: line_no,
            reason,
        })?;
        out.push(doc);
    }
    Ok(out)
}

pub fn save_triplets_jsonl(
    triplets: &[Triplet],
    vocab: &Vocab,
    path: &Path,
) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triplets {
        let line = TripletLine {
            context: t.context.clone(),
            source: t.source.clone(),
            target: t.target.clone(),
            entity_key: t.entity_key,
            surface: vocab.surfaces(&t.context),
        };
        serde_json::to_writer(&mut w, &line)
            .map_err(|e| CorpusError::Generation(format!("cannot encode triplet: {e}")))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_triplets_jsonl(path: &Path) -> Result<Vec<Triplet>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: TripletLine =
            serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        let triplet = Triplet {
            context: parsed.context,
            source: parsed.source,
            target: parsed.target,
            entity_key: parsed.entity_key,
        };
        triplet.validate().map_err(|reason| CorpusError::Invalid {
            line: line_no,
            reason,
        })?;
        out.push(triplet);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_entities: 20,
            n_documents: 200,
            ..CorpusConfig::default()
        }
    }

    fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            num += (x - mx) * (y - my);
            den += (x - mx) * (x - mx);
        }
        num / den
    }

    #[test]
    fn generated_documents_satisfy_invariants() {
        let corpus = generate_corpus(&small_config()).unwrap();
        assert_eq!(corpus.documents.len(), 200);
        for d in &corpus.documents {
            d.validate().unwrap();
        }
        for t in &corpus.triplets {
            t.validate().unwrap();
        }
        // 4 questions per entity
        assert_eq!(corpus.triplets.len(), 20 * 4);
    }

    #[test]
    fn default_vocab_is_desk_scale() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let n = corpus.vocab.len();
        assert!((300..=500).contains(&n), "vocab size {n}");
    }

    #[test]
    fn full_fraction_gives_empty_test_split() {
        let cfg = CorpusConfig {
            finetune_entity_fraction: 1.0,
            ..small_config()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        assert!(corpus.entity_split.test.is_empty());
        assert_eq!(corpus.entity_split.train.len(), cfg.n_entities);
    }

    #[test]
    fn split_is_a_partition() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let mut all: Vec<usize> = corpus
            .entity_split
            .train
            .iter()
            .chain(&corpus.entity_split.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn every_target_occurs_verbatim_in_context() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for t in &corpus.triplets {
            assert!(find_subsequence(&t.context, &t.target).is_some());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_corpus(&small_config()).unwrap();
        let b = generate_corpus(&CorpusConfig {
            seed: 1,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.documents, b.documents);
    }

    #[test]
    fn filler_frequency_follows_power_law() {
        // Enough documents that the filler pool alone exceeds 1e5 tokens.
        let cfg = CorpusConfig {
            n_documents: 12_000,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let ranks = freq_rank(&corpus.documents);
        let filler = &corpus.layout.fillers;
        let mut counts: Vec<usize> = ranks
            .iter()
            .filter(|(tok, _)| filler.contains(tok))
            .map(|(_, (count, _))| *count)
            .collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let total: usize = counts.iter().sum();
        assert!(total >= 100_000, "only {total} filler tokens");
        let xs: Vec<f64> = (1..=counts.len()).map(|r| (r as f64).ln()).collect();
        let ys: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
        let slope = least_squares_slope(&xs, &ys);
        assert!(
            (slope + cfg.zipf_exponent).abs() <= 0.15,
            "slope {slope} vs exponent {}",
            cfg.zipf_exponent
        );
    }

    #[test]
    fn freq_rank_count_and_tie_rules() {
        let doc = |id, tokens: Vec<TokenId>| Document {
            doc_id: id,
            word_ids: (0..tokens.len() as u32).collect(),
            pos: vec![PosTag::Noun; tokens.len()],
            entities: vec![],
            sent_bounds: vec![0],
            tokens,
        };
        // single-token corpus
        let single = vec![doc(0, vec![7, 7, 7])];
        let r = freq_rank(&single);
        assert_eq!(r[&7], (3, 1));
        // tie broken by ascending id; counts sum to corpus size
        let tied = vec![doc(0, vec![9, 5, 9, 5, 3])];
        let r = freq_rank(&tied);
        assert_eq!(r[&5], (2, 1));
        assert_eq!(r[&9], (2, 2));
        assert_eq!(r[&3], (1, 3));
        let total: usize = r.values().map(|(c, _)| c).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_config()).unwrap();

        let docs_path = dir.path().join("docs.jsonl");
        save_documents_jsonl(&corpus.documents, &corpus.vocab, &docs_path).unwrap();
        assert_eq!(load_documents_jsonl(&docs_path).unwrap(), corpus.documents);

        let trip_path = dir.path().join("triplets.jsonl");
        save_triplets_jsonl(&corpus.triplets, &corpus.vocab, &trip_path).unwrap();
        assert_eq!(load_triplets_jsonl(&trip_path).unwrap(), corpus.triplets);

        let vocab_path = dir.path().join("vocab.json");
        corpus.vocab.save(&vocab_path).unwrap();
        assert_eq!(Vocab::load(&vocab_path).unwrap(), corpus.vocab);
    }

    #[test]
    fn empty_list_round_trips_to_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_documents_jsonl(&[], &Vocab::with_specials(), &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 0);
        assert!(load_documents_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn overlapping_entity_spans_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"doc_id":0,"tokens":[5,6],"word_ids":[0,1],"pos":["PROPN","PROPN"],"entities":[[0,1,"PERSON"]],"sent_bounds":[0],"surface":["a","b"]}"#;
        let bad = r#"{"doc_id":1,"tokens":[5,6],"word_ids":[0,1],"pos":["PROPN","PROPN"],"entities":[[0,2,"PERSON"],[1,2,"CITY"]],"sent_bounds":[0],"surface":["a","b"]}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_documents_jsonl(&path) {
            Err(CorpusError::Invalid { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("overlap"), "{reason}");
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        match load_documents_jsonl(&path) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn subword_names_share_word_ids() {
        let cfg = CorpusConfig {
            n_entities: 10,
            n_documents: 40,
            subword_rate: 1.0,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut seen_pair = false;
        for d in &corpus.documents {
            for &(start, end, kind) in &d.entities {
                if kind == EntityKind::Person {
                    assert_eq!(end - start, 2, "subword_rate=1 makes all names two tokens");
                    assert_eq!(d.word_ids[start], d.word_ids[start + 1]);
                    seen_pair = true;
                }
            }
        }
        assert!(seen_pair);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            CorpusConfig {
                n_entities: 0,
                ..CorpusConfig::default()
            },
            CorpusConfig {
                sentences_per_doc: (3, 2),
                ..CorpusConfig::default()
            },
            CorpusConfig {
                subword_rate: 1.5,
                ..CorpusConfig::default()
            },
            CorpusConfig {
                zipf_exponent: f64::NAN,
                ..CorpusConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_corpus(&cfg), Err(CorpusError::Config(_))));
        }
    }

    #[test]
    fn fuzzed_configs_keep_annotations_aligned() {
        let mut meta = RngStream::new(99, "fuzz");
        for i in 0..1000 {
            let cfg = CorpusConfig {
                n_entities: 1 + meta.gen_range(8),
                n_documents: 1 + meta.gen_range(12),
                sentences_per_doc: {
                    let lo = 1 + meta.gen_range(2);
                    (lo, lo + meta.gen_range(3))
                },
                zipf_exponent: 0.5 + meta.uniform01() * 1.5,
                subword_rate: meta.uniform01(),
                finetune_entity_fraction: meta.uniform01(),
                seed: i,
            };
            let corpus = generate_corpus(&cfg).unwrap();
            for d in &corpus.documents {
                d.validate().unwrap();
            }
            for t in &corpus.triplets {
                t.validate().unwrap();
            }
        }
    }
}
