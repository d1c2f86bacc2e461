//! UniMorph triplet ingestion, split sampling and task rendering.
//!
//! All three tasks read the inflected form as their source. Morphological
//! analysis predicts the tag sequence (tags are standalone symbols with their
//! own vocabulary), lemmatization predicts the lemma and copy reproduces the
//! source; the latter two share one character vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{permutation, seeded_rng};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Word-start marker prepended to every encoder input.
pub const BOW: &str = "^";
/// Word-end marker appended to every encoder input.
pub const EOW: &str = "$";

pub const DEFAULT_TRAIN: usize = 10_000;
pub const DEFAULT_DEV: usize = 2_000;
pub const DEFAULT_TEST: usize = 2_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no valid triplets found ({skipped} malformed lines skipped)")]
    Empty { skipped: usize },
    #[error(
        "need at least {required} unique examples for {train}/{dev}/{test} splits, found {available} (short by {})",
        required - available
    )]
    TooFew {
        required: usize,
        available: usize,
        train: usize,
        dev: usize,
        test: usize,
    },
    #[error("unknown task `{0}` (expected analysis, lemmatization or copy)")]
    UnknownTask(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("manifest refers to example {index} but only {available} are available")]
    ManifestIndex { index: usize, available: usize },
}

/// One (lemma, inflected form, tags) triplet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Example {
    pub lemma: String,
    pub form: String,
    pub tags: Vec<String>,
}

impl Example {
    /// Parses `lemma TAB form TAB tags`; tags are whitespace separated.
    pub fn parse_line(line: &str) -> Option<Example> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        let [lemma, form, tags] = fields.as_slice() else {
            return None;
        };
        let (lemma, form) = (lemma.trim(), form.trim());
        let tags: Vec<String> = tags.split_whitespace().map(str::to_string).collect();
        if lemma.is_empty() || form.is_empty() || tags.is_empty() {
            return None;
        }
        Some(Example {
            lemma: lemma.to_string(),
            form: form.to_string(),
            tags,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFile {
    pub examples: Vec<Example>,
    pub skipped: usize,
}

pub fn parse_unimorph_str(text: &str) -> Result<ParsedFile, DataError> {
    let mut examples = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        match Example::parse_line(line) {
            Some(ex) => examples.push(ex),
            None => skipped += 1,
        }
    }
    if examples.is_empty() {
        return Err(DataError::Empty { skipped });
    }
    Ok(ParsedFile { examples, skipped })
}

pub fn parse_unimorph(path: impl AsRef<Path>) -> Result<ParsedFile, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_unimorph_str(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: DEFAULT_TRAIN,
            dev: DEFAULT_DEV,
            test: DEFAULT_TEST,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

/// Sampled, disjoint train/dev/test triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub manifest: SplitManifest,
}

/// Reproducibility record for a sampled split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub sizes: SplitSizes,
    /// Unique triplets in the input, after deduplication.
    pub unique_examples: usize,
    /// Indices into the sorted, deduplicated triplet list.
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Sorted unique triplets; the canonical order makes sampling independent of
/// input line order.
pub fn canonical_examples(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn sample_splits(examples: &[Example], sizes: SplitSizes, seed: u64) -> Result<Splits, DataError> {
    let unique = canonical_examples(examples);
    if unique.len() < sizes.total() {
        return Err(DataError::TooFew {
            required: sizes.total(),
            available: unique.len(),
            train: sizes.train,
            dev: sizes.dev,
            test: sizes.test,
        });
    }
    let order = permutation(&mut seeded_rng(seed), unique.len());
    let train = order[..sizes.train].to_vec();
    let dev = order[sizes.train..sizes.train + sizes.dev].to_vec();
    let test = order[sizes.train + sizes.dev..sizes.total()].to_vec();
    let manifest = SplitManifest {
        seed,
        sizes,
        unique_examples: unique.len(),
        train,
        dev,
        test,
    };
    splits_from_manifest(&unique, manifest)
}

/// Rebuilds splits from a manifest over the canonical triplet list.
pub fn splits_from_manifest(unique: &[Example], manifest: SplitManifest) -> Result<Splits, DataError> {
    let pick = |idx: &[usize]| -> Result<Vec<Example>, DataError> {
        idx.iter()
            .map(|&i| {
                unique.get(i).cloned().ok_or(DataError::ManifestIndex {
                    index: i,
                    available: unique.len(),
                })
            })
            .collect()
    };
    Ok(Splits {
        train: pick(&manifest.train)?,
        dev: pick(&manifest.dev)?,
        test: pick(&manifest.test)?,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Analysis,
    Lemmatization,
    Copy,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Analysis, Task::Lemmatization, Task::Copy];

    /// Whether source and target share one vocabulary and embedding.
    pub fn shares_vocabulary(self) -> bool {
        !matches!(self, Task::Analysis)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Analysis => "analysis",
            Task::Lemmatization => "lemmatization",
            Task::Copy => "copy",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "analysis" | "morphological_analysis" => Ok(Task::Analysis),
            "lemmatization" | "lemmatisation" => Ok(Task::Lemmatization),
            "copy" => Ok(Task::Copy),
            _ => Err(DataError::UnknownTask(s.to_string())),
        }
    }
}

/// Symbol ↔ index map with the four reserved entries at 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { symbols, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.symbols
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>().into()
    }

    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for s in symbols {
            v.add(s.as_ref());
        }
        v
    }

    /// Adds `symbol` if absent and returns its index.
    pub fn add(&mut self, symbol: &str) -> usize {
        if let Some(&i) = self.index.get(symbol) {
            return i;
        }
        let i = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), i);
        i
    }

    pub fn index_of(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn symbol(&self, index: usize) -> &str {
        self.symbols.get(index).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() == RESERVED.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Vec<usize> {
        symbols.iter().map(|s| self.index_of(s.as_ref())).collect()
    }

    /// Maps indices back to symbols, dropping reserved entries.
    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .filter(|&&i| i >= RESERVED.len())
            .map(|&i| self.symbol(i).to_string())
            .collect()
    }
}

/// Splits a word into its characters as standalone symbols.
pub fn chars(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

/// One rendered (source, target) training pair. The source excludes the
/// word-boundary markers; they are added by [`encode_batch`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl Pair {
    pub fn render(example: &Example, task: Task) -> Pair {
        let source = chars(&example.form);
        let target = match task {
            Task::Analysis => example.tags.clone(),
            Task::Lemmatization => chars(&example.lemma),
            Task::Copy => source.clone(),
        };
        Pair { source, target }
    }

    /// The source word as a string, without boundary markers.
    pub fn source_word(&self) -> String {
        self.source.concat()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: Task,
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
    pub source_vocab: Vocabulary,
    /// `None` when the target side shares `source_vocab`.
    pub target_vocab: Option<Vocabulary>,
}

impl TaskDataset {
    pub fn target_vocab(&self) -> &Vocabulary {
        self.target_vocab.as_ref().unwrap_or(&self.source_vocab)
    }

    pub fn shared(&self) -> bool {
        self.target_vocab.is_none()
    }

    pub fn split(&self, name: &str) -> Option<&[Pair]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn build_task(splits: &Splits, task: Task) -> TaskDataset {
    let render = |xs: &[Example]| xs.iter().map(|e| Pair::render(e, task)).collect::<Vec<_>>();
    let (train, dev, test) = (render(&splits.train), render(&splits.dev), render(&splits.test));

    let mut source_vocab = Vocabulary::new();
    let mut target_vocab = Vocabulary::new();
    for p in &train {
        source_vocab.add(BOW);
        for s in &p.source {
            source_vocab.add(s);
        }
        source_vocab.add(EOW);
        let tv = if task.shares_vocabulary() {
            &mut source_vocab
        } else {
            &mut target_vocab
        };
        for s in &p.target {
            tv.add(s);
        }
    }
    TaskDataset {
        task,
        train,
        dev,
        test,
        source_vocab,
        target_vocab: (!task.shares_vocabulary()).then_some(target_vocab),
    }
}

/// Boundary-marked source symbols: `^ w $`.
pub fn frame_source<S: AsRef<str>>(source: &[S]) -> Vec<String> {
    std::iter::once(BOW.to_string())
        .chain(source.iter().map(|s| s.as_ref().to_string()))
        .chain(std::iter::once(EOW.to_string()))
        .collect()
}

/// Right-padded index matrices for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch][max_source_len]`, framed with `^`/`$`.
    pub source: Vec<Vec<usize>>,
    pub source_lens: Vec<usize>,
    /// `[batch][max_target_len]`, framed with SOS/EOS.
    pub target: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn max_source_len(&self) -> usize {
        self.source.first().map_or(0, Vec::len)
    }

    pub fn max_target_len(&self) -> usize {
        self.target.first().map_or(0, Vec::len)
    }
}

fn pad(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<usize>) {
    let lens: Vec<usize> = rows.iter().map(Vec::len).collect();
    let width = lens.iter().copied().max().unwrap_or(0);
    let rows = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (rows, lens)
}

pub fn encode_source<S: AsRef<str>>(source: &[S], vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(&frame_source(source))
}

pub fn encode_target<S: AsRef<str>>(target: &[S], vocab: &Vocabulary) -> Vec<usize> {
    let mut out = Vec::with_capacity(target.len() + 2);
    out.push(SOS);
    out.extend(target.iter().map(|s| vocab.index_of(s.as_ref())));
    out.push(EOS);
    out
}

pub fn encode_batch(pairs: &[&Pair], source_vocab: &Vocabulary, target_vocab: &Vocabulary) -> Result<Batch, DataError> {
    if pairs.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    let (source, source_lens) = pad(pairs.iter().map(|p| encode_source(&p.source, source_vocab)).collect());
    let (target, target_lens) = pad(pairs.iter().map(|p| encode_target(&p.target, target_vocab)).collect());
    Ok(Batch {
        source,
        source_lens,
        target,
        target_lens,
    })
}

/// Splits `pairs` (in the given order) into encoded minibatches.
pub fn batches(
    pairs: &[Pair],
    order: &[usize],
    batch_size: usize,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> Result<Vec<Batch>, DataError> {
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&Pair> = chunk.iter().map(|&i| &pairs[i]).collect();
            encode_batch(&refs, source_vocab, target_vocab)
        })
        .collect()
}
