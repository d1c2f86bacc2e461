//! Comparing what two SoPa models attend to in the same words.
//!
//! Each model contributes the subwords matched by its `T` best-scoring
//! patterns. Two subwords are compared by positional Jaccard over their
//! spans; a sample score is the mean of the row and column maxima of the
//! resulting `T × T` matrix, and a dataset score averages sample scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Pair, Vocabulary};
use crate::seq2seq::{ModelError, Seq2Seq};
use crate::sopa::{recover_subwords, MatchResult, SopaError};
use crate::trainer::{GreedyPredictor, Predictor, TrainError};

pub const DEFAULT_TOP_T: usize = 10;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("{0}")]
    Contract(String),
    #[error("top-{requested} requested but only {available} patterns exist")]
    TooFewPatterns { requested: usize, available: usize },
    #[error("no samples left after filtering ({total} examined, none correct for both models)")]
    EmptyReport { total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sopa(#[from] SopaError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, SimilarityError>;

/// A matched span of one boundary-marked word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subword {
    pub word_id: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub text: String,
}

impl Subword {
    pub fn new<S: AsRef<str>>(word_id: usize, word: &[S], start: usize, end: usize) -> Result<Self> {
        if start >= end || end > word.len() {
            return Err(SimilarityError::Contract(format!(
                "span {start}..{end} is empty or outside a word of length {}",
                word.len()
            )));
        }
        Ok(Self {
            word_id,
            start,
            end,
            text: word[start..end].iter().map(AsRef::as_ref).collect(),
        })
    }

    pub fn from_match(word_id: usize, m: &MatchResult) -> Result<Self> {
        if m.start >= m.end {
            return Err(SimilarityError::Contract(format!("pattern {} matched an empty span", m.pattern_id)));
        }
        Ok(Self {
            word_id,
            start: m.start,
            end: m.end,
            text: m.subword.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Jaccard index of two half-open position ranges.
pub fn span_jaccard((s1, e1): (usize, usize), (s2, e2): (usize, usize)) -> f64 {
    let inter = e1.min(e2).saturating_sub(s1.max(s2));
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Positional Jaccard: shared positions over all covered positions.
pub fn jaccard(a: &Subword, b: &Subword) -> Result<f64> {
    if a.word_id != b.word_id {
        return Err(SimilarityError::Contract(format!(
            "subwords of different words ({} and {})",
            a.word_id, b.word_id
        )));
    }
    Ok(span_jaccard((a.start, a.end), (b.start, b.end)))
}

/// The `t` highest-scoring patterns, best first; ties go to the lower id.
pub fn top_t(matches: &[MatchResult], t: usize) -> Result<Vec<MatchResult>> {
    if t > matches.len() || t == 0 {
        return Err(SimilarityError::TooFewPatterns {
            requested: t,
            available: matches.len(),
        });
    }
    let mut sorted: Vec<&MatchResult> = matches.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.pattern_id.cmp(&b.pattern_id)));
    Ok(sorted.into_iter().take(t).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSimilarity {
    pub word: String,
    pub p1: Vec<Subword>,
    pub p2: Vec<Subword>,
    /// `matrix[i][j] = J(p1[i], p2[j])`
    pub matrix: Vec<Vec<f64>>,
    pub value: f64,
}

/// Bidirectional mean of maxima over the pairwise Jaccard matrix.
pub fn sample_similarity(word: &str, p1: Vec<Subword>, p2: Vec<Subword>) -> Result<SampleSimilarity> {
    if p1.len() != p2.len() || p1.is_empty() {
        return Err(SimilarityError::Contract(format!(
            "subword sets must be non-empty and of equal size, got {} and {}",
            p1.len(),
            p2.len()
        )));
    }
    let matrix = p1
        .iter()
        .map(|a| p2.iter().map(|b| jaccard(a, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let value = mean_of_maxima(&matrix);
    Ok(SampleSimilarity {
        word: word.to_string(),
        p1,
        p2,
        matrix,
        value,
    })
}

/// `(Σ row maxima + Σ column maxima) / (rows + cols)` for a square matrix.
pub fn mean_of_maxima(matrix: &[Vec<f64>]) -> f64 {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    let row_max: f64 = matrix.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).sum();
    let col_max: f64 = (0..cols)
        .map(|j| matrix.iter().map(|r| r[j]).fold(0.0, f64::max))
        .sum();
    (row_max + col_max) / (rows + cols) as f64
}

/// A trained SoPa model together with the examples it is judged on.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub name: &'a str,
    pub model: &'a Seq2Seq,
    pub source_vocab: &'a Vocabulary,
    pub target_vocab: &'a Vocabulary,
    /// Evaluation pairs; all views share the source side.
    pub pairs: &'a [Pair],
}

impl ModelView<'_> {
    /// Every pattern's best match in `word` (framed internally).
    pub fn matches(&self, word: &[String]) -> Result<Vec<MatchResult>> {
        let (framed, out) = self.model.match_word(word, self.source_vocab)?;
        Ok(recover_subwords(&out, &framed)?)
    }

    pub fn top_subwords(&self, word_id: usize, word: &[String], t: usize) -> Result<Vec<Subword>> {
        top_t(&self.matches(word)?, t)?
            .iter()
            .map(|m| Subword::from_match(word_id, m))
            .collect()
    }

    fn correct(&self, batch_size: usize) -> Result<Vec<bool>> {
        let predictor = GreedyPredictor {
            model: self.model,
            source_vocab: self.source_vocab,
            target_vocab: self.target_vocab,
            batch_size,
        };
        let sources: Vec<&[String]> = self.pairs.iter().map(|p| p.source.as_slice()).collect();
        let predicted = predictor.predict(&sources)?;
        Ok(predicted.iter().zip(self.pairs).map(|(p, pair)| *p == pair.target).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub word: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub language: String,
    pub model_a: String,
    pub model_b: String,
    pub top_t: usize,
    pub filter_correct: bool,
    pub total: usize,
    pub retained: usize,
    pub retained_fraction: f64,
    /// Mean of the per-sample values.
    pub similarity: f64,
    #[serde(skip)]
    pub samples: Vec<SampleRow>,
}

impl SimilarityReport {
    pub fn samples_tsv(&self) -> String {
        let mut out = String::from("index\tword\tsimilarity\n");
        for s in &self.samples {
            out.push_str(&format!("{}\t{}\t{:?}\n", s.index, s.word, s.value));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimilarityOptions {
    pub top_t: usize,
    pub filter_correct: bool,
    pub batch_size: usize,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            top_t: DEFAULT_TOP_T,
            filter_correct: true,
            batch_size: 256,
        }
    }
}

/// Average sample similarity of two models over their shared evaluation
/// words, optionally restricted to words both models get right.
pub fn dataset_similarity(
    language: &str,
    a: &ModelView<'_>,
    b: &ModelView<'_>,
    opts: SimilarityOptions,
) -> Result<SimilarityReport> {
    if a.pairs.len() != b.pairs.len() || a.pairs.iter().zip(b.pairs).any(|(x, y)| x.source != y.source) {
        return Err(SimilarityError::Contract(
            "the two models are evaluated on different source words".into(),
        ));
    }
    let total = a.pairs.len();
    let keep: Vec<bool> = if opts.filter_correct {
        let ca = a.correct(opts.batch_size)?;
        let cb = b.correct(opts.batch_size)?;
        ca.iter().zip(&cb).map(|(&x, &y)| x && y).collect()
    } else {
        vec![true; total]
    };
    let mut samples = Vec::new();
    for (index, pair) in a.pairs.iter().enumerate().filter(|(i, _)| keep[*i]) {
        let p1 = a.top_subwords(index, &pair.source, opts.top_t)?;
        let p2 = b.top_subwords(index, &pair.source, opts.top_t)?;
        let word: String = pair.source.concat();
        let s = sample_similarity(&word, p1, p2)?;
        samples.push(SampleRow {
            index,
            word,
            value: s.value,
        });
    }
    if samples.is_empty() {
        return Err(SimilarityError::EmptyReport { total });
    }
    let retained = samples.len();
    let similarity = samples.iter().map(|s| s.value).sum::<f64>() / retained as f64;
    Ok(SimilarityReport {
        language: language.to_string(),
        model_a: a.name.to_string(),
        model_b: b.name.to_string(),
        top_t: opts.top_t,
        filter_correct: opts.filter_correct,
        total,
        retained,
        retained_fraction: retained as f64 / total as f64,
        similarity,
        samples,
    })
}

/// Which pattern matches count towards subword frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubwordCounting {
    #[default]
    AllPatterns,
    TopT(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubwordFrequencies {
    /// Most frequent first; ties in lexical order.
    pub ranked: Vec<(String, usize)>,
    pub total: usize,
}

impl SubwordFrequencies {
    pub fn top(&self, n: usize) -> Vec<String> {
        self.ranked.iter().take(n).map(|(s, _)| s.clone()).collect()
    }
}

/// Counts best-match subwords over `words`.
pub fn subword_frequencies(view: &ModelView<'_>, words: &[&[String]], counting: SubwordCounting) -> Result<SubwordFrequencies> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for word in words {
        let all = view.matches(word)?;
        let chosen = match counting {
            SubwordCounting::AllPatterns => all,
            SubwordCounting::TopT(t) => top_t(&all, t)?,
        };
        for m in chosen {
            *counts.entry(m.subword).or_default() += 1;
            total += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(SubwordFrequencies { ranked, total })
}
