//! Soft patterns: a bank of linear-chain weighted finite-state automata scored
//! against every subword of a boundary-marked word.
//!
//! A pattern of size `k` has states `0..k` and `k-1` forward arcs; arc `j`
//! leads from state `j` to state `j+1`. Each arc can be taken either as a
//! *main* transition (consumes one character, score
//! `log σ(u_j·x + a_j)`) or as an *epsilon* (consumes nothing, score
//! `log σ(c_j)`). State `j < k-1` also carries a self-loop consuming one
//! character with score `log σ(v_j·x + b_j)`.
//!
//! Matching is a Viterbi (max-sum) pass. Paths may start at any position and
//! must consume at least one character. Two value vectors are kept per
//! pattern: `h[j]`, the best path that has consumed at least one character and
//! ends at the current position in state `j`, and the input-independent
//! `z[j]`, the best path that has consumed nothing (start state followed by
//! epsilons only). Consuming character `t`:
//!
//! ```text
//! h'[j] = max( max(h, z)[j-1] + main_{j-1}(x_t),  max(h, z)[j] + self_j(x_t) )
//! h'[j] = max( h'[j], h'[j-1] + eps_{j-1} )          left to right
//! ```
//!
//! and the end-state value `h'[k-1]` is the score of the best match ending at
//! `t`. Ties are resolved towards the earlier start, and across positions
//! towards the earlier end.

use ndarray::{Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{fan_in_bound, uniform, ParamError, ParamStore};
use crate::tensor::{log_sigmoid, Matrix, Tape, TensorError, Var};

/// Score reported at positions where no legal match can end yet (only
/// reachable in [`EpsilonMode::BeforeMain`]).
pub const NO_MATCH_SCORE: f64 = -1.0e4;

#[derive(Debug, Error)]
pub enum SopaError {
    #[error("pattern size {0} is below the minimum of 2 (start and end state)")]
    PatternTooShort(usize),
    #[error("pattern spec has no patterns")]
    NoPatterns,
    #[error("embedding dimension {found} does not match pattern parameters ({expected})")]
    EmbedDim { expected: usize, found: usize },
    #[error("cannot match an empty input")]
    EmptyInput,
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Pattern sizes (start and end state included) and how many of each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub lengths: Vec<usize>,
    pub count_per_length: usize,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            lengths: vec![3, 4, 5],
            count_per_length: 40,
        }
    }
}

impl PatternSpec {
    pub fn new(lengths: Vec<usize>, count_per_length: usize) -> Result<Self, SopaError> {
        let spec = Self {
            lengths,
            count_per_length,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SopaError> {
        if let Some(&k) = self.lengths.iter().find(|&&k| k < 2) {
            return Err(SopaError::PatternTooShort(k));
        }
        if self.total() == 0 {
            return Err(SopaError::NoPatterns);
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.lengths.len() * self.count_per_length
    }

    /// Size of every pattern in id order.
    pub fn sizes(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .flat_map(|&k| std::iter::repeat_n(k, self.count_per_length))
            .collect()
    }
}

/// How epsilon arcs may be combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// Epsilons may chain and may end a match.
    #[default]
    Chained,
    /// Every epsilon is immediately followed by a main transition, so two
    /// epsilons never touch and no match ends on an epsilon.
    BeforeMain,
}

/// Column offsets of each pattern's arcs inside the packed parameter matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternLayout {
    sizes: Vec<usize>,
    arc_offsets: Vec<usize>,
    state_offsets: Vec<usize>,
    total_arcs: usize,
    total_states: usize,
}

impl PatternLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self, SopaError> {
        if sizes.is_empty() {
            return Err(SopaError::NoPatterns);
        }
        let mut arc_offsets = Vec::with_capacity(sizes.len());
        let mut state_offsets = Vec::with_capacity(sizes.len());
        let (mut arcs, mut states) = (0, 0);
        for &k in &sizes {
            if k < 2 {
                return Err(SopaError::PatternTooShort(k));
            }
            arc_offsets.push(arcs);
            state_offsets.push(states);
            arcs += k - 1;
            states += k;
        }
        Ok(Self {
            sizes,
            arc_offsets,
            state_offsets,
            total_arcs: arcs,
            total_states: states,
        })
    }

    pub fn from_spec(spec: &PatternSpec) -> Result<Self, SopaError> {
        spec.validate()?;
        Self::new(spec.sizes())
    }

    pub fn num_patterns(&self) -> usize {
        self.sizes.len()
    }

    pub fn total_arcs(&self) -> usize {
        self.total_arcs
    }

    pub fn size(&self, pattern: usize) -> usize {
        self.sizes[pattern]
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Packed column of arc `arc` (and of the self-loop on state `arc`).
    pub fn arc_column(&self, pattern: usize, arc: usize) -> usize {
        self.arc_offsets[pattern] + arc
    }
}

/// Parameter names inside a [`ParamStore`], relative to a prefix.
const MAIN_W: &str = "main_w";
const MAIN_B: &str = "main_b";
const SELF_W: &str = "self_w";
const SELF_B: &str = "self_b";
const EPS: &str = "eps";

/// Transition parameters for every pattern, packed column-wise: column
/// `layout.arc_column(p, j)` holds arc `j` of pattern `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternParams {
    pub layout: PatternLayout,
    /// `[embed_dim × arcs]`
    pub main_w: Matrix,
    /// `[1 × arcs]`
    pub main_b: Matrix,
    pub self_w: Matrix,
    pub self_b: Matrix,
    /// `[1 × arcs]`, epsilon logits.
    pub eps: Matrix,
}

impl PatternParams {
    pub fn zeros(layout: PatternLayout, embed_dim: usize) -> Self {
        let a = layout.total_arcs();
        Self {
            main_w: Matrix::zeros((embed_dim, a)),
            main_b: Matrix::zeros((1, a)),
            self_w: Matrix::zeros((embed_dim, a)),
            self_b: Matrix::zeros((1, a)),
            eps: Matrix::zeros((1, a)),
            layout,
        }
    }

    pub fn random(layout: PatternLayout, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = layout.total_arcs();
        let k = fan_in_bound(embed_dim);
        Self {
            main_w: uniform(rng, embed_dim, a, k),
            main_b: uniform(rng, 1, a, k),
            self_w: uniform(rng, embed_dim, a, k),
            self_b: uniform(rng, 1, a, k),
            eps: uniform(rng, 1, a, k),
            layout,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.main_w.nrows()
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<(), ParamError> {
        store.insert(&format!("{prefix}.{MAIN_W}"), self.main_w.clone())?;
        store.insert(&format!("{prefix}.{MAIN_B}"), self.main_b.clone())?;
        store.insert(&format!("{prefix}.{SELF_W}"), self.self_w.clone())?;
        store.insert(&format!("{prefix}.{SELF_B}"), self.self_b.clone())?;
        store.insert(&format!("{prefix}.{EPS}"), self.eps.clone())?;
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str, layout: PatternLayout) -> Result<Self, ParamError> {
        let get = |n: &str| -> Result<Matrix, ParamError> { Ok(store.get(&format!("{prefix}.{n}"))?.value.clone()) };
        Ok(Self {
            main_w: get(MAIN_W)?,
            main_b: get(MAIN_B)?,
            self_w: get(SELF_W)?,
            self_b: get(SELF_B)?,
            eps: get(EPS)?,
            layout,
        })
    }

    fn check_dim(&self, d: usize) -> Result<(), SopaError> {
        if d != self.embed_dim() {
            return Err(SopaError::EmbedDim {
                expected: self.embed_dim(),
                found: d,
            });
        }
        Ok(())
    }

    /// Log-space arc scores for a stack of embeddings (one row per symbol).
    pub fn arc_score_matrices(&self, embeddings: &Matrix) -> Result<ArcScoreMatrices, SopaError> {
        self.check_dim(embeddings.ncols())?;
        let main = (embeddings.dot(&self.main_w) + &self.main_b).mapv(log_sigmoid);
        let self_loop = (embeddings.dot(&self.self_w) + &self.self_b).mapv(log_sigmoid);
        let eps = self.eps.row(0).mapv(log_sigmoid).to_vec();
        Ok(ArcScoreMatrices { main, self_loop, eps })
    }
}

/// Per-arc scores for a single character.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcScores {
    pub main: Vec<f64>,
    pub self_loop: Vec<f64>,
    /// Input independent.
    pub eps: Vec<f64>,
}

/// Log-space scores of every arc for every position of an input.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcScoreMatrices {
    /// `[positions × arcs]`
    pub main: Matrix,
    pub self_loop: Matrix,
    pub eps: Vec<f64>,
}

pub fn arc_scores(params: &PatternParams, embedding: &[f64]) -> Result<ArcScores, SopaError> {
    params.check_dim(embedding.len())?;
    let x = ArrayView1::from(embedding);
    let main = (x.dot(&params.main_w) + params.main_b.row(0)).mapv(log_sigmoid).to_vec();
    let self_loop = (x.dot(&params.self_w) + params.self_b.row(0)).mapv(log_sigmoid).to_vec();
    let eps = params.eps.row(0).mapv(log_sigmoid).to_vec();
    Ok(ArcScores { main, self_loop, eps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Unreached,
    MainFromConsumed,
    MainFromStart,
    SelfFromConsumed,
    SelfFromStart,
    EpsMainFromConsumed,
    EpsMainFromStart,
}

/// One step of a traced best path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStep {
    Main { arc: usize, position: usize },
    SelfLoop { state: usize, position: usize },
    Epsilon { arc: usize },
}

/// Viterbi tables for one input.
#[derive(Debug, Clone)]
pub struct DpTrace {
    mode: EpsilonMode,
    len: usize,
    /// `[len × patterns]`, raw (may be `-inf` in `BeforeMain` mode).
    scores: Matrix,
    /// Start position of the best path ending at each `(t, p)`.
    starts: Array2<usize>,
    /// `[len × states]`
    moves: Array2<Move>,
    eps_taken: Array2<bool>,
}

fn better(score: f64, start: usize, best: f64, best_start: usize) -> bool {
    score > best || (score == best && start < best_start)
}

fn start_values(mode: EpsilonMode, eps: &[f64]) -> Vec<f64> {
    let mut z = vec![f64::NEG_INFINITY; eps.len() + 1];
    z[0] = 0.0;
    if mode == EpsilonMode::Chained {
        for j in 1..z.len() {
            z[j] = z[j - 1] + eps[j - 1];
        }
    }
    z
}

impl DpTrace {
    /// Runs the max-sum recursion. `row(t)` maps a position to its row in
    /// `main` / `self_loop`, so time-major packed batches can be read in place.
    pub(crate) fn run(
        layout: &PatternLayout,
        mode: EpsilonMode,
        main: &Matrix,
        self_loop: &Matrix,
        eps: &[f64],
        len: usize,
        row: impl Fn(usize) -> usize,
    ) -> DpTrace {
        let p_count = layout.num_patterns();
        let mut scores = Matrix::zeros((len, p_count));
        let mut starts = Array2::<usize>::zeros((len, p_count));
        let mut moves = Array2::from_elem((len, layout.total_states), Move::Unreached);
        let mut eps_taken = Array2::<bool>::from_elem((len, layout.total_states), false);

        for p in 0..p_count {
            let k = layout.sizes[p];
            let a0 = layout.arc_offsets[p];
            let s0 = layout.state_offsets[p];
            let pe = &eps[a0..a0 + k - 1];
            let z = start_values(mode, pe);
            let mut h = vec![f64::NEG_INFINITY; k];
            let mut hs = vec![0usize; k];
            let mut nh = vec![f64::NEG_INFINITY; k];
            let mut nhs = vec![0usize; k];

            for t in 0..len {
                let r = row(t);
                let m_row = main.row(r);
                let s_row = self_loop.row(r);
                for j in 0..k {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_start = usize::MAX;
                    let mut mv = Move::Unreached;
                    let mut offer = |score: f64, start: usize, m: Move| {
                        if score > f64::NEG_INFINITY && better(score, start, best, best_start) {
                            best = score;
                            best_start = start;
                            mv = m;
                        }
                    };
                    if j >= 1 {
                        let m = m_row[a0 + j - 1];
                        offer(h[j - 1] + m, hs[j - 1], Move::MainFromConsumed);
                        offer(z[j - 1] + m, t, Move::MainFromStart);
                        if mode == EpsilonMode::BeforeMain && j >= 2 {
                            let e = pe[j - 2];
                            offer(h[j - 2] + e + m, hs[j - 2], Move::EpsMainFromConsumed);
                            offer(z[j - 2] + e + m, t, Move::EpsMainFromStart);
                        }
                    }
                    if j + 1 < k {
                        let s = s_row[a0 + j];
                        offer(h[j] + s, hs[j], Move::SelfFromConsumed);
                        offer(z[j] + s, t, Move::SelfFromStart);
                    }
                    nh[j] = best;
                    nhs[j] = best_start;
                    moves[[t, s0 + j]] = mv;
                }
                if mode == EpsilonMode::Chained {
                    for j in 1..k {
                        let c = nh[j - 1] + pe[j - 1];
                        if c > f64::NEG_INFINITY && better(c, nhs[j - 1], nh[j], nhs[j]) {
                            nh[j] = c;
                            nhs[j] = nhs[j - 1];
                            eps_taken[[t, s0 + j]] = true;
                        }
                    }
                }
                scores[[t, p]] = nh[k - 1];
                starts[[t, p]] = nhs[k - 1];
                std::mem::swap(&mut h, &mut nh);
                std::mem::swap(&mut hs, &mut nhs);
            }
        }
        DpTrace {
            mode,
            len,
            scores,
            starts,
            moves,
            eps_taken,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Best match score ending at each position, `[len × patterns]`, with
    /// unreachable positions reported as [`NO_MATCH_SCORE`].
    pub fn position_scores(&self) -> Matrix {
        self.scores.mapv(|v| if v.is_finite() { v } else { NO_MATCH_SCORE })
    }

    /// First position holding the maximal end-state score of `pattern`.
    pub fn best_end(&self, pattern: usize) -> usize {
        let col = self.scores.column(pattern);
        let mut best = 0;
        for t in 1..self.len {
            if col[t] > col[best] {
                best = t;
            }
        }
        best
    }

    /// Half-open span of the best match ending at `end_pos`.
    pub fn span(&self, pattern: usize, end_pos: usize) -> (usize, usize) {
        (self.starts[[end_pos, pattern]], end_pos + 1)
    }

    /// Reconstructs the best path of `pattern` ending at `end_pos`, in
    /// reverse order (end state first).
    pub fn trace(&self, layout: &PatternLayout, pattern: usize, end_pos: usize) -> Vec<PathStep> {
        let k = layout.sizes[pattern];
        let s0 = layout.state_offsets[pattern];
        let mut steps = Vec::new();
        let mut j = k - 1;
        let mut t = end_pos;
        let start_prefix = |steps: &mut Vec<PathStep>, upto: usize| {
            for arc in (0..upto).rev() {
                steps.push(PathStep::Epsilon { arc });
            }
        };
        loop {
            if self.mode == EpsilonMode::Chained && j > 0 && self.eps_taken[[t, s0 + j]] {
                steps.push(PathStep::Epsilon { arc: j - 1 });
                j -= 1;
                continue;
            }
            let mv = self.moves[[t, s0 + j]];
            match mv {
                Move::MainFromConsumed => {
                    steps.push(PathStep::Main { arc: j - 1, position: t });
                    j -= 1;
                    t -= 1;
                }
                Move::MainFromStart => {
                    steps.push(PathStep::Main { arc: j - 1, position: t });
                    start_prefix(&mut steps, j - 1);
                    break;
                }
                Move::SelfFromConsumed => {
                    steps.push(PathStep::SelfLoop { state: j, position: t });
                    t -= 1;
                }
                Move::SelfFromStart => {
                    steps.push(PathStep::SelfLoop { state: j, position: t });
                    start_prefix(&mut steps, j);
                    break;
                }
                Move::EpsMainFromConsumed => {
                    steps.push(PathStep::Main { arc: j - 1, position: t });
                    steps.push(PathStep::Epsilon { arc: j - 2 });
                    j -= 2;
                    t -= 1;
                }
                Move::EpsMainFromStart => {
                    steps.push(PathStep::Main { arc: j - 1, position: t });
                    steps.push(PathStep::Epsilon { arc: j - 2 });
                    start_prefix(&mut steps, j - 2);
                    break;
                }
                Move::Unreached => break,
            }
        }
        steps
    }

    /// Pushes `grad` (`[len × patterns]`, w.r.t. position scores) back onto
    /// the arc scores that produced each best path. Gradients are added into
    /// `g_main` / `g_self` at rows `row(t)` and into `g_eps`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backprop(
        &self,
        layout: &PatternLayout,
        grad: impl Fn(usize, usize) -> f64,
        row: impl Fn(usize) -> usize,
        g_main: &mut Matrix,
        g_self: &mut Matrix,
        g_eps: &mut [f64],
    ) {
        for p in 0..layout.num_patterns() {
            let k = layout.sizes[p];
            let a0 = layout.arc_offsets[p];
            let s0 = layout.state_offsets[p];
            let mut g_h = vec![0.0; k];
            let mut g_prev = vec![0.0; k];
            let chained = self.mode == EpsilonMode::Chained;
            let to_start = |g_eps: &mut [f64], j: usize, g: f64| {
                if chained {
                    for e in &mut g_eps[a0..a0 + j] {
                        *e += g;
                    }
                }
            };
            for t in (0..self.len).rev() {
                if self.scores[[t, p]].is_finite() {
                    g_h[k - 1] += grad(t, p);
                }
                if chained {
                    for j in (1..k).rev() {
                        if self.eps_taken[[t, s0 + j]] && g_h[j] != 0.0 {
                            let g = std::mem::take(&mut g_h[j]);
                            g_h[j - 1] += g;
                            g_eps[a0 + j - 1] += g;
                        }
                    }
                }
                g_prev.iter_mut().for_each(|v| *v = 0.0);
                let r = row(t);
                for j in 0..k {
                    let g = g_h[j];
                    if g == 0.0 {
                        continue;
                    }
                    let mv = self.moves[[t, s0 + j]];
                    match mv {
                        Move::MainFromConsumed => {
                            g_main[[r, a0 + j - 1]] += g;
                            g_prev[j - 1] += g;
                        }
                        Move::MainFromStart => {
                            g_main[[r, a0 + j - 1]] += g;
                            to_start(g_eps, j - 1, g);
                        }
                        Move::SelfFromConsumed => {
                            g_self[[r, a0 + j]] += g;
                            g_prev[j] += g;
                        }
                        Move::SelfFromStart => {
                            g_self[[r, a0 + j]] += g;
                            to_start(g_eps, j, g);
                        }
                        Move::EpsMainFromConsumed => {
                            g_main[[r, a0 + j - 1]] += g;
                            g_eps[a0 + j - 2] += g;
                            g_prev[j - 2] += g;
                        }
                        Move::EpsMainFromStart => {
                            g_main[[r, a0 + j - 1]] += g;
                            g_eps[a0 + j - 2] += g;
                            to_start(g_eps, j - 2, g);
                        }
                        Move::Unreached => {}
                    }
                }
                std::mem::swap(&mut g_h, &mut g_prev);
            }
        }
    }
}

/// Sum of the arc scores along a traced path.
pub fn rescore_path(layout: &PatternLayout, pattern: usize, arcs: &ArcScoreMatrices, path: &[PathStep]) -> f64 {
    path.iter()
        .map(|step| match *step {
            PathStep::Main { arc, position } => arcs.main[[position, layout.arc_column(pattern, arc)]],
            PathStep::SelfLoop { state, position } => arcs.self_loop[[position, layout.arc_column(pattern, state)]],
            PathStep::Epsilon { arc } => arcs.eps[layout.arc_column(pattern, arc)],
        })
        .sum()
}

/// The best subword of one pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pattern_id: usize,
    pub score: f64,
    /// Start index into the boundary-marked input.
    pub start: usize,
    /// Exclusive end index.
    pub end: usize,
    pub subword: String,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Best match score per pattern over the whole input.
    pub final_scores: Vec<f64>,
    /// `[len × patterns]`: best score of a match ending at each position.
    pub position_scores: Matrix,
    /// Position at which each pattern's best match ends.
    pub best_ends: Vec<usize>,
    /// Half-open span of each pattern's best match.
    pub spans: Vec<(usize, usize)>,
    pub trace: DpTrace,
}

impl EncoderOutput {
    fn from_trace(trace: DpTrace, num_patterns: usize) -> Self {
        let position_scores = trace.position_scores();
        let best_ends: Vec<usize> = (0..num_patterns).map(|p| trace.best_end(p)).collect();
        let final_scores = best_ends.iter().enumerate().map(|(p, &t)| position_scores[[t, p]]).collect();
        let spans = best_ends.iter().enumerate().map(|(p, &t)| trace.span(p, t)).collect();
        Self {
            final_scores,
            position_scores,
            best_ends,
            spans,
            trace,
        }
    }

    pub fn num_patterns(&self) -> usize {
        self.final_scores.len()
    }
}

/// Matches every pattern against `embeddings` (`[len × embed_dim]`, one row
/// per boundary-marked symbol).
pub fn match_embeddings(params: &PatternParams, embeddings: &Matrix, mode: EpsilonMode) -> Result<EncoderOutput, SopaError> {
    let len = embeddings.nrows();
    if len == 0 {
        return Err(SopaError::EmptyInput);
    }
    let arcs = params.arc_score_matrices(embeddings)?;
    let trace = DpTrace::run(&params.layout, mode, &arcs.main, &arcs.self_loop, &arcs.eps, len, |t| t);
    Ok(EncoderOutput::from_trace(trace, params.layout.num_patterns()))
}

/// Matches a time-major packed batch: row `t * batch + b` holds symbol `t` of
/// example `b`. Rows at or beyond `lengths[b]` are ignored.
pub fn batch_match(
    params: &PatternParams,
    embeddings: &Matrix,
    lengths: &[usize],
    mode: EpsilonMode,
) -> Result<Vec<EncoderOutput>, SopaError> {
    let batch = lengths.len();
    if batch == 0 || !embeddings.nrows().is_multiple_of(batch) {
        return Err(SopaError::Contract(format!(
            "{} embedding rows do not tile a batch of {batch}",
            embeddings.nrows()
        )));
    }
    let steps = embeddings.nrows() / batch;
    let arcs = params.arc_score_matrices(embeddings)?;
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            if len == 0 || len > steps {
                return Err(SopaError::EmptyInput);
            }
            let trace = DpTrace::run(&params.layout, mode, &arcs.main, &arcs.self_loop, &arcs.eps, len, |t| t * batch + b);
            Ok(EncoderOutput::from_trace(trace, params.layout.num_patterns()))
        })
        .collect()
}

/// Attaches the matched characters to each pattern's best span.
pub fn recover_subwords<S: AsRef<str>>(output: &EncoderOutput, symbols: &[S]) -> Result<Vec<MatchResult>, SopaError> {
    if symbols.len() != output.trace.len() {
        return Err(SopaError::Contract(format!(
            "{} symbols for an encoding of length {}",
            symbols.len(),
            output.trace.len()
        )));
    }
    Ok(output
        .spans
        .iter()
        .enumerate()
        .map(|(p, &(start, end))| MatchResult {
            pattern_id: p,
            score: output.final_scores[p],
            start,
            end,
            subword: symbols[start..end].iter().map(AsRef::as_ref).collect(),
        })
        .collect())
}

/// One TSV row per match: `word, pattern_id, score, start, end, subword`.
pub fn debug_dump(word: &str, matches: &[MatchResult]) -> String {
    matches
        .iter()
        .map(|m| format!("{word}\t{}\t{}\t{}\t{}\t{}\n", m.pattern_id, m.score, m.start, m.end, m.subword))
        .collect()
}

/// Tape outputs of a batched soft-pattern pass.
pub struct SopaTapeOutput<'t> {
    /// `[(steps·batch) × patterns]`, time-major; padding rows are zero.
    pub position_scores: Var<'t>,
    /// `[batch × patterns]`
    pub final_scores: Var<'t>,
}

/// Differentiable soft-pattern pass over a time-major packed batch of
/// embeddings (`[(steps·batch) × embed_dim]`).
#[allow(clippy::too_many_arguments)]
pub fn sopa_tape<'t>(
    tape: &'t Tape,
    layout: &PatternLayout,
    mode: EpsilonMode,
    embeddings: Var<'t>,
    main_w: Var<'t>,
    main_b: Var<'t>,
    self_w: Var<'t>,
    self_b: Var<'t>,
    eps: Var<'t>,
    lengths: &[usize],
) -> Result<SopaTapeOutput<'t>, SopaError> {
    let batch = lengths.len();
    let rows = embeddings.rows();
    if batch == 0 || !rows.is_multiple_of(batch) {
        return Err(SopaError::Contract(format!("{rows} embedding rows do not tile a batch of {batch}")));
    }
    let steps = rows / batch;
    if lengths.iter().any(|&l| l == 0 || l > steps) {
        return Err(SopaError::EmptyInput);
    }
    if embeddings.cols() != main_w.rows() {
        return Err(SopaError::EmbedDim {
            expected: main_w.rows(),
            found: embeddings.cols(),
        });
    }
    let main = embeddings.matmul(main_w)?.add(main_b)?.log_sigmoid();
    let self_loop = embeddings.matmul(self_w)?.add(self_b)?.log_sigmoid();
    let eps_scores = eps.log_sigmoid();

    let main_v = main.value();
    let self_v = self_loop.value();
    let eps_v = eps_scores.value().row(0).to_vec();
    let p_count = layout.num_patterns();
    let traces: Vec<DpTrace> = lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| DpTrace::run(layout, mode, &main_v, &self_v, &eps_v, len, |t| t * batch + b))
        .collect();

    let mut positions = Matrix::zeros((rows, p_count));
    let mut finals = Matrix::zeros((batch, p_count));
    let mut best_rows = Vec::with_capacity(batch * p_count);
    for (b, trace) in traces.iter().enumerate() {
        let ps = trace.position_scores();
        for t in 0..trace.len() {
            positions.row_mut(t * batch + b).assign(&ps.row(t));
        }
        for p in 0..p_count {
            let t = trace.best_end(p);
            finals[[b, p]] = ps[[t, p]];
            best_rows.push(t * batch + b);
        }
    }

    let layout_c = layout.clone();
    let lengths_c = lengths.to_vec();
    let position_var = tape.custom(&[main, self_loop, eps_scores], positions, move |g| {
        let mut g_main = Matrix::zeros((rows, layout_c.total_arcs()));
        let mut g_self = Matrix::zeros((rows, layout_c.total_arcs()));
        let mut g_eps = vec![0.0; layout_c.total_arcs()];
        for (b, trace) in traces.iter().enumerate() {
            debug_assert_eq!(trace.len(), lengths_c[b]);
            trace.backprop(
                &layout_c,
                |t, p| g[[t * batch + b, p]],
                |t| t * batch + b,
                &mut g_main,
                &mut g_self,
                &mut g_eps,
            );
        }
        let g_eps = Matrix::from_shape_vec((1, g_eps.len()), g_eps).expect("row vector");
        vec![Some(g_main), Some(g_self), Some(g_eps)]
    });

    let final_var = tape.custom(&[position_var], finals, move |g| {
        let mut gx = Matrix::zeros((rows, p_count));
        for b in 0..batch {
            for p in 0..p_count {
                gx[[best_rows[b * p_count + p], p]] += g[[b, p]];
            }
        }
        vec![Some(gx)]
    });

    Ok(SopaTapeOutput {
        position_scores: position_var,
        final_scores: final_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    fn single_pattern(k: usize, d: usize, seed: u64) -> PatternParams {
        PatternParams::random(PatternLayout::new(vec![k]).unwrap(), d, &mut seeded_rng(seed))
    }

    #[test]
    fn spec_defaults() {
        let spec = PatternSpec::default();
        assert_eq!(spec.total(), 120);
        let layout = PatternLayout::from_spec(&spec).unwrap();
        assert_eq!(layout.total_arcs(), 40 * (2 + 3 + 4));
        assert!(matches!(PatternSpec::new(vec![1], 2), Err(SopaError::PatternTooShort(1))));
    }

    #[test]
    fn arc_score_basics() {
        let params = PatternParams::zeros(PatternLayout::new(vec![2]).unwrap(), 3);
        let s = arc_scores(&params, &[0.4, -1.0, 2.0]).unwrap();
        assert!((s.main[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!(matches!(arc_scores(&params, &[0.0]), Err(SopaError::EmbedDim { .. })));

        let mut params = params;
        params.main_b[[0, 0]] = 60.0;
        let s = arc_scores(&params, &[0.0, 0.0, 0.0]).unwrap();
        assert!(s.main[0] <= 0.0 && s.main[0] > -1e-25);
    }

    #[test]
    fn arc_scores_match_scalar_recomputation() {
        let params = single_pattern(4, 5, 11);
        let x = [0.3, -0.7, 1.1, 0.05, -2.0];
        let s = arc_scores(&params, &x).unwrap();
        for a in 0..3 {
            let dot: f64 = (0..5).map(|i| x[i] * params.main_w[[i, a]]).sum::<f64>() + params.main_b[[0, a]];
            let expected = -(1.0 + (-dot).exp()).ln();
            assert!((s.main[a] - expected).abs() < 1e-12);
            let dot: f64 = (0..5).map(|i| x[i] * params.self_w[[i, a]]).sum::<f64>() + params.self_b[[0, a]];
            assert!((s.self_loop[a] + (1.0 + (-dot).exp()).ln()).abs() < 1e-12);
            assert!((s.eps[a] + (1.0 + (-params.eps[[0, a]]).exp()).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn size_two_picks_best_single_character() {
        let params = single_pattern(2, 4, 3);
        let emb = crate::params::uniform(&mut seeded_rng(4), 6, 4, 1.0);
        let out = match_embeddings(&params, &emb, EpsilonMode::Chained).unwrap();
        let arcs = params.arc_score_matrices(&emb).unwrap();
        let col = arcs.main.column(0);
        let (best_t, best) = col.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (t, &v)| if v > acc.1 { (t, v) } else { acc });
        assert_eq!(out.final_scores[0], best);
        assert_eq!(out.spans[0], (best_t, best_t + 1));
    }

    #[test]
    fn empty_input_rejected() {
        let params = single_pattern(3, 2, 1);
        assert!(matches!(match_embeddings(&params, &Matrix::zeros((0, 2)), EpsilonMode::Chained), Err(SopaError::EmptyInput)));
    }

    #[test]
    fn all_epsilon_path_is_not_a_match() {
        // epsilons nearly free, main transitions very costly: the best match
        // still consumes a character.
        let mut params = PatternParams::zeros(PatternLayout::new(vec![3]).unwrap(), 1);
        params.eps.fill(50.0);
        params.main_b.fill(-20.0);
        params.self_b.fill(-20.0);
        let out = match_embeddings(&params, &Matrix::zeros((3, 1)), EpsilonMode::Chained).unwrap();
        let (s, e) = out.spans[0];
        assert!(e > s);
        assert!((out.final_scores[0] - (log_sigmoid(50.0) + log_sigmoid(-20.0))).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_leftmost_span() {
        let params = PatternParams::zeros(PatternLayout::new(vec![3]).unwrap(), 2);
        let out = match_embeddings(&params, &Matrix::zeros((5, 2)), EpsilonMode::Chained).unwrap();
        // all arcs score ln 0.5: eps+main ties main+main? no: eps = ln .5 too,
        // so one main plus one epsilon (2 arcs) ties two mains; earliest end wins.
        assert_eq!(out.best_ends[0], 0);
        assert_eq!(out.spans[0], (0, 1));
    }

    #[test]
    fn final_is_max_of_positions_and_nonpositive() {
        let params = PatternParams::random(PatternLayout::new(vec![3, 4, 5, 2]).unwrap(), 3, &mut seeded_rng(8));
        let emb = crate::params::uniform(&mut seeded_rng(9), 7, 3, 2.0);
        for mode in [EpsilonMode::Chained, EpsilonMode::BeforeMain] {
            let out = match_embeddings(&params, &emb, mode).unwrap();
            for p in 0..4 {
                let col_max = out.position_scores.column(p).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                assert_eq!(out.final_scores[p], col_max);
                assert!(out.final_scores[p] <= 0.0);
            }
        }
    }

    #[test]
    fn recovered_subwords_slice_input() {
        let params = PatternParams::random(PatternLayout::new(vec![3, 4]).unwrap(), 2, &mut seeded_rng(2));
        let symbols: Vec<String> = "^ablakban$".chars().map(String::from).collect();
        let emb = crate::params::uniform(&mut seeded_rng(5), symbols.len(), 2, 1.0);
        let out = match_embeddings(&params, &emb, EpsilonMode::Chained).unwrap();
        let matches = recover_subwords(&out, &symbols).unwrap();
        for m in &matches {
            assert!(m.start < m.end && m.end <= symbols.len());
            assert_eq!(m.subword, symbols[m.start..m.end].concat());
        }
        assert!(recover_subwords(&out, &symbols[1..]).is_err());
        let dump = debug_dump("ablakban", &matches);
        assert_eq!(dump.lines().count(), 2);
        assert_eq!(dump.lines().next().unwrap().split('\t').count(), 6);
    }

    #[test]
    fn batch_matches_solo_runs() {
        let params = PatternParams::random(PatternLayout::new(vec![3, 4, 5]).unwrap(), 3, &mut seeded_rng(21));
        let lens = [4usize, 7, 2, 5];
        let steps = 7;
        let packed = crate::params::uniform(&mut seeded_rng(22), steps * lens.len(), 3, 1.5);
        let outs = batch_match(&params, &packed, &lens, EpsilonMode::Chained).unwrap();
        for (b, &len) in lens.iter().enumerate() {
            let solo = Matrix::from_shape_fn((len, 3), |(t, d)| packed[[t * lens.len() + b, d]]);
            let single = match_embeddings(&params, &solo, EpsilonMode::Chained).unwrap();
            for p in 0..3 {
                assert!((single.final_scores[p] - outs[b].final_scores[p]).abs() < 1e-9);
                assert_eq!(single.spans[p], outs[b].spans[p]);
            }
        }
    }

    #[test]
    fn tape_forward_agrees_with_plain_pass() {
        let params = PatternParams::random(PatternLayout::new(vec![3, 5]).unwrap(), 2, &mut seeded_rng(40));
        let lens = [3usize, 5];
        let packed = crate::params::uniform(&mut seeded_rng(41), 10, 2, 1.0);
        let tape = Tape::new();
        let out = sopa_tape(
            &tape,
            &params.layout,
            EpsilonMode::Chained,
            tape.constant(packed.clone()),
            tape.leaf(params.main_w.clone()),
            tape.leaf(params.main_b.clone()),
            tape.leaf(params.self_w.clone()),
            tape.leaf(params.self_b.clone()),
            tape.leaf(params.eps.clone()),
            &lens,
        )
        .unwrap();
        let plain = batch_match(&params, &packed, &lens, EpsilonMode::Chained).unwrap();
        let finals = out.final_scores.value();
        for b in 0..2 {
            for p in 0..2 {
                assert_eq!(finals[[b, p]], plain[b].final_scores[p]);
            }
        }
        // padding row of the short example is zero
        assert_eq!(out.position_scores.value().row(4 * 2).sum(), 0.0);
    }
}
