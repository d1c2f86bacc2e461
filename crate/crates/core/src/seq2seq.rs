//! Encoder-decoder models over character (or tag) sequences.
//!
//! Both models share the decoder: a single-layer LSTM initialised from the
//! encoder summary, with Luong "general" attention over a per-position memory.
//! The SoPa encoder summarises a word by its final pattern scores and exposes
//! the per-position end-state scores as memory; the baseline is a BiLSTM.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{frame_source, Batch, DataError, Task, Vocabulary, EOS, SOS};
use crate::params::{fan_in_bound, normal, seeded_rng, uniform, NamedArray, ParamError, ParamStore, EMBED_INIT_STD};
use crate::sopa::{
    match_embeddings, sopa_tape, EncoderOutput, EpsilonMode, PatternLayout, PatternParams, PatternSpec, SopaError,
};
use crate::tensor::{concat_cols, Matrix, Tape, TensorError, Var};
use crate::params::BoundParams;

pub const CHECKPOINT_FORMAT: &str = "sopa-morph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Sopa(#[from] SopaError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderType {
    Sopa,
    Bilstm,
}

impl EncoderType {
    pub fn name(self) -> &'static str {
        match self {
            EncoderType::Sopa => "sopa",
            EncoderType::Bilstm => "bilstm",
        }
    }
}

impl std::str::FromStr for EncoderType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sopa" => Ok(EncoderType::Sopa),
            "bilstm" | "lstm" => Ok(EncoderType::Bilstm),
            _ => Err(ModelError::Config(format!("unknown encoder `{s}` (expected sopa or bilstm)"))),
        }
    }
}

impl std::fmt::Display for EncoderType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderType,
    pub char_embed_dim: usize,
    pub tag_embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub patterns: PatternSpec,
    #[serde(default)]
    pub epsilon_mode: EpsilonMode,
    /// One embedding table for encoder and decoder inputs.
    pub share_embeddings: bool,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
}

impl ModelConfig {
    /// Full-size defaults for `task` with the given vocabulary sizes.
    pub fn for_task(encoder: EncoderType, task: Task, source_vocab_size: usize, target_vocab_size: usize) -> Self {
        Self {
            encoder,
            char_embed_dim: 50,
            tag_embed_dim: 20,
            hidden: 64,
            layers: 1,
            patterns: PatternSpec::default(),
            epsilon_mode: EpsilonMode::Chained,
            share_embeddings: task.shares_vocabulary(),
            source_vocab_size,
            target_vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.char_embed_dim == 0 {
            return Err(ModelError::Config("hidden and embedding sizes must be positive".into()));
        }
        if self.layers != 1 {
            return Err(ModelError::Config(format!("only single-layer LSTMs are supported, got {}", self.layers)));
        }
        if !self.share_embeddings && self.tag_embed_dim == 0 {
            return Err(ModelError::Config("target embedding size must be positive".into()));
        }
        if self.share_embeddings && self.source_vocab_size != self.target_vocab_size {
            return Err(ModelError::Config(format!(
                "shared embeddings need one vocabulary, got sizes {} and {}",
                self.source_vocab_size, self.target_vocab_size
            )));
        }
        if self.encoder == EncoderType::Sopa {
            self.patterns.validate()?;
        }
        Ok(())
    }

    pub fn target_embed_dim(&self) -> usize {
        if self.share_embeddings {
            self.char_embed_dim
        } else {
            self.tag_embed_dim
        }
    }

    /// Width of the encoder summary fed to the decoder-initialisation layer.
    fn summary_dim(&self) -> usize {
        match self.encoder {
            EncoderType::Sopa => self.patterns.total(),
            EncoderType::Bilstm => 2 * self.hidden,
        }
    }
}

const SOURCE_EMBED: &str = "embed.source";
const TARGET_EMBED: &str = "embed.target";
const SOPA_PREFIX: &str = "encoder.sopa";

/// Tape handles of one LSTM cell: weights `[(input+hidden) × 4·hidden]`
/// (gate order input, forget, cell, output) and bias `[1 × 4·hidden]`.
#[derive(Clone, Copy)]
pub struct LstmCell<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

pub fn init_lstm(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
    let k = fan_in_bound(hidden);
    store.insert(&format!("{prefix}.w"), uniform(rng, input + hidden, 4 * hidden, k))?;
    let mut bias = uniform(rng, 1, 4 * hidden, k);
    bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
    store.insert(&format!("{prefix}.b"), bias)?;
    Ok(())
}

impl<'t> LstmCell<'t> {
    pub fn bind(bound: &BoundParams<'t>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: bound.get(&format!("{prefix}.w"))?,
            bias: bound.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.bias.cols() / 4
    }

    /// One step for a batch: `x` is `[batch × input]`, `h`/`c` `[batch × hidden]`.
    pub fn step(&self, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let hd = self.hidden();
        if x.cols() + hd != self.weight.rows() || h.cols() != hd || c.cols() != hd {
            return Err(ModelError::Contract(format!(
                "lstm step: input {:?}, state {:?}/{:?} against weights {:?}",
                x.shape(),
                h.shape(),
                c.shape(),
                self.weight.shape()
            )));
        }
        let gates = concat_cols(&[x, h])?.matmul(self.weight)?.add(self.bias)?;
        let i = gates.slice_cols(0, hd)?.sigmoid();
        let f = gates.slice_cols(hd, hd)?.sigmoid();
        let g = gates.slice_cols(2 * hd, hd)?.tanh();
        let o = gates.slice_cols(3 * hd, hd)?.sigmoid();
        let c_next = f.mul(c)?.add(i.mul(g)?)?;
        let h_next = o.mul(c_next.tanh())?;
        Ok((h_next, c_next))
    }
}

/// Keeps rows of `old` where `keep` is 0 and takes `new` where it is 1.
fn blend<'t>(new: Var<'t>, old: Var<'t>, keep: &Matrix) -> Result<Var<'t>> {
    let tape = new.tape();
    let m = tape.constant(keep.clone());
    let inv = tape.constant(keep.mapv(|v| 1.0 - v));
    Ok(new.mul(m)?.add(old.mul(inv)?)?)
}

/// Encoder result consumed by the decoder.
pub struct Encoded<'t> {
    pub init_h: Var<'t>,
    pub init_c: Var<'t>,
    /// One `[batch × hidden]` entry per source position.
    pub memory: Vec<Var<'t>>,
    /// `[batch × positions]`, true on padding.
    pub padding: Array2<bool>,
    /// SoPa only: `[batch × patterns]` final pattern scores.
    pub pattern_scores: Option<Var<'t>>,
}

/// Decoder state between steps.
#[derive(Clone, Copy)]
pub struct DecoderState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

pub struct StepOutput<'t> {
    pub logits: Var<'t>,
    pub state: DecoderState<'t>,
    /// `[batch × positions]`
    pub attention: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Option<PatternLayout>,
}

fn time_major(rows: &[Vec<usize>]) -> Vec<usize> {
    let steps = rows.first().map_or(0, Vec::len);
    (0..steps).flat_map(|t| rows.iter().map(move |r| r[t])).collect()
}

fn validity(lens: &[usize], steps: usize) -> Vec<Matrix> {
    (0..steps)
        .map(|t| Matrix::from_shape_fn((lens.len(), 1), |(b, _)| if t < lens[b] { 1.0 } else { 0.0 }))
        .collect()
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let d = config.char_embed_dim;
        params.insert(SOURCE_EMBED, normal(&mut rng, config.source_vocab_size, d, EMBED_INIT_STD))?;
        if !config.share_embeddings {
            params.insert(
                TARGET_EMBED,
                normal(&mut rng, config.target_vocab_size, config.target_embed_dim(), EMBED_INIT_STD),
            )?;
        }
        let layout = match config.encoder {
            EncoderType::Sopa => {
                let layout = PatternLayout::from_spec(&config.patterns)?;
                PatternParams::random(layout.clone(), d, &mut rng).register(&mut params, SOPA_PREFIX)?;
                Some(layout)
            }
            EncoderType::Bilstm => {
                init_lstm(&mut params, "encoder.fwd", d, h, &mut rng)?;
                init_lstm(&mut params, "encoder.bwd", d, h, &mut rng)?;
                None
            }
        };
        let summary = config.summary_dim();
        let mut linear = |name: &str, rows: usize, cols: usize, params: &mut ParamStore| -> Result<()> {
            let k = fan_in_bound(rows);
            params.insert(&format!("{name}_w"), uniform(&mut rng, rows, cols, k))?;
            params.insert(&format!("{name}_b"), uniform(&mut rng, 1, cols, k))?;
            Ok(())
        };
        linear("encoder.init", summary, h, &mut params)?;
        linear("encoder.mem", summary, h, &mut params)?;
        let k = fan_in_bound(h);
        init_lstm(&mut params, "decoder.lstm", config.target_embed_dim(), h, &mut rng)?;
        params.insert("attn.w", uniform(&mut rng, h, h, k))?;
        params.insert("attn.combine", uniform(&mut rng, 2 * h, h, fan_in_bound(2 * h)))?;
        params.insert("out.w", uniform(&mut rng, h, config.target_vocab_size, k))?;
        params.insert("out.b", uniform(&mut rng, 1, config.target_vocab_size, k))?;
        Ok(Self { config, params, layout })
    }

    pub fn layout(&self) -> Option<&PatternLayout> {
        self.layout.as_ref()
    }

    fn target_embed_name(&self) -> &'static str {
        if self.config.share_embeddings {
            SOURCE_EMBED
        } else {
            TARGET_EMBED
        }
    }

    pub fn pattern_params(&self) -> Result<PatternParams> {
        let layout = self
            .layout
            .clone()
            .ok_or_else(|| ModelError::Contract("pattern parameters requested from a BiLSTM model".into()))?;
        Ok(PatternParams::from_store(&self.params, SOPA_PREFIX, layout)?)
    }

    /// Encodes a padded source batch (`[batch][positions]`, boundary-framed).
    pub fn encode<'t>(&self, bound: &BoundParams<'t>, source: &[Vec<usize>], lens: &[usize]) -> Result<Encoded<'t>> {
        let batch = source.len();
        let steps = source.first().map_or(0, Vec::len);
        if batch == 0 || steps == 0 || lens.contains(&0) {
            return Err(ModelError::Contract("cannot encode an empty source".into()));
        }
        let embed = bound.get(SOURCE_EMBED)?;
        let tape = embed.tape();
        let packed = embed.gather_rows(&time_major(source))?;
        let padding = Array2::from_shape_fn((batch, steps), |(b, t)| t >= lens[b]);
        let init_w = bound.get("encoder.init_w")?;
        let init_b = bound.get("encoder.init_b")?;
        let mem_w = bound.get("encoder.mem_w")?;
        let mem_b = bound.get("encoder.mem_b")?;

        let (summary, memory_in, pattern_scores) = match self.config.encoder {
            EncoderType::Sopa => {
                let layout = self.layout.as_ref().expect("sopa model has a layout");
                let get = |n: &str| bound.get(&format!("{SOPA_PREFIX}.{n}"));
                let out = sopa_tape(
                    tape,
                    layout,
                    self.config.epsilon_mode,
                    packed,
                    get("main_w")?,
                    get("main_b")?,
                    get("self_w")?,
                    get("self_b")?,
                    get("eps")?,
                    lens,
                )?;
                (out.final_scores, out.position_scores, Some(out.final_scores))
            }
            EncoderType::Bilstm => {
                let (fwd, bwd, last_f, last_b) = self.bilstm_streams(bound, packed, lens, steps)?;
                let per_pos: Vec<Var<'t>> = fwd
                    .iter()
                    .zip(&bwd)
                    .map(|(&f, &b)| concat_cols(&[f, b]))
                    .collect::<std::result::Result<_, _>>()?;
                let stacked = crate::tensor::concat_rows(&per_pos)?;
                (concat_cols(&[last_f, last_b])?, stacked, None)
            }
        };
        let init_h = summary.matmul(init_w)?.add(init_b)?.tanh();
        let init_c = tape.constant(Matrix::zeros((batch, self.config.hidden)));
        let projected = memory_in.matmul(mem_w)?.add(mem_b)?;
        let memory = (0..steps)
            .map(|t| projected.slice_rows(t * batch, batch))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Encoded {
            init_h,
            init_c,
            memory,
            padding,
            pattern_scores,
        })
    }

    /// Forward and backward LSTM outputs per position, plus each direction's
    /// final state. `packed` is time-major `[(steps·batch) × embed]`.
    pub fn bilstm_streams<'t>(
        &self,
        bound: &BoundParams<'t>,
        packed: Var<'t>,
        lens: &[usize],
        steps: usize,
    ) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>, Var<'t>, Var<'t>)> {
        let batch = lens.len();
        let tape = packed.tape();
        let fwd_cell = LstmCell::bind(bound, "encoder.fwd")?;
        let bwd_cell = LstmCell::bind(bound, "encoder.bwd")?;
        let hd = self.config.hidden;
        let valid = validity(lens, steps);
        let xs = (0..steps)
            .map(|t| packed.slice_rows(t * batch, batch))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let zeros = || tape.constant(Matrix::zeros((batch, hd)));
        let (mut h, mut c) = (zeros(), zeros());
        let mut fwd = Vec::with_capacity(steps);
        for t in 0..steps {
            let (hn, cn) = fwd_cell.step(xs[t], h, c)?;
            h = blend(hn, h, &valid[t])?;
            c = blend(cn, c, &valid[t])?;
            fwd.push(h);
        }
        let last_f = h;
        let (mut h, mut c) = (zeros(), zeros());
        let mut bwd = vec![h; steps];
        for t in (0..steps).rev() {
            let (hn, cn) = bwd_cell.step(xs[t], h, c)?;
            h = blend(hn, h, &valid[t])?;
            c = blend(cn, c, &valid[t])?;
            bwd[t] = h;
        }
        Ok((fwd, bwd, last_f, h))
    }

    pub fn init_state<'t>(&self, encoded: &Encoded<'t>) -> DecoderState<'t> {
        DecoderState {
            h: encoded.init_h,
            c: encoded.init_c,
        }
    }

    /// One decoder step from the previous target symbols.
    pub fn decode_step<'t>(
        &self,
        bound: &BoundParams<'t>,
        prev: &[usize],
        state: DecoderState<'t>,
        encoded: &Encoded<'t>,
    ) -> Result<StepOutput<'t>> {
        let embed = bound.get(self.target_embed_name())?;
        let cell = LstmCell::bind(bound, "decoder.lstm")?;
        let x = embed.gather_rows(prev)?;
        let (h, c) = cell.step(x, state.h, state.c)?;
        let attention = attend(bound, h, encoded)?;
        let mut context: Option<Var<'t>> = None;
        for (t, &m) in encoded.memory.iter().enumerate() {
            let weighted = m.mul(attention.slice_cols(t, 1)?)?;
            context = Some(match context {
                Some(acc) => acc.add(weighted)?,
                None => weighted,
            });
        }
        let context = context.expect("memory is non-empty");
        let attentional = concat_cols(&[context, h])?.matmul(bound.get("attn.combine")?)?.tanh();
        let logits = attentional.matmul(bound.get("out.w")?)?.add(bound.get("out.b")?)?;
        Ok(StepOutput {
            logits,
            state: DecoderState { h, c },
            attention,
        })
    }

    /// Mean teacher-forced negative log-likelihood over non-padding target
    /// positions.
    pub fn loss<'t>(&self, bound: &BoundParams<'t>, batch: &Batch) -> Result<Var<'t>> {
        let encoded = self.encode(bound, &batch.source, &batch.source_lens)?;
        let steps = batch.max_target_len().saturating_sub(1);
        let predicted: usize = batch.target_lens.iter().map(|l| l - 1).sum();
        if steps == 0 || predicted == 0 {
            return Err(ModelError::Contract("targets must be framed with SOS and EOS".into()));
        }
        let norm = 1.0 / predicted as f64;
        let mut state = self.init_state(&encoded);
        let mut total: Option<Var<'t>> = None;
        for s in 0..steps {
            let prev: Vec<usize> = batch.target.iter().map(|r| r[s]).collect();
            let gold: Vec<usize> = batch.target.iter().map(|r| r[s + 1]).collect();
            let weights: Vec<f64> = batch
                .target_lens
                .iter()
                .map(|&l| if s + 1 < l { norm } else { 0.0 })
                .collect();
            let out = self.decode_step(bound, &prev, state, &encoded)?;
            let nll = out.logits.cross_entropy(&gold, &weights)?;
            total = Some(match total {
                Some(acc) => acc.add(nll)?,
                None => nll,
            });
            state = out.state;
        }
        Ok(total.expect("at least one step"))
    }

    /// Loss and gradients for one batch; returns the loss and the gradient
    /// norm before clipping. Gradients are left in the store.
    pub fn backprop(&mut self, batch: &Batch, clip: Option<f64>) -> Result<(f64, f64)> {
        self.params.zero_grad();
        let tape = Tape::new();
        let bound = self.params.bind(&tape, true);
        let loss = self.loss(&bound, batch)?;
        let grads = tape.backward(loss)?;
        self.params.accumulate_grads(&bound, &grads);
        let norm = match clip {
            Some(max) => self.params.clip_grad_norm(max),
            None => self.params.grad_norm(),
        };
        Ok((loss.item(), norm))
    }

    /// Greedy decoding; each output stops at EOS (excluded) or after
    /// `2 × source_length + 5` symbols.
    pub fn greedy_decode(&self, source: &[Vec<usize>], lens: &[usize]) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let encoded = self.encode(&bound, source, lens)?;
        let caps: Vec<usize> = lens.iter().map(|&l| max_output_len(l.saturating_sub(2))).collect();
        let longest = caps.iter().copied().max().unwrap_or(0);
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); source.len()];
        let mut done = vec![false; source.len()];
        let mut prev = vec![SOS; source.len()];
        let mut state = self.init_state(&encoded);
        for _ in 0..longest {
            let out = self.decode_step(&bound, &prev, state, &encoded)?;
            let best = out.logits.argmax(1)?;
            for (b, &sym) in best.iter().enumerate() {
                if done[b] {
                    continue;
                }
                if sym == EOS {
                    done[b] = true;
                } else {
                    outputs[b].push(sym);
                    if outputs[b].len() >= caps[b] {
                        done[b] = true;
                    }
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            prev = best;
            state = out.state;
        }
        Ok(outputs)
    }

    /// Pattern matches of one word (boundary markers added here).
    pub fn match_word<S: AsRef<str>>(&self, word: &[S], vocab: &Vocabulary) -> Result<(Vec<String>, EncoderOutput)> {
        let params = self.pattern_params()?;
        let framed = frame_source(word);
        let idx = vocab.encode(&framed);
        let table = &self.params.get(SOURCE_EMBED)?.value;
        let emb = table.select(ndarray::Axis(0), &idx);
        let out = match_embeddings(&params, &emb, self.config.epsilon_mode)?;
        Ok((framed, out))
    }
}

/// Luong "general" attention weights `softmax(hᵀ W_a M_t)` over positions.
fn attend<'t>(bound: &BoundParams<'t>, h: Var<'t>, encoded: &Encoded<'t>) -> Result<Var<'t>> {
    let query = h.matmul(bound.get("attn.w")?)?;
    let scores = encoded
        .memory
        .iter()
        .map(|&m| query.mul(m)?.sum_axis(1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(concat_cols(&scores)?
        .masked_fill(&encoded.padding, f64::NEG_INFINITY)?
        .softmax(1)?)
}

pub fn max_output_len(source_len: usize) -> usize {
    2 * source_len + 5
}

/// Metadata saved alongside model parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub dev_accuracy: f64,
    pub dev_loss: f64,
    #[serde(default)]
    pub task: Option<Task>,
    /// Digest of the split manifest the model was trained on.
    #[serde(default)]
    pub manifest_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Option<Vocabulary>,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn capture(model: &Seq2Seq, source_vocab: &Vocabulary, target_vocab: Option<&Vocabulary>, meta: TrainingMeta) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params: model.params.to_named_arrays(),
            source_vocab: source_vocab.clone(),
            target_vocab: target_vocab.cloned(),
            meta,
        }
    }

    pub fn target_vocab(&self) -> &Vocabulary {
        self.target_vocab.as_ref().unwrap_or(&self.source_vocab)
    }

    pub fn to_model(&self) -> Result<Seq2Seq> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Seq2Seq::new(self.config.clone(), 0)?;
        model.params.load_named_arrays(&self.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_batch, Pair};

    pub(crate) fn tiny_config(encoder: EncoderType, share: bool) -> ModelConfig {
        ModelConfig {
            encoder,
            char_embed_dim: 4,
            tag_embed_dim: 3,
            hidden: 5,
            layers: 1,
            patterns: PatternSpec::new(vec![3, 4], 2).unwrap(),
            epsilon_mode: EpsilonMode::Chained,
            share_embeddings: share,
            source_vocab_size: 9,
            target_vocab_size: if share { 9 } else { 7 },
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_symbols(["^", "$", "a", "b", "c"])
    }

    fn batch(words: &[&str]) -> Batch {
        let pairs: Vec<Pair> = words
            .iter()
            .map(|w| Pair {
                source: crate::data::chars(w),
                target: crate::data::chars(w),
            })
            .collect();
        let refs: Vec<&Pair> = pairs.iter().collect();
        encode_batch(&refs, &vocab(), &vocab()).unwrap()
    }

    #[test]
    fn zero_lstm_gives_zero_state() {
        let tape = Tape::new();
        let cell = LstmCell {
            weight: tape.constant(Matrix::zeros((7, 12))),
            bias: tape.constant(Matrix::zeros((1, 12))),
        };
        let z = tape.constant(Matrix::zeros((1, 3)));
        let (h, _) = cell.step(tape.constant(Matrix::zeros((1, 4))), z, z).unwrap();
        assert!(h.value().iter().all(|&v| v == 0.0));
        assert!(cell.step(tape.constant(Matrix::zeros((1, 5))), z, z).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(EncoderType::Sopa, true);
        cfg.layers = 2;
        assert!(matches!(Seq2Seq::new(cfg, 0), Err(ModelError::Config(_))));
        let mut cfg = tiny_config(EncoderType::Sopa, true);
        cfg.target_vocab_size = 3;
        assert!(Seq2Seq::new(cfg, 0).is_err());
        assert!("transformer".parse::<EncoderType>().is_err());
        let full = ModelConfig::for_task(EncoderType::Sopa, Task::Analysis, 30, 40);
        assert_eq!((full.char_embed_dim, full.tag_embed_dim, full.hidden), (50, 20, 64));
        assert_eq!(full.patterns.total(), 120);
        assert!(!full.share_embeddings);
    }

    #[test]
    fn sopa_init_from_zero_scores_is_bias() {
        let model = Seq2Seq::new(tiny_config(EncoderType::Sopa, true), 1).unwrap();
        let tape = Tape::new();
        let bound = model.params.bind(&tape, false);
        let b = batch(&["ab"]);
        let enc = model.encode(&bound, &b.source, &b.source_lens).unwrap();
        assert_eq!(enc.memory.len(), 4);
        let scores = enc.pattern_scores.unwrap().value();
        let expected = scores
            .dot(&model.params.get("encoder.init_w").unwrap().value)
            + &model.params.get("encoder.init_b").unwrap().value;
        let expected = expected.mapv(f64::tanh);
        assert_eq!(*enc.init_h.value(), expected);
        let zero_h = Matrix::zeros((1, 4)).dot(&model.params.get("encoder.init_w").unwrap().value)
            + &model.params.get("encoder.init_b").unwrap().value;
        assert_eq!(zero_h.mapv(f64::tanh), model.params.get("encoder.init_b").unwrap().value.mapv(f64::tanh));
    }

    #[test]
    fn attention_normalised_and_masked() {
        for encoder in [EncoderType::Sopa, EncoderType::Bilstm] {
            let model = Seq2Seq::new(tiny_config(encoder, true), 2).unwrap();
            let tape = Tape::new();
            let bound = model.params.bind(&tape, false);
            let b = batch(&["a", "abcab"]);
            let enc = model.encode(&bound, &b.source, &b.source_lens).unwrap();
            let out = model.decode_step(&bound, &[SOS, SOS], model.init_state(&enc), &enc).unwrap();
            let w = out.attention.value();
            for r in 0..2 {
                assert!((w.row(r).sum() - 1.0).abs() < 1e-9);
                assert!(w.row(r).iter().all(|&v| v >= 0.0));
            }
            assert!(w.row(0).iter().skip(3).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn singleton_memory_gets_full_weight() {
        let model = Seq2Seq::new(tiny_config(EncoderType::Bilstm, true), 2).unwrap();
        let tape = Tape::new();
        let bound = model.params.bind(&tape, false);
        let enc = model.encode(&bound, &[vec![4]], &[1]).unwrap();
        let out = model.decode_step(&bound, &[SOS], model.init_state(&enc), &enc).unwrap();
        assert_eq!(out.attention.value()[[0, 0]], 1.0);
    }

    #[test]
    fn greedy_decode_respects_cap_and_is_deterministic() {
        let mut model = Seq2Seq::new(tiny_config(EncoderType::Sopa, true), 3).unwrap();
        // never emit EOS: push its bias far down and symbol 4 far up
        let bias = &mut model.params.get_mut("out.b").unwrap().value;
        bias[[0, EOS]] = -1e3;
        bias[[0, 4]] = 1e3;
        let b = batch(&["ab", "abc"]);
        let out = model.greedy_decode(&b.source, &b.source_lens).unwrap();
        assert_eq!(out[0].len(), max_output_len(2));
        assert_eq!(out[1].len(), max_output_len(3));
        assert_eq!(out, model.greedy_decode(&b.source, &b.source_lens).unwrap());
    }

    #[test]
    fn shared_embedding_is_one_table() {
        let mut model = Seq2Seq::new(tiny_config(EncoderType::Bilstm, true), 4).unwrap();
        assert!(model.params.get(TARGET_EMBED).is_err());
        let b = batch(&["ab"]);
        let tape = Tape::new();
        let bound = model.params.bind(&tape, false);
        let loss_before = model.loss(&bound, &b).unwrap().item();
        model.params.get_mut(SOURCE_EMBED).unwrap().value.row_mut(SOS).fill(3.0);
        let tape = Tape::new();
        let bound = model.params.bind(&tape, false);
        let loss_after = model.loss(&bound, &b).unwrap().item();
        // SOS only appears on the decoder side, so the change reached the decoder
        assert_ne!(loss_before, loss_after);

        let separate = Seq2Seq::new(tiny_config(EncoderType::Bilstm, false), 4).unwrap();
        assert_eq!(separate.params.get(TARGET_EMBED).unwrap().value.ncols(), 3);
    }

    #[test]
    fn lstm_cell_gradients_match_finite_differences() {
        let mut rng = seeded_rng(6);
        let mut store = ParamStore::new();
        init_lstm(&mut store, "cell", 3, 4, &mut rng).unwrap();
        store.insert("x", uniform(&mut rng, 2, 3, 1.0)).unwrap();
        store.insert("h", uniform(&mut rng, 2, 4, 1.0)).unwrap();
        store.insert("c", uniform(&mut rng, 2, 4, 1.0)).unwrap();
        let report = crate::gradcheck::check_params(&store, 1e-5, None, |_, b| -> Result<Var<'_>> {
            let cell = LstmCell::bind(b, "cell")?;
            let (h, c) = cell.step(b.get("x")?, b.get("h")?, b.get("c")?)?;
            Ok(h.mul(h)?.sum().add(c.sum())?)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn bilstm_streams_mirror_under_reversal() {
        let mut model = Seq2Seq::new(tiny_config(EncoderType::Bilstm, true), 7).unwrap();
        let fwd_w = model.params.get("encoder.fwd.w").unwrap().value.clone();
        let fwd_b = model.params.get("encoder.fwd.b").unwrap().value.clone();
        model.params.get_mut("encoder.bwd.w").unwrap().value = fwd_w;
        model.params.get_mut("encoder.bwd.b").unwrap().value = fwd_b;
        let word = vec![vec![5, 6, 7, 4]];
        let reversed = vec![vec![4, 7, 6, 5]];
        let streams = |src: &[Vec<usize>]| {
            let tape = Tape::new();
            let bound = model.params.bind(&tape, false);
            let packed = bound.get(SOURCE_EMBED).unwrap().gather_rows(&time_major(src)).unwrap();
            let (f, b, _, _) = model.bilstm_streams(&bound, packed, &[4], 4).unwrap();
            let v = |xs: Vec<Var<'_>>| xs.iter().map(|x| (*x.value()).clone()).collect::<Vec<_>>();
            (v(f), v(b))
        };
        let (f1, b1) = streams(&word);
        let (f2, b2) = streams(&reversed);
        for t in 0..4 {
            assert_eq!(f1[t], b2[3 - t]);
            assert_eq!(b1[t], f2[3 - t]);
        }
    }

    #[test]
    fn overfits_a_single_example() {
        for encoder in [EncoderType::Bilstm, EncoderType::Sopa] {
            // the 4/5-wide toy model stalls on the unigram plateau
            let mut cfg = tiny_config(encoder, true);
            cfg.char_embed_dim = 16;
            cfg.hidden = 24;
            let mut model = Seq2Seq::new(cfg, 8).unwrap();
            let mut adam = crate::params::Adam::new(&model.params, crate::params::AdamConfig { lr: 0.003, ..Default::default() });
            let b = batch(&["cab"]);
            for _ in 0..300 {
                model.backprop(&b, Some(5.0)).unwrap();
                adam.step(&mut model.params).unwrap();
            }
            let out = model.greedy_decode(&b.source, &b.source_lens).unwrap();
            assert_eq!(vocab().decode(&out[0]), crate::data::chars("cab"), "{encoder}");
        }
    }

    #[test]
    fn copy_loss_decreases() {
        for encoder in [EncoderType::Sopa, EncoderType::Bilstm] {
            let mut model = Seq2Seq::new(tiny_config(encoder, true), 9).unwrap();
            let mut adam = crate::params::Adam::new(&model.params, crate::params::AdamConfig::default());
            let b = batch(&["a", "ab", "abc", "ba", "cab", "cc", "bca", "acb", "b", "ca"]);
            let (first, _) = model.backprop(&b, Some(5.0)).unwrap();
            adam.step(&mut model.params).unwrap();
            let mut last = first;
            for _ in 0..49 {
                last = model.backprop(&b, Some(5.0)).unwrap().0;
                adam.step(&mut model.params).unwrap();
            }
            assert!(last < first, "{encoder}: {first} -> {last}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Seq2Seq::new(tiny_config(EncoderType::Sopa, true), 5).unwrap();
        let ck = ModelCheckpoint::capture(&model, &vocab(), None, TrainingMeta::default());
        let restored = ModelCheckpoint::from_json(&ck.to_json().unwrap()).unwrap().to_model().unwrap();
        assert_eq!(restored.params, model.params);
        let b = batch(&["abc", "ca"]);
        let t1 = Tape::new();
        let t2 = Tape::new();
        let l1 = model.loss(&model.params.bind(&t1, false), &b).unwrap().item();
        let l2 = restored.loss(&restored.params.bind(&t2, false), &b).unwrap().item();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }
}
