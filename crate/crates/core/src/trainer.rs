//! Training loop, learning-rate schedule and early stopping.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batches, Pair, TaskDataset, Vocabulary};
use crate::params::{permutation, seeded_rng, Adam, AdamConfig, ParamError};
use crate::seq2seq::{EncoderType, ModelCheckpoint, ModelError, Seq2Seq, TrainingMeta};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot evaluate on an empty split")]
    EmptySplit,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed epochs file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How the two dev signals combine into the early-stop decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopRule {
    /// Stop once neither dev loss nor dev accuracy has improved for the
    /// patience window; either improving resets it.
    #[default]
    Both,
    /// Stop once either signal alone has stagnated for the window.
    Either,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub stop_rule: StopRule,
    /// Learning-rate decay on dev-loss stagnation; enabled for SoPa models.
    pub lr_decay: bool,
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
    /// Improvements smaller than this do not count.
    pub min_delta: f64,
    pub clip_norm: Option<f64>,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            max_epochs: 200,
            early_stop_patience: 5,
            stop_rule: StopRule::Both,
            lr_decay: true,
            lr_decay_factor: 0.5,
            lr_decay_patience: 4,
            min_delta: 1e-6,
            clip_norm: Some(5.0),
            eval_batch_size: 256,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn for_encoder(encoder: EncoderType, seed: u64) -> Self {
        Self {
            lr_decay: encoder == EncoderType::Sopa,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.early_stop_patience == 0 || self.lr_decay_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad("lr_decay_factor must lie in (0, 1)");
        }
        if self.min_delta < 0.0 {
            return bad("min_delta must be non-negative");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// What the schedule decided after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    /// Learning rate to use from the next epoch on.
    pub lr: f64,
    pub decayed: bool,
    pub stop: bool,
    /// Dev accuracy is a new strict maximum (the best checkpoint moves).
    pub new_best: bool,
}

/// Early-stopping and decay bookkeeping, fed one (dev loss, dev accuracy)
/// observation per epoch.
#[derive(Debug, Clone)]
pub struct Schedule {
    rule: StopRule,
    patience: usize,
    decay: Option<(f64, usize)>,
    min_delta: f64,
    lr: f64,
    best_loss: f64,
    best_accuracy: f64,
    loss_stale: usize,
    accuracy_stale: usize,
    joint_stale: usize,
    decay_stale: usize,
    pub decays: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            rule: cfg.stop_rule,
            patience: cfg.early_stop_patience,
            decay: cfg.lr_decay.then_some((cfg.lr_decay_factor, cfg.lr_decay_patience)),
            min_delta: cfg.min_delta,
            lr: cfg.lr,
            best_loss: f64::INFINITY,
            best_accuracy: f64::NEG_INFINITY,
            loss_stale: 0,
            accuracy_stale: 0,
            joint_stale: 0,
            decay_stale: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, dev_loss: f64, dev_accuracy: f64) -> Decision {
        let loss_better = dev_loss < self.best_loss - self.min_delta;
        let accuracy_better = dev_accuracy > self.best_accuracy + self.min_delta;
        let new_best = dev_accuracy > self.best_accuracy;
        if loss_better {
            self.best_loss = dev_loss;
            self.loss_stale = 0;
        } else {
            self.loss_stale += 1;
        }
        if new_best {
            self.best_accuracy = dev_accuracy;
        }
        if accuracy_better {
            self.accuracy_stale = 0;
        } else {
            self.accuracy_stale += 1;
        }
        if loss_better || accuracy_better {
            self.joint_stale = 0;
        } else {
            self.joint_stale += 1;
        }

        let mut decayed = false;
        if let Some((factor, patience)) = self.decay {
            if loss_better {
                self.decay_stale = 0;
            } else {
                self.decay_stale += 1;
                if self.decay_stale >= patience {
                    self.lr *= factor;
                    self.decays += 1;
                    self.decay_stale = 0;
                    decayed = true;
                }
            }
        }

        let stop = match self.rule {
            StopRule::Both => self.joint_stale >= self.patience,
            StopRule::Either => self.loss_stale >= self.patience || self.accuracy_stale >= self.patience,
        };
        Decision {
            lr: self.lr,
            decayed,
            stop,
            new_best,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    /// Learning rate in effect after this epoch's schedule update.
    pub lr: f64,
    /// Kept out of `epochs.tsv` so that file is reproducible.
    #[serde(default)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    /// Ran to the epoch cap.
    Converged { epochs: usize },
    EarlyStopped { epoch: usize },
    Aborted { epoch: usize, reason: String },
}

impl TrainStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainStatus::Converged { .. } | TrainStatus::EarlyStopped { .. } => 0,
            TrainStatus::Aborted { .. } => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TrainStatus::Converged { .. } => "converged",
            TrainStatus::EarlyStopped { .. } => "early_stopped",
            TrainStatus::Aborted { .. } => "aborted",
        }
    }
}

pub struct TrainOutcome {
    pub status: TrainStatus,
    pub records: Vec<EpochRecord>,
    /// Maximum-dev-accuracy epoch; `None` if no epoch completed.
    pub best: Option<ModelCheckpoint>,
    pub last: ModelCheckpoint,
    pub lr_decays: usize,
}

/// Training inputs. `target_vocab` is `None` when shared with the source.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [Pair],
    pub dev: &'a [Pair],
    pub source_vocab: &'a Vocabulary,
    pub target_vocab: Option<&'a Vocabulary>,
}

impl<'a> TrainData<'a> {
    pub fn from_dataset(data: &'a TaskDataset) -> Self {
        Self {
            train: &data.train,
            dev: &data.dev,
            source_vocab: &data.source_vocab,
            target_vocab: data.target_vocab.as_ref(),
        }
    }

    fn target(&self) -> &'a Vocabulary {
        self.target_vocab.unwrap_or(self.source_vocab)
    }
}

/// Anything that maps source words to output symbol sequences.
pub trait Predictor {
    fn predict(&self, sources: &[&[String]]) -> Result<Vec<Vec<String>>>;
}

/// Greedy decoding of a model with its vocabularies.
pub struct GreedyPredictor<'a> {
    pub model: &'a Seq2Seq,
    pub source_vocab: &'a Vocabulary,
    pub target_vocab: &'a Vocabulary,
    pub batch_size: usize,
}

impl Predictor for GreedyPredictor<'_> {
    fn predict(&self, sources: &[&[String]]) -> Result<Vec<Vec<String>>> {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(self.batch_size.max(1)) {
            let pairs: Vec<Pair> = chunk
                .iter()
                .map(|s| Pair {
                    source: s.to_vec(),
                    target: Vec::new(),
                })
                .collect();
            let refs: Vec<&Pair> = pairs.iter().collect();
            let batch = crate::data::encode_batch(&refs, self.source_vocab, self.target_vocab)?;
            for seq in self.model.greedy_decode(&batch.source, &batch.source_lens)? {
                out.push(self.target_vocab.decode(&seq));
            }
        }
        Ok(out)
    }
}

/// Share of pairs whose prediction equals the reference exactly.
pub fn evaluate_exact_match(predictor: &dyn Predictor, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let sources: Vec<&[String]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    let predictions = predictor.predict(&sources)?;
    let correct = predictions
        .iter()
        .zip(pairs)
        .filter(|(pred, pair)| **pred == pair.target)
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Mean teacher-forced loss per predicted target symbol.
pub fn evaluate_loss(model: &Seq2Seq, pairs: &[Pair], data: &TrainData<'_>, batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let order: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches(pairs, &order, batch_size, data.source_vocab, data.target())? {
        let tokens: usize = batch.target_lens.iter().map(|l| l - 1).sum();
        let tape = crate::tensor::Tape::new();
        let bound = model.params.bind(&tape, false);
        total += model.loss(&bound, &batch)?.item() * tokens as f64;
        count += tokens;
    }
    Ok(total / count as f64)
}

fn checkpoint(model: &Seq2Seq, data: &TrainData<'_>, meta: &TrainingMeta, record: Option<&EpochRecord>) -> ModelCheckpoint {
    let mut meta = meta.clone();
    if let Some(r) = record {
        meta.epoch = r.epoch;
        meta.dev_accuracy = r.dev_accuracy;
        meta.dev_loss = r.dev_loss;
    }
    ModelCheckpoint::capture(model, data.source_vocab, data.target_vocab, meta)
}

/// Trains `model` in place. `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut Seq2Seq,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    meta: TrainingMeta,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    // shuffling draws from its own stream so it does not depend on model size
    let mut rng = seeded_rng(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut schedule = Schedule::new(cfg);
    let mut records = Vec::new();
    let mut best: Option<ModelCheckpoint> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let order = permutation(&mut rng, data.train.len());
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for batch in batches(data.train, &order, cfg.batch_size, data.source_vocab, data.target())? {
            let (loss, _) = model.backprop(&batch, cfg.clip_norm)?;
            let abort = |reason: String| TrainStatus::Aborted { epoch, reason };
            if !loss.is_finite() {
                return Ok(aborted(model, &data, &meta, records, best, abort(format!("non-finite training loss {loss}"))));
            }
            match adam.step(&mut model.params) {
                Ok(()) => {}
                Err(ParamError::NonFiniteGrad(name)) => {
                    return Ok(aborted(model, &data, &meta, records, best, abort(format!("non-finite gradient in {name}"))));
                }
                Err(e) => return Err(ModelError::from(e).into()),
            }
            let n: usize = batch.target_lens.iter().map(|l| l - 1).sum();
            loss_sum += loss * n as f64;
            tokens += n;
        }
        let dev_loss = evaluate_loss(model, data.dev, &data, cfg.eval_batch_size)?;
        let predictor = GreedyPredictor {
            model,
            source_vocab: data.source_vocab,
            target_vocab: data.target(),
            batch_size: cfg.eval_batch_size,
        };
        let dev_accuracy = evaluate_exact_match(&predictor, data.dev)?;
        if !dev_loss.is_finite() {
            let status = TrainStatus::Aborted {
                epoch,
                reason: format!("non-finite dev loss {dev_loss}"),
            };
            return Ok(aborted(model, &data, &meta, records, best, status));
        }
        let decision = schedule.observe(dev_loss, dev_accuracy);
        adam.set_lr(decision.lr);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / tokens as f64,
            dev_loss,
            dev_accuracy,
            lr: decision.lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if decision.new_best {
            best = Some(checkpoint(model, &data, &meta, Some(&record)));
        }
        records.push(record);
        if decision.stop {
            let last = checkpoint(model, &data, &meta, records.last());
            return Ok(TrainOutcome {
                status: TrainStatus::EarlyStopped { epoch },
                records,
                best,
                last,
                lr_decays: schedule.decays,
            });
        }
    }
    let last = checkpoint(model, &data, &meta, records.last());
    Ok(TrainOutcome {
        status: TrainStatus::Converged { epochs: cfg.max_epochs },
        records,
        best,
        last,
        lr_decays: schedule.decays,
    })
}

fn aborted(
    model: &Seq2Seq,
    data: &TrainData<'_>,
    meta: &TrainingMeta,
    records: Vec<EpochRecord>,
    best: Option<ModelCheckpoint>,
    status: TrainStatus,
) -> TrainOutcome {
    let last = checkpoint(model, data, meta, records.last());
    // recovered from the recorded rates; decay only ever halves
    let lr_decays = records.windows(2).filter(|w| w[1].lr < w[0].lr).count();
    TrainOutcome {
        status,
        records,
        best,
        last,
        lr_decays,
    }
}

pub const EPOCHS_HEADER: &str = "epoch\ttrain_loss\tdev_loss\tdev_accuracy\tlr";

/// Deterministic TSV of the records (wall time excluded).
pub fn epochs_tsv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCHS_HEADER);
    out.push('\n');
    for r in records {
        // `{:?}` prints the shortest representation that round-trips
        let _ = writeln!(
            out,
            "{}\t{:?}\t{:?}\t{:?}\t{:?}",
            r.epoch, r.train_loss, r.dev_loss, r.dev_accuracy, r.lr
        );
    }
    out
}

pub fn parse_epochs_tsv(text: &str, path: &str) -> Result<Vec<EpochRecord>> {
    let err = |reason: String| TrainError::Parse {
        path: path.to_string(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(EPOCHS_HEADER) {
        return Err(err("missing header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(format!("row {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("row {}: {e}", i + 1)));
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|e| err(format!("row {}: {e}", i + 1)))?,
                train_loss: num(f[1])?,
                dev_loss: num(f[2])?,
                dev_accuracy: num(f[3])?,
                lr: num(f[4])?,
                wall_seconds: 0.0,
            })
        })
        .collect()
}

/// Summary written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub status: TrainStatus,
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: Option<f64>,
    pub lr_decays: usize,
}

pub const EPOCHS_FILE: &str = "epochs.tsv";
pub const TIMINGS_FILE: &str = "timings.tsv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const STATUS_FILE: &str = "status.json";

/// Writes epochs, timings, checkpoints and status into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))
    };
    write(EPOCHS_FILE, &epochs_tsv(&outcome.records))?;
    let mut timings = String::from("epoch\twall_seconds\n");
    for r in &outcome.records {
        let _ = writeln!(timings, "{}\t{:.3}", r.epoch, r.wall_seconds);
    }
    write(TIMINGS_FILE, &timings)?;
    if let Some(best) = &outcome.best {
        best.save(dir.join(BEST_CKPT))?;
    }
    outcome.last.save(dir.join(FINAL_CKPT))?;
    let summary = RunSummary {
        status: outcome.status.clone(),
        best_epoch: outcome.best.as_ref().map(|c| c.meta.epoch),
        best_dev_accuracy: outcome.best.as_ref().map(|c| c.meta.dev_accuracy),
        lr_decays: outcome.lr_decays,
    };
    write(STATUS_FILE, &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn read_status(dir: &Path) -> Result<Option<RunSummary>> {
    let path = dir.join(STATUS_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}
