//! Experiment orchestration behind the `sopa-morph` binary.
//!
//! Layout on disk:
//!
//! ```text
//! <prepared>/manifest.json, copy.json, lemmatization.json, analysis.json
//! <runs>/<language>/<task>/<encoder>/config.json, epochs.tsv, best.ckpt, final.ckpt, status.json
//! <runs>/<language>/similarity/<task_a>-<task_b>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sopa_morph::data::{
    build_task, parse_unimorph, sample_splits, Pair, SplitManifest, SplitSizes, Task, TaskDataset,
};
use sopa_morph::seq2seq::{EncoderType, ModelCheckpoint, ModelConfig, Seq2Seq, TrainingMeta};
use sopa_morph::similarity::{
    dataset_similarity, subword_frequencies, ModelView, SimilarityOptions, SimilarityReport, SubwordCounting,
};
use sopa_morph::sopa::{EpsilonMode, PatternSpec};
use sopa_morph::trainer::{
    evaluate_exact_match, read_status, train, write_run, EpochRecord, GreedyPredictor, RunSummary, TrainConfig,
    TrainData, TrainStatus, BEST_CKPT,
};

pub const RUNS_ENV: &str = "SOPA_MORPH_RUNS";
pub const DEFAULT_THRESHOLD: f64 = 0.40;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
const LOCK_FILE: &str = ".lock";
const TASKS: [Task; 3] = [Task::Analysis, Task::Lemmatization, Task::Copy];

/// One training run, as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub language: String,
    pub task: Task,
    pub encoder: EncoderType,
    /// Directory written by `prepare`.
    pub data: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub patterns: PatternSpec,
    #[serde(default)]
    pub epsilon_mode: EpsilonMode,
    /// Run directory; defaults to `<runs>/<language>/<task>/<encoder>`.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn run_dir(&self, runs_root: &Path) -> PathBuf {
        self.output.clone().unwrap_or_else(|| {
            runs_root
                .join(&self.language)
                .join(self.task.name())
                .join(self.encoder.name())
        })
    }
}

pub fn runs_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUNS_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub source_file: String,
    pub skipped_lines: usize,
    #[serde(flatten)]
    pub split: SplitManifest,
}

/// Samples splits from a UniMorph file and writes one dataset per task.
pub fn cmd_prepare(data_file: &Path, out_dir: &Path, seed: u64, sizes: SplitSizes) -> Result<PathBuf> {
    let parsed = parse_unimorph(data_file)?;
    let splits = sample_splits(&parsed.examples, sizes, seed)?;
    let manifest = PreparedManifest {
        source_file: data_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        skipped_lines: parsed.skipped,
        split: splits.manifest.clone(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_file(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    for task in TASKS {
        let ds = build_task(&splits, task);
        write_file(&out_dir.join(format!("{}.json", task.name())), &serde_json::to_string(&ds)?)?;
    }
    Ok(manifest_path)
}

pub fn manifest_digest(data_dir: &Path) -> Result<String> {
    let path = data_dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn load_dataset(data_dir: &Path, task: Task) -> Result<TaskDataset> {
    read_json(&data_dir.join(format!("{}.json", task.name())))
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let mut file = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    anyhow!("{} is locked by another run (remove {} if stale)", dir.display(), path.display())
                }
                _ => anyhow!(e).context(format!("creating {}", path.display())),
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub enum TrainResult {
    Finished { dir: PathBuf, summary: RunSummary },
    AlreadyDone { dir: PathBuf, summary: RunSummary },
}

impl TrainResult {
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainResult::Finished { summary, .. } => summary.status.exit_code(),
            TrainResult::AlreadyDone { .. } => 0,
        }
    }
}

pub fn cmd_train(
    config: &ExperimentConfig,
    runs: &Path,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult> {
    let dir = config.run_dir(runs);
    if resume {
        if let Some(summary) = read_status(&dir)? {
            return Ok(TrainResult::AlreadyDone { dir, summary });
        }
    }
    let _lock = RunLock::acquire(&dir)?;
    let dataset = load_dataset(&config.data, config.task)?;
    let digest = manifest_digest(&config.data)?;
    write_file(&dir.join(CONFIG_FILE), &serde_json::to_string_pretty(config)?)?;

    let mut model_cfg = ModelConfig::for_task(
        config.encoder,
        config.task,
        dataset.source_vocab.len(),
        dataset.target_vocab().len(),
    );
    model_cfg.patterns = config.patterns.clone();
    model_cfg.epsilon_mode = config.epsilon_mode;
    let mut model = Seq2Seq::new(model_cfg, config.train.seed)?;
    let meta = TrainingMeta {
        task: Some(config.task),
        manifest_digest: Some(digest),
        ..TrainingMeta::default()
    };
    let outcome = train(
        &mut model,
        TrainData::from_dataset(&dataset),
        &config.train,
        meta,
        &mut on_epoch,
    )?;
    let summary = write_run(&dir, &outcome)?;
    Ok(TrainResult::Finished { dir, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: String,
    pub accuracy: f64,
    pub examples: usize,
    pub checkpoint_epoch: usize,
}

fn run_config(run_dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&run_dir.join(CONFIG_FILE))
}

/// Exact-match accuracy of a run's best checkpoint on one split; the result
/// is also written to `eval_<split>.json` in the run directory.
pub fn cmd_evaluate(run_dir: &Path, split: &str) -> Result<Evaluation> {
    let config = run_config(run_dir)?;
    let dataset = load_dataset(&config.data, config.task)?;
    let ckpt = ModelCheckpoint::load(run_dir.join(BEST_CKPT))?;
    let pairs = dataset
        .split(split)
        .ok_or_else(|| anyhow!("unknown split `{split}` (expected train, dev or test)"))?;
    let model = ckpt.to_model()?;
    let predictor = GreedyPredictor {
        model: &model,
        source_vocab: &ckpt.source_vocab,
        target_vocab: ckpt.target_vocab(),
        batch_size: 256,
    };
    let eval = Evaluation {
        split: split.to_string(),
        accuracy: evaluate_exact_match(&predictor, pairs)?,
        examples: pairs.len(),
        checkpoint_epoch: ckpt.meta.epoch,
    };
    write_file(&run_dir.join(format!("eval_{split}.json")), &serde_json::to_string_pretty(&eval)?)?;
    Ok(eval)
}

/// Languages whose SoPa models reach `threshold` dev accuracy on every task.
/// Every language must report all three tasks.
pub fn filter_languages(dev_accuracy: &BTreeMap<String, BTreeMap<Task, f64>>, threshold: f64) -> Result<Vec<String>> {
    let mut kept = Vec::new();
    for (language, tasks) in dev_accuracy {
        let missing: Vec<&str> = TASKS.iter().filter(|t| !tasks.contains_key(t)).map(|t| t.name()).collect();
        if !missing.is_empty() {
            bail!("incomplete results for {language}: missing {}", missing.join(", "));
        }
        let worst = TASKS.iter().map(|t| tasks[t]).fold(f64::INFINITY, f64::min);
        if worst >= threshold {
            kept.push(language.clone());
        }
    }
    Ok(kept)
}

/// One `<language>/<task>/<encoder>` directory under the runs root.
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub language: String,
    pub task: String,
    pub encoder: String,
    pub dir: PathBuf,
    pub summary: Option<RunSummary>,
}

pub fn scan_runs(root: &Path) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    let subdirs = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("listing {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    if !root.is_dir() {
        return Ok(out);
    }
    for lang in subdirs(root)? {
        for task in subdirs(&lang)? {
            if task.file_name().is_some_and(|n| n == "similarity") {
                continue;
            }
            for enc in subdirs(&task)? {
                let name = |p: &Path| p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                out.push(RunEntry {
                    language: name(&lang),
                    task: name(&task),
                    encoder: name(&enc),
                    summary: read_status(&enc).ok().flatten(),
                    dir: enc,
                });
            }
        }
    }
    Ok(out)
}

pub fn sopa_dev_accuracies(runs: &[RunEntry]) -> BTreeMap<String, BTreeMap<Task, f64>> {
    let mut by_lang: BTreeMap<String, BTreeMap<Task, f64>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.encoder == EncoderType::Sopa.name()) {
        let (Ok(task), Some(acc)) = (r.task.parse::<Task>(), r.summary.as_ref().and_then(|s| s.best_dev_accuracy)) else {
            continue;
        };
        by_lang.entry(r.language.clone()).or_default().insert(task, acc);
    }
    by_lang
}

pub fn cmd_filter(root: &Path, threshold: f64) -> Result<Vec<String>> {
    let runs = scan_runs(root)?;
    let mut accuracies = sopa_dev_accuracies(&runs);
    // languages with no sopa run at all are not part of the comparison
    accuracies.retain(|_, tasks| !tasks.is_empty());
    let kept = filter_languages(&accuracies, threshold)?;
    write_file(
        &root.join("filter.json"),
        &serde_json::to_string_pretty(&serde_json::json!({ "threshold": threshold, "retained": kept }))?,
    )?;
    Ok(kept)
}

/// Resolves a run directory (its best checkpoint) or a checkpoint file.
fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(BEST_CKPT)
    } else {
        p.to_path_buf()
    }
}

pub struct SimilarityInputs<'a> {
    pub checkpoint_a: &'a Path,
    pub checkpoint_b: &'a Path,
    pub data: &'a Path,
    pub split: &'a str,
    pub language: &'a str,
    pub options: SimilarityOptions,
}

fn view<'a>(name: &'a str, model: &'a Seq2Seq, ck: &'a ModelCheckpoint, pairs: &'a [Pair]) -> ModelView<'a> {
    ModelView {
        name,
        model,
        source_vocab: &ck.source_vocab,
        target_vocab: ck.target_vocab(),
        pairs,
    }
}

/// Compares two SoPa checkpoints trained on the same manifest and writes
/// `<out>.json` plus `<out>.tsv`.
pub fn cmd_similarity(inputs: &SimilarityInputs<'_>, out: &Path) -> Result<SimilarityReport> {
    let ca = ModelCheckpoint::load(checkpoint_path(inputs.checkpoint_a))?;
    let cb = ModelCheckpoint::load(checkpoint_path(inputs.checkpoint_b))?;
    let digest = manifest_digest(inputs.data)?;
    for (name, ck) in [("first", &ca), ("second", &cb)] {
        match &ck.meta.manifest_digest {
            Some(d) if *d == digest => {}
            Some(_) => bail!("{name} checkpoint was trained on a different data manifest than {}", inputs.data.display()),
            None => bail!("{name} checkpoint records no data manifest"),
        }
    }
    let ta = ca.meta.task.ok_or_else(|| anyhow!("first checkpoint records no task"))?;
    let tb = cb.meta.task.ok_or_else(|| anyhow!("second checkpoint records no task"))?;
    let da = load_dataset(inputs.data, ta)?;
    let db = load_dataset(inputs.data, tb)?;
    let pairs = |d: &TaskDataset| -> Result<Vec<Pair>> {
        d.split(inputs.split)
            .map(<[Pair]>::to_vec)
            .ok_or_else(|| anyhow!("unknown split `{}`", inputs.split))
    };
    let (pa, pb) = (pairs(&da)?, pairs(&db)?);
    let (ma, mb) = (ca.to_model()?, cb.to_model()?);
    let report = dataset_similarity(
        inputs.language,
        &view(ta.name(), &ma, &ca, &pa),
        &view(tb.name(), &mb, &cb, &pb),
        inputs.options,
    )?;
    write_file(&out.with_extension("json"), &serde_json::to_string_pretty(&report)?)?;
    write_file(&out.with_extension("tsv"), &report.samples_tsv())?;
    Ok(report)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResultsMatrix {
    /// language → task → encoder → test accuracy
    pub accuracy: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>,
    /// language → "task_a-task_b" → similarity
    pub similarity: BTreeMap<String, BTreeMap<String, f64>>,
    pub retained_languages: Vec<String>,
}

pub struct ReportOptions {
    pub threshold: f64,
    pub top_n: usize,
    pub counting: SubwordCounting,
}

/// Rebuilds `accuracy.tsv`, `top_subwords.tsv` and `results.json` under
/// `out` from the run directories below `root`.
pub fn cmd_report(root: &Path, out: &Path, opts: &ReportOptions) -> Result<ResultsMatrix> {
    let runs = scan_runs(root)?;
    let mut matrix = ResultsMatrix::default();
    let mut accuracy_tsv = String::from("language\ttask\tencoder\tstatus\tdev_accuracy\ttest_accuracy\n");
    let mut subwords_tsv = String::from("language\ttask\tsubwords\n");

    for run in &runs {
        let Some(summary) = &run.summary else {
            accuracy_tsv.push_str(&format!(
                "{}\t{}\t{}\twarning: no completed run in {}\t\t\n",
                run.language,
                run.task,
                run.encoder,
                run.dir.display()
            ));
            continue;
        };
        let test = match read_json::<Evaluation>(&run.dir.join("eval_test.json")) {
            Ok(e) => Some(e),
            Err(_) => cmd_evaluate(&run.dir, "test").ok(),
        };
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        accuracy_tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            run.language,
            run.task,
            run.encoder,
            summary.status.label(),
            fmt(summary.best_dev_accuracy),
            fmt(test.as_ref().map(|e| e.accuracy))
        ));
        if let Some(t) = &test {
            matrix
                .accuracy
                .entry(run.language.clone())
                .or_default()
                .entry(run.task.clone())
                .or_default()
                .insert(run.encoder.clone(), t.accuracy);
        }
        if run.encoder == EncoderType::Sopa.name() {
            match top_subwords_for_run(&run.dir, opts) {
                Ok(words) => subwords_tsv.push_str(&format!("{}\t{}\t{}\n", run.language, run.task, words.join(","))),
                Err(e) => subwords_tsv.push_str(&format!("{}\t{}\twarning: {e}\n", run.language, run.task)),
            }
        }
    }

    let mut accuracies = sopa_dev_accuracies(&runs);
    accuracies.retain(|_, t| t.len() == TASKS.len());
    matrix.retained_languages = filter_languages(&accuracies, opts.threshold)?;
    for language in &matrix.retained_languages {
        let dir = root.join(language).join("similarity");
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let report: SimilarityReport = read_json(&f)?;
            matrix
                .similarity
                .entry(language.clone())
                .or_default()
                .insert(format!("{}-{}", report.model_a, report.model_b), report.similarity);
        }
    }
    write_file(&out.join("accuracy.tsv"), &accuracy_tsv)?;
    write_file(&out.join("top_subwords.tsv"), &subwords_tsv)?;
    write_file(&out.join("results.json"), &serde_json::to_string_pretty(&matrix)?)?;
    Ok(matrix)
}

fn top_subwords_for_run(run_dir: &Path, opts: &ReportOptions) -> Result<Vec<String>> {
    let config = run_config(run_dir)?;
    let dataset = load_dataset(&config.data, config.task)?;
    let ckpt = ModelCheckpoint::load(run_dir.join(BEST_CKPT))?;
    let model = ckpt.to_model()?;
    let view = ModelView {
        name: config.task.name(),
        model: &model,
        source_vocab: &ckpt.source_vocab,
        target_vocab: ckpt.target_vocab(),
        pairs: &dataset.test,
    };
    let words: Vec<&[String]> = dataset.test.iter().map(|p| p.source.as_slice()).collect();
    Ok(subword_frequencies(&view, &words, opts.counting)?.top(opts.top_n))
}

pub fn describe_status(status: &TrainStatus) -> String {
    match status {
        TrainStatus::Converged { epochs } => format!("reached the {epochs}-epoch cap"),
        TrainStatus::EarlyStopped { epoch } => format!("stopped early after epoch {epoch}"),
        TrainStatus::Aborted { epoch, reason } => format!("aborted in epoch {epoch}: {reason}"),
    }
}

pub fn ensure_threshold(threshold: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&threshold), "threshold must lie in [0, 1], got {threshold}");
    Ok(threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accs(rows: &[(&str, [f64; 3])]) -> BTreeMap<String, BTreeMap<Task, f64>> {
        rows.iter()
            .map(|(l, a)| (l.to_string(), TASKS.iter().copied().zip(a.iter().copied()).collect()))
            .collect()
    }

    #[test]
    fn filter_uses_minimum_over_tasks() {
        let kept = filter_languages(
            &accs(&[("hun", [0.5, 0.6, 0.41]), ("fin", [0.39, 0.9, 0.9]), ("eng", [0.40, 0.8, 0.9])]),
            DEFAULT_THRESHOLD,
        )
        .unwrap();
        assert_eq!(kept, vec!["eng".to_string(), "hun".to_string()]);
    }

    #[test]
    fn filter_rejects_incomplete_input() {
        let mut a = accs(&[("hun", [0.5, 0.6, 0.41])]);
        a.get_mut("hun").unwrap().remove(&Task::Copy);
        let err = filter_languages(&a, 0.4).unwrap_err().to_string();
        assert!(err.contains("copy"), "{err}");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = r#"{"language":"eng","task":"copy","encoder":"sopa","data":"d"}"#;
        let cfg: ExperimentConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.run_dir(Path::new("r")), Path::new("r/eng/copy/sopa"));
        let bad = r#"{"language":"eng","task":"copy","encoder":"sopa","data":"d","epochz":3}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let bad_task = r#"{"language":"eng","task":"inflection","encoder":"sopa","data":"d"}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad_task).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }
}
