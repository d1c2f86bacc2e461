use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use sopa_morph::data::SplitSizes;
use sopa_morph::seq2seq::EncoderType;
use sopa_morph::similarity::{SimilarityOptions, SubwordCounting, DEFAULT_TOP_T};
use sopa_morph_cli::{
    cmd_evaluate, cmd_filter, cmd_prepare, cmd_report, cmd_similarity, cmd_train, describe_status, ensure_threshold,
    runs_root, ExperimentConfig, ReportOptions, SimilarityInputs, TrainResult, DEFAULT_THRESHOLD, RUNS_ENV,
};

#[derive(Parser)]
#[command(name = "sopa-morph", version, about = "SoPa and BiLSTM seq2seq experiments on UniMorph data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/dev/test splits and write the three task datasets.
    Prepare {
        /// UniMorph file (lemma, form, tags per line).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        train: usize,
        #[arg(long, default_value_t = 2_000)]
        dev: usize,
        #[arg(long, default_value_t = 2_000)]
        test: usize,
    },
    /// Train one (language, task, encoder) model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's encoder.
        #[arg(long, value_parser = parse_encoder)]
        encoder: Option<EncoderType>,
        /// Skip runs that already finished.
        #[arg(long)]
        resume: bool,
        #[arg(long, env = RUNS_ENV)]
        runs: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Exact-match accuracy of a run's best checkpoint.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Languages whose SoPa models pass the dev-accuracy threshold on all tasks.
    Filter {
        #[arg(long, env = RUNS_ENV)]
        runs: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Subword similarity between two SoPa checkpoints (or run directories).
    Similarity {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Prepared data directory both models were trained on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "")]
        language: String,
        #[arg(long, default_value_t = DEFAULT_TOP_T)]
        top_t: usize,
        /// Keep samples regardless of whether both models decode them correctly.
        #[arg(long)]
        no_filter: bool,
        /// Output path stem; `.json` and `.tsv` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, top-subword and similarity tables from the run directories.
    Report {
        #[arg(long, env = RUNS_ENV)]
        runs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Number of subwords listed per (language, task).
        #[arg(long, default_value_t = 10)]
        subwords: usize,
        /// Count only each word's top-T patterns instead of all of them.
        #[arg(long)]
        top_t: Option<usize>,
    },
}

fn parse_encoder(s: &str) -> Result<EncoderType, String> {
    s.parse().map_err(|e: sopa_morph::seq2seq::ModelError| e.to_string())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Prepare {
            data,
            out,
            seed,
            train,
            dev,
            test,
        } => {
            let manifest = cmd_prepare(&data, &out, seed, SplitSizes { train, dev, test })?;
            println!("wrote {}", manifest.display());
            Ok(0)
        }
        Command::Train {
            config,
            seed,
            encoder,
            resume,
            runs,
            quiet,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(encoder) = encoder {
                cfg.encoder = encoder;
                cfg.train.lr_decay = encoder == EncoderType::Sopa;
            }
            let root = runs_root(runs.as_deref());
            let result = cmd_train(&cfg, &root, resume, |r| {
                if !quiet {
                    eprintln!(
                        "epoch {:>3}  train {:.4}  dev {:.4}  acc {:.4}  lr {}",
                        r.epoch, r.train_loss, r.dev_loss, r.dev_accuracy, r.lr
                    );
                }
            })?;
            match &result {
                TrainResult::AlreadyDone { dir, summary } => {
                    println!("{} already finished ({}); nothing to do", dir.display(), summary.status.label());
                }
                TrainResult::Finished { dir, summary } => {
                    println!("{}: {}", dir.display(), describe_status(&summary.status));
                    if let (Some(e), Some(a)) = (summary.best_epoch, summary.best_dev_accuracy) {
                        println!("best dev accuracy {a:.4} at epoch {e}");
                    }
                }
            }
            Ok(result.exit_code())
        }
        Command::Evaluate { run, split } => {
            let eval = cmd_evaluate(&run, &split)?;
            println!("{}\t{}\t{:.4}\t{}", run.display(), eval.split, eval.accuracy, eval.examples);
            Ok(0)
        }
        Command::Filter { runs, threshold } => {
            let kept = cmd_filter(&runs_root(runs.as_deref()), ensure_threshold(threshold)?)?;
            for language in kept {
                println!("{language}");
            }
            Ok(0)
        }
        Command::Similarity {
            a,
            b,
            data,
            split,
            language,
            top_t,
            no_filter,
            out,
        } => {
            let inputs = SimilarityInputs {
                checkpoint_a: &a,
                checkpoint_b: &b,
                data: &data,
                split: &split,
                language: &language,
                options: SimilarityOptions {
                    top_t,
                    filter_correct: !no_filter,
                    ..SimilarityOptions::default()
                },
            };
            let report = cmd_similarity(&inputs, &out)?;
            println!(
                "{}-{}\tsim {:.4}\tretained {}/{}",
                report.model_a, report.model_b, report.similarity, report.retained, report.total
            );
            Ok(0)
        }
        Command::Report {
            runs,
            out,
            threshold,
            subwords,
            top_t,
        } => {
            let opts = ReportOptions {
                threshold: ensure_threshold(threshold)?,
                top_n: subwords,
                counting: top_t.map_or(SubwordCounting::AllPatterns, SubwordCounting::TopT),
            };
            let matrix = cmd_report(&runs_root(runs.as_deref()), &out, &opts)
                .with_context(|| format!("building report in {}", out.display()))?;
            println!(
                "wrote {} (retained languages: {})",
                out.display(),
                matrix.retained_languages.join(", ")
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
