//! `mlmatch`: retrieve and rank singable lyrics for symbolic melodies.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure.

mod config;
mod manifest;
mod pipeline;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlmatch_core::retrieval::Direction;
use mlmatch_core::CoreError;

use config::FileConfig;
use pipeline::EvalMethod;

#[derive(Parser)]
#[command(
    name = "mlmatch",
    version,
    about = "Melody-lyrics matching: ingest corpora, train the dual encoder, \
             retrieve and evaluate singable lyrics"
)]
struct Cli {
    /// TOML config file; command-line flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a song corpus, build line-based segments, apply the vocabulary
    /// and line-length filters, and write a featurizable dataset.
    Ingest {
        /// Corpus JSONL file or directory of JSONL files (or `data.corpus`
        /// in the config file).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// CMU-format pronouncing dictionary (or `data.cmudict` in the
        /// config file).
        #[arg(long)]
        cmudict: Option<PathBuf>,
        /// Lines per segment.
        #[arg(long, value_parser = ["4", "8", "12"])]
        lines: Option<String>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Song-level split seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the dual encoder on an ingested dataset and write the
    /// best-validation checkpoint.
    Train {
        /// Dataset directory from `ingest`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path (a `.log.jsonl` file is written beside it).
        #[arg(long)]
        out: PathBuf,
        /// Training seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank candidates for queries and decode note-sylphone alignments.
    Retrieve {
        /// Trained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Query JSONL (song-shaped records; notes for melody queries, text
        /// for lyric queries).
        #[arg(long)]
        query: PathBuf,
        /// Candidate database: an ingested dataset directory or a raw
        /// corpus JSONL.
        #[arg(long)]
        db: PathBuf,
        /// Pronouncing dictionary (required for raw-corpus databases and
        /// lyric queries).
        #[arg(long)]
        cmudict: Option<PathBuf>,
        /// Length-regularization weight (defaults to the checkpoint's).
        #[arg(long)]
        alpha: Option<f64>,
        /// Ranked candidates to emit per query.
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, value_parser = ["melody2lyrics", "lyrics2melody"],
              default_value = "melody2lyrics")]
        direction: String,
        /// Ranked JSONL output: a file for a single query, a directory for
        /// several.
        #[arg(long, default_value = "ranked.jsonl")]
        out: PathBuf,
    },
    /// Score retrieval and alignment quality on a test corpus.
    Evaluate {
        /// Trained checkpoint (required for --method mlm).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Test corpus JSONL.
        #[arg(long)]
        test: PathBuf,
        /// CMU-format pronouncing dictionary.
        #[arg(long)]
        cmudict: PathBuf,
        #[arg(long, value_parser = ["mlm", "random", "length"], default_value = "mlm")]
        method: String,
        /// Double the pool with length-preserving plain-text distractors.
        #[arg(long, default_value_t = false)]
        with_plain: bool,
        /// Lines per segment when no checkpoint supplies a data config.
        #[arg(long)]
        lines: Option<usize>,
        /// Evaluation seed (plain sampling and the random baseline).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report JSON output path.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Also write per-query ranked JSONL files into this directory.
        #[arg(long)]
        dump_ranked: Option<PathBuf>,
    },
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Numeric(_)) => 3,
        Some(CoreError::Config(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file_config = FileConfig::load(cli.config.as_deref())?;
    let config_json = serde_json::to_string(&file_config)?;

    match cli.command {
        Command::Ingest {
            corpus,
            cmudict,
            lines,
            out,
            seed,
        } => {
            let corpus = corpus
                .or_else(|| file_config.data.corpus.as_ref().map(PathBuf::from))
                .ok_or_else(|| {
                    CoreError::Config("--corpus (or data.corpus in the config) required".into())
                })?;
            let cmudict = cmudict
                .or_else(|| file_config.data.cmudict.as_ref().map(PathBuf::from))
                .ok_or_else(|| {
                    CoreError::Config("--cmudict (or data.cmudict in the config) required".into())
                })?;
            let lines: usize = match lines {
                Some(s) => s.parse().expect("validated by clap"),
                None => file_config.data.lines_per_segment,
            };
            let seed = seed.unwrap_or(file_config.train.seed);
            pipeline::run_ingest(
                &corpus,
                &cmudict,
                lines,
                &out,
                seed,
                &file_config,
                &config_json,
            )
        }
        Command::Train { data, out, seed } => {
            pipeline::run_train(&data, &out, seed, &file_config, &config_json)
        }
        Command::Retrieve {
            ckpt,
            query,
            db,
            cmudict,
            alpha,
            topk,
            direction,
            out,
        } => {
            let direction = match direction.as_str() {
                "lyrics2melody" => Direction::LyricsToMelody,
                _ => Direction::MelodyToLyrics,
            };
            let alpha = alpha.or(file_config.retrieve.alpha);
            if let Some(a) = alpha {
                if !(0.0..=1.0).contains(&a) {
                    return Err(CoreError::Config(format!(
                        "alpha must be in [0, 1], got {a}"
                    ))
                    .into());
                }
            }
            pipeline::run_retrieve(
                &ckpt,
                &query,
                &db,
                cmudict.as_deref(),
                alpha,
                topk,
                direction,
                file_config.retrieve.keep_fraction,
                &out,
                &config_json,
            )
        }
        Command::Evaluate {
            ckpt,
            test,
            cmudict,
            method,
            with_plain,
            lines,
            seed,
            out,
            dump_ranked,
        } => {
            let method = match method.as_str() {
                "random" => EvalMethod::Random,
                "length" => EvalMethod::Length,
                _ => EvalMethod::Mlm,
            };
            pipeline::run_evaluate(
                ckpt.as_deref(),
                &test,
                &cmudict,
                method,
                with_plain || file_config.evaluate.with_plain,
                lines,
                file_config.evaluate.top_matches,
                file_config.evaluate.keep_fraction,
                seed,
                &out,
                dump_ranked.as_deref(),
                &file_config,
                &config_json,
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
