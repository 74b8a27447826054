//! `gg`: ingest a guideline corpus, index it, evaluate notes, and report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gg_core::app::{self, AppError, EvalArgs, EXIT_DATA, EXIT_OK};
use gg_core::clock::SystemClock;
use gg_core::config::Overrides;
use gg_core::report::TableFormat;

#[derive(Parser, Debug)]
#[command(name = "gg", version, about = "Guideline-adherence evaluation for medical notes")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chunk a corpus JSONL file into a chunk store.
    Ingest {
        corpus: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Abort on the first malformed record.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        force: bool,
    },
    /// Embed a chunk store and write the vector index.
    Index {
        chunks: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Build timestamp to record in the index metadata.
        #[arg(long, value_name = "RFC3339")]
        built_at: Option<String>,
    },
    /// Evaluate notes and write a run directory.
    Eval {
        notes: PathBuf,
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
        #[arg(long, value_name = "PATH")]
        chunks: PathBuf,
        /// Parent directory for run directories.
        #[arg(long, value_name = "DIR", default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        /// Replay a scripted LLM transcript instead of calling a model.
        #[arg(long, value_name = "TRANSCRIPT")]
        mock: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Guideline chunks retrieved per query.
        #[arg(long)]
        k: Option<usize>,
        /// Retrieval queries per note.
        #[arg(long, conflicts_with = "per_diagnosis")]
        queries: Option<usize>,
        /// One retrieval query per extracted diagnosis.
        #[arg(long)]
        per_diagnosis: bool,
        #[arg(long, value_name = "DIR")]
        prompts: Option<PathBuf>,
        /// Exit 0 even when some notes fail.
        #[arg(long)]
        keep_going: bool,
        #[arg(long)]
        force: bool,
    },
    /// Re-check a run directory and print its specialty table.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Run the bundled offline fixture and compare against goldens.
    Selftest {
        #[arg(long, value_name = "DIR")]
        fixtures: Option<PathBuf>,
        /// Keep outputs in this directory instead of a temporary one.
        #[arg(long, value_name = "DIR")]
        work: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Text,
}

fn run(cli: Cli) -> Result<i32, AppError> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Ingest {
            corpus,
            out,
            strict,
            force,
        } => {
            let overrides = Overrides {
                strict: strict.then_some(true),
                ..Overrides::default()
            };
            let cfg = app::load_config(config, &overrides)?;
            let s = app::cmd_ingest(&corpus, &out, &cfg, force)?;
            println!(
                "ingested {} documents ({} skipped) into {} chunks; fingerprint {}",
                s.docs, s.skipped, s.chunks, s.fingerprint
            );
            Ok(EXIT_OK)
        }
        Command::Index {
            chunks,
            out,
            force,
            built_at,
        } => {
            let cfg = app::load_config(config, &Overrides::default())?;
            let s = app::cmd_index(&chunks, &out, &cfg, force, built_at)?;
            println!("indexed {} chunks at dim {} with {}", s.entries, s.dim, s.embedder_id);
            Ok(EXIT_OK)
        }
        Command::Eval {
            notes,
            index,
            chunks,
            out,
            run_id,
            mock,
            workers,
            k,
            queries,
            per_diagnosis,
            prompts,
            keep_going,
            force,
        } => {
            let overrides = Overrides {
                mock_transcript: mock,
                workers,
                k,
                n_queries: queries,
                per_diagnosis: per_diagnosis.then_some(true),
                prompt_dir: prompts,
                ..Overrides::default()
            };
            let cfg = app::load_config(config, &overrides)?;
            let args = EvalArgs {
                notes,
                index,
                chunks,
                out,
                run_id,
                keep_going,
                force,
            };
            let s = app::cmd_eval(&args, &cfg, &SystemClock)?;
            println!(
                "evaluated {} notes into {}",
                s.reports.len(),
                s.run_dir.display()
            );
            for f in &s.failures {
                eprintln!("{f}");
            }
            if !s.failures.is_empty() {
                eprintln!("{} of {} notes failed", s.failures.len(), s.reports.len());
            }
            Ok(s.exit_code())
        }
        Command::Report { run_dir, format } => {
            let format = match format {
                Format::Csv => TableFormat::Csv,
                Format::Text => TableFormat::Text,
            };
            print!("{}", app::cmd_report(&run_dir, format)?);
            Ok(EXIT_OK)
        }
        Command::Selftest { fixtures, work } => {
            let fixtures = fixtures.unwrap_or_else(app::default_fixture_dir);
            let (work_dir, temporary) = match work {
                Some(w) => (w, false),
                None => (
                    std::env::temp_dir().join(format!("gg-selftest-{}", std::process::id())),
                    true,
                ),
            };
            let result = app::cmd_selftest(&fixtures, &work_dir);
            if temporary {
                let _ = std::fs::remove_dir_all(&work_dir);
            }
            let s = result?;
            print!("{}", s.table);
            if s.passed() {
                println!("selftest passed: {} golden files match", s.checked_files);
                Ok(EXIT_OK)
            } else {
                for m in &s.mismatches {
                    eprintln!("golden mismatch: {m}");
                }
                eprintln!("selftest failed: {} of {} golden files differ", s.mismatches.len(), s.checked_files);
                Ok(EXIT_DATA)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

