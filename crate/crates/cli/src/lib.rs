//! `xens` command-line front end: configuration, subcommands, report
//! rendering, and the synthetic corpus generator.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod synth;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use xens_core::curation::Scheme;

use config::{Overrides, RunConfig, Variant};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "xens", version, about = "Multi-channel ensemble transfer learning for chest X-ray screening")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output location: a file for ingest/compose, a directory otherwise.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Dataset variant.
    #[arg(long, global = true, value_enum)]
    pub variant: Option<Variant>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest labelled image folders and drop byte-identical duplicates.
    Ingest {
        /// `<dir>:<label>:<source_id>`, repeatable.
        #[arg(long = "source", required = true)]
        sources: Vec<String>,
    },
    /// Apply an exclusion list and relabel under a scheme.
    Compose {
        #[arg(long)]
        collection: Option<PathBuf>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        /// Exclusion list file, or `none`.
        #[arg(long)]
        exclusions: Option<String>,
    },
    /// Stratified holdout split and cross-validation folds.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Fine-tune sub-model a, b, or c for one fold.
    TrainSub {
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        #[arg(long)]
        fold: usize,
    },
    /// Fine-tune the single-network 3-class baseline for one fold.
    TrainBaseline {
        #[arg(long)]
        fold: usize,
    },
    /// Train an ensemble head over frozen sub-models for one fold.
    TrainEnsemble {
        #[arg(long, value_delimiter = ',')]
        members: Vec<String>,
        #[arg(long)]
        fold: usize,
    },
    /// Evaluate a checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// One-sided pooled-variance t-test on two reports' PPVs.
    Ttest {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Aggregate fold reports into summary and t-test tables.
    Report,
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also report the pixel-statistic probe accuracy.
        #[arg(long)]
        probe: bool,
    },
    /// Every step from ingestion to the final report.
    RunAll,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: xens_core::XensError| e.to_string())
}

fn require_out(out: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    out.clone().ok_or_else(|| CliError::Config(format!("--out is required ({what})")))
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        variant: cli.variant,
    };
    RunConfig::load(cli.config.as_deref(), &overrides)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Ingest { sources } => {
            let out = require_out(&cli.out, "collection file")?;
            let cfg = load_config(&Cli { out: None, ..clone_globals(cli) })?;
            let (_, report, skipped) = commands::ingest(sources, &out, &commands::stamp(&cfg))?;
            print!("{}", report.render());
            if skipped > 0 {
                println!("skipped\t{skipped}");
            }
            Ok(())
        }
        Command::Compose {
            collection,
            scheme,
            exclusions,
        } => {
            let cfg = load_config(&Cli { out: None, ..clone_globals(cli) })?;
            let out = require_out(&cli.out, "manifest file")?;
            let collection = collection.clone().unwrap_or_else(|| cfg.layout().collection());
            let list = commands::exclusions_for(&cfg, exclusions.as_deref())?;
            let m = commands::compose(&collection, *scheme, &list, &out, &commands::stamp(&cfg))?;
            for (name, n) in m.class_names.iter().zip(&m.class_counts) {
                println!("{scheme}\t{name}\t{n}");
            }
            Ok(())
        }
        Command::Split { manifest, ratio, folds } => {
            let cfg = load_config(&Cli { out: None, ..clone_globals(cli) })?;
            let out = require_out(&cli.out, "plans directory")?;
            let k = folds.unwrap_or(cfg.split.folds);
            let (plan, _) = commands::split(manifest, ratio.unwrap_or(cfg.split.ratio), k, cfg.seed, &out, &commands::stamp(&cfg))?;
            println!("train\t{}\ntest\t{}\nfolds\t{k}", plan.train_ids.len(), plan.test_ids.len());
            Ok(())
        }
        Command::TrainSub { scheme, fold } => {
            print_history(&scheme.to_string().to_lowercase(), *fold, &commands::train_sub(&load_config(cli)?, *scheme, *fold)?);
            Ok(())
        }
        Command::TrainBaseline { fold } => {
            print_history("A", *fold, &commands::train_baseline(&load_config(cli)?, *fold)?);
            Ok(())
        }
        Command::TrainEnsemble { members, fold } => {
            let h = commands::train_ensemble(&load_config(cli)?, members, *fold)?;
            print_history(commands::ensemble_name(members)?, *fold, &h);
            Ok(())
        }
        Command::Evaluate { model, manifest } => {
            let cfg = load_config(&Cli { out: None, ..clone_globals(cli) })?;
            let out = require_out(&cli.out, "report directory")?;
            let r = commands::evaluate(&cfg, model, manifest, &out)?;
            println!("accuracy\t{}\nmcc\t{}\nn\t{}", r.metrics.accuracy, r.metrics.mcc, r.ppv.len());
            Ok(())
        }
        Command::Ttest { candidate, baseline } => {
            let (c, b, r) = commands::ttest(candidate, baseline)?;
            println!(
                "candidate\t{c}\nbaseline\t{b}\nmean_1\t{}\nstd_1\t{}\nn_1\t{}\nmean_2\t{}\nstd_2\t{}\nn_2\t{}\nt\t{}\ndf\t{}\np_one_sided\t{}",
                r.mean_1, r.std_1, r.n_1, r.mean_2, r.std_2, r.n_2, r.t, r.df, r.p
            );
            Ok(())
        }
        Command::Report => {
            print_report(&commands::report(&load_config(cli)?)?);
            Ok(())
        }
        Command::Synth { spec, probe } => {
            let out = require_out(&cli.out, "corpus directory")?;
            let mut s = match spec {
                Some(p) => synth::SyntheticCorpusSpec::load(p)?,
                None => synth::SyntheticCorpusSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let (truth, probe) = commands::synth(&s, &out, *probe)?;
            println!("images\t{}", truth.len());
            println!("marked\t{}", truth.iter().filter(|t| t.marker).count());
            if let Some(acc) = probe {
                println!("probe_accuracy\t{acc}");
            }
            Ok(())
        }
        Command::RunAll => {
            print_report(&commands::run_all(&load_config(cli)?)?);
            Ok(())
        }
    }
}

fn print_history(name: &str, fold: usize, h: &xens_core::TrainingHistory) {
    println!("{name}\tfold {fold}\tbest_epoch {}\tstopped {} ({})", h.best_epoch, h.stopped_epoch, h.stop_reason);
}

fn print_report(r: &report::RenderedReport) {
    print!("{}\n{}", r.summary_txt, r.ttest_txt);
}

fn clone_globals(cli: &Cli) -> Cli {
    Cli {
        config: cli.config.clone(),
        seed: cli.seed,
        out: cli.out.clone(),
        variant: cli.variant,
        command: Command::Report,
    }
}

/// Parses `argv` and runs it. Exit codes: 0 success, 1 runtime failure,
/// 2 usage error. Failures print one `error: <kind>: <message>` line.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {}: {msg}", e.kind());
            1
        }
    }
}
