use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jivekit::ajive::{decompose, Backend};
use jivekit::error::Error;
use jivekit::io::{
    load_manifest, read_ajive_config, read_study_config, read_study_report,
    write_decompose_outputs, write_study_outputs, write_study_tsvs,
};
use jivekit::metrics::variance_explained;
use jivekit::simulation::run_study;

#[derive(Parser)]
#[command(name = "jivekit", version, about = "Joint and individual variation decomposition for multi-block data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Override every seed in the config (generator, outliers, resampling)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured SVD backend
    #[arg(long, global = true, value_parser = parse_backend)]
    backend: Option<Backend>,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a CSV dataset described by a manifest
    Decompose {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a replicated simulation study
    Simulate {
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (0 = all cores); defaults to JIVEKIT_WORKERS
        #[arg(long)]
        workers: Option<usize>,
        /// Override the configured replication count
        #[arg(long)]
        replications: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Regenerate TSV summaries from an existing study report
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    match s {
        "classical" => Ok(Backend::Classical),
        "robust" => Ok(Backend::Robust),
        other => Err(format!("unknown backend '{other}' (expected classical or robust)")),
    }
}

fn root_cause(e: &Error) -> &Error {
    match e {
        Error::Block { source, .. } | Error::Phase { source, .. } => root_cause(source),
        other => other,
    }
}

fn exit_for(e: &Error) -> ExitCode {
    match root_cause(e) {
        Error::DegenerateFit { .. } => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Decompose {
            manifest,
            config,
            out,
            overrides,
        } => {
            let loaded = load_manifest(&manifest)?;
            let mut cfg = read_ajive_config(&config)?;
            if let Some(seed) = overrides.seed {
                cfg.segmentation.seed = seed;
            }
            if let Some(backend) = overrides.backend {
                cfg.backend = backend;
            }
            let result = decompose(&loaded.data, &cfg)?;
            let variance = variance_explained(&result, loaded.data.blocks())?;
            let report = write_decompose_outputs(&out, &loaded, &cfg, &result, &variance)?;
            println!(
                "joint rank {}; individual ranks {:?}; wrote {} files to {}",
                report.joint_rank,
                report.individual_ranks,
                report.outputs.len() + 1,
                out.display()
            );
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Simulate {
            study,
            out,
            workers,
            replications,
            overrides,
        } => {
            let mut cfg = read_study_config(&study)?;
            if let Some(reps) = replications {
                cfg.replications = reps;
            }
            let workers = workers.or_else(|| {
                std::env::var("JIVEKIT_WORKERS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            });
            if let Some(w) = workers {
                cfg.parallel_workers = w;
            }
            if let Some(seed) = overrides.seed {
                cfg.generator.seed = seed;
                cfg.outliers.seed = seed;
                cfg.ajive.segmentation.seed = seed;
            }
            if let Some(backend) = overrides.backend {
                cfg.methods = vec![backend];
            }
            let report = run_study(&cfg)?;
            write_study_outputs(&out, &report)?;
            println!(
                "{} replications ({} failed); wrote study_report.json and TSVs to {}",
                cfg.replications,
                report.failed_replications,
                out.display()
            );
            Ok(())
        }
        Command::Report { input, out } => {
            let report = read_study_report(&input)?;
            write_study_tsvs(&out, &report)?;
            println!("regenerated TSVs in {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
