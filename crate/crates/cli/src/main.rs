//! `manifold-id`: preprocess -> fit -> postprocess -> spatial -> report.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or domain
//! error. Errors go to stderr as one JSON object.

mod commands;
mod config;
mod error;
mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use manifold_id::pipeline::StageSelection;

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, EXIT_USAGE};

pub const THREADS_ENV: &str = "MANIFOLD_ID_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "manifold-id",
    version,
    about = "Heterogeneous intrinsic-dimension analysis of country panels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stage window: 1, 2, 3, 4 or full.
    #[arg(long, global = true)]
    stage: Option<StageSelection>,
    #[arg(long, global = true)]
    nsim: Option<usize>,
    #[arg(long, global = true)]
    burnin: Option<usize>,
    /// Maximum number of mixture components.
    #[arg(long = "L", global = true)]
    components: Option<usize>,
    /// Dirichlet concentration.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Neighbour label-agreement probability.
    #[arg(long, global = true)]
    zeta: Option<f64>,
    /// Neighbours in the local-homogeneity graph.
    #[arg(long, global = true)]
    q: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Load, filter, impute, standardise and assemble the panel.
    Preprocess,
    /// Run the Gibbs sampler on the assembled matrix.
    Fit,
    /// Co-clustering, VI partition and per-observation ID chains.
    Postprocess,
    /// Moran's I over median IDs and optional KS covariate tests.
    Spatial,
    /// Consolidated report and plot-ready tables.
    Report,
    /// Write a synthetic matrix in place of the preprocess stage.
    Synth,
    /// Every stage in order.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Preprocess => "preprocess",
            Self::Fit => "fit",
            Self::Postprocess => "postprocess",
            Self::Spatial => "spatial",
            Self::Report => "report",
            Self::Synth => "synth",
            Self::All => "all",
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: g.seed,
        out: g.out.clone(),
        stage: g.stage,
        nsim: g.nsim,
        burnin: g.burnin,
        components: g.components,
        alpha: g.alpha,
        zeta: g.zeta,
        q: g.q,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
    })?;
    // A second initialisation only fails if a pool already exists.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn run_all(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let mut log = Vec::new();
    log.push(if cfg.inputs.is_some() {
        commands::cmd_preprocess(cfg)?
    } else if cfg.synth.is_some() {
        commands::cmd_synth(cfg)?
    } else {
        return Err(CliError::Config("configure `inputs` or `synth`".into()));
    });
    log.push(commands::cmd_fit(cfg)?);
    log.push(commands::cmd_postprocess(cfg)?);
    if commands::weight_source(cfg).is_some() {
        log.push(commands::cmd_spatial(cfg)?);
    } else {
        // Leave no spatial results from an earlier run behind.
        let dir = commands::stage_dir(cfg, commands::SPATIAL);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)
                .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        }
    }
    log.push(report::cmd_report(cfg)?);
    Ok(log)
}

fn dispatch(command: Command, cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    Ok(match command {
        Command::Preprocess => vec![commands::cmd_preprocess(cfg)?],
        Command::Fit => vec![commands::cmd_fit(cfg)?],
        Command::Postprocess => vec![commands::cmd_postprocess(cfg)?],
        Command::Spatial => vec![commands::cmd_spatial(cfg)?],
        Command::Report => vec![report::cmd_report(cfg)?],
        Command::Synth => vec![commands::cmd_synth(cfg)?],
        Command::All => run_all(cfg)?,
    })
}

fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    let result = configure_threads()
        .and_then(|()| load_config(&cli.global))
        .and_then(|cfg| dispatch(cli.command, &cfg));
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json(name));
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}
