use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdm::harness::{self, ExperimentConfig, ModelSource};
use mdm::{MdmError, Method};

/// Noise covariance identification experiments.
#[derive(Parser)]
#[command(name = "mdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Scalar model with fast-varying measurement gain.
    Example1(Overrides),
    /// Model with time-varying sensor availability.
    Example2(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// Monte-Carlo runs.
    #[arg(long)]
    mc: Option<usize>,
    /// Horizon.
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated list of uw-nr, sw-nr, we-nr, uw-re, sw-re.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// 10^4 Monte-Carlo runs unless --mc is given.
    #[arg(long)]
    full_scale: bool,
    /// Clip estimated Q and R to the PSD cone.
    #[arg(long)]
    project_psd: bool,
}

const FULL_SCALE_MC: usize = 10_000;

impl Overrides {
    fn apply(self, cfg: &mut ExperimentConfig) {
        if self.full_scale {
            cfg.mc = FULL_SCALE_MC;
        }
        if let Some(mc) = self.mc {
            cfg.mc = mc;
        }
        if let Some(tau) = self.tau {
            cfg.tau = tau;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(methods) = self.methods {
            cfg.methods = methods;
        }
        if let Some(out) = self.out {
            cfg.out = out;
        }
        cfg.project_psd |= self.project_psd;
    }
}

fn example(model: ModelSource, methods: &[Method], out: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(model, methods.to_vec());
    cfg.out = PathBuf::from(out);
    cfg
}

fn run(cli: Cli) -> Result<(), MdmError> {
    let cfg = match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            overrides.apply(&mut cfg);
            cfg
        }
        Command::Example1(o) => {
            let mut cfg = example(
                ModelSource::Builtin1,
                &[Method::UwNr, Method::SwNr, Method::WeNr],
                "out/example1",
            );
            o.apply(&mut cfg);
            cfg
        }
        Command::Example2(o) => {
            let mut cfg = example(
                ModelSource::Builtin2,
                &[Method::UwNr, Method::UwRe, Method::SwNr, Method::SwRe],
                "out/example2",
            );
            o.apply(&mut cfg);
            cfg
        }
    };
    let table = harness::run_experiment(&cfg)?;
    print!("{table}");
    for path in harness::write_outputs(&cfg, &table)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let run = match &e {
                MdmError::Run { run, .. } => run.to_string(),
                _ => "-".into(),
            };
            let k = e.time_index().map_or_else(|| "-".into(), |k| k.to_string());
            eprintln!("error [module={} run={run} k={k}]: {e}", e.module());
            ExitCode::FAILURE
        }
    }
}
