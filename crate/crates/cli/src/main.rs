use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;
use spikenorm::synth::SynthSpec;
use spikenorm_cli::commands::{self, SweepParam};
use spikenorm_cli::config::{Dataset, RunConfig, DATA_ROOT_ENV};
use spikenorm_cli::error::CliResult;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "spikenorm", version, about = "Train and evaluate normalized SRM spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset used when neither the file nor an override names one.
    #[arg(long, value_enum, default_value = "n-mnist")]
    dataset: Dataset,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides, self.dataset)?;
        if cfg.data_root.is_none() {
            cfg.data_root = self.data_root.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, summary, and checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Rebuild the model from the configuration and require it to match.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one parameter.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Tabulate the effective threshold of normalized neurons.
    DiagThreshold {
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1")]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,10")]
        theta: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        moment: Vec<f64>,
        /// Refractory contribution at the spike time.
        #[arg(long, default_value_t = 0.0)]
        refractory: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print class counts and input spike rates.
    InspectData {
        #[command(flatten)]
        run: RunArgs,
        /// Samples per partition used for the spike rate.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Write a procedural stand-in dataset in the on-disk layout.
    SynthData {
        #[arg(long, value_enum)]
        dataset: Dataset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { run, out } => {
            let s = commands::cmd_train(&run.resolve()?, &out)?;
            println!(
                "test accuracy {:.4}, firing rate {:.5}, best epoch {}",
                s.test.accuracy, s.test.total_rate, s.best_epoch
            );
        }
        Command::Eval { checkpoint, run, strict, out } => {
            let s = commands::cmd_eval(&checkpoint, &run.resolve()?, strict, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Sweep { param, values, run, out, parallel } => {
            for r in commands::cmd_sweep(param, &values, &run.resolve()?, &out, parallel)? {
                println!("{}={}: accuracy {:.4}, firing rate {:.5}", r.param, r.value, r.accuracy, r.total_rate);
            }
        }
        Command::DiagThreshold { lambda, theta, moment, refractory, out } => {
            let csv = commands::cmd_diag_threshold(&lambda, &theta, &moment, refractory)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::InspectData { run, samples } => {
            let stats = commands::cmd_inspect_data(&run.resolve()?, samples)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::SynthData { dataset, out, train, test, seed } => {
            commands::cmd_synth_data(dataset, &out, SynthSpec { train, test, seed })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
