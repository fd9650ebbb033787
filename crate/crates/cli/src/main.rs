use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridcast_core::checkpoint::Checkpoint;
use gridcast_core::dispatch::{self, default_fleet, EvaluationReport};
use gridcast_core::pipeline::{
    dispatch_forecasts, evaluate, fit_models, forecast_test_span, load_inputs, run_pipeline,
    write_daily_metrics_csv, write_loss_csv, write_metrics_csv, ForecastTable, HourlyDispatch, PipelineConfig,
    PipelineError, StagedOutput, CHECKPOINT_FILE, DAILY_METRICS_FILE, DISCREPANCY_FILE, FORECASTS_FILE, LOSS_FILE,
    METHODS, METRICS_FILE,
};
use gridcast_core::synth::synth_year;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "gridcast", version, about = "PV forecasting and economic dispatch evaluation")]
struct Cli {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic year: generation.csv, demand.csv and fleet.csv.
    Synth,
    /// Fit the LSTM and both baselines; writes checkpoint.json.
    Train,
    /// Forecast the test span with every method; writes forecasts.csv.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Day-ahead and real-time dispatch of each forecast; writes discrepancy.csv.
    Dispatch {
        #[arg(long)]
        forecasts: Option<PathBuf>,
    },
    /// Aggregate dispatch results into metrics.csv and daily_metrics.csv.
    Evaluate {
        #[arg(long)]
        discrepancy: Option<PathBuf>,
    },
    /// All stages end to end, plus manifest.json.
    Run,
    /// Print the effective configuration as TOML.
    Config,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_STAGE })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_io(stage: &'static str) -> impl Fn(std::io::Error) -> PipelineError {
    move |e| PipelineError::stage(stage, e)
}

fn read_input<T, E>(path: &Path, stage: &'static str, parse: impl FnOnce(BufReader<File>) -> Result<T, E>) -> Result<T, PipelineError>
where
    E: Into<Box<dyn std::error::Error + Send + Sync>>,
{
    let file = File::open(path).map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))?;
    parse(BufReader::new(file)).map_err(|e| PipelineError::stage(stage, e))
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    let out_dir = cfg.output_dir.clone();
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
        }
        Command::Synth => {
            let io = stage_io("synth");
            let year = synth_year(cfg.seeds().synth, &cfg.synth).map_err(|e| PipelineError::stage("synth", e))?;
            let mut out = StagedOutput::new(&out_dir).map_err(&io)?;
            let csv_err = |e: gridcast_core::timeseries::DataError| std::io::Error::new(std::io::ErrorKind::Other, e);
            out.write("generation.csv", |w| year.generation.to_csv_writer(w).map_err(csv_err))
                .map_err(&io)?;
            out.write("demand.csv", |w| year.demand.to_csv_writer(w).map_err(csv_err))
                .map_err(&io)?;
            out.write("fleet.csv", |w| dispatch::write_fleet(&default_fleet(), w))
                .map_err(&io)?;
            for p in out.commit().map_err(&io)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train => {
            let io = stage_io("train");
            let mut out = StagedOutput::new(&out_dir).map_err(&io)?;
            let inputs = load_inputs(&cfg)?;
            let ckpt = fit_models(&cfg, &inputs)?;
            out.write(CHECKPOINT_FILE, |w| {
                ckpt.to_writer(w).map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))
            })
            .map_err(&io)?;
            out.write(LOSS_FILE, |w| write_loss_csv(&ckpt.loss_history, w)).map_err(&io)?;
            if let Some(loss) = ckpt.loss_history.last() {
                println!("final training loss {loss:.6e} after {} epochs", ckpt.loss_history.len());
            }
            for p in out.commit().map_err(&io)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Forecast { checkpoint } => {
            let io = stage_io("forecast");
            let path = checkpoint.unwrap_or_else(|| out_dir.join(CHECKPOINT_FILE));
            let ckpt = Checkpoint::load(&path).map_err(|e| PipelineError::stage("forecast", e))?;
            let inputs = load_inputs(&cfg)?;
            let table = forecast_test_span(&inputs, &ckpt, cfg.baselines.month_policy)?;
            let mut out = StagedOutput::new(&out_dir).map_err(&io)?;
            out.write(FORECASTS_FILE, |w| table.write_csv(w)).map_err(&io)?;
            for p in out.commit().map_err(&io)? {
                println!("wrote {} ({} hours)", p.display(), table.len());
            }
        }
        Command::Dispatch { forecasts } => {
            let io = stage_io("dispatch");
            let path = forecasts.unwrap_or_else(|| out_dir.join(FORECASTS_FILE));
            let table = read_input(&path, "dispatch", ForecastTable::read_csv)?;
            let fleet = match &cfg.data.fleet {
                Some(p) => dispatch::load_fleet(p).map_err(|e| PipelineError::stage("dispatch", e))?,
                None => default_fleet(),
            };
            let hourly = dispatch_forecasts(&table, &fleet, &cfg.dispatch)?;
            let mut out = StagedOutput::new(&out_dir).map_err(&io)?;
            out.write(DISCREPANCY_FILE, |w| hourly.write_csv(w)).map_err(&io)?;
            for p in out.commit().map_err(&io)? {
                println!("wrote {} ({} hours)", p.display(), hourly.len());
            }
        }
        Command::Evaluate { discrepancy } => {
            let io = stage_io("evaluate");
            let path = discrepancy.unwrap_or_else(|| out_dir.join(DISCREPANCY_FILE));
            let hourly = read_input(&path, "evaluate", HourlyDispatch::read_csv)?;
            let evaluation = evaluate(&hourly, cfg.dispatch.emission_factor)?;
            let mut out = StagedOutput::new(&out_dir).map_err(&io)?;
            out.write(METRICS_FILE, |w| write_metrics_csv(&evaluation.overall, w))
                .map_err(&io)?;
            out.write(DAILY_METRICS_FILE, |w| write_daily_metrics_csv(&evaluation.daily, w))
                .map_err(&io)?;
            out.commit().map_err(&io)?;
            print_table(&evaluation.overall);
        }
        Command::Run => {
            let outcome = run_pipeline(&cfg)?;
            print_table(&outcome.evaluation.overall);
            println!(
                "{} evaluated hours; outputs in {}",
                outcome.dispatch.len(),
                cfg.output_dir.display()
            );
        }
    }
    Ok(())
}

fn print_table(reports: &[EvaluationReport]) {
    print!("{:<18}", "metric");
    for m in METHODS {
        print!("{m:>16}");
    }
    println!();
    for (i, name) in EvaluationReport::ROW_NAMES.iter().enumerate() {
        print!("{name:<18}");
        for r in reports {
            print!("{:>16.4}", r.rows()[i]);
        }
        println!();
    }
}
