use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use countycast_cli::commands::synth_options;
use countycast_cli::{cmd_evaluate, cmd_forecast, cmd_ingest, cmd_lag_sweep, cmd_synth, CliError, RunConfig};

/// County-level incidence forecasting with LSTM ensembles.
///
/// Log verbosity comes from COUNTYCAST_LOG (error, warn, info, debug).
#[derive(Parser)]
#[command(name = "countycast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the source files and write a validated snapshot.
    Ingest(Overrides),
    /// Train per-horizon ensembles and write a Forecast Hub file.
    Forecast(Overrides),
    /// Score Hub files and the persistence baseline against truth.
    Evaluate {
        #[command(flatten)]
        overrides: Overrides,
        /// Hub-format forecast files; the label is the name after the date.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Retrain and score one model per temporal lag.
    LagSweep(Overrides),
    /// Write a synthetic epidemic in the source formats.
    Synth {
        /// Target directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        counties: usize,
        #[arg(long, default_value_t = 60)]
        weeks: usize,
        /// Add weekend under-reporting and backlog dumps.
        #[arg(long)]
        spikes: bool,
    },
}

/// Every config key is also a flag and wins over the file.
#[derive(Args, Default)]
struct Overrides {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cases: Option<String>,
    #[arg(long)]
    mobility: Option<String>,
    #[arg(long)]
    sci: Option<String>,
    #[arg(long = "static")]
    statics: Option<String>,
    #[arg(long)]
    weather: Option<String>,
    #[arg(long)]
    snapshot: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Forecast date; snapped back to a Saturday.
    #[arg(long)]
    as_of: Option<String>,
    #[arg(long)]
    lag: Option<String>,
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    ensemble_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lstm_units: Option<String>,
    #[arg(long)]
    dense_units: Option<String>,
    #[arg(long)]
    quantiles: Option<String>,
    #[arg(long)]
    hybrid: Option<String>,
    /// raw, smoothed or both.
    #[arg(long)]
    truth: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    lags: Option<String>,
    #[arg(long)]
    eval_start: Option<String>,
    #[arg(long)]
    eval_weeks: Option<String>,
    /// once or weekly.
    #[arg(long)]
    retrain: Option<String>,
    #[arg(long)]
    top_k: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let pairs = [
            ("cases", &self.cases),
            ("mobility", &self.mobility),
            ("sci", &self.sci),
            ("static", &self.statics),
            ("weather", &self.weather),
            ("snapshot", &self.snapshot),
            ("out_dir", &self.out_dir),
            ("as_of", &self.as_of),
            ("lag", &self.lag),
            ("horizons", &self.horizons),
            ("ensemble_size", &self.ensemble_size),
            ("epochs", &self.epochs),
            ("learning_rate", &self.learning_rate),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
            ("lstm_units", &self.lstm_units),
            ("dense_units", &self.dense_units),
            ("quantiles", &self.quantiles),
            ("hybrid", &self.hybrid),
            ("truth", &self.truth),
            ("model_name", &self.model_name),
            ("lags", &self.lags),
            ("eval_start", &self.eval_start),
            ("eval_weeks", &self.eval_weeks),
            ("retrain", &self.retrain),
            ("top_k", &self.top_k),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v, None)?;
            }
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(o) => {
            let out = cmd_ingest(&o.resolve()?)?;
            print!("{}", out.report);
            println!("snapshot: {}", out.snapshot.display());
        }
        Command::Forecast(o) => {
            let out = cmd_forecast(&o.resolve()?)?;
            println!("{}", out.file.display());
        }
        Command::Evaluate { overrides, files } => {
            let out = cmd_evaluate(&overrides.resolve()?, &files)?;
            for p in out.report.period_averages() {
                let mape = p.mape.map_or_else(|| "n/a".to_string(), |m| format!("{m:.2}"));
                println!("{} {} h{}: MAE {:.2} MAPE {mape} ({} weeks)", p.model, p.truth, p.horizon, p.mae, p.weeks);
            }
            println!("{}", out.scores_file.display());
            println!("{}", out.national_file.display());
        }
        Command::LagSweep(o) => {
            let out = cmd_lag_sweep(&o.resolve()?)?;
            println!("lag,avg_mae");
            for r in &out.rows {
                println!("{},{:.2}", r.lag, r.avg_mae);
            }
            println!("{}", out.file.display());
        }
        Command::Synth { out, seed, counties, weeks, spikes } => {
            let config = cmd_synth(&out, &synth_options(seed, counties, weeks, spikes)?)?;
            println!("{}", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COUNTYCAST_LOG", "info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
