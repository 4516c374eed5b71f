mod commands;
mod config;
mod error;
mod store;

use clap::{Args, Parser, Subcommand};
use commands::{EvalArgs, EvalModel, SeqArgs};
use config::RunConfig;
use error::{CliError, Result};
use std::path::PathBuf;
use std::process::ExitCode;
use stpp::benchmark::SpatialKind;
use stpp::classical::{ModelKind, TemporalModel};
use stpp::events::Split;
use stpp::neural::TimeFlow;
use stpp::simulate::{default_pinwheel_hawkes, BoundStrategy, Horizon, PinwheelConfig};
use stpp::train::{Ablation, GridConfig, PredictConfig, TimeSource};

/// Simulate, fit and forecast marked spatio-temporal point processes.
#[derive(Parser)]
#[command(name = "stpp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or write a preset run configuration as TOML.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Sample events and write them as CSV with a manifest alongside.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Cut an event CSV into overlapping windows.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        /// Spatial dimension of the CSV.
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Shuffle windows into train, validation and test splits.
    Split {
        #[arg(long)]
        windows: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory to create.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit classical baselines on the training split.
    FitBaseline {
        #[arg(long)]
        data: PathBuf,
        /// homo-poisson, hawkes, self-correcting or none.
        #[arg(long, default_value = "hawkes")]
        time: String,
        /// gaussian, conditional-gmm, kcluster:K or none.
        #[arg(long, default_value = "conditional-gmm")]
        space: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train the network; writes checkpoints, history.csv and summary.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; without one the configured pinwheel is simulated.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        dropout_rate: Option<f64>,
        /// none, zero-encoder or zero-decoder.
        #[arg(long)]
        ablation: Option<Ablation>,
        /// softsign or softplus.
        #[arg(long)]
        time_flow: Option<String>,
    },
    /// Print per-event output NLLs as a results table.
    Evaluate {
        /// Rows to report; repeat the flag for several.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Report NLLs in data units instead of network units.
        #[arg(long)]
        raw_units: bool,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Forecast the output events of one sequence.
    Predict {
        #[command(flatten)]
        seq: SeqFlags,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Export each output slot's spatial density on a regular grid.
    ExportDensity {
        #[command(flatten)]
        seq: SeqFlags,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Plot window `x1min,x1max,x2min,x2max` in data units.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        window: Option<Vec<f64>>,
        /// Half-width of the automatic window in standard deviations.
        #[arg(long, default_value_t = 6.0)]
        sigma_span: f64,
        /// Third coordinate of the plotted plane for 3-d data.
        #[arg(long)]
        depth: Option<f64>,
        #[arg(long)]
        no_differences: bool,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Simulate {
    /// Spiral-arm clusters timed by a Hawkes process.
    Pinwheel {
        #[arg(long, default_value_t = 15)]
        clusters: usize,
        #[arg(long, default_value_t = 150)]
        per_cluster: usize,
        #[arg(long)]
        radial_std: Option<f64>,
        #[arg(long)]
        tangential_std: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        /// Hawkes background rate of the event times.
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Event times of a self-exciting Hawkes process.
    Hawkes {
        #[command(flatten)]
        params: HawkesParams,
        #[command(flatten)]
        run: TemporalRun,
    },
    /// Event times of a homogeneous Poisson process.
    Poisson {
        #[arg(long)]
        rate: f64,
        #[command(flatten)]
        run: TemporalRun,
    },
    /// Event times of a self-correcting process.
    SelfCorrecting {
        #[command(flatten)]
        params: HawkesParams,
        #[command(flatten)]
        run: TemporalRun,
    },
}

#[derive(Args, Clone, Copy)]
struct HawkesParams {
    #[arg(long, allow_negative_numbers = true)]
    mu: f64,
    #[arg(long, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long)]
    beta: f64,
}

#[derive(Args)]
struct TemporalRun {
    /// Number of events.
    #[arg(short = 'n', long, conflicts_with = "horizon")]
    count: Option<usize>,
    /// Simulate every event up to this time instead.
    #[arg(long)]
    horizon: Option<f64>,
    /// Largest event count accepted with --horizon.
    #[arg(long, default_value_t = 1_000_000)]
    cap: usize,
    /// tight, or inflated:F for a bound F times the tight one.
    #[arg(long, default_value = "tight")]
    bound: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset (desk or full) instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequence_length: Option<usize>,
    #[arg(long)]
    input_length: Option<usize>,
    #[arg(long)]
    output_length: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// Train, validation and test fractions, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(name) => RunConfig::preset(name)?,
            None => RunConfig::load_or_default(self.config.as_deref())?,
        };
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.sequence_length, self.sequence_length);
        set(&mut cfg.input_length, self.input_length);
        set(&mut cfg.output_length, self.output_length);
        set(&mut cfg.overlap, self.overlap);
        set(&mut cfg.lambda1, self.lambda1);
        set(&mut cfg.lambda2, self.lambda2);
        if let Some(f) = &self.fractions {
            cfg.fractions = [f[0], f[1], f[2]];
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SeqFlags {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence id such as test_0.
    #[arg(long)]
    seq: String,
    #[arg(long)]
    ablation: Option<Ablation>,
}

impl SeqFlags {
    fn args(&self) -> SeqArgs {
        SeqArgs { ckpt: self.ckpt.clone(), data: self.data.clone(), seq: self.seq.clone(), ablation: self.ablation }
    }
}

#[derive(Args)]
struct SamplingArgs {
    /// true-times or sampled: the time the spatial head is conditioned on.
    #[arg(long, default_value = "true-times")]
    time_source: TimeSource,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn optional<T: std::str::FromStr<Err = String>>(s: &str) -> Result<Option<T>> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(CliError::Usage)
    }
}

fn parse_bound(s: &str) -> Result<BoundStrategy> {
    match s {
        "tight" => Ok(BoundStrategy::Tight),
        other => match other.strip_prefix("inflated:").map(str::parse::<f64>) {
            Some(Ok(f)) if f > 1.0 => Ok(BoundStrategy::Inflated(f)),
            _ => Err(CliError::Usage(format!("bound `{other}` must be tight or inflated:F with F > 1"))),
        },
    }
}

fn temporal(model: TemporalModel<f64>, run: &TemporalRun) -> Result<()> {
    let horizon = match (run.count, run.horizon) {
        (Some(n), None) => Horizon::Count(n),
        (None, Some(time)) => Horizon::Time { time, cap: run.cap },
        _ => return Err(CliError::Usage("give exactly one of -n and --horizon".into())),
    };
    commands::simulate_temporal(&model, horizon, parse_bound(&run.bound)?, run.seed, &run.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { preset, out } => commands::config(&preset, out.as_deref()),
        Command::Simulate(sim) => match sim {
            Simulate::Pinwheel { clusters, per_cluster, radial_std, tangential_std, rate, mu, alpha, beta, seed, out } => {
                let base = PinwheelConfig::default();
                let cfg = PinwheelConfig {
                    n_clusters: clusters,
                    per_cluster,
                    radial_std: radial_std.unwrap_or(base.radial_std),
                    tangential_std: tangential_std.unwrap_or(base.tangential_std),
                    rate: rate.unwrap_or(base.rate),
                };
                let TemporalModel::Hawkes { mu: mu0, alpha: alpha0, beta: beta0 } = default_pinwheel_hawkes() else {
                    unreachable!("the pinwheel default is a Hawkes process")
                };
                let hawkes = TemporalModel::Hawkes {
                    mu: mu.unwrap_or(mu0),
                    alpha: alpha.unwrap_or(alpha0),
                    beta: beta.unwrap_or(beta0),
                };
                commands::simulate_pinwheel(&cfg, &hawkes, seed, &out)
            }
            Simulate::Hawkes { params: p, run } => {
                temporal(TemporalModel::Hawkes { mu: p.mu, alpha: p.alpha, beta: p.beta }, &run)
            }
            Simulate::Poisson { rate, run } => temporal(TemporalModel::Poisson { rate }, &run),
            Simulate::SelfCorrecting { params: p, run } => {
                temporal(TemporalModel::SelfCorrecting { mu: p.mu, alpha: p.alpha, beta: p.beta }, &run)
            }
        },
        Command::Ingest { csv, dim, cfg, out } => commands::ingest(&csv, dim, &cfg.resolve()?, &out),
        Command::Split { windows, cfg, out } => {
            let cfg = cfg.resolve()?;
            commands::split(&windows, cfg.fractions, cfg.seed, &out)
        }
        Command::FitBaseline { data, time, space, cfg, out } => {
            let cfg = cfg.resolve()?;
            let time: Option<ModelKind> = optional(&time)?;
            let space: Option<SpatialKind> = optional(&space)?;
            commands::fit_baseline(&data, time, space, (cfg.lambda1, cfg.lambda2), cfg.seed, &out)
        }
        Command::Train { cfg, data, out, epochs, batch_size, learning_rate, dropout_rate, ablation, time_flow } => {
            let mut run = cfg.resolve()?;
            set(&mut run.epochs, epochs);
            set(&mut run.batch_size, batch_size);
            set(&mut run.learning_rate, learning_rate);
            set(&mut run.dropout_rate, dropout_rate);
            set(&mut run.ablation, ablation);
            if let Some(f) = time_flow {
                run.time_flow = match f.as_str() {
                    "softsign" => TimeFlow::Softsign,
                    "softplus" => TimeFlow::Softplus,
                    other => return Err(CliError::Usage(format!("unknown time flow `{other}` (softsign, softplus)"))),
                };
            }
            if data.is_some() {
                run.paths.data = data;
            }
            if out.is_some() {
                run.paths.out = out;
            }
            commands::train_cmd(&run)
        }
        Command::Evaluate { models, data, ckpt, split, raw_units, ablation, sampling, out } => {
            let models = models
                .into_iter()
                .map(|m| m.parse::<EvalModel>().map(|p| (m, p)).map_err(CliError::Usage))
                .collect::<Result<Vec<_>>>()?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(CliError::Usage(format!("unknown split `{other}` (train, val, test)"))),
            };
            commands::evaluate_cmd(&EvalArgs {
                models,
                data,
                ckpt,
                split,
                raw_units,
                ablation,
                time_source: sampling.time_source,
                n_samples: sampling.samples,
                seed: sampling.seed,
                out,
            })
        }
        Command::Predict { seq, sampling, out } => {
            let pcfg = PredictConfig { n_samples: sampling.samples, time_source: sampling.time_source, seed: sampling.seed };
            commands::predict_cmd(&seq.args(), &pcfg, out.as_deref())
        }
        Command::ExportDensity { seq, steps, window, sigma_span, depth, no_differences, sampling, out } => {
            let gcfg = GridConfig {
                steps,
                window: window.map(|w| [[w[0], w[1]], [w[2], w[3]]]),
                sigma_span,
                depth,
                differences: !no_differences,
                n_samples: sampling.samples,
                seed: sampling.seed,
                time_source: sampling.time_source,
                ..GridConfig::default()
            };
            commands::export_density_cmd(&seq.args(), &gcfg, &out)
        }
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json());
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&usage(e.render())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
