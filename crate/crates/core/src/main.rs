//! Command-line front end.
//!
//! Exit status: 0 on success, 1 when a computation fails (or any sweep cell
//! fails), 2 for usage and configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcbf::channel::ChannelTrace;
use dcbf::conformal::{CalibratedPredictor, CalibrationOffsets};
use dcbf::harness::{self, ExperimentConfig, Method, SeedContext};
use dcbf::predictor::{Arch, PredictorParams};
use dcbf::{Error, Exec};

#[derive(Parser)]
#[command(name = "dcbf", version, about = "Calibrated deep quantile channel prediction lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config, or `default` for the built-in one.
    #[arg(long, default_value = "default")]
    config: PathBuf,
    /// Master seed (for `sweep`, replaces the configured seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory that outputs and relative input paths resolve against.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Config override `section.key=value` (TOML value syntax), repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run on the current thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel trace file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// User speed in km/h (default: first configured speed).
        #[arg(long)]
        speed: Option<f64>,
    },
    /// Train a quantile predictor and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        speed: Option<f64>,
        /// Existing trace file instead of generating one.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fit calibration offsets for a checkpoint.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        speed: Option<f64>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate one method at one power and print its NMSE in dB.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Method,
        /// Transmit power in dBm.
        #[arg(long, allow_hyphen_values = true)]
        power: f64,
        #[arg(long)]
        speed: Option<f64>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Trained checkpoint (otherwise the predictor is trained here).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Offsets for the checkpoint (otherwise it is calibrated here).
        #[arg(long, requires = "checkpoint")]
        offsets: Option<PathBuf>,
    },
    /// Run the full configured sweep and write the results CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Print per-(speed, method, power) mean and std of a results CSV.
    Report {
        #[command(flatten)]
        common: Common,
        /// Results CSV (default: the configured output CSV).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> std::result::Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or("empty key")?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("'{p}' is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn apply_overrides(cfg: ExperimentConfig, overrides: &[String]) -> std::result::Result<ExperimentConfig, String> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut root = toml::Table::try_from(&cfg).map_err(|e| e.to_string())?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| format!("override '{o}' is not KEY=VALUE"))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        set_path(&mut root, key.trim(), value)?;
    }
    let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    seed: u64,
    exec: Exec,
}

impl Ctx {
    fn new(c: &Common) -> std::result::Result<Self, Failure> {
        let cfg = ExperimentConfig::load(&c.config).map_err(|e| match e {
            Error::Io { .. } | Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Usage(format!("{}: {other}", c.config.display())),
        })?;
        let cfg = apply_overrides(cfg, &c.overrides).map_err(Failure::Usage)?;
        Ok(Self {
            seed: c.seed.unwrap_or(cfg.experiment.seeds[0]),
            cfg,
            out: c.out.clone(),
            exec: if c.sequential { Exec::Sequential } else { Exec::Parallel },
        })
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.out.join(p)
    }

    fn speed(&self, speed: Option<f64>) -> f64 {
        speed.unwrap_or(self.cfg.experiment.speeds_kmh[0])
    }

    fn ensure_out(&self) -> Outcome {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure::Runtime(format!("{}: {e}", self.out.display())))
    }

    fn trace(&self, file: Option<&Path>, speed: Option<f64>) -> std::result::Result<ChannelTrace, Failure> {
        match file {
            Some(f) => Ok(ChannelTrace::load(&self.path(f), &self.cfg.channel)?),
            None => Ok(harness::build_trace(&self.cfg, self.speed(speed), self.seed)?.0),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Generate { common, speed } => {
            let ctx = Ctx::new(&common)?;
            ctx.ensure_out()?;
            let trace = ctx.trace(None, speed)?;
            let path = ctx.path(Path::new(&format!("trace_speed{}_seed{}.txt", trace.config.speed_kmh, ctx.seed)));
            trace.save(&path)?;
            println!("{}", path.display());
        }
        Command::Train {
            common,
            arch,
            speed,
            trace,
        } => {
            let ctx = Ctx::new(&common)?;
            ctx.ensure_out()?;
            let trace = ctx.trace(trace.as_deref(), speed)?;
            let split = dcbf::channel::split_dataset(trace.len(), ctx.cfg.predictor.history)?;
            let report = harness::train_predictor(&ctx.cfg, arch, &trace, &split, ctx.seed)?;
            let stem = harness::artifact_stem(arch, trace.config.speed_kmh, ctx.seed);
            let path = ctx.path(Path::new(&format!("{stem}.ckpt")));
            report.params.save(&path)?;
            eprintln!("best epoch {} of {}", report.best_epoch, report.epochs.len());
            println!("{}", path.display());
        }
        Command::Calibrate {
            common,
            checkpoint,
            speed,
            trace,
        } => {
            let ctx = Ctx::new(&common)?;
            ctx.ensure_out()?;
            let params = PredictorParams::load(&ctx.path(&checkpoint))?;
            let trace = ctx.trace(trace.as_deref(), speed)?;
            let split = dcbf::channel::split_dataset(trace.len(), ctx.cfg.predictor.history)?;
            let arch = params.arch;
            let model = harness::calibrate_predictor(&ctx.cfg, params, &trace, &split, ctx.exec)?;
            let stem = harness::artifact_stem(arch, trace.config.speed_kmh, ctx.seed);
            let path = ctx.path(Path::new(&format!("{stem}.offsets")));
            model.offsets.save(&model.bounds, &path)?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            common,
            method,
            power,
            speed,
            trace,
            checkpoint,
            offsets,
        } => {
            let ctx = Ctx::new(&common)?;
            let trace = ctx.trace(trace.as_deref(), speed)?;
            let preload = checkpoint.is_some() && method.arch().is_some();
            let needs: Vec<Method> = if preload { vec![] } else { vec![method] };
            let mut seed_ctx = SeedContext::with_trace(&ctx.cfg, trace, ctx.seed, &needs, ctx.exec)?;
            if method == Method::Kf {
                seed_ctx.ar = Some(harness::fit_kf(&ctx.cfg, &seed_ctx.trace, &seed_ctx.split));
            }
            if let (true, Some(ck), Some(arch)) = (preload, &checkpoint, method.arch()) {
                let params = PredictorParams::load(&ctx.path(ck))?;
                if params.arch != arch {
                    return Err(Failure::Usage(format!(
                        "checkpoint {} holds a {} network, method {method} needs {arch}",
                        ck.display(),
                        params.arch
                    )));
                }
                let model = match &offsets {
                    Some(o) => {
                        let (off, bounds) = CalibrationOffsets::load(&ctx.path(o))?;
                        CalibratedPredictor::new(params, off, bounds)?
                    }
                    None => harness::calibrate_predictor(&ctx.cfg, params, &seed_ctx.trace, &seed_ctx.split, ctx.exec)?,
                };
                match arch {
                    Arch::Mlp => seed_ctx.mlp = Some(Ok(model)),
                    Arch::Gru => seed_ctx.gru = Some(Ok(model)),
                }
            }
            let obs = seed_ctx.observations(power)?;
            let row = harness::evaluate_cell(&ctx.cfg, &seed_ctx, method, &obs, power, ctx.exec)?;
            println!("{}", row.nmse_db);
        }
        Command::Sweep { common } => {
            let mut ctx = Ctx::new(&common)?;
            if let Some(s) = common.seed {
                ctx.cfg.experiment.seeds = vec![s];
            }
            let dir = ctx.path(&ctx.cfg.output.dir);
            let artifacts = ctx.cfg.output.save_artifacts.then(|| dir.join("artifacts"));
            let outcome = harness::run_experiment(&ctx.cfg, ctx.exec, artifacts.as_deref())?;
            let csv = dir.join(&ctx.cfg.output.csv);
            harness::save_csv(&outcome.rows, &csv)?;
            println!("{}", csv.display());
            if !outcome.failures.is_empty() {
                for f in &outcome.failures {
                    eprintln!(
                        "failed: speed={} power={} method={} seed={}: {}",
                        f.speed_kmh, f.tx_power_dbm, f.method, f.seed, f.error
                    );
                }
                return Err(Failure::Runtime(format!("{} of the sweep cells failed", outcome.failures.len())));
            }
        }
        Command::Report { common, csv } => {
            let ctx = Ctx::new(&common)?;
            let path = match csv {
                Some(p) => ctx.path(&p),
                None => ctx.path(&ctx.cfg.output.dir).join(&ctx.cfg.output.csv),
            };
            let rows = harness::read_csv(&path)?;
            harness::write_summary(&harness::summarize(&rows), std::io::stdout().lock())?;
        }
    }
    Ok(())
}
