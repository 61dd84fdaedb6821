//! Experiment orchestration: configuration, the NMSE metric, per-cell
//! evaluation of every method, sweeps and CSV results.
//!
//! A sweep cell is one `(speed, seed, power, method)`. Channel traces,
//! predictors, calibration offsets and AR fits depend only on
//! `(speed, seed)` and are built once per pair; observations depend on
//! `(speed, seed, power)` and are shared by every method in that cell set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};

use crate::baselines::{self, ARModel, KfConfig};
use crate::channel::{self, ChannelTrace, DatasetSplit, SystemConfig};
use crate::conformal::{self, BoundsMode, CalibratedPredictor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::filter::{self, FilterConfig};
use crate::predictor::{self, Arch, PredictorParams, QuantileLevels, TrainConfig, TrainReport, Windows};
use crate::rng;

/// Linear NMSE values below this are reported as `NMSE_FLOOR_DB`.
pub const NMSE_FLOOR_DB: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nmse {
    pub linear: f64,
    /// `10 log10(linear)`, floored at `NMSE_FLOOR_DB`.
    pub db: f64,
    /// Slots skipped because the true channel was exactly zero.
    pub excluded: usize,
}

/// Mean over slots of `||pred - truth||^2 / ||truth||^2`.
pub fn nmse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<Nmse> {
    if pred.dim() != truth.dim() || pred.nrows() == 0 {
        return Err(Error::invalid(format!(
            "prediction {:?} and truth {:?} must be equal and non-empty",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (p, h) in pred.rows().into_iter().zip(truth.rows()) {
        let energy: f64 = h.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            continue;
        }
        let err: f64 = p.iter().zip(h.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += err / energy;
        used += 1;
    }
    let excluded = pred.nrows() - used;
    if used == 0 {
        return Err(Error::invalid("every true channel vector is zero"));
    }
    if excluded > 0 {
        log::warn!("{excluded} zero-energy slots excluded from NMSE");
    }
    let linear = total / used as f64;
    if !linear.is_finite() {
        return Err(Error::Numerical(format!("NMSE is {linear}")));
    }
    let db = if linear > 0.0 {
        (10.0 * linear.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    };
    Ok(Nmse { linear, db, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Outdated,
    Kf,
    Mlp,
    Gru,
    DcbfMlp,
    DcbfGru,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Outdated,
        Method::Kf,
        Method::Mlp,
        Method::Gru,
        Method::DcbfMlp,
        Method::DcbfGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Outdated => "outdated",
            Method::Kf => "kf",
            Method::Mlp => "mlp",
            Method::Gru => "gru",
            Method::DcbfMlp => "dcbf_mlp",
            Method::DcbfGru => "dcbf_gru",
        }
    }

    /// Network the method relies on, if any.
    pub fn arch(self) -> Option<Arch> {
        match self {
            Method::Mlp | Method::DcbfMlp => Some(Arch::Mlp),
            Method::Gru | Method::DcbfGru => Some(Arch::Gru),
            Method::Outdated | Method::Kf => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Slots per generated trace; `trace_len - history` windows are split.
    pub trace_len: usize,
    pub seeds: Vec<u64>,
    pub speeds_kmh: Vec<f64>,
    pub tx_power_dbm: Vec<f64>,
    pub methods: Vec<Method>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trace_len: 10_003,
            seeds: (0..5).collect(),
            speeds_kmh: vec![5.0, 20.0],
            tx_power_dbm: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub history: usize,
    pub taus: Vec<f64>,
    pub mlp_hidden: Vec<usize>,
    pub gru_hidden: Vec<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            history: 3,
            taus: QuantileLevels::deciles().taus().to_vec(),
            mlp_hidden: vec![64, 64],
            gru_hidden: vec![128, 128],
        }
    }
}

impl PredictorConfig {
    pub fn hidden(&self, arch: Arch) -> &[usize] {
        match arch {
            Arch::Mlp => &self.mlp_hidden,
            Arch::Gru => &self.gru_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    pub bounds: BoundsMode,
    /// Standard deviation of the Gaussian perturbation added to calibration
    /// (and coverage test) inputs. When unset, the per-component noise of
    /// the estimate `r / sqrt(rho)` at `reference_power_dbm` is used, so the
    /// prior is calibrated for estimated rather than exact histories.
    pub input_noise_std: Option<f64>,
    pub reference_power_dbm: f64,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            bounds: BoundsMode::PerLink,
            input_noise_std: None,
            reference_power_dbm: 10.0,
        }
    }
}

impl ConformalConfig {
    pub fn noise_std(&self, system: &SystemConfig) -> f64 {
        self.input_noise_std
            .unwrap_or_else(|| (system.noise_var() / (2.0 * system.rho(self.reference_power_dbm))).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for the CSV and artifacts; relative to `--out` on the
    /// command line.
    pub dir: PathBuf,
    pub csv: String,
    /// Write each trained checkpoint and its offsets next to the CSV.
    pub save_artifacts: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("."),
            csv: "results.csv".into(),
            save_artifacts: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub channel: SystemConfig,
    pub experiment: SweepConfig,
    pub predictor: PredictorConfig,
    pub training: TrainConfig,
    pub filter: FilterConfig,
    pub kf: KfConfig,
    pub conformal: ConformalConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Reads a TOML config. The name `default` selects the built-in one.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn levels(&self) -> Result<QuantileLevels> {
        QuantileLevels::new(self.predictor.taus.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.methods.is_empty() || e.tx_power_dbm.is_empty() || e.seeds.is_empty() || e.speeds_kmh.is_empty() {
            return Err(Error::Config("methods, tx_power_dbm, seeds and speeds_kmh must be non-empty".into()));
        }
        if e.tx_power_dbm.iter().chain(&e.speeds_kmh).any(|v| !v.is_finite()) {
            return Err(Error::Config("powers and speeds must be finite".into()));
        }
        if self.predictor.history == 0 {
            return Err(Error::Config("predictor.history must be at least 1".into()));
        }
        if self.kf.order == 0 {
            return Err(Error::Config("kf.order must be at least 1".into()));
        }
        if self.conformal.input_noise_std.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("conformal.input_noise_std must be finite and >= 0".into()));
        }
        if !self.conformal.reference_power_dbm.is_finite() {
            return Err(Error::Config("conformal.reference_power_dbm must be finite".into()));
        }
        self.levels().map_err(|e| Error::Config(e.to_string()))?;
        self.channel.validate()?;
        self.training.validate()?;
        self.filter.validate()?;
        channel::split_dataset(e.trace_len, self.predictor.history)
            .map_err(|err| Error::Config(format!("experiment.trace_len: {err}")))?;
        Ok(())
    }

    pub fn system(&self, speed_kmh: f64) -> SystemConfig {
        SystemConfig {
            speed_kmh,
            ..self.channel.clone()
        }
    }
}

/// Trace and split for one `(speed, seed)`.
pub fn build_trace(cfg: &ExperimentConfig, speed_kmh: f64, seed: u64) -> Result<(ChannelTrace, DatasetSplit)> {
    let p = cfg.predictor.history;
    let trace = channel::generate_trace(&cfg.system(speed_kmh), cfg.experiment.trace_len, p, seed)?;
    let split = channel::split_dataset(trace.len(), p)?;
    Ok((trace, split))
}

/// Trains one predictor on the training block with early selection on
/// the validation block.
pub fn train_predictor(
    cfg: &ExperimentConfig,
    arch: Arch,
    trace: &ChannelTrace,
    split: &DatasetSplit,
    seed: u64,
) -> Result<TrainReport> {
    let p = cfg.predictor.history;
    let train = Windows::from_trace(trace, &split.train, p);
    let val = Windows::from_trace(trace, &split.val, p);
    let tc = TrainConfig {
        seed: rng::derive(cfg.training.seed, &[seed]),
        ..cfg.training.clone()
    };
    predictor::train(arch, cfg.predictor.hidden(arch).to_vec(), cfg.levels()?, &train, &val, &tc)
}

fn perturbed(w: &Windows, std: f64, seed: u64, which: u64) -> Windows {
    let mut r = rng::stream(seed, &[rng::TAG_EVAL_NOISE, which]);
    Windows {
        inputs: w.perturbed_inputs(std, &mut r),
        targets: w.targets.clone(),
    }
}

/// Fits offsets on the calibration block and attaches training bounds.
pub fn calibrate_predictor(
    cfg: &ExperimentConfig,
    params: PredictorParams,
    trace: &ChannelTrace,
    split: &DatasetSplit,
    exec: Exec,
) -> Result<CalibratedPredictor> {
    let p = cfg.predictor.history;
    let train = Windows::from_trace(trace, &split.train, p);
    let cal = perturbed(
        &Windows::from_trace(trace, &split.cal, p),
        cfg.conformal.noise_std(&trace.config),
        params.seed,
        1,
    );
    let offsets = conformal::fit_offsets(&params, &cal, exec)?;
    let bounds = conformal::training_bounds(&train, cfg.conformal.bounds);
    CalibratedPredictor::new(params, offsets, bounds)
}

/// `L x G` empirical coverage on the test block, inputs perturbed the
/// same way as the calibration inputs (independent draw).
pub fn test_coverage(
    cfg: &ExperimentConfig,
    model: &CalibratedPredictor,
    trace: &ChannelTrace,
    split: &DatasetSplit,
    exec: Exec,
) -> Result<Array2<f64>> {
    let p = cfg.predictor.history;
    let test = perturbed(
        &Windows::from_trace(trace, &split.test, p),
        cfg.conformal.noise_std(&trace.config),
        model.params.seed,
        2,
    );
    conformal::coverage_table(&model.params, &model.offsets, &model.bounds, &test, exec)
}

/// Per-link AR models fitted on the noiseless slots the training windows
/// cover.
pub fn fit_kf(cfg: &ExperimentConfig, trace: &ChannelTrace, split: &DatasetSplit) -> Result<Vec<ARModel>> {
    let end = split.train.last().map_or(0, |s| s + cfg.predictor.history + 1);
    baselines::fit_ar(trace.h.slice(s![..end, ..]), cfg.kf.order)
}

/// Target slots of the test windows.
pub fn test_slots(split: &DatasetSplit, history: usize) -> std::ops::Range<usize> {
    let first = split.test[0] + history;
    first..split.test.last().expect("non-empty test block") + history + 1
}

/// Everything a cell needs that does not depend on transmit power.
pub struct SeedContext {
    pub speed_kmh: f64,
    pub seed: u64,
    pub trace: ChannelTrace,
    pub split: DatasetSplit,
    pub mlp: Option<Result<CalibratedPredictor>>,
    pub gru: Option<Result<CalibratedPredictor>>,
    pub ar: Option<Result<Vec<ARModel>>>,
}

impl SeedContext {
    /// Builds the trace and whatever models `methods` need. Training or
    /// fitting failures are kept and surface in the affected cells only.
    pub fn prepare(cfg: &ExperimentConfig, speed_kmh: f64, seed: u64, methods: &[Method], exec: Exec) -> Result<Self> {
        let (trace, _) = build_trace(cfg, speed_kmh, seed)?;
        Self::with_trace(cfg, trace, seed, methods, exec)
    }

    /// Same as [`SeedContext::prepare`] for an existing trace; the speed is
    /// taken from the trace.
    pub fn with_trace(
        cfg: &ExperimentConfig,
        trace: ChannelTrace,
        seed: u64,
        methods: &[Method],
        exec: Exec,
    ) -> Result<Self> {
        let speed_kmh = trace.config.speed_kmh;
        let split = channel::split_dataset(trace.len(), cfg.predictor.history)?;
        let wants = |a: Arch| methods.iter().any(|m| m.arch() == Some(a));
        let model = |a: Arch| -> Result<CalibratedPredictor> {
            let report = train_predictor(cfg, a, &trace, &split, seed)?;
            log::info!(
                "{a} speed {speed_kmh} seed {seed}: best epoch {} of {}",
                report.best_epoch,
                report.epochs.len()
            );
            calibrate_predictor(cfg, report.params, &trace, &split, exec)
        };
        let mlp = wants(Arch::Mlp).then(|| model(Arch::Mlp));
        let gru = wants(Arch::Gru).then(|| model(Arch::Gru));
        let ar = methods.contains(&Method::Kf).then(|| fit_kf(cfg, &trace, &split));
        Ok(Self {
            speed_kmh,
            seed,
            trace,
            split,
            mlp,
            gru,
            ar,
        })
    }

    pub fn predictor(&self, arch: Arch) -> Result<&CalibratedPredictor> {
        let slot = match arch {
            Arch::Mlp => &self.mlp,
            Arch::Gru => &self.gru,
        };
        match slot {
            Some(Ok(m)) => Ok(m),
            Some(Err(e)) => Err(Error::invalid(format!("{arch} predictor unavailable: {e}"))),
            None => Err(Error::invalid(format!("{arch} predictor was not prepared"))),
        }
    }

    /// Noisy observations for every slot at one power, shared by methods.
    pub fn observations(&self, tx_power_dbm: f64) -> Result<Vec<channel::Observation>> {
        let seed = rng::derive(self.seed, &[rng::TAG_OBSERVE, self.speed_kmh.to_bits(), tx_power_dbm.to_bits()]);
        channel::observe_trace(&self.trace, tx_power_dbm, seed)
    }
}

/// Test-block predictions of one method.
pub fn predict(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    method: Method,
    obs: &[channel::Observation],
    tx_power_dbm: f64,
    exec: Exec,
) -> Result<Array2<f64>> {
    let p = cfg.predictor.history;
    let slots = test_slots(&ctx.split, p);
    match method {
        Method::Outdated => baselines::outdated_run(obs, slots),
        Method::Kf => {
            let models = match &ctx.ar {
                Some(Ok(m)) => m,
                Some(Err(e)) => return Err(Error::FitFailure(e.to_string())),
                None => return Err(Error::invalid("AR models were not prepared")),
            };
            baselines::kf_run(models, obs, slots, p, exec)
        }
        Method::Mlp | Method::Gru => {
            let model = ctx.predictor(method.arch().expect("network method"))?;
            Ok(filter::predictor_run(model, obs, slots, exec)?.predictions)
        }
        Method::DcbfMlp | Method::DcbfGru => {
            let arch = method.arch().expect("network method");
            let model = ctx.predictor(arch)?;
            let fc = FilterConfig {
                seed: rng::derive(
                    cfg.filter.seed,
                    &[ctx.seed, ctx.speed_kmh.to_bits(), tx_power_dbm.to_bits(), arch as u64],
                ),
                ..cfg.filter.clone()
            };
            Ok(filter::dcbf_run(model, obs, slots, &fc, exec)?.predictions)
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub speed_kmh: f64,
    pub tx_power_dbm: f64,
    pub method: Method,
    pub seed: u64,
    pub nmse_db: f64,
    pub runtime_s: f64,
}

pub const CSV_HEADER: &str = "speed_kmh,tx_power_dbm,method,seed,nmse_db,runtime_s";

/// Evaluates one cell.
pub fn evaluate_cell(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    method: Method,
    obs: &[channel::Observation],
    tx_power_dbm: f64,
    exec: Exec,
) -> Result<ResultRow> {
    let start = Instant::now();
    let pred = predict(cfg, ctx, method, obs, tx_power_dbm, exec)?;
    let slots = test_slots(&ctx.split, cfg.predictor.history);
    let truth = ctx.trace.h.slice(s![slots, ..]);
    let score = nmse(pred.view(), truth)?;
    Ok(ResultRow {
        speed_kmh: ctx.speed_kmh,
        tx_power_dbm,
        method,
        seed: ctx.seed,
        nmse_db: score.db,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub speed_kmh: f64,
    pub tx_power_dbm: f64,
    pub method: Method,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// File stem shared by checkpoints and offsets of one predictor.
pub fn artifact_stem(arch: Arch, speed_kmh: f64, seed: u64) -> String {
    format!("{arch}_speed{speed_kmh}_seed{seed}")
}

/// Saves the checkpoint and offsets of every prepared predictor under `dir`.
pub fn save_artifacts(ctx: &SeedContext, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (arch, slot) in [(Arch::Mlp, &ctx.mlp), (Arch::Gru, &ctx.gru)] {
        if let Some(Ok(m)) = slot {
            let stem = artifact_stem(arch, ctx.speed_kmh, ctx.seed);
            m.params.save(&dir.join(format!("{stem}.ckpt")))?;
            m.offsets.save(&m.bounds, &dir.join(format!("{stem}.offsets")))?;
        }
    }
    Ok(())
}

/// Runs every cell of the sweep. Rows come back ordered by speed, seed,
/// power and method as listed in the config, whatever the execution order.
/// With `artifacts` set, checkpoints and offsets are written there.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec, artifacts: Option<&Path>) -> Result<SweepOutcome> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let pairs: Vec<(f64, u64)> = e
        .speeds_kmh
        .iter()
        .flat_map(|&v| e.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let per_pair = exec.map(&pairs, |&(speed, seed)| -> SweepOutcome {
        let fail_all = |err: &Error| SweepOutcome {
            rows: Vec::new(),
            failures: e
                .tx_power_dbm
                .iter()
                .flat_map(|&pw| {
                    e.methods.iter().map(move |&m| CellFailure {
                        speed_kmh: speed,
                        tx_power_dbm: pw,
                        method: m,
                        seed,
                        error: err.to_string(),
                    })
                })
                .collect(),
        };
        let ctx = match SeedContext::prepare(cfg, speed, seed, &e.methods, exec) {
            Ok(c) => c,
            Err(err) => return fail_all(&err),
        };
        if let Some(dir) = artifacts {
            if let Err(err) = save_artifacts(&ctx, dir) {
                log::error!("saving artifacts: {err}");
            }
        }
        let cells = exec.map(&e.tx_power_dbm, |&pw| {
            let obs = ctx.observations(pw);
            e.methods
                .iter()
                .map(|&m| {
                    let res = match &obs {
                        Ok(o) => evaluate_cell(cfg, &ctx, m, o, pw, exec).map_err(|err| err.to_string()),
                        Err(err) => Err(err.to_string()),
                    };
                    res.map_err(|error| CellFailure {
                        speed_kmh: speed,
                        tx_power_dbm: pw,
                        method: m,
                        seed,
                        error,
                    })
                })
                .collect::<Vec<_>>()
        });
        let mut out = SweepOutcome::default();
        for r in cells.into_iter().flatten() {
            match r {
                Ok(row) => out.rows.push(row),
                Err(f) => {
                    log::error!(
                        "cell speed={} power={} method={} seed={} failed: {}",
                        f.speed_kmh,
                        f.tx_power_dbm,
                        f.method,
                        f.seed,
                        f.error
                    );
                    out.failures.push(f)
                }
            }
        }
        out
    });
    let mut all = SweepOutcome::default();
    for o in per_pair {
        all.rows.extend(o.rows);
        all.failures.extend(o.failures);
    }
    Ok(all)
}

pub fn write_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))
            .map_err(|e| Error::Numerical(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numerical(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(())
}

pub fn save_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, std::io::BufWriter::new(f))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let header = r.headers().map_err(|e| Error::parse(path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::parse(path, format!("expected header '{CSV_HEADER}'")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}

/// Mean and sample standard deviation of `nmse_db` over seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SummaryRow {
    pub speed_kmh: f64,
    pub method: Method,
    pub tx_power_dbm: f64,
    pub n: usize,
    pub mean_nmse_db: f64,
    pub std_nmse_db: f64,
}

pub const SUMMARY_HEADER: &str = "speed_kmh,method,tx_power_dbm,n,mean_nmse_db,std_nmse_db";

/// Groups rows by `(speed, method, power)`, sorted in that order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.speed_kmh
            .total_cmp(&b.speed_kmh)
            .then(a.method.cmp(&b.method))
            .then(a.tx_power_dbm.total_cmp(&b.tx_power_dbm))
    });
    let mut out = Vec::new();
    for group in sorted.chunk_by(|a, b| {
        a.speed_kmh == b.speed_kmh && a.method == b.method && a.tx_power_dbm == b.tx_power_dbm
    }) {
        let n = group.len();
        let mean = group.iter().map(|r| r.nmse_db).sum::<f64>() / n as f64;
        let var = if n > 1 {
            group.iter().map(|r| (r.nmse_db - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        out.push(SummaryRow {
            speed_kmh: group[0].speed_kmh,
            method: group[0].method,
            tx_power_dbm: group[0].tx_power_dbm,
            n,
            mean_nmse_db: mean,
            std_nmse_db: var.sqrt(),
        });
    }
    out
}

pub fn write_summary<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(SUMMARY_HEADER.split(','))
            .map_err(|e| Error::Numerical(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numerical(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(())
}
