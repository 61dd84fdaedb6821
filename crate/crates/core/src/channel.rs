//! Synthetic time-correlated MIMO channels and noisy pilot observations.
//!
//! Each complex link is a sum of unit-amplitude complex exponentials
//! (Clarke model). Arrival angles are stratified over `(0, pi)` with a
//! random per-link offset, so all Doppler frequencies of a link are
//! distinct and the time-averaged complex autocorrelation follows
//! `J0(2 pi f_d tau)` closely even for a single realization. Phases are
//! drawn uniformly per sinusoid.
//!
//! Real vectorization: `h = [vec(Re H); vec(Im H)]` with column-major `vec`,
//! so link `(m, n)` of an `M x N` matrix sits at `m + M * n` (real part) and
//! `M * N + m + M * n` (imaginary part).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const SPEED_OF_LIGHT: f64 = 2.998e8;
pub const NUM_SINUSOIDS: usize = 64;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Base-station antennas.
    pub m: usize,
    /// User-equipment antennas.
    pub n: usize,
    pub carrier_hz: f64,
    pub slot_s: f64,
    pub speed_kmh: f64,
    pub bandwidth_hz: f64,
    pub thermal_noise_dbm_hz: f64,
    pub pathloss_db: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            m: 2,
            n: 2,
            carrier_hz: 3.59e9,
            slot_s: 2e-3,
            speed_kmh: 5.0,
            bandwidth_hz: 1e7,
            thermal_noise_dbm_hz: -174.0,
            pathloss_db: 100.0,
        }
    }
}

impl SystemConfig {
    /// Real channel dimension `2 M N`.
    pub fn dim(&self) -> usize {
        2 * self.m * self.n
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid("antenna counts must be positive"));
        }
        let positive = [
            ("carrier_hz", self.carrier_hz),
            ("slot_s", self.slot_s),
            ("bandwidth_hz", self.bandwidth_hz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.speed_kmh.is_finite() && self.speed_kmh >= 0.0) {
            return Err(Error::invalid(format!(
                "speed_kmh must be non-negative, got {}",
                self.speed_kmh
            )));
        }
        if !self.thermal_noise_dbm_hz.is_finite() || !self.pathloss_db.is_finite() {
            return Err(Error::invalid("noise density and pathloss must be finite"));
        }
        Ok(())
    }

    /// Maximum Doppler shift `v f_c / c`.
    pub fn doppler_hz(&self) -> f64 {
        self.speed_kmh / 3.6 * self.carrier_hz / SPEED_OF_LIGHT
    }

    /// Received power scale in watts after pathloss.
    pub fn rho(&self, tx_power_dbm: f64) -> f64 {
        10f64.powf((tx_power_dbm - 30.0 - self.pathloss_db) / 10.0)
    }

    /// Total complex noise variance over the band, in watts.
    pub fn noise_var(&self) -> f64 {
        let dbm = self.thermal_noise_dbm_hz + 10.0 * self.bandwidth_hz.log10();
        10f64.powf((dbm - 30.0) / 10.0)
    }

    pub fn snr_db(&self, tx_power_dbm: f64) -> f64 {
        10.0 * (self.rho(tx_power_dbm) / self.noise_var()).log10()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrace {
    /// `T x L`, one real channel vector per slot.
    pub h: Array2<f64>,
    pub config: SystemConfig,
    pub seed: u64,
    pub doppler_hz: f64,
}

impl ChannelTrace {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn slot(&self, t: usize) -> ArrayView1<'_, f64> {
        self.h.row(t)
    }

    /// Number of prediction windows for history length `history`.
    pub fn num_windows(&self, history: usize) -> usize {
        self.len().saturating_sub(history)
    }

    /// Concatenated history `h_s .. h_{s+p-1}` of the window starting at `start`.
    pub fn window_input(&self, start: usize, history: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(history * self.dim());
        for t in start..start + history {
            out.extend(self.h.row(t).iter());
        }
        out
    }

    /// Target `h_{s+p}` of the window starting at `start`.
    pub fn window_target(&self, start: usize, history: usize) -> Vec<f64> {
        self.h.row(start + history).to_vec()
    }

    /// Per-link `(min, max)` over the slots touched by the given windows.
    pub fn link_range(&self, starts: &[usize], history: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim()];
        for &s in starts {
            for t in s..=s + history {
                for (l, &v) in self.h.row(t).iter().enumerate() {
                    out[l].0 = out[l].0.min(v);
                    out[l].1 = out[l].1.max(v);
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "# dcbf-trace M={} N={} speed_kmh={} carrier_hz={} slot_s={} seed={}\n",
            c.m, c.n, c.speed_kmh, c.carrier_hz, c.slot_s, self.seed
        );
        for row in self.h.rows() {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(' ');
                }
                first = false;
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Parses the textual trace format. Fields absent from the header take
    /// their values from `base`.
    pub fn from_text(text: &str, base: &SystemConfig, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, "empty trace file"))?;
        let header = header
            .strip_prefix("# dcbf-trace")
            .ok_or_else(|| Error::parse(path, "missing '# dcbf-trace' header"))?;
        let mut config = base.clone();
        let mut seed = None;
        for tok in header.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("bad header token '{tok}'")))?;
            match k {
                "M" => config.m = field(path, k, v)?,
                "N" => config.n = field(path, k, v)?,
                "speed_kmh" => config.speed_kmh = field(path, k, v)?,
                "carrier_hz" => config.carrier_hz = field(path, k, v)?,
                "slot_s" => config.slot_s = field(path, k, v)?,
                "seed" => seed = Some(field(path, k, v)?),
                _ => return Err(Error::parse(path, format!("unknown header key '{k}'"))),
            }
        }
        config
            .validate()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let seed = seed.ok_or_else(|| Error::parse(path, "header lacks seed"))?;
        let dim = config.dim();
        let mut data = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::parse(path, format!("line {}: bad number '{tok}'", i + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::parse(path, format!("line {}: non-finite value", i + 1)));
                }
                data.push(v);
            }
            if data.len() - before != dim {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected {dim} values, got {}", i + 1, data.len() - before),
                ));
            }
        }
        let rows = data.len() / dim;
        let h = Array2::from_shape_vec((rows, dim), data).expect("row lengths checked");
        Ok(Self {
            h,
            doppler_hz: config.doppler_hz(),
            config,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, base: &SystemConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, base, path)
    }
}

fn field<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::parse(path, format!("bad value for {key}: '{value}'")))
}

/// Generates `len` slots of a Clarke-model channel. `history` is the
/// predictor history length the trace is meant for; the trace must contain
/// at least one full window.
pub fn generate_trace(
    config: &SystemConfig,
    len: usize,
    history: usize,
    seed: u64,
) -> Result<ChannelTrace> {
    config.validate()?;
    if len <= history {
        return Err(Error::invalid(format!(
            "trace length {len} must exceed history length {history}"
        )));
    }
    let links = config.m * config.n;
    let fd = config.doppler_hz();
    let scale = (NUM_SINUSOIDS as f64).recip().sqrt();
    let mut h = Array2::zeros((len, 2 * links));
    let mut omega = [0.0; NUM_SINUSOIDS];
    let mut phase = [0.0; NUM_SINUSOIDS];

    for k in 0..links {
        let mut rng = rng::stream(seed, &[rng::TAG_CHANNEL, k as u64]);
        let offset: f64 = rng.random();
        for i in 0..NUM_SINUSOIDS {
            let alpha = PI * (i as f64 + offset) / NUM_SINUSOIDS as f64;
            omega[i] = 2.0 * PI * fd * alpha.cos() * config.slot_s;
            phase[i] = 2.0 * PI * rng.random::<f64>();
        }
        for t in 0..len {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..NUM_SINUSOIDS {
                let (s, c) = (omega[i] * t as f64 + phase[i]).sin_cos();
                re += c;
                im += s;
            }
            h[[t, k]] = re * scale;
            h[[t, links + k]] = im * scale;
        }
    }

    Ok(ChannelTrace {
        h,
        config: config.clone(),
        seed,
        doppler_hz: fd,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub r: Vec<f64>,
    /// Linear received power scale.
    pub rho: f64,
    /// Total complex noise variance; each real component carries half.
    pub noise_var: f64,
}

impl Observation {
    /// Per-link maximum-likelihood channel estimate `r / sqrt(rho)`.
    pub fn ml_estimate(&self) -> Vec<f64> {
        let s = self.rho.sqrt();
        self.r.iter().map(|r| r / s).collect()
    }
}

/// Noisy pilot observation with orthogonal unit-energy pilots, which makes
/// every real channel component an independent scalar measurement.
pub fn observe(
    h: &[f64],
    config: &SystemConfig,
    tx_power_dbm: f64,
    seed: u64,
) -> Result<Observation> {
    let mut rng = rng::stream(seed, &[rng::TAG_OBSERVE]);
    observe_with(h, config.rho(tx_power_dbm), config.noise_var(), &mut rng)
}

pub fn observe_with<R: Rng + ?Sized>(
    h: &[f64],
    rho: f64,
    noise_var: f64,
    rng: &mut R,
) -> Result<Observation> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("channel vector has non-finite entries"));
    }
    if !(rho > 0.0 && rho.is_finite()) || !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::invalid(format!(
            "need rho > 0 and noise_var >= 0, got {rho}, {noise_var}"
        )));
    }
    let amp = rho.sqrt();
    let sd = (noise_var / 2.0).sqrt();
    let r = h
        .iter()
        .map(|&x| {
            let w: f64 = StandardNormal.sample(rng);
            amp * x + sd * w
        })
        .collect();
    Ok(Observation { r, rho, noise_var })
}

/// Observations for every slot of a trace at one transmit power. Slot `t`
/// draws from its own stream, so any sub-range is reproducible in isolation.
pub fn observe_trace(
    trace: &ChannelTrace,
    tx_power_dbm: f64,
    seed: u64,
) -> Result<Vec<Observation>> {
    let rho = trace.config.rho(tx_power_dbm);
    let noise_var = trace.config.noise_var();
    (0..trace.len())
        .map(|t| {
            let mut rng = rng::stream(seed, &[rng::TAG_OBSERVE, t as u64]);
            observe_with(
                trace.h.row(t).as_slice().expect("standard layout"),
                rho,
                noise_var,
                &mut rng,
            )
        })
        .collect()
}

/// Train / validation / calibration / test window starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits the `len - history` windows into contiguous 7:1:1:1 blocks in
/// temporal order, with calibration directly preceding test.
pub fn split_dataset(len: usize, history: usize) -> Result<DatasetSplit> {
    let n = len.saturating_sub(history);
    if n < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 windows to split, got {n}"
        )));
    }
    let cut = |num: usize| (num * n + 5) / 10;
    let (c1, c2, c3) = (cut(7), cut(8), cut(9));
    Ok(DatasetSplit {
        train: (0..c1).collect(),
        val: (c1..c2).collect(),
        cal: (c2..c3).collect(),
        test: (c3..n).collect(),
    })
}
