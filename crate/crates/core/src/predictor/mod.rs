//! Deep quantile channel predictors.
//!
//! A network maps the concatenated `p`-slot history (width `p * L`) to an
//! `L x G` matrix of quantiles, one column per level. The flat network
//! output is laid out link-major: output `l * G + j` is the `tau_j` quantile
//! of link `l`. Both architectures are trained on the mean pinball loss with
//! hand-written backward passes.

mod gru;
mod mlp;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::arrays::{self, NamedArrays};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

pub use train::{train, Adam, EpochStats, TrainConfig, TrainReport, Windows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Gru,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Gru => "gru",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "gru" => Ok(Arch::Gru),
            _ => Err(Error::invalid(format!("unknown architecture '{s}'"))),
        }
    }
}

/// Strictly increasing quantile levels inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileLevels(Vec<f64>);

impl QuantileLevels {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::invalid(format!("quantile levels must lie in (0,1): {taus:?}")));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("quantile levels must increase: {taus:?}")));
        }
        Ok(Self(taus))
    }

    /// Nine levels `0.1, 0.2, ..., 0.9`.
    pub fn deciles() -> Self {
        Self((1..=9).map(|i| i as f64 / 10.0).collect())
    }

    pub fn taus(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Levels with the boundary levels `0` and `1` attached.
    pub fn with_bounds(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.0.len() + 2);
        v.push(0.0);
        v.extend_from_slice(&self.0);
        v.push(1.0);
        v
    }
}

impl Default for QuantileLevels {
    fn default() -> Self {
        Self::deciles()
    }
}

/// `L x G` predicted quantiles. Not necessarily monotone across levels.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSurface {
    pub q: Array2<f64>,
}

impl QuantileSurface {
    pub fn from_flat(flat: &[f64], dim: usize, levels: usize) -> Self {
        Self {
            q: Array2::from_shape_vec((dim, levels), flat.to_vec()).expect("flat length L*G"),
        }
    }
}

/// Network parameters as an ordered list of named matrices. Biases are
/// stored as `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub arch: Arch,
    pub history: usize,
    pub dim: usize,
    pub levels: QuantileLevels,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub tensors: Vec<(String, Array2<f64>)>,
}

/// Gradient arrays, aligned with `PredictorParams::tensors`.
pub type Grads = Vec<Array2<f64>>;

impl PredictorParams {
    /// Freshly initialized network, weights uniform in `+-1/sqrt(fan_in)`.
    pub fn init(
        arch: Arch,
        history: usize,
        dim: usize,
        levels: QuantileLevels,
        hidden: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if history == 0 || dim == 0 || levels.is_empty() {
            return Err(Error::invalid("history, dim and levels must be non-empty"));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid(format!("bad hidden sizes {hidden:?}")));
        }
        let shapes = match arch {
            Arch::Mlp => mlp::shapes(history * dim, &hidden, dim * levels.len()),
            Arch::Gru => gru::shapes(dim, &hidden, dim * levels.len()),
        };
        let mut rng = rng::stream(seed, &[rng::TAG_INIT]);
        let tensors = shapes
            .into_iter()
            .map(|(name, (r, c), fan_in)| {
                let bound = (fan_in as f64).recip().sqrt();
                let a = Array2::from_shape_simple_fn((r, c), || rng.random_range(-bound..bound));
                (name, a)
            })
            .collect();
        Ok(Self {
            arch,
            history,
            dim,
            levels,
            hidden,
            seed,
            tensors,
        })
    }

    pub fn input_width(&self) -> usize {
        self.history * self.dim
    }

    pub fn output_width(&self) -> usize {
        self.dim * self.levels.len()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        self.tensors
            .iter()
            .map(|(_, a)| Array2::zeros(a.raw_dim()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.input_width() {
            return Err(Error::invalid(format!(
                "history width {} does not match p*L = {}",
                inputs.ncols(),
                self.input_width()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("history has non-finite entries"));
        }
        Ok(())
    }

    /// Raw network outputs for a batch of histories (`B x pL` to `B x LG`).
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&inputs)?;
        Ok(match self.arch {
            Arch::Mlp => mlp::forward(self, inputs),
            Arch::Gru => gru::forward(self, inputs),
        })
    }

    /// Quantile surface for one history of length `p * L`.
    pub fn forward(&self, history: &[f64]) -> Result<QuantileSurface> {
        let x = ArrayView2::from_shape((1, history.len()), history)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let y = self.forward_batch(x)?;
        Ok(QuantileSurface::from_flat(
            y.as_slice().expect("contiguous"),
            self.dim,
            self.levels.len(),
        ))
    }

    /// Batch forward split into row chunks, run under `exec`.
    pub fn forward_many(&self, inputs: ArrayView2<'_, f64>, exec: Exec) -> Result<Array2<f64>> {
        const CHUNK: usize = 128;
        self.check_input(&inputs)?;
        let n = inputs.nrows();
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(CHUNK)
            .map(|s| (s, (s + CHUNK).min(n)))
            .collect();
        let parts = exec.map(&chunks, |&(a, b)| {
            self.forward_batch(inputs.slice(ndarray::s![a..b, ..]))
        });
        let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Ok(Array2::zeros((0, self.output_width())));
        }
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Numerical(e.to_string()))
    }

    /// Mean pinball loss over a batch, links and levels.
    pub fn total_loss(&self, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<f64> {
        self.check_batch(&inputs, &targets)?;
        let y = self.forward_batch(inputs)?;
        Ok(loss_and_output_grad(&y, &targets, self.levels.taus(), false).0)
    }

    /// Loss and exact gradient of [`Self::total_loss`]. The pinball
    /// subgradient at a kink (`q == h`) is taken as 0.
    pub fn backward(
        &self,
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
    ) -> Result<(f64, Grads)> {
        self.check_batch(&inputs, &targets)?;
        Ok(match self.arch {
            Arch::Mlp => mlp::loss_and_grad(self, inputs, targets),
            Arch::Gru => gru::loss_and_grad(self, inputs, targets),
        })
    }

    fn check_batch(&self, inputs: &ArrayView2<'_, f64>, targets: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if inputs.nrows() != targets.nrows() || targets.ncols() != self.dim {
            return Err(Error::invalid(format!(
                "batch shapes {:?} / {:?} do not match p*L={}, L={}",
                inputs.shape(),
                targets.shape(),
                self.input_width(),
                self.dim
            )));
        }
        self.check_input(inputs)
    }

    pub fn to_arrays(&self) -> NamedArrays {
        NamedArrays {
            meta: vec![
                ("kind".into(), "predictor".into()),
                ("arch".into(), self.arch.to_string()),
                ("history".into(), self.history.to_string()),
                ("dim".into(), self.dim.to_string()),
                ("taus".into(), arrays::join(self.levels.taus())),
                ("hidden".into(), arrays::join(&self.hidden)),
                ("seed".into(), self.seed.to_string()),
            ],
            arrays: self.tensors.clone(),
        }
    }

    pub fn from_arrays(a: NamedArrays, path: &Path) -> Result<Self> {
        let get = |k: &str| {
            a.meta(k)
                .ok_or_else(|| Error::parse(path, format!("checkpoint lacks '{k}'")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::parse(path, format!("bad value for '{k}'")))
        };
        if get("kind")? != "predictor" {
            return Err(Error::parse(path, "not a predictor checkpoint"));
        }
        let arch: Arch = get("arch")?.parse().map_err(|e: Error| Error::parse(path, e.to_string()))?;
        let history = num("history")? as usize;
        let dim = num("dim")? as usize;
        let levels = QuantileLevels::new(arrays::split(get("taus")?, "taus", path)?)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let hidden: Vec<usize> = arrays::split(get("hidden")?, "hidden", path)?;
        let seed = num("seed")?;
        let template = Self::init(arch, history, dim, levels, hidden, seed)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        if a.arrays.len() != template.tensors.len() {
            return Err(Error::parse(path, "wrong number of arrays for architecture"));
        }
        for ((n, arr), (tn, ta)) in a.arrays.iter().zip(&template.tensors) {
            if n != tn || arr.dim() != ta.dim() {
                return Err(Error::parse(
                    path,
                    format!("array '{n}' {:?} does not match expected '{tn}' {:?}", arr.dim(), ta.dim()),
                ));
            }
        }
        Ok(Self {
            tensors: a.arrays,
            ..template
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_arrays().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_arrays(NamedArrays::load(path)?, path)
    }
}

/// Pinball loss `rho_tau(h, q)`.
pub fn pinball_loss(h: f64, q: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("quantile level {tau} outside (0,1)")));
    }
    Ok(pinball(h, q, tau))
}

#[inline]
fn pinball(h: f64, q: f64, tau: f64) -> f64 {
    if q <= h {
        tau * (h - q)
    } else {
        (1.0 - tau) * (q - h)
    }
}

/// Mean pinball loss of raw outputs `y` (`B x LG`) against targets
/// (`B x L`), and optionally its gradient with respect to `y`.
pub(crate) fn loss_and_output_grad(
    y: &Array2<f64>,
    targets: &ArrayView2<'_, f64>,
    taus: &[f64],
    want_grad: bool,
) -> (f64, Array2<f64>) {
    let (b, dim, g) = (y.nrows(), targets.ncols(), taus.len());
    let norm = 1.0 / (b * dim * g) as f64;
    let mut dy = if want_grad {
        Array2::zeros(y.raw_dim())
    } else {
        Array2::zeros((0, 0))
    };
    let mut total = 0.0;
    for i in 0..b {
        for l in 0..dim {
            let h = targets[[i, l]];
            for (j, &tau) in taus.iter().enumerate() {
                let q = y[[i, l * g + j]];
                total += pinball(h, q, tau);
                if want_grad {
                    dy[[i, l * g + j]] = if q < h {
                        -tau * norm
                    } else if q > h {
                        (1.0 - tau) * norm
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    (total * norm, dy)
}
