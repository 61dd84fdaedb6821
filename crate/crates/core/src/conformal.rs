//! Conformalized quantile regression and the calibrated piecewise-uniform
//! prior.
//!
//! Scores `e = h - q_tau` are collected per link and level on a held-out
//! calibration block. The offset for level `tau` is the conformal
//! `ceil((n + 1) tau)`-th order statistic of its scores; adding it to the
//! raw quantile gives `Pr[h <= phi_tau] >= tau` for exchangeable data.
//! Calibrated rows are sorted (per-level offsets may cross), bracketed by
//! per-link bounds and turned into a distribution that puts mass
//! `tau_g - tau_{g-1}` uniformly between consecutive breakpoints.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::arrays::{self, NamedArrays};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::predictor::{PredictorParams, QuantileLevels, QuantileSurface, Windows};

/// One-based rank `ceil((n + 1) tau)` clamped to `[1, n]`, and whether the
/// clamp at `n` was needed (the coverage guarantee then no longer holds).
pub fn conformal_rank(n: usize, tau: f64) -> (usize, bool) {
    let x = (n + 1) as f64 * tau;
    // (n+1)*tau lands a few ulps off an integer for decimal levels.
    let near = x.round();
    let k = if (x - near).abs() <= 1e-9 * x.max(1.0) {
        near
    } else {
        x.ceil()
    };
    let k = k.max(1.0) as usize;
    if k > n {
        (n, true)
    } else {
        (k, false)
    }
}

/// Conformal empirical quantile: the `ceil((n + 1) tau)`-th smallest score.
pub fn empirical_quantile(scores: &[f64], tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("empirical quantile of an empty score list"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("quantile level {tau} outside (0,1)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let (k, _) = conformal_rank(scores.len(), tau);
    let mut sorted = scores.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

fn scores_from_outputs(
    y: &Array2<f64>,
    targets: &ArrayView2<'_, f64>,
    levels: usize,
) -> Vec<Vec<Vec<f64>>> {
    let dim = targets.ncols();
    let mut out = vec![vec![Vec::with_capacity(y.nrows()); levels]; dim];
    for i in 0..y.nrows() {
        for (l, per_level) in out.iter_mut().enumerate() {
            for (j, list) in per_level.iter_mut().enumerate() {
                list.push(targets[[i, l]] - y[[i, l * levels + j]]);
            }
        }
    }
    out
}

/// Conformity scores of level `j` on the calibration windows, one list per
/// link, in window order.
pub fn conformity_scores(
    params: &PredictorParams,
    cal: &Windows,
    j: usize,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    if cal.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    if j >= params.levels.len() {
        return Err(Error::invalid(format!("level index {j} out of range")));
    }
    let y = params.forward_many(cal.inputs.view(), exec)?;
    Ok(scores_from_outputs(&y, &cal.targets.view(), params.levels.len())
        .into_iter()
        .map(|mut per_level| per_level.swap_remove(j))
        .collect())
}

/// Per-link, per-level additive offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOffsets {
    /// `L x G`.
    pub gamma: Array2<f64>,
    pub levels: QuantileLevels,
    /// Calibration set size the offsets were computed from.
    pub n_cal: usize,
}

impl CalibrationOffsets {
    pub fn zeros(dim: usize, levels: QuantileLevels) -> Self {
        Self {
            gamma: Array2::zeros((dim, levels.len())),
            levels,
            n_cal: 0,
        }
    }

    /// Levels whose conformal rank had to be clamped at this calibration size.
    pub fn unattainable_levels(&self) -> Vec<f64> {
        self.levels
            .taus()
            .iter()
            .copied()
            .filter(|&t| conformal_rank(self.n_cal, t).1)
            .collect()
    }

    pub fn to_arrays(&self, bounds: &[LinkBounds]) -> NamedArrays {
        let b = Array2::from_shape_fn((bounds.len(), 2), |(l, c)| {
            if c == 0 {
                bounds[l].lo
            } else {
                bounds[l].hi
            }
        });
        NamedArrays {
            meta: vec![
                ("kind".into(), "offsets".into()),
                ("dim".into(), self.gamma.nrows().to_string()),
                ("taus".into(), arrays::join(self.levels.taus())),
                ("n_cal".into(), self.n_cal.to_string()),
            ],
            arrays: vec![("gamma".into(), self.gamma.clone()), ("bounds".into(), b)],
        }
    }

    pub fn from_arrays(a: &NamedArrays, path: &Path) -> Result<(Self, Vec<LinkBounds>)> {
        if a.meta("kind") != Some("offsets") {
            return Err(Error::parse(path, "not an offsets file"));
        }
        let taus = arrays::split(a.meta("taus").unwrap_or(""), "taus", path)?;
        let levels = QuantileLevels::new(taus).map_err(|e| Error::parse(path, e.to_string()))?;
        let n_cal = a
            .meta("n_cal")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, "missing n_cal"))?;
        let gamma = a
            .array("gamma")
            .ok_or_else(|| Error::parse(path, "missing gamma array"))?
            .clone();
        let b = a
            .array("bounds")
            .ok_or_else(|| Error::parse(path, "missing bounds array"))?;
        if gamma.ncols() != levels.len() || b.nrows() != gamma.nrows() || b.ncols() != 2 {
            return Err(Error::parse(path, "offset array shapes disagree"));
        }
        let bounds = b
            .rows()
            .into_iter()
            .map(|r| LinkBounds { lo: r[0], hi: r[1] })
            .collect();
        Ok((
            Self {
                gamma,
                levels,
                n_cal,
            },
            bounds,
        ))
    }

    pub fn save(&self, bounds: &[LinkBounds], path: &Path) -> Result<()> {
        self.to_arrays(bounds).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<LinkBounds>)> {
        Self::from_arrays(&NamedArrays::load(path)?, path)
    }
}

/// Computes all `L x G` offsets from one pass over the calibration set.
pub fn fit_offsets(params: &PredictorParams, cal: &Windows, exec: Exec) -> Result<CalibrationOffsets> {
    if cal.is_empty() {
        return Err(Error::invalid("empty calibration set"));
    }
    let y = params.forward_many(cal.inputs.view(), exec)?;
    let g = params.levels.len();
    let scores = scores_from_outputs(&y, &cal.targets.view(), g);
    let mut gamma = Array2::zeros((params.dim, g));
    for (l, per_level) in scores.iter().enumerate() {
        for (j, list) in per_level.iter().enumerate() {
            gamma[[l, j]] = empirical_quantile(list, params.levels.taus()[j])?;
        }
    }
    let offsets = CalibrationOffsets {
        gamma,
        levels: params.levels.clone(),
        n_cal: cal.len(),
    };
    let bad = offsets.unattainable_levels();
    if !bad.is_empty() {
        log::warn!(
            "calibration set of {} is too small for coverage at levels {bad:?}",
            cal.len()
        );
    }
    Ok(offsets)
}

/// Outer breakpoints of a link's prior (the `tau = 0` and `tau = 1` values).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBounds {
    pub lo: f64,
    pub hi: f64,
}

impl LinkBounds {
    /// Bounds that collapse onto the calibrated interior range.
    pub fn empty() -> Self {
        Self {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsMode {
    #[default]
    PerLink,
    Global,
}

/// Minimum and maximum channel values seen in the training windows.
pub fn training_bounds(train: &Windows, mode: BoundsMode) -> Vec<LinkBounds> {
    let dim = train.targets.ncols();
    let history = if dim == 0 { 0 } else { train.inputs.ncols() / dim };
    let mut b = vec![LinkBounds::empty(); dim];
    let mut see = |l: usize, v: f64| {
        b[l].lo = b[l].lo.min(v);
        b[l].hi = b[l].hi.max(v);
    };
    for i in 0..train.len() {
        for l in 0..dim {
            see(l, train.targets[[i, l]]);
            for t in 0..history {
                see(l, train.inputs[[i, t * dim + l]]);
            }
        }
    }
    if mode == BoundsMode::Global {
        let lo = b.iter().map(|x| x.lo).fold(f64::INFINITY, f64::min);
        let hi = b.iter().map(|x| x.hi).fold(f64::NEG_INFINITY, f64::max);
        b.iter_mut().for_each(|x| *x = LinkBounds { lo, hi });
    }
    b
}

/// `L x (G + 2)` calibrated quantiles; columns `0` and `G + 1` hold the
/// boundary values. Rows are nondecreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedQuantiles {
    pub phi: Array2<f64>,
}

pub fn calibrate(
    raw: &QuantileSurface,
    offsets: &CalibrationOffsets,
    bounds: &[LinkBounds],
) -> Result<CalibratedQuantiles> {
    let (dim, g) = raw.q.dim();
    if offsets.gamma.dim() != (dim, g) || bounds.len() != dim {
        return Err(Error::invalid(format!(
            "shape mismatch: raw {:?}, offsets {:?}, {} bounds",
            raw.q.dim(),
            offsets.gamma.dim(),
            bounds.len()
        )));
    }
    if raw.q.iter().chain(offsets.gamma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite quantiles or offsets"));
    }
    let mut phi = Array2::zeros((dim, g + 2));
    let mut row = vec![0.0; g];
    for l in 0..dim {
        for j in 0..g {
            row[j] = raw.q[[l, j]] + offsets.gamma[[l, j]];
        }
        row.sort_by(f64::total_cmp);
        phi[[l, 0]] = bounds[l].lo.min(row[0]);
        phi[[l, g + 1]] = bounds[l].hi.max(row[g - 1]);
        for j in 0..g {
            phi[[l, j + 1]] = row[j];
        }
    }
    Ok(CalibratedQuantiles { phi })
}

/// Distribution of one scalar with CDF values `levels[g]` at `breaks[g]`,
/// linear in between. Equal consecutive breakpoints form an atom.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseUniform {
    breaks: Vec<f64>,
    levels: Vec<f64>,
}

impl PiecewiseUniform {
    /// `levels` must run from exactly 0 to exactly 1, strictly increasing;
    /// `breaks` must be finite, nondecreasing and of the same length.
    pub fn new(breaks: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if breaks.len() < 2 || breaks.len() != levels.len() {
            return Err(Error::invalid("need matching breakpoints and levels, at least two"));
        }
        if levels[0] != 0.0 || *levels.last().unwrap() != 1.0 || levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("levels must increase from 0 to 1: {levels:?}")));
        }
        if breaks.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("non-finite breakpoint"));
        }
        if breaks.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(format!("breakpoints not monotone: {breaks:?}")));
        }
        Ok(Self { breaks, levels })
    }

    /// Uniform on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo, hi], vec![0.0, 1.0])
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn intervals(&self) -> usize {
        self.breaks.len() - 1
    }

    /// Mass of interval `g` (1-based, between `breaks[g-1]` and `breaks[g]`).
    pub fn mass(&self, g: usize) -> f64 {
        self.levels[g] - self.levels[g - 1]
    }

    pub fn support(&self) -> (f64, f64) {
        (self.breaks[0], *self.breaks.last().unwrap())
    }

    /// Density of the continuous part; atoms are excluded.
    pub fn density(&self, x: f64) -> f64 {
        for g in 1..self.breaks.len() {
            let (a, b) = (self.breaks[g - 1], self.breaks[g]);
            if b > a && x >= a && x <= b {
                return self.mass(g) / (b - a);
            }
        }
        0.0
    }

    /// Point masses `(location, mass)` from zero-width intervals.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        (1..self.breaks.len())
            .filter(|&g| self.breaks[g] == self.breaks[g - 1])
            .map(|g| (self.breaks[g], self.mass(g)))
            .collect()
    }

    /// Right-continuous CDF.
    pub fn cdf(&self, x: f64) -> f64 {
        let b = &self.breaks;
        if x < b[0] {
            return 0.0;
        }
        // Last breakpoint <= x.
        let g = b.partition_point(|&v| v <= x) - 1;
        if g + 1 == b.len() {
            return 1.0;
        }
        self.levels[g] + self.mass(g + 1) * (x - b[g]) / (b[g + 1] - b[g])
    }

    /// Inverse CDF at `u` in `[0, 1)`: picks the interval with probability
    /// equal to its mass, then a uniform position inside it.
    pub fn quantile(&self, u: f64) -> f64 {
        let g = self
            .levels
            .partition_point(|&v| v <= u)
            .clamp(1, self.breaks.len() - 1);
        let (a, b) = (self.breaks[g - 1], self.breaks[g]);
        if b == a {
            return a;
        }
        let frac = ((u - self.levels[g - 1]) / self.mass(g)).clamp(0.0, 1.0);
        a + frac * (b - a)
    }

    /// `sum_g m_g (b_{g-1} + b_g) / 2`; atoms contribute `m_g b_g`.
    pub fn mean(&self) -> f64 {
        (1..self.breaks.len())
            .map(|g| self.mass(g) * 0.5 * (self.breaks[g - 1] + self.breaks[g]))
            .sum()
    }
}

/// One piecewise-uniform distribution per link.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseUniformPrior {
    pub links: Vec<PiecewiseUniform>,
}

impl PiecewiseUniformPrior {
    pub fn dim(&self) -> usize {
        self.links.len()
    }

    pub fn means(&self) -> Vec<f64> {
        self.links.iter().map(PiecewiseUniform::mean).collect()
    }
}

pub fn build_prior(phi: &CalibratedQuantiles, levels: &QuantileLevels) -> Result<PiecewiseUniformPrior> {
    if phi.phi.ncols() != levels.len() + 2 {
        return Err(Error::invalid(format!(
            "calibrated quantiles have {} columns, expected G + 2 = {}",
            phi.phi.ncols(),
            levels.len() + 2
        )));
    }
    let cum = levels.with_bounds();
    let links = phi
        .phi
        .rows()
        .into_iter()
        .map(|row| PiecewiseUniform::new(row.to_vec(), cum.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PiecewiseUniformPrior { links })
}

/// A trained network frozen together with its calibration offsets and
/// boundary values.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedPredictor {
    pub params: PredictorParams,
    pub offsets: CalibrationOffsets,
    pub bounds: Vec<LinkBounds>,
}

impl CalibratedPredictor {
    pub fn new(params: PredictorParams, offsets: CalibrationOffsets, bounds: Vec<LinkBounds>) -> Result<Self> {
        if offsets.gamma.dim() != (params.dim, params.levels.len()) || bounds.len() != params.dim {
            return Err(Error::invalid("offsets or bounds do not match the predictor shape"));
        }
        if offsets.levels != params.levels {
            return Err(Error::invalid("offsets were fitted for different quantile levels"));
        }
        Ok(Self { params, offsets, bounds })
    }

    pub fn history(&self) -> usize {
        self.params.history
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Calibrated prior for the slot following `history` (`p * L` values,
    /// oldest slot first).
    pub fn prior(&self, history: &[f64]) -> Result<PiecewiseUniformPrior> {
        let raw = self.params.forward(history)?;
        let phi = calibrate(&raw, &self.offsets, &self.bounds)?;
        build_prior(&phi, &self.params.levels)
    }
}

/// Calibrated `L x (G + 2)` quantiles for a batch of windows.
pub fn calibrated_batch(
    params: &PredictorParams,
    offsets: &CalibrationOffsets,
    bounds: &[LinkBounds],
    inputs: ArrayView2<'_, f64>,
    exec: Exec,
) -> Result<Vec<CalibratedQuantiles>> {
    let y = params.forward_many(inputs, exec)?;
    let (dim, g) = (params.dim, params.levels.len());
    let rows: Vec<usize> = (0..y.nrows()).collect();
    exec.map(&rows, |&i| {
        let raw = QuantileSurface::from_flat(&y.row(i).to_vec(), dim, g);
        calibrate(&raw, offsets, bounds)
    })
    .into_iter()
    .collect()
}

/// Fraction of windows with `h[l] <= phi_{l, tau_j}`, for every link and
/// level (`L x G`).
pub fn coverage_table(
    params: &PredictorParams,
    offsets: &CalibrationOffsets,
    bounds: &[LinkBounds],
    test: &Windows,
    exec: Exec,
) -> Result<Array2<f64>> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let cal = calibrated_batch(params, offsets, bounds, test.inputs.view(), exec)?;
    let (dim, g) = (params.dim, params.levels.len());
    let mut hits = Array2::<f64>::zeros((dim, g));
    for (i, c) in cal.iter().enumerate() {
        for l in 0..dim {
            for j in 0..g {
                if test.targets[[i, l]] <= c.phi[[l, j + 1]] {
                    hits[[l, j]] += 1.0;
                }
            }
        }
    }
    Ok(hits / test.len() as f64)
}

/// Empirical coverage of level `j`, per link.
pub fn coverage(
    params: &PredictorParams,
    offsets: &CalibrationOffsets,
    bounds: &[LinkBounds],
    test: &Windows,
    j: usize,
    exec: Exec,
) -> Result<Vec<f64>> {
    if j >= params.levels.len() {
        return Err(Error::invalid(format!("level index {j} out of range")));
    }
    Ok(coverage_table(params, offsets, bounds, test, exec)?
        .column(j)
        .to_vec())
}
