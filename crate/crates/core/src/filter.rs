//! Importance-sampling fusion of the calibrated prior with a noisy pilot
//! observation, and the recursive filter built on it.
//!
//! Each real link is handled on its own. Samples are drawn from the
//! piecewise-uniform prior, weighted by the Gaussian likelihood of the
//! observation, and averaged. The refined estimates replace the oldest
//! entry of the predictor's history, so the next prior is conditioned on
//! filtered rather than raw estimates.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;

use crate::channel::Observation;
use crate::conformal::{CalibratedPredictor, PiecewiseUniform, PiecewiseUniformPrior};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Importance samples per link and slot.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("filter.samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Inverse-CDF draws from one link's prior.
pub fn sample_link<R: Rng + ?Sized>(d: &PiecewiseUniform, count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| d.quantile(rng.random::<f64>())).collect()
}

/// `count` draws from link `l` of the prior, reproducible from `seed`.
pub fn sample_prior(prior: &PiecewiseUniformPrior, l: usize, count: usize, seed: u64) -> Result<Vec<f64>> {
    let d = prior
        .links
        .get(l)
        .ok_or_else(|| Error::invalid(format!("link {l} out of range")))?;
    let mut rng = rng::stream(seed, &[rng::TAG_PRIOR, l as u64]);
    Ok(sample_link(d, count, &mut rng))
}

fn check_noise(rho: f64, noise_var: f64) -> Result<()> {
    if noise_var == 0.0 {
        return Err(Error::DegenerateLikelihood);
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) || !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!(
            "need rho > 0 and noise_var > 0, got {rho}, {noise_var}"
        )));
    }
    Ok(())
}

/// Log density of `r` under `N(sqrt(rho) h, noise_var / 2)`.
pub fn log_likelihood(r: f64, h: f64, rho: f64, noise_var: f64) -> Result<f64> {
    check_noise(rho, noise_var)?;
    let d = r - rho.sqrt() * h;
    Ok(-d * d / noise_var - 0.5 * (std::f64::consts::PI * noise_var).ln())
}

pub fn likelihood(r: f64, h: f64, rho: f64, noise_var: f64) -> Result<f64> {
    log_likelihood(r, h, rho, noise_var).map(f64::exp)
}

/// Samples of one link with their normalized importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSamples {
    pub samples: Vec<f64>,
    pub weights: Vec<f64>,
    /// Every likelihood underflowed; all weight sits on the sample nearest
    /// the maximum-likelihood estimate.
    pub fallback: bool,
}

impl WeightedSamples {
    pub fn mean(&self) -> f64 {
        self.samples
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s * w)
            .sum()
    }
}

pub fn importance_weights(samples: Vec<f64>, r: f64, rho: f64, noise_var: f64) -> Result<WeightedSamples> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to weight"));
    }
    check_noise(rho, noise_var)?;
    let logs = samples
        .iter()
        .map(|&h| log_likelihood(r, h, rho, noise_var))
        .collect::<Result<Vec<_>>>()?;
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top.is_finite() {
        let mut weights: Vec<f64> = logs.iter().map(|&v| (v - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        return Ok(WeightedSamples {
            samples,
            weights,
            fallback: false,
        });
    }
    let ml = r / rho.sqrt();
    let nearest = samples
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - ml).abs().total_cmp(&(b.1 - ml).abs()))
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut weights = vec![0.0; samples.len()];
    weights[nearest] = 1.0;
    Ok(WeightedSamples {
        samples,
        weights,
        fallback: true,
    })
}

/// Self-normalized importance-sampling estimate of `E[h | r]` with
/// `count` prior draws from `rng`.
pub fn posterior_with<R: Rng + ?Sized>(
    d: &PiecewiseUniform,
    r: f64,
    rho: f64,
    noise_var: f64,
    count: usize,
    rng: &mut R,
) -> Result<WeightedSamples> {
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    importance_weights(sample_link(d, count, rng), r, rho, noise_var)
}

pub fn posterior_mean(
    d: &PiecewiseUniform,
    r: f64,
    rho: f64,
    noise_var: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, &[rng::TAG_PRIOR]);
    Ok(posterior_with(d, r, rho, noise_var, count, &mut rng)?.mean())
}

pub fn prior_mean(prior: &PiecewiseUniformPrior, l: usize) -> Result<f64> {
    prior
        .links
        .get(l)
        .map(PiecewiseUniform::mean)
        .ok_or_else(|| Error::invalid(format!("link {l} out of range")))
}

/// Predictions for a contiguous range of target slots.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub slots: Range<usize>,
    /// One row per slot in `slots`.
    pub predictions: Array2<f64>,
    /// Link updates that hit the underflow fallback.
    pub fallbacks: usize,
    /// Link updates resolved exactly because the observation was noiseless.
    pub exact: usize,
}

fn check_run(model: &CalibratedPredictor, obs: &[Observation], slots: &Range<usize>) -> Result<()> {
    let p = model.history();
    if slots.is_empty() {
        return Err(Error::invalid("empty slot range"));
    }
    if slots.start < p || slots.end > obs.len() {
        return Err(Error::invalid(format!(
            "slots {slots:?} need {p} warm-up observations and at most {} slots",
            obs.len()
        )));
    }
    if let Some(o) = obs.iter().find(|o| o.r.len() != model.dim()) {
        return Err(Error::invalid(format!(
            "observation has {} links, predictor expects {}",
            o.r.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// Recursive filter. For every target slot `t` the prior built from the
/// current history is recorded as the prediction of `h_t`; the observation
/// `r_t` then refines it and the posterior mean enters the history. The
/// `p` slots before `slots.start` seed the history with `r / sqrt(rho)`.
pub fn dcbf_run(
    model: &CalibratedPredictor,
    obs: &[Observation],
    slots: Range<usize>,
    cfg: &FilterConfig,
    exec: Exec,
) -> Result<FilterRun> {
    check_run(model, obs, &slots)?;
    cfg.validate()?;
    let (p, dim) = (model.history(), model.dim());
    let mut history: Vec<f64> = obs[slots.start - p..slots.start]
        .iter()
        .flat_map(Observation::ml_estimate)
        .collect();
    let mut predictions = Array2::zeros((slots.len(), dim));
    let (mut fallbacks, mut exact) = (0, 0);

    for (i, t) in slots.clone().enumerate() {
        let prior = model.prior(&history)?;
        for (l, m) in prior.means().into_iter().enumerate() {
            predictions[[i, l]] = m;
        }
        let o = &obs[t];
        let updates = exec.map_range(dim, |l| {
            let mut rng = rng::stream(cfg.seed, &[rng::TAG_PRIOR, t as u64, l as u64]);
            match posterior_with(&prior.links[l], o.r[l], o.rho, o.noise_var, cfg.samples, &mut rng) {
                Ok(w) => Ok((w.mean(), w.fallback, false)),
                Err(Error::DegenerateLikelihood) => Ok((o.r[l] / o.rho.sqrt(), false, true)),
                Err(e) => Err(e),
            }
        });
        history.drain(..dim);
        for u in updates {
            let (h, fb, ex) = u?;
            history.push(h);
            fallbacks += fb as usize;
            exact += ex as usize;
        }
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} link updates fell back to the nearest sample");
    }
    Ok(FilterRun {
        slots,
        predictions,
        fallbacks,
        exact,
    })
}

/// The calibrated predictor on its own: prior mean given the last `p` raw
/// estimates `r / sqrt(rho)`, with no filtering.
pub fn predictor_run(
    model: &CalibratedPredictor,
    obs: &[Observation],
    slots: Range<usize>,
    exec: Exec,
) -> Result<FilterRun> {
    check_run(model, obs, &slots)?;
    let (p, dim) = (model.history(), model.dim());
    let ml: Vec<Vec<f64>> = obs[slots.start - p..slots.end - 1]
        .iter()
        .map(Observation::ml_estimate)
        .collect();
    let mut inputs = Array2::zeros((slots.len(), p * dim));
    for i in 0..slots.len() {
        for k in 0..p {
            for l in 0..dim {
                inputs[[i, k * dim + l]] = ml[i + k][l];
            }
        }
    }
    let phis = crate::conformal::calibrated_batch(
        &model.params,
        &model.offsets,
        &model.bounds,
        inputs.view(),
        exec,
    )?;
    let mut predictions = Array2::zeros((slots.len(), dim));
    for (i, phi) in phis.iter().enumerate() {
        let prior = crate::conformal::build_prior(phi, &model.params.levels)?;
        for (l, m) in prior.means().into_iter().enumerate() {
            predictions[[i, l]] = m;
        }
    }
    Ok(FilterRun {
        slots,
        predictions,
        fallbacks: 0,
        exact: 0,
    })
}
