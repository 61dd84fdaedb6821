//! Reference computations shared by the integration and acceptance tests.
//! None of these reuse library code paths they are meant to check.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dcbf::predictor::PredictorParams;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `J0(x)` from its power series. Accurate to ~1e-12 for `|x| <= 20`.
pub fn bessel_j0(x: f64) -> f64 {
    let q = -(x * x) / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term.abs() < 1e-17 * sum.abs().max(1.0) {
            break;
        }
    }
    sum
}

/// Mean of `N(mu, var)` truncated to `[a, b]`, by midpoint quadrature.
pub fn truncated_normal_mean(mu: f64, var: f64, a: f64, b: f64, points: usize) -> f64 {
    let dx = (b - a) / points as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..points {
        let x = a + (i as f64 + 0.5) * dx;
        let w = (-(x - mu).powi(2) / (2.0 * var)).exp();
        num += x * w;
        den += w;
    }
    num / den
}

/// Smallest score `v` with `#(scores <= v) >= ceil((n+1) tau)`, rank
/// clamped to `n`, by scanning every candidate.
pub fn brute_force_quantile(scores: &[f64], tau: f64) -> f64 {
    let n = scores.len();
    let mut k = 0;
    while (k as f64) < (n + 1) as f64 * tau - 1e-9 {
        k += 1;
    }
    let k = k.clamp(1, n);
    let mut best = f64::INFINITY;
    for &v in scores {
        let count = scores.iter().filter(|&&s| s <= v).count();
        if count >= k && v < best {
            best = v;
        }
    }
    best
}

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max((((i + 1) as f64) / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Normalized lag autocorrelation `sum x_t x_{t+k} / (T-k)` over the
/// lag-0 power, no demeaning (the process is zero mean).
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let c0 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let ck = (0..n - lag).map(|t| x[t] * x[t + lag]).sum::<f64>() / (n - lag) as f64;
    ck / c0
}

/// Real part of the normalized complex autocorrelation
/// `sum h_t conj(h_{t+k}) / (T-k)` over `sum |h_t|^2 / T`.
pub fn complex_autocorrelation(re: &[f64], im: &[f64], lag: usize) -> f64 {
    let n = re.len();
    let c0 = (0..n).map(|t| re[t] * re[t] + im[t] * im[t]).sum::<f64>() / n as f64;
    let ck = (0..n - lag)
        .map(|t| re[t] * re[t + lag] + im[t] * im[t + lag])
        .sum::<f64>()
        / (n - lag) as f64;
    ck / c0
}

/// Largest `|autocorrelation - J0|` over complex links and lags `0..=max_lag`,
/// and the same over individual real components.
pub fn j0_deviation(trace: &dcbf::channel::ChannelTrace, max_lag: usize) -> (f64, f64) {
    let links = trace.config.m * trace.config.n;
    let fd = trace.config.doppler_hz();
    let (mut complex, mut real): (f64, f64) = (0.0, 0.0);
    for lag in 0..=max_lag {
        let oracle = bessel_j0(2.0 * std::f64::consts::PI * fd * lag as f64 * trace.config.slot_s);
        for k in 0..links {
            let re = trace.h.column(k).to_vec();
            let im = trace.h.column(links + k).to_vec();
            complex = complex.max((complex_autocorrelation(&re, &im, lag) - oracle).abs());
            for x in [&re, &im] {
                real = real.max((autocorrelation(x, lag) - oracle).abs());
            }
        }
    }
    (complex, real)
}

/// Scalar AR(1) series driven by unit-variance Gaussian noise times `sd`,
/// started from its stationary law.
pub fn ar1_series(a: f64, sd: f64, len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut x = Vec::with_capacity(len);
    let mut v = sd / (1.0 - a * a).sqrt() * r.sample::<f64, _>(StandardNormal);
    for _ in 0..len {
        x.push(v);
        v = a * v + sd * r.sample::<f64, _>(StandardNormal);
    }
    x
}

pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((rows, cols), || scale * r.sample::<f64, _>(StandardNormal))
}

/// Largest relative error between `backward` and central differences of
/// `total_loss` with step `eps`, over every coordinate, and the number of
/// coordinates compared. A coordinate is skipped when either perturbed
/// network puts some quantile within 1e-3 of its target, where the loss
/// has a kink and differences are meaningless. The denominator is floored
/// at 1e-6: a central difference of an O(1) loss resolves gradients only
/// to about `1e-16 / eps`, so near-zero coordinates are held to an
/// absolute 1e-10 instead.
pub fn finite_difference_error(
    params: &PredictorParams,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    eps: f64,
) -> (f64, usize) {
    let (_, grads) = params.backward(inputs.view(), targets.view()).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, (_, tensor)) in params.tensors.iter().enumerate() {
        for idx in 0..tensor.len() {
            let loss_at = |delta: f64| {
                let mut p = params.clone();
                let t = &mut p.tensors[k].1;
                let c = t.ncols();
                t[[idx / c, idx % c]] += delta;
                (p.total_loss(inputs.view(), targets.view()).unwrap(), min_kink_gap(&p, inputs, targets))
            };
            let (plus, gap_p) = loss_at(eps);
            let (minus, gap_m) = loss_at(-eps);
            if gap_p < 1e-3 || gap_m < 1e-3 {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let c = tensor.ncols();
            let analytic = grads[k][[idx / c, idx % c]];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Smallest distance between any predicted quantile and its target.
pub fn min_kink_gap(params: &PredictorParams, inputs: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let y = params.forward_batch(inputs.view()).unwrap();
    let g = params.levels.len();
    let mut gap = f64::INFINITY;
    for i in 0..y.nrows() {
        for l in 0..params.dim {
            for j in 0..g {
                gap = gap.min((y[[i, l * g + j]] - targets[[i, l]]).abs());
            }
        }
    }
    gap
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

pub fn column_means(a: &Array2<f64>) -> Array1<f64> {
    a.mean_axis(ndarray::Axis(0)).unwrap()
}
