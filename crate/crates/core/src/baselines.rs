//! Reference predictors: the outdated channel and a Kalman filter over
//! per-link autoregressive dynamics fitted by Yule-Walker.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::channel::Observation;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Fits whose companion matrix has spectral radius at or above
/// `1 - STATIONARITY_MARGIN` are flagged.
pub const STATIONARITY_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KfMode {
    /// Independent scalar AR model and filter per real link.
    #[default]
    PerLink,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfConfig {
    pub order: usize,
    pub mode: KfMode,
}

impl Default for KfConfig {
    fn default() -> Self {
        Self {
            order: 3,
            mode: KfMode::PerLink,
        }
    }
}

/// `x_t = a_1 x_{t-1} + ... + a_q x_{t-q} + e_t`, `Var(e_t) = noise_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct ARModel {
    pub coeffs: Vec<f64>,
    pub noise_var: f64,
    /// Process variance: the lag-0 autocovariance for fitted models, the
    /// stationary variance otherwise (innovation variance if none exists).
    pub variance: f64,
    /// Set when the fit is at or beyond the stationarity boundary.
    pub nonstationary: bool,
}

impl ARModel {
    pub fn new(coeffs: Vec<f64>, noise_var: f64) -> Result<Self> {
        if coeffs.is_empty() || coeffs.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("AR coefficients must be finite and non-empty"));
        }
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(Error::invalid(format!("bad innovation variance {noise_var}")));
        }
        let nonstationary = spectral_radius(&coeffs) >= 1.0 - STATIONARITY_MARGIN;
        let mut m = Self {
            coeffs,
            noise_var,
            variance: noise_var,
            nonstationary,
        };
        if let Some(p) = m.stationary_covariance() {
            m.variance = p[[0, 0]];
        }
        Ok(m)
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn companion(&self) -> Array2<f64> {
        companion(&self.coeffs)
    }

    /// Covariance of `(x_t, ..., x_{t-q+1})` under the stationary law,
    /// or `None` when the model is not stationary.
    pub fn stationary_covariance(&self) -> Option<Array2<f64>> {
        if spectral_radius(&self.coeffs) >= 1.0 {
            return None;
        }
        let q = self.order();
        // Doubling: P = sum_k F^k Q F^k'.
        let mut a = self.companion();
        let mut p = Array2::zeros((q, q));
        p[[0, 0]] = self.noise_var;
        for _ in 0..64 {
            let next = &p + &a.dot(&p).dot(&a.t());
            a = a.dot(&a);
            let done = next.iter().zip(p.iter()).all(|(x, y)| (x - y).abs() <= 1e-15 * x.abs());
            p = next;
            if done {
                break;
            }
        }
        p.iter().all(|v| v.is_finite()).then_some(p)
    }
}

fn companion(coeffs: &[f64]) -> Array2<f64> {
    let q = coeffs.len();
    let mut f = Array2::zeros((q, q));
    for (j, &a) in coeffs.iter().enumerate() {
        f[[0, j]] = a;
    }
    for i in 1..q {
        f[[i, i - 1]] = 1.0;
    }
    f
}

/// Spectral radius of the companion matrix, from `||F^n||^(1/n)` with
/// `n = 2^48` reached by repeated squaring.
pub fn spectral_radius(coeffs: &[f64]) -> f64 {
    let mut a = companion(coeffs);
    let mut log_scale = 0.0;
    let mut n = 1.0f64;
    for _ in 0..48 {
        a = a.dot(&a);
        n *= 2.0;
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        a /= norm;
        log_scale = 2.0 * log_scale + norm.ln();
    }
    // log ||F^n|| = log_scale, accumulated with the rescaling.
    (log_scale / n).exp()
}

/// Biased sample autocovariances `r_0..r_q` about zero (fading channels
/// have zero mean).
pub fn autocovariance(x: ArrayView1<'_, f64>, max_lag: usize) -> Vec<f64> {
    let n = x.len();
    (0..=max_lag)
        .map(|k| {
            if k >= n {
                return 0.0;
            }
            (0..n - k).map(|t| x[t] * x[t + k]).sum::<f64>() / n as f64
        })
        .collect()
}

/// Levinson-Durbin solution of the Yule-Walker equations.
pub fn yule_walker(acov: &[f64]) -> Result<ARModel> {
    let q = acov.len().saturating_sub(1);
    if q == 0 {
        return Err(Error::invalid("need autocovariances up to lag >= 1"));
    }
    if !(acov[0] > 0.0) || acov.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitFailure(format!("zero or invalid variance r0 = {}", acov[0])));
    }
    let mut a = vec![0.0; q];
    let mut err = acov[0];
    for k in 1..=q {
        let acc: f64 = acov[k] - (1..k).map(|j| a[j - 1] * acov[k - j]).sum::<f64>();
        let refl = acc / err;
        let prev = a.clone();
        a[k - 1] = refl;
        for j in 1..k {
            a[j - 1] = prev[j - 1] - refl * prev[k - j - 1];
        }
        err *= 1.0 - refl * refl;
        if !(err > 1e-14 * acov[0]) {
            return Err(Error::FitFailure(format!(
                "singular autocovariance system at order {k}"
            )));
        }
    }
    let mut m = ARModel::new(a, err)?;
    m.variance = acov[0];
    Ok(m)
}

/// One scalar AR model per column of `train` (`T x L`).
pub fn fit_ar(train: ArrayView2<'_, f64>, order: usize) -> Result<Vec<ARModel>> {
    if order == 0 {
        return Err(Error::invalid("AR order must be at least 1"));
    }
    if train.nrows() <= 2 * order {
        return Err(Error::invalid(format!(
            "{} training slots are too few for order {order}",
            train.nrows()
        )));
    }
    train
        .columns()
        .into_iter()
        .enumerate()
        .map(|(l, col)| {
            let m = yule_walker(&autocovariance(col, order))
                .map_err(|e| Error::FitFailure(format!("link {l}: {e}")))?;
            if m.nonstationary {
                log::warn!("AR fit for link {l} is at the stationarity boundary");
            }
            Ok(m)
        })
        .collect()
}

/// Predicted state `x_{t|t-1}` and its covariance for one link.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub x: Array1<f64>,
    pub p: Array2<f64>,
    pub model: ARModel,
}

impl KalmanState {
    /// Zero mean with the stationary covariance, or `variance * I` for a
    /// nonstationary model.
    pub fn new(model: ARModel) -> Self {
        let q = model.order();
        let p = model
            .stationary_covariance()
            .unwrap_or_else(|| Array2::eye(q) * model.variance);
        Self {
            x: Array1::zeros(q),
            p,
            model,
        }
    }

    /// Current one-step prediction of the channel value.
    pub fn prediction(&self) -> f64 {
        self.x[0]
    }
}

fn is_psd(p: &Array2<f64>) -> bool {
    let q = p.nrows();
    let scale = (0..q).map(|i| p[[i, i]].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-10 * scale;
    // Cholesky with a small tolerance on pivots.
    let mut l = Array2::<f64>::zeros((q, q));
    for j in 0..q {
        let d = p[[j, j]] - (0..j).map(|k| l[[j, k]] * l[[j, k]]).sum::<f64>();
        if d < -tol {
            return false;
        }
        let d = d.max(0.0).sqrt();
        l[[j, j]] = d;
        for i in j + 1..q {
            let v = p[[i, j]] - (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum::<f64>();
            if d > 0.0 {
                l[[i, j]] = v / d;
            } else if v.abs() > tol {
                return false;
            }
        }
    }
    true
}

fn symmetrize(p: &mut Array2<f64>) {
    let s = (&*p + &p.t()) * 0.5;
    *p = s;
}

/// Measurement update with `r = sqrt(rho) x_0 + v`, `Var(v) = noise_var / 2`,
/// then time update. Returns the prediction of the next slot.
pub fn kf_step(state: &mut KalmanState, r: f64, rho: f64, noise_var: f64) -> Result<f64> {
    if !(rho > 0.0) || !(noise_var >= 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("bad observation r={r}, rho={rho}, noise_var={noise_var}")));
    }
    let q = state.model.order();
    let c = rho.sqrt();
    let big_r = noise_var / 2.0;
    let s = c * c * state.p[[0, 0]] + big_r;
    if s > 0.0 {
        let k: Array1<f64> = state.p.column(0).mapv(|v| v * c / s);
        let innov = r - c * state.x[0];
        state.x = &state.x + &(&k * innov);
        // Joseph form: (I - K H) P (I - K H)' + K R K'.
        let mut a = Array2::<f64>::eye(q);
        for i in 0..q {
            a[[i, 0]] -= k[i] * c;
        }
        let kk = k.view().insert_axis(ndarray::Axis(1));
        state.p = a.dot(&state.p).dot(&a.t()) + kk.dot(&kk.t()) * big_r;
    }
    symmetrize(&mut state.p);
    if !is_psd(&state.p) {
        return Err(Error::Numerical("Kalman covariance lost positive semidefiniteness".into()));
    }
    let f = state.model.companion();
    state.x = f.dot(&state.x);
    state.p = f.dot(&state.p).dot(&f.t());
    state.p[[0, 0]] += state.model.noise_var;
    symmetrize(&mut state.p);
    if state.x.iter().chain(state.p.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Kalman state diverged".into()));
    }
    Ok(state.prediction())
}

/// `r_t / sqrt(rho)` reused as the prediction of `h_{t+1}`.
pub fn outdated_predict(r: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let s = rho.sqrt();
    Ok(r.iter().map(|v| v / s).collect())
}

/// Outdated-channel predictions for every slot in `slots` (rows in order).
pub fn outdated_run(obs: &[Observation], slots: Range<usize>) -> Result<Array2<f64>> {
    if slots.is_empty() || slots.start == 0 || slots.end > obs.len() {
        return Err(Error::invalid(format!("slot range {slots:?} invalid for {} observations", obs.len())));
    }
    let dim = obs[0].r.len();
    let mut out = Array2::zeros((slots.len(), dim));
    for (i, t) in slots.enumerate() {
        let prev = &obs[t - 1];
        let h = outdated_predict(&prev.r, prev.rho)?;
        out.row_mut(i).assign(&ArrayView1::from(&h));
    }
    Ok(out)
}

/// Per-link Kalman predictions for every slot in `slots`. The filters start
/// from the stationary prior `warmup` slots before `slots.start` and absorb
/// those observations first.
pub fn kf_run(
    models: &[ARModel],
    obs: &[Observation],
    slots: Range<usize>,
    warmup: usize,
    exec: Exec,
) -> Result<Array2<f64>> {
    if slots.is_empty() || slots.start < warmup || slots.end > obs.len() {
        return Err(Error::invalid(format!("slot range {slots:?} invalid for {} observations", obs.len())));
    }
    let dim = models.len();
    if obs.iter().any(|o| o.r.len() != dim) {
        return Err(Error::invalid("observation width differs from the number of AR models"));
    }
    let start = slots.start - warmup;
    let cols = exec.map_range(dim, |l| -> Result<Vec<f64>> {
        let mut st = KalmanState::new(models[l].clone());
        let mut out = Vec::with_capacity(slots.len());
        for t in start..slots.end {
            if t >= slots.start {
                out.push(st.prediction());
            }
            let o = &obs[t];
            kf_step(&mut st, o.r[l], o.rho, o.noise_var)?;
        }
        Ok(out)
    });
    let mut pred = Array2::zeros((slots.len(), dim));
    for (l, c) in cols.into_iter().enumerate() {
        for (i, v) in c?.into_iter().enumerate() {
            pred[[i, l]] = v;
        }
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ar_series(coeffs: &[f64], sd: f64, len: usize, seed: u64) -> Array1<f64> {
        let mut rng = crate::rng::stream(seed, &[99]);
        let burn = 500;
        let mut x = vec![0.0; len + burn];
        for t in 0..len + burn {
            let mut v = sd * rng.sample::<f64, _>(StandardNormal);
            for (i, a) in coeffs.iter().enumerate() {
                if t > i {
                    v += a * x[t - i - 1];
                }
            }
            x[t] = v;
        }
        Array1::from(x[burn..].to_vec())
    }

    #[test]
    fn recovers_ar1() {
        let x = ar_series(&[0.9], 0.1, 7000, 1);
        let m = yule_walker(&autocovariance(x.view(), 1)).unwrap();
        assert!((0.88..=0.92).contains(&m.coeffs[0]), "{:?}", m.coeffs);
        assert!(!m.nonstationary);
        assert!((m.noise_var - 0.01).abs() < 0.001);
    }

    #[test]
    fn white_noise_gives_small_coefficients() {
        let x = ar_series(&[0.0], 1.0, 7000, 2);
        let m = yule_walker(&autocovariance(x.view(), 3)).unwrap();
        assert!(m.coeffs.iter().all(|a| a.abs() < 0.05), "{:?}", m.coeffs);
    }

    #[test]
    fn near_constant_sequence_is_flagged() {
        let noise = ar_series(&[0.0], 1e-3, 5000, 3);
        let x = noise.mapv(|v| 1.0 + v);
        let m = yule_walker(&autocovariance(x.view(), 1)).unwrap();
        assert!((m.coeffs[0] - 1.0).abs() < 1e-3);
        assert!(m.nonstationary);
    }

    #[test]
    fn singular_system_is_a_fit_failure() {
        assert!(matches!(yule_walker(&[0.0, 0.0]), Err(Error::FitFailure(_))));
        // Perfectly predictable at order 1: r1 = r0.
        assert!(matches!(yule_walker(&[1.0, 1.0, 1.0]), Err(Error::FitFailure(_))));
        let zeros = Array2::<f64>::zeros((100, 2));
        assert!(matches!(fit_ar(zeros.view(), 2), Err(Error::FitFailure(_))));
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&[0.5]) - 0.5).abs() < 1e-9);
        assert!((spectral_radius(&[-0.7]) - 0.7).abs() < 1e-9);
        // Roots 0.5 and 0.4: x^2 - 0.9x + 0.2.
        assert!((spectral_radius(&[0.9, -0.2]) - 0.5).abs() < 1e-9);
        // Complex pair of modulus sqrt(0.81).
        assert!((spectral_radius(&[0.0, -0.81]) - 0.9).abs() < 1e-9);
        assert!((spectral_radius(&[1.0]) - 1.0).abs() < 1e-9);
        assert_eq!(spectral_radius(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn stationary_covariance_of_ar1() {
        let m = ARModel::new(vec![0.9], 0.19).unwrap();
        let p = m.stationary_covariance().unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(ARModel::new(vec![1.5], 1.0).unwrap().stationary_covariance().is_none());
    }

    #[test]
    fn noiseless_observations_are_tracked() {
        let m = ARModel::new(vec![0.6, 0.3], 0.1).unwrap();
        let mut st = KalmanState::new(m);
        let xs = [0.4, -0.2, 0.9, 1.1];
        let mut pred = 0.0;
        for &x in &xs {
            pred = kf_step(&mut st, 2.0 * x, 4.0, 0.0).unwrap();
        }
        assert!((pred - (0.6 * 1.1 + 0.3 * 0.9)).abs() < 1e-9);
    }

    #[test]
    fn white_model_predicts_zero() {
        let mut st = KalmanState::new(ARModel::new(vec![0.0], 1.0).unwrap());
        for r in [1.0, -3.0, 0.5] {
            assert_eq!(kf_step(&mut st, r, 1.0, 0.1).unwrap(), 0.0);
        }
    }

    #[test]
    fn outdated_examples() {
        assert_eq!(outdated_predict(&[1.0, -2.0], 4.0).unwrap(), vec![0.5, -1.0]);
        assert!(outdated_predict(&[1.0], 0.0).is_err());
        let obs: Vec<Observation> = (0..5)
            .map(|_| Observation {
                r: vec![0.3, 0.7],
                rho: 1.0,
                noise_var: 0.0,
            })
            .collect();
        let p = outdated_run(&obs, 1..5).unwrap();
        assert!(p.rows().into_iter().all(|r| r.to_vec() == vec![0.3, 0.7]));
    }

    /// Scalar Riccati fixed point of the one-step prediction variance.
    fn riccati(a: f64, q: f64, h: f64, r: f64) -> f64 {
        let mut p = q / (1.0 - a * a);
        for _ in 0..10_000 {
            p = a * a * (p - p * p * h * h / (h * h * p + r)) + q;
        }
        p
    }

    #[test]
    fn steady_state_error_matches_riccati() {
        let (a, sd, rho, nv): (f64, f64, f64, f64) = (0.9, 0.3, 2.0, 0.5);
        let x = ar_series(&[a], sd, 10_000, 7);
        let mut rng = crate::rng::stream(8, &[]);
        let model = ARModel::new(vec![a], sd * sd).unwrap();
        let mut st = KalmanState::new(model);
        let mut sq = 0.0;
        let mut pred = 0.0;
        for t in 0..x.len() {
            if t >= 100 {
                sq += (pred - x[t]).powi(2);
            }
            let r = rho.sqrt() * x[t] + (nv / 2.0f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
            pred = kf_step(&mut st, r, rho, nv).unwrap();
        }
        let mse = sq / (x.len() - 100) as f64;
        let oracle = riccati(a, sd * sd, rho.sqrt(), nv / 2.0);
        assert!((mse / oracle - 1.0).abs() < 0.05, "{mse} vs {oracle}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn covariance_stays_psd(
            roots in prop::collection::vec(-0.95f64..0.95, 1..4),
            nv in 1e-6f64..2.0,
            seed in 0u64..1000,
        ) {
            // Polynomial with the given real roots gives a stable model.
            let mut poly = vec![1.0];
            for &z in &roots {
                let mut next = vec![0.0; poly.len() + 1];
                for (i, &c) in poly.iter().enumerate() {
                    next[i] += c;
                    next[i + 1] -= z * c;
                }
                poly = next;
            }
            let coeffs: Vec<f64> = poly[1..].iter().map(|c| -c).collect();
            let model = ARModel::new(coeffs.clone(), 0.1).unwrap();
            let x = ar_series(&coeffs, 0.1f64.sqrt(), 10_000, seed);
            let mut rng = crate::rng::stream(seed, &[1]);
            let mut st = KalmanState::new(model);
            for &v in x.iter() {
                let r = v + (nv / 2.0).sqrt() * rng.sample::<f64, _>(StandardNormal);
                kf_step(&mut st, r, 1.0, nv).unwrap();
                prop_assert!(is_psd(&st.p));
                prop_assert!((&st.p - &st.p.t()).iter().all(|d| d.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn sign_flip_leaves_coefficients() {
        let x = ar_series(&[0.5, 0.2], 1.0, 3000, 4);
        let a = yule_walker(&autocovariance(x.view(), 2)).unwrap();
        let neg = x.mapv(|v| -v);
        let b = yule_walker(&autocovariance(neg.view(), 2)).unwrap();
        for (u, v) in a.coeffs.iter().zip(&b.coeffs) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn run_matches_manual_steps() {
        let obs: Vec<Observation> = (0..12)
            .map(|t| Observation {
                r: vec![(t as f64 * 0.3).sin(), (t as f64 * 0.2).cos()],
                rho: 1.0,
                noise_var: 0.2,
            })
            .collect();
        let models = vec![ARModel::new(vec![0.8], 0.3).unwrap(), ARModel::new(vec![0.5, 0.1], 0.2).unwrap()];
        let pred = kf_run(&models, &obs, 5..12, 3, Exec::Parallel).unwrap();
        assert_eq!(pred, kf_run(&models, &obs, 5..12, 3, Exec::Sequential).unwrap());
        let m = &models[1];
        let mut st = KalmanState::new(m.clone());
        let mut manual = Vec::new();
        for t in 2..12 {
            if t >= 5 {
                manual.push(st.prediction());
            }
            kf_step(&mut st, obs[t].r[1], 1.0, 0.2).unwrap();
        }
        for (i, v) in manual.iter().enumerate() {
            assert!((pred[[i, 1]] - v).abs() < 1e-15);
        }
    }
}
