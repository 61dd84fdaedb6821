//! Mini-batch Adam training on the mean pinball loss.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Arch, Grads, PredictorParams, QuantileLevels};
use crate::channel::ChannelTrace;
use crate::error::{Error, Result};
use crate::rng;

/// Input histories (`n x pL`) paired with next-slot targets (`n x L`).
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Windows {
    pub fn from_trace(trace: &ChannelTrace, starts: &[usize], history: usize) -> Self {
        let dim = trace.dim();
        let mut inputs = Array2::zeros((starts.len(), history * dim));
        let mut targets = Array2::zeros((starts.len(), dim));
        for (i, &s) in starts.iter().enumerate() {
            for t in 0..history {
                inputs
                    .slice_mut(ndarray::s![i, t * dim..(t + 1) * dim])
                    .assign(&trace.h.row(s + t));
            }
            targets.row_mut(i).assign(&trace.h.row(s + history));
        }
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Copy of the inputs with i.i.d. Gaussian noise of standard deviation
    /// `std` added to every entry.
    pub fn perturbed_inputs<R: Rng + ?Sized>(&self, std: f64, rng: &mut R) -> Array2<f64> {
        let mut x = self.inputs.clone();
        if std > 0.0 {
            let noise = Normal::new(0.0, std).expect("finite std");
            x.mapv_inplace(|v| v + noise.sample(rng));
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Standard deviation of the Gaussian perturbation added to training
    /// inputs, redrawn every epoch.
    pub input_noise_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            input_noise_std: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.input_noise_std >= 0.0 && self.input_noise_std.is_finite()) {
            return Err(Error::invalid("input_noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(params: &PredictorParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut PredictorParams, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((_, w), g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(w)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: PredictorParams,
    pub best_epoch: usize,
    pub epochs: Vec<EpochStats>,
}

/// Trains a fresh network. Validation inputs carry one fixed draw of the
/// training perturbation so model selection sees the same input quality
/// as training.
pub fn train(
    arch: Arch,
    hidden: Vec<usize>,
    levels: QuantileLevels,
    train_set: &Windows,
    val_set: &Windows,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let dim = train_set.targets.ncols();
    let width = train_set.inputs.ncols();
    if dim == 0 || width % dim != 0 || val_set.inputs.ncols() != width {
        return Err(Error::invalid("inconsistent window shapes"));
    }
    let history = width / dim;
    let mut params = PredictorParams::init(arch, history, dim, levels, hidden, cfg.seed)?;
    let mut opt = Adam::new(&params, cfg.learning_rate);

    let val_inputs = val_set.perturbed_inputs(
        cfg.input_noise_std,
        &mut rng::stream(cfg.seed, &[rng::TAG_EVAL_NOISE]),
    );
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, PredictorParams)> = None;
    let mut history_stats = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, &[rng::TAG_SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle);
        let noisy = train_set.perturbed_inputs(
            cfg.input_noise_std,
            &mut rng::stream(cfg.seed, &[rng::TAG_INPUT_NOISE, epoch as u64]),
        );
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = noisy.select(Axis(0), batch);
            let t = train_set.targets.select(Axis(0), batch);
            let (loss, grads) = params.backward(x.view(), t.view())?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            sum += loss * batch.len() as f64;
            opt.update(&mut params, &grads);
        }
        let train_loss = sum / train_set.len() as f64;
        let val_loss = params.total_loss(val_inputs.view(), val_set.targets.view())?;
        if !train_loss.is_finite() || !val_loss.is_finite() || !params.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log::debug!("{arch} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history_stats.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainReport {
        params,
        best_epoch,
        epochs: history_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn dataset(n: usize, seed: u64, f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64) -> Windows {
        let mut r = rng::stream(seed, &[]);
        let inputs = Array2::from_shape_simple_fn((n, 3), || r.random_range(-1.0..1.0));
        let targets = Array2::from_shape_simple_fn((n, 1), || f(&mut r));
        Windows { inputs, targets }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            ..Default::default()
        }
    }

    #[test]
    fn constant_target_is_learned_at_every_level() {
        let c = 0.3;
        let tr = dataset(2000, 1, |_| c);
        let va = dataset(200, 2, |_| c);
        for arch in [Arch::Mlp, Arch::Gru] {
            let rep = train(arch, vec![16, 16], QuantileLevels::deciles(), &tr, &va, &quick_cfg(50)).unwrap();
            let q = rep.params.forward(&[0.2, -0.5, 0.9]).unwrap();
            for &v in q.q.iter() {
                assert!((v - c).abs() < 0.05, "{arch}: {v}");
            }
        }
    }

    #[test]
    fn learns_normal_upper_decile() {
        let tr = dataset(4000, 3, |r| StandardNormal.sample(r));
        let va = dataset(500, 4, |r| StandardNormal.sample(r));
        let rep = train(Arch::Mlp, vec![16, 16], QuantileLevels::deciles(), &tr, &va, &quick_cfg(50)).unwrap();
        // Average over inputs: the target carries no input dependence.
        let pred = rep.params.forward_batch(va.inputs.view()).unwrap();
        let q90 = pred.column(8).mean().unwrap();
        assert!((q90 - 1.2816).abs() < 0.1, "{q90}");
        let first = rep.epochs.first().unwrap().train_loss;
        let last = rep.epochs.last().unwrap().train_loss;
        assert!(last <= first);
    }

    #[test]
    fn training_is_deterministic() {
        let tr = dataset(300, 5, |r| StandardNormal.sample(r));
        let va = dataset(50, 6, |r| StandardNormal.sample(r));
        let cfg = quick_cfg(3);
        let a = train(Arch::Gru, vec![4], QuantileLevels::deciles(), &tr, &va, &cfg).unwrap();
        let b = train(Arch::Gru, vec![4], QuantileLevels::deciles(), &tr, &va, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn divergence_reports_epoch() {
        let tr = dataset(100, 7, |_| 1e308);
        let va = dataset(10, 8, |_| 1e308);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..quick_cfg(3)
        };
        match train(Arch::Mlp, vec![4], QuantileLevels::deciles(), &tr, &va, &cfg) {
            Err(Error::TrainingDiverged { epoch }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_sets_rejected() {
        let tr = dataset(10, 1, |_| 0.0);
        let empty = Windows {
            inputs: Array2::zeros((0, 3)),
            targets: Array2::zeros((0, 1)),
        };
        assert!(train(Arch::Mlp, vec![4], QuantileLevels::deciles(), &tr, &empty, &quick_cfg(1)).is_err());
    }
}
