//! Fully connected quantile network: tanh hidden layers, linear head.
//!
//! Tensors are `w1, b1, ..., wK, bK, w_out, b_out` with weights stored
//! `fan_in x fan_out`, so a batch propagates as `x . w + b`.

use ndarray::{Array2, ArrayView2, Axis};

use super::{loss_and_output_grad, PredictorParams};

pub(super) fn shapes(
    input: usize,
    hidden: &[usize],
    output: usize,
) -> Vec<(String, (usize, usize), usize)> {
    let mut out = Vec::new();
    let mut fan_in = input;
    for (i, &h) in hidden.iter().enumerate() {
        out.push((format!("w{}", i + 1), (fan_in, h), fan_in));
        out.push((format!("b{}", i + 1), (1, h), fan_in));
        fan_in = h;
    }
    out.push(("w_out".into(), (fan_in, output), fan_in));
    out.push(("b_out".into(), (1, output), fan_in));
    out
}

fn affine(x: &ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Returns the activations of every hidden layer and the raw output.
fn forward_cached(p: &PredictorParams, x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
    let layers = p.tensors.len() / 2 - 1;
    let mut acts: Vec<Array2<f64>> = Vec::with_capacity(layers);
    for k in 0..layers {
        let (w, b) = (&p.tensors[2 * k].1, &p.tensors[2 * k + 1].1);
        let input = acts.last().map_or(x, |a| a.view());
        let mut a = affine(&input, w, b);
        a.mapv_inplace(f64::tanh);
        acts.push(a);
    }
    let (w, b) = (&p.tensors[2 * layers].1, &p.tensors[2 * layers + 1].1);
    let input = acts.last().map_or(x, |a| a.view());
    let y = affine(&input, w, b);
    (acts, y)
}

pub(super) fn forward(p: &PredictorParams, x: ArrayView2<'_, f64>) -> Array2<f64> {
    forward_cached(p, x).1
}

pub(super) fn loss_and_grad(
    p: &PredictorParams,
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> (f64, Vec<Array2<f64>>) {
    let (acts, y) = forward_cached(p, x);
    let (loss, mut delta) = loss_and_output_grad(&y, &targets, p.levels.taus(), true);
    let mut grads = p.zeros_like();
    let layers = acts.len();

    for k in (0..=layers).rev() {
        let input = if k == 0 { x } else { acts[k - 1].view() };
        grads[2 * k] = input.t().dot(&delta);
        grads[2 * k + 1] = delta.sum_axis(Axis(0)).insert_axis(Axis(0));
        if k > 0 {
            let mut d = delta.dot(&p.tensors[2 * k].1.t());
            // tanh' = 1 - tanh^2
            ndarray::Zip::from(&mut d)
                .and(&acts[k - 1])
                .for_each(|g, &a| *g *= 1.0 - a * a);
            delta = d;
        }
    }
    (loss, grads)
}
