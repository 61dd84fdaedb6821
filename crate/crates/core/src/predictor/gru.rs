//! Stacked GRU quantile network.
//!
//! The history is consumed as `p` timesteps of `L` features. Each layer
//! uses the update
//!
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! n  = tanh(x Wn + (r * h) Un + bn)
//! h' = (1 - z) * n + z * h
//! ```
//!
//! with `h = 0` at the first step. The final hidden state of the top layer
//! feeds a linear head. Per layer the tensors are `wx = [Wz Wr Wn]`,
//! `uzr = [Uz Ur]`, `un` and `b = [bz br bn]`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::{loss_and_output_grad, PredictorParams};

pub(super) fn shapes(
    input: usize,
    hidden: &[usize],
    output: usize,
) -> Vec<(String, (usize, usize), usize)> {
    let mut out = Vec::new();
    let mut fan_in = input;
    for (i, &h) in hidden.iter().enumerate() {
        let k = i + 1;
        out.push((format!("l{k}_wx"), (fan_in, 3 * h), fan_in));
        out.push((format!("l{k}_uzr"), (h, 2 * h), h));
        out.push((format!("l{k}_un"), (h, h), h));
        out.push((format!("l{k}_b"), (1, 3 * h), h));
        fan_in = h;
    }
    out.push(("w_out".into(), (fan_in, output), fan_in));
    out.push(("b_out".into(), (1, output), fan_in));
    out
}

struct Step {
    h_prev: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
}

struct Layer<'a> {
    wx: &'a Array2<f64>,
    uzr: &'a Array2<f64>,
    un: &'a Array2<f64>,
    b: &'a Array2<f64>,
}

fn layer(p: &PredictorParams, k: usize) -> Layer<'_> {
    Layer {
        wx: &p.tensors[4 * k].1,
        uzr: &p.tensors[4 * k + 1].1,
        un: &p.tensors[4 * k + 2].1,
        b: &p.tensors[4 * k + 3].1,
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn run_layer(lay: &Layer<'_>, xs: &[Array2<f64>]) -> (Vec<Step>, Vec<Array2<f64>>) {
    let batch = xs[0].nrows();
    let hid = lay.un.nrows();
    let mut h = Array2::<f64>::zeros((batch, hid));
    let mut steps = Vec::with_capacity(xs.len());
    let mut outs = Vec::with_capacity(xs.len());
    for x in xs {
        let gx = x.dot(lay.wx) + lay.b;
        let gh = h.dot(lay.uzr);
        let mut z = &gx.slice(s![.., 0..hid]) + &gh.slice(s![.., 0..hid]);
        z.mapv_inplace(sigmoid);
        let mut r = &gx.slice(s![.., hid..2 * hid]) + &gh.slice(s![.., hid..2 * hid]);
        r.mapv_inplace(sigmoid);
        let rh = &r * &h;
        let mut n = rh.dot(lay.un) + gx.slice(s![.., 2 * hid..]);
        n.mapv_inplace(f64::tanh);
        let mut h_new = Array2::zeros((batch, hid));
        Zip::from(&mut h_new)
            .and(&z)
            .and(&n)
            .and(&h)
            .for_each(|o, &z, &n, &h| *o = (1.0 - z) * n + z * h);
        steps.push(Step {
            h_prev: std::mem::replace(&mut h, h_new),
            z,
            r,
            n,
        });
        outs.push(h.clone());
    }
    (steps, outs)
}

fn split_steps(x: ArrayView2<'_, f64>, history: usize, dim: usize) -> Vec<Array2<f64>> {
    (0..history)
        .map(|t| x.slice(s![.., t * dim..(t + 1) * dim]).to_owned())
        .collect()
}

fn forward_cached(
    p: &PredictorParams,
    x: ArrayView2<'_, f64>,
) -> (Vec<Vec<Step>>, Vec<Vec<Array2<f64>>>, Array2<f64>) {
    let layers = p.hidden.len();
    let mut inputs = vec![split_steps(x, p.history, p.dim)];
    let mut caches = Vec::with_capacity(layers);
    for k in 0..layers {
        let (steps, outs) = run_layer(&layer(p, k), &inputs[k]);
        caches.push(steps);
        inputs.push(outs);
    }
    let last = inputs[layers].last().expect("history >= 1");
    let (w, b) = (&p.tensors[4 * layers].1, &p.tensors[4 * layers + 1].1);
    let y = last.dot(w) + b;
    (caches, inputs, y)
}

pub(super) fn forward(p: &PredictorParams, x: ArrayView2<'_, f64>) -> Array2<f64> {
    forward_cached(p, x).2
}

pub(super) fn loss_and_grad(
    p: &PredictorParams,
    x: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> (f64, Vec<Array2<f64>>) {
    let (caches, inputs, y) = forward_cached(p, x);
    let (loss, dy) = loss_and_output_grad(&y, &targets, p.levels.taus(), true);
    let layers = p.hidden.len();
    let mut grads = p.zeros_like();

    let top = inputs[layers].last().unwrap();
    grads[4 * layers] = top.t().dot(&dy);
    grads[4 * layers + 1] = dy.sum_axis(Axis(0)).insert_axis(Axis(0));

    // Gradient w.r.t. each output h_t of the current layer.
    let steps = p.history;
    let batch = x.nrows();
    let mut d_out: Vec<Array2<f64>> = (0..steps)
        .map(|_| Array2::zeros((batch, p.hidden[layers - 1])))
        .collect();
    d_out[steps - 1] = dy.dot(&p.tensors[4 * layers].1.t());

    for k in (0..layers).rev() {
        let lay = layer(p, k);
        let hid = p.hidden[k];
        let in_w = lay.wx.nrows();
        let mut d_wx = Array2::<f64>::zeros(lay.wx.raw_dim());
        let mut d_uzr = Array2::<f64>::zeros(lay.uzr.raw_dim());
        let mut d_un = Array2::<f64>::zeros(lay.un.raw_dim());
        let mut d_b = Array2::<f64>::zeros(lay.b.raw_dim());
        let mut d_in: Vec<Array2<f64>> = (0..steps).map(|_| Array2::zeros((batch, in_w))).collect();
        let mut dh_next = Array2::<f64>::zeros((batch, hid));

        for t in (0..steps).rev() {
            let c = &caches[k][t];
            let dh = &d_out[t] + &dh_next;
            let mut dh_prev = &dh * &c.z;
            let mut dan = Array2::zeros((batch, hid));
            let mut daz = Array2::zeros((batch, hid));
            Zip::from(&mut dan)
                .and(&mut daz)
                .and(&dh)
                .and(&c.z)
                .and(&c.n)
                .and(&c.h_prev)
                .for_each(|dan, daz, &dh, &z, &n, &hp| {
                    *dan = dh * (1.0 - z) * (1.0 - n * n);
                    *daz = dh * (hp - n) * z * (1.0 - z);
                });
            let rh = &c.r * &c.h_prev;
            d_un += &rh.t().dot(&dan);
            let drh = dan.dot(&lay.un.t());
            let mut dar = Array2::zeros((batch, hid));
            Zip::from(&mut dar)
                .and(&mut dh_prev)
                .and(&drh)
                .and(&c.r)
                .and(&c.h_prev)
                .for_each(|dar, dhp, &drh, &r, &hp| {
                    *dar = drh * hp * r * (1.0 - r);
                    *dhp += drh * r;
                });
            let dazr = concatenate(Axis(1), &[daz.view(), dar.view()]).unwrap();
            d_uzr += &c.h_prev.t().dot(&dazr);
            dh_prev += &dazr.dot(&lay.uzr.t());
            let dg = concatenate(Axis(1), &[daz.view(), dar.view(), dan.view()]).unwrap();
            d_wx += &inputs[k][t].t().dot(&dg);
            d_b += &dg.sum_axis(Axis(0)).insert_axis(Axis(0));
            if k > 0 {
                d_in[t] = dg.dot(&lay.wx.t());
            }
            dh_next = dh_prev;
        }
        grads[4 * k] = d_wx;
        grads[4 * k + 1] = d_uzr;
        grads[4 * k + 2] = d_un;
        grads[4 * k + 3] = d_b;
        d_out = d_in;
    }
    (loss, grads)
}
