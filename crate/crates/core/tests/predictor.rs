mod common;

use ndarray::Array2;
use proptest::prelude::*;

use dcbf::predictor::{pinball_loss, Arch, PredictorParams, QuantileLevels};

use common::{finite_difference_error, gaussian_matrix, min_kink_gap};

const HISTORY: usize = 3;
const DIM: usize = 2;

fn random_case(arch: Arch, seed: u64) -> (PredictorParams, Array2<f64>, Array2<f64>) {
    let hidden = match arch {
        Arch::Mlp => vec![5, 4],
        Arch::Gru => vec![4, 3],
    };
    let levels = QuantileLevels::new(vec![0.1, 0.5, 0.9]).unwrap();
    let params = PredictorParams::init(arch, HISTORY, DIM, levels, hidden, seed).unwrap();
    let inputs = gaussian_matrix(4, HISTORY * DIM, 0.7, 1000 + seed);
    // Redraw targets until no quantile sits near a loss kink.
    let targets = (0..)
        .map(|k| gaussian_matrix(4, DIM, 0.7, 2000 + 100 * seed + k))
        .find(|t| min_kink_gap(&params, &inputs, t) > 1e-2)
        .unwrap();
    (params, inputs, targets)
}

#[test]
fn gradients_match_central_differences() {
    for arch in [Arch::Mlp, Arch::Gru] {
        for seed in 0..10 {
            let (params, inputs, targets) = random_case(arch, seed);
            let (err, checked) = finite_difference_error(&params, &inputs, &targets, 1e-5);
            assert_eq!(checked, params.num_params(), "{arch} seed {seed}");
            assert!(err <= 1e-4, "{arch} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn output_bias_gradient_sign_depends_only_on_residual_sign() {
    // For a linear head the bias gradient of level j on link l is the mean
    // of `(1 - tau) 1[q > h] - tau 1[q < h]`, so scaling targets and
    // outputs together leaves its sign unchanged.
    let levels = QuantileLevels::new(vec![0.25, 0.75]).unwrap();
    let mut base = PredictorParams::init(Arch::Mlp, 1, 1, levels, vec![2], 0).unwrap();
    for (_, t) in base.tensors.iter_mut() {
        t.fill(0.0);
    }
    let inputs = Array2::zeros((2, 1));
    for pattern in 0..16u32 {
        let q = [(pattern & 1) as f64 * 2.0 - 1.0, ((pattern >> 1) & 1) as f64 * 2.0 - 1.0];
        let h = [((pattern >> 2) & 1) as f64 - 0.5, ((pattern >> 3) & 1) as f64 - 0.5];
        let signs = |scale: f64| {
            let mut p = base.clone();
            let b = &mut p.tensors.iter_mut().find(|(n, _)| n == "b_out").unwrap().1;
            b[[0, 0]] = q[0] * scale;
            b[[0, 1]] = q[1] * scale;
            let targets = Array2::from_shape_vec((2, 1), vec![h[0] * scale, h[1] * scale]).unwrap();
            let (_, g) = p.backward(inputs.view(), targets.view()).unwrap();
            let k = p.tensors.iter().position(|(n, _)| n == "b_out").unwrap();
            g[k].iter().map(|v| v.signum() as i32 * (*v != 0.0) as i32).collect::<Vec<_>>()
        };
        let expected: Vec<i32> = (0..2)
            .map(|j| {
                let tau = [0.25, 0.75][j];
                let g: f64 = h
                    .iter()
                    .map(|&hv| {
                        if q[j] > hv {
                            1.0 - tau
                        } else if q[j] < hv {
                            -tau
                        } else {
                            0.0
                        }
                    })
                    .sum();
                g.signum() as i32 * (g != 0.0) as i32
            })
            .collect();
        assert_eq!(signs(1.0), expected, "pattern {pattern}");
        assert_eq!(signs(3.5), expected, "pattern {pattern}");
    }
}

proptest! {
    #[test]
    fn pinball_loss_is_convex_in_q(
        h in -5.0f64..5.0,
        tau in 0.01f64..0.99,
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let (q1, q2) = (a.min(b), a.max(b));
        let mid = pinball_loss(h, 0.5 * (q1 + q2), tau).unwrap();
        let avg = 0.5 * (pinball_loss(h, q1, tau).unwrap() + pinball_loss(h, q2, tau).unwrap());
        prop_assert!(mid <= avg + 1e-12);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, arch in prop_oneof![Just(Arch::Mlp), Just(Arch::Gru)]) {
        let (params, inputs, _) = random_case(arch, seed);
        let a = params.forward_batch(inputs.view()).unwrap();
        let b = params.clone().forward_batch(inputs.view()).unwrap();
        prop_assert_eq!(a, b);
    }
}
