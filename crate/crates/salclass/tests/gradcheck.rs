//! Central finite-difference checks for every differentiable op and for
//! the full joint model. Perturbation 1e-5, relative error bound 1e-4.

use salclass::model::SalClassNet;
use salclass::nn::gaussian;
use salclass::rng::stream_rng;
use salclass::tensor::{BatchNormMode, Graph, NodeId, RunningStats, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks the analytic gradient of `loss(inputs)` w.r.t. every entry of
/// every input tensor against central differences.
///
/// `loss` must build a graph from the given tensors and return the scalar
/// loss value along with the node ids of the differentiated leaves.
fn check<F>(inputs: &mut [Tensor], loss: F, label: &str)
where
    F: Fn(&mut Graph, &[Tensor]) -> (NodeId, Vec<NodeId>),
{
    // analytic pass
    let mut g = Graph::new();
    let (l, ids) = loss(&mut g, inputs);
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| g.grad(*id).expect("leaf gradient").to_vec())
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let (l, _) = loss(&mut g, inputs);
        g.data(l)[0]
    };

    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = inputs[ti].data[ei];
            inputs[ti].data[ei] = orig + EPS;
            let up = eval(inputs);
            inputs[ti].data[ei] = orig - EPS;
            let down = eval(inputs);
            inputs[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let err = rel_err(grad[ei], numeric);
            assert!(
                err < TOL,
                "{label}: tensor {ti} entry {ei}: analytic {} vs numeric {} (rel err {err:.3e})",
                grad[ei],
                numeric
            );
        }
    }
}

/// Subsampled variant for large parameter sets: checks `n_per` entries
/// per tensor, evenly spread.
fn check_subsampled<F>(inputs: &mut [Tensor], loss: F, n_per: usize, label: &str)
where
    F: Fn(&mut Graph, &[Tensor]) -> (NodeId, Vec<NodeId>),
{
    let mut g = Graph::new();
    let (l, ids) = loss(&mut g, inputs);
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| g.grad(*id).expect("leaf gradient").to_vec())
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let (l, _) = loss(&mut g, inputs);
        g.data(l)[0]
    };

    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let picks: Vec<usize> = if n <= n_per {
            (0..n).collect()
        } else {
            (0..n_per).map(|k| k * n / n_per).collect()
        };
        for ei in picks {
            let orig = inputs[ti].data[ei];
            inputs[ti].data[ei] = orig + EPS;
            let up = eval(inputs);
            inputs[ti].data[ei] = orig - EPS;
            let down = eval(inputs);
            inputs[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let err = rel_err(grad[ei], numeric);
            assert!(
                err < TOL,
                "{label}: tensor {ti} entry {ei}: analytic {} vs numeric {} (rel err {err:.3e})",
                grad[ei],
                numeric
            );
        }
    }
}

/// Random target for the mse-based scalarization of a map-shaped output.
fn target(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, "gradcheck-target");
    gaussian(shape, 1.0, &mut rng)
}

#[test]
fn conv2d_input_kernel_bias() {
    let mut rng = stream_rng(1, "gradcheck");
    let mut inputs = vec![
        gaussian(&[2, 3, 6, 6], 1.0, &mut rng),
        gaussian(&[4, 3, 3, 3], 0.5, &mut rng),
        gaussian(&[4], 0.5, &mut rng),
    ];
    let t = target(&[2, 4, 6, 6], 2);
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let k = g.leaf_with_grad(&inp[1]);
            let b = g.leaf_with_grad(&inp[2]);
            let y = g.conv2d(x, k, b, 1, 1).unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x, k, b])
        },
        "conv2d pad 1",
    );
}

#[test]
fn conv2d_strided_no_padding() {
    let mut rng = stream_rng(3, "gradcheck");
    let mut inputs = vec![
        gaussian(&[1, 2, 7, 7], 1.0, &mut rng),
        gaussian(&[3, 2, 3, 3], 0.5, &mut rng),
        gaussian(&[3], 0.5, &mut rng),
    ];
    let t = target(&[1, 3, 3, 3], 4);
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let k = g.leaf_with_grad(&inp[1]);
            let b = g.leaf_with_grad(&inp[2]);
            let y = g.conv2d(x, k, b, 2, 0).unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x, k, b])
        },
        "conv2d stride 2",
    );
}

#[test]
fn maxpool_floor_and_ceil() {
    let mut rng = stream_rng(5, "gradcheck");
    for (ceil, h) in [(false, 6usize), (true, 7)] {
        let mut inputs = vec![gaussian(&[2, 2, h, h], 1.0, &mut rng)];
        let out = if ceil { h.div_ceil(2) } else { h / 2 };
        let t = target(&[2, 2, out, out], 6);
        check(
            &mut inputs,
            |g, inp| {
                let x = g.leaf_with_grad(&inp[0]);
                let y = g.maxpool2d(x, 2, 2, ceil).unwrap();
                let tt = g.leaf(&t);
                (g.mse_mean(y, tt).unwrap(), vec![x])
            },
            if ceil { "maxpool ceil" } else { "maxpool floor" },
        );
    }
}

#[test]
fn relu_away_from_kink() {
    let mut rng = stream_rng(7, "gradcheck");
    let mut x = gaussian(&[2, 3, 4, 4], 1.0, &mut rng);
    // keep every entry at least 0.1 away from the kink at zero
    for v in &mut x.data {
        if v.abs() < 0.1 {
            *v = if *v >= 0.0 { *v + 0.2 } else { *v - 0.2 };
        }
    }
    let t = target(&[2, 3, 4, 4], 8);
    check(
        &mut vec![x],
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let y = g.relu(x);
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x])
        },
        "relu",
    );
}

#[test]
fn linear_input_weight_bias() {
    let mut rng = stream_rng(9, "gradcheck");
    let mut inputs = vec![
        gaussian(&[3, 5], 1.0, &mut rng),
        gaussian(&[4, 5], 0.5, &mut rng),
        gaussian(&[4], 0.5, &mut rng),
    ];
    let t = target(&[3, 4], 10);
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let w = g.leaf_with_grad(&inp[1]);
            let b = g.leaf_with_grad(&inp[2]);
            let y = g.linear(x, w, b).unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x, w, b])
        },
        "linear",
    );
}

#[test]
fn softmax_cross_entropy() {
    let mut rng = stream_rng(11, "gradcheck");
    let mut inputs = vec![gaussian(&[3, 5], 1.0, &mut rng)];
    let targets = [0usize, 3, 4];
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let p = g.softmax(x).unwrap();
            (g.cross_entropy_mean(p, &targets).unwrap(), vec![x])
        },
        "softmax + cross entropy",
    );
}

#[test]
fn softmax_through_mse() {
    let mut rng = stream_rng(12, "gradcheck");
    let mut inputs = vec![gaussian(&[2, 4], 1.0, &mut rng)];
    let t = target(&[2, 4], 13);
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let p = g.softmax(x).unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(p, tt).unwrap(), vec![x])
        },
        "softmax full jacobian",
    );
}

#[test]
fn batchnorm_train_mode() {
    let mut rng = stream_rng(15, "gradcheck");
    let mut inputs = vec![
        gaussian(&[3, 2, 4, 4], 1.0, &mut rng),
        gaussian(&[2], 0.3, &mut rng),
        gaussian(&[2], 0.3, &mut rng),
    ];
    inputs[1].data.iter_mut().for_each(|v| *v += 1.0); // gamma around 1
    let t = target(&[3, 2, 4, 4], 16);
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let gamma = g.leaf_with_grad(&inp[1]);
            let beta = g.leaf_with_grad(&inp[2]);
            let mut stats = RunningStats::new(2);
            let y = g
                .batchnorm2d(x, gamma, beta, BatchNormMode::Train, &mut stats, 1e-5, 0.1)
                .unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x, gamma, beta])
        },
        "batchnorm train",
    );
}

#[test]
fn batchnorm_eval_mode() {
    let mut rng = stream_rng(17, "gradcheck");
    let mut inputs = vec![
        gaussian(&[2, 2, 3, 3], 1.0, &mut rng),
        gaussian(&[2], 0.3, &mut rng),
        gaussian(&[2], 0.3, &mut rng),
    ];
    inputs[1].data.iter_mut().for_each(|v| *v += 1.0);
    let t = target(&[2, 2, 3, 3], 18);
    // fixed non-trivial running stats
    let base = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.5, 0.7],
    };
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let gamma = g.leaf_with_grad(&inp[1]);
            let beta = g.leaf_with_grad(&inp[2]);
            let mut stats = base.clone();
            let y = g
                .batchnorm2d(x, gamma, beta, BatchNormMode::Eval, &mut stats, 1e-5, 0.1)
                .unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x, gamma, beta])
        },
        "batchnorm eval",
    );
}

#[test]
fn bilinear_upsample_input() {
    let mut rng = stream_rng(19, "gradcheck");
    let mut inputs = vec![gaussian(&[2, 2, 3, 3], 1.0, &mut rng)];
    let t = target(&[2, 2, 7, 7], 20);
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let y = g.bilinear_upsample(x, 7, 7).unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x])
        },
        "bilinear upsample",
    );
}

#[test]
fn concat_flatten_scale_add_sum() {
    let mut rng = stream_rng(21, "gradcheck");
    let mut inputs = vec![
        gaussian(&[2, 2, 3, 3], 1.0, &mut rng),
        gaussian(&[2, 1, 3, 3], 1.0, &mut rng),
    ];
    check(
        &mut inputs,
        |g, inp| {
            let a = g.leaf_with_grad(&inp[0]);
            let b = g.leaf_with_grad(&inp[1]);
            let c = g.concat_channels(a, b).unwrap();
            let f = g.flatten(c);
            let s = g.scale(f, 0.7);
            let s2 = g.add(s, f).unwrap();
            (g.sum(s2), vec![a, b])
        },
        "concat/flatten/scale/add/sum",
    );
}

#[test]
fn global_avg_pool() {
    let mut rng = stream_rng(22, "gradcheck");
    let mut inputs = vec![gaussian(&[2, 3, 4, 4], 1.0, &mut rng)];
    let t = target(&[2, 3], 122);
    check(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let y = g.global_avg_pool(x).unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x])
        },
        "global average pool",
    );
}

#[test]
fn mse_both_sides() {
    let mut rng = stream_rng(23, "gradcheck");
    let mut inputs = vec![
        gaussian(&[2, 1, 3, 3], 1.0, &mut rng),
        gaussian(&[2, 1, 3, 3], 1.0, &mut rng),
    ];
    check(
        &mut inputs,
        |g, inp| {
            let a = g.leaf_with_grad(&inp[0]);
            let b = g.leaf_with_grad(&inp[1]);
            (g.mse_mean(a, b).unwrap(), vec![a, b])
        },
        "mse both inputs",
    );
}

/// End-to-end joint model, desk preset, 2-sample batch: checks every
/// parameter tensor (subsampled entries) under the full multi-loss.
#[test]
fn full_model_multi_loss() {
    let mut model = SalClassNet::build(
        salclass::saliency::SaliencyNetConfig::desk(),
        salclass::classifier::ClassifierConfig::desk(4, 4),
        5,
    )
    .unwrap();
    let mut rng = stream_rng(55, "gradcheck");
    let images = gaussian(&[2, 3, 64, 64], 0.5, &mut rng);
    let heat = gaussian(&[2, 1, 64, 64], 0.3, &mut rng);
    let labels = [1usize, 3];
    let alpha = 0.2;

    // analytic gradients for all parameters
    let mut g = Graph::new();
    let x = g.leaf(&images);
    let out = model.forward(&mut g, x, BatchNormMode::Train).unwrap();
    let t = g.leaf(&heat);
    let l_c = g.cross_entropy_mean(out.probs, &labels).unwrap();
    let l_s = g.mse_mean(out.full, t).unwrap();
    let w = g.scale(l_c, alpha);
    let l = g.add(w, l_s).unwrap();
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = out
        .bindings
        .ids
        .iter()
        .map(|id| g.grad(*id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let eval = |model: &mut SalClassNet| -> f64 {
        let mut g = Graph::new();
        let x = g.leaf(&images);
        let out = model.forward(&mut g, x, BatchNormMode::Train).unwrap();
        let t = g.leaf(&heat);
        let l_c = g.cross_entropy_mean(out.probs, &labels).unwrap();
        let l_s = g.mse_mean(out.full, t).unwrap();
        let w = g.scale(l_c, alpha);
        let l = g.add(w, l_s).unwrap();
        g.data(l)[0]
    };

    let n_params = analytic.len();
    for ti in 0..n_params {
        let n = analytic[ti].len();
        assert!(n > 0, "parameter {ti} received no gradient");
        let picks: Vec<usize> = if n <= 4 {
            (0..n).collect()
        } else {
            (0..4).map(|k| k * n / 4).collect()
        };
        for ei in picks {
            let orig = model.params_mut()[ti].data[ei];
            model.params_mut()[ti].data[ei] = orig + EPS;
            let up = eval(&mut model);
            model.params_mut()[ti].data[ei] = orig - EPS;
            let down = eval(&mut model);
            model.params_mut()[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let err = rel_err(analytic[ti][ei], numeric);
            assert!(
                err < TOL,
                "full model: param {ti} entry {ei}: analytic {} vs numeric {} (rel err {err:.3e})",
                analytic[ti][ei],
                numeric
            );
        }
    }
}

/// Subsampled conv check on a larger configuration, exercising the
/// parallel forward/backward paths.
#[test]
fn conv2d_wide_subsampled() {
    let mut rng = stream_rng(41, "gradcheck");
    let mut inputs = vec![
        gaussian(&[2, 8, 12, 12], 1.0, &mut rng),
        gaussian(&[16, 8, 3, 3], 0.3, &mut rng),
        gaussian(&[16], 0.3, &mut rng),
    ];
    let t = target(&[2, 16, 12, 12], 42);
    check_subsampled(
        &mut inputs,
        |g, inp| {
            let x = g.leaf_with_grad(&inp[0]);
            let k = g.leaf_with_grad(&inp[1]);
            let b = g.leaf_with_grad(&inp[2]);
            let y = g.conv2d(x, k, b, 1, 1).unwrap();
            let tt = g.leaf(&t);
            (g.mse_mean(y, tt).unwrap(), vec![x, k, b])
        },
        24,
        "wide conv2d",
    );
}
