//! Shared finite-difference machinery for the gradient suites.
//!
//! Every check here compares an analytic gradient against central
//! differences of the same scalar loss. For operations that are linear in
//! each coordinate (convolutions, pooling away from ties, ReLU away from the
//! kink) the step can be large because the difference quotient is exact up
//! to f32 rounding; the genuinely nonlinear cases (batch norm in x, the BCE
//! and smooth-L1 losses, the full network) use small steps.

#![allow(dead_code)]

pub mod refnet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volprop_core::kernels::{
    batchnorm3d_backward, batchnorm3d_train, conv3d_backward, conv3d_forward, deconv3d_backward,
    deconv3d_forward, maxpool3d, maxpool3d_backward, relu, relu_backward, BnScaleParams,
    ConvEngine, ConvWeights, DeconvWeights,
};
use volprop_core::net::{build_network, HeadOutput, NetworkConfig};
use volprop_core::objective::{
    assign_targets, multitask_loss_with_selection, select_hard_negatives, AnchorSpec,
    TargetAssignment,
};
use volprop_core::tensor::{ConvGeometry, Tensor5};

pub const ALL_ENGINES: [ConvEngine; 3] = [
    ConvEngine::GemmLowering,
    ConvEngine::SliceDecomposed,
    ConvEngine::NaiveReference,
];

/// Relative agreement at `tol` with a small absolute floor for coordinates
/// whose true gradient is at the finite-difference noise level.
pub fn assert_grad_close(analytic: f64, numeric: f64, tol: f64, label: &str) {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    assert!(
        diff <= tol * scale + 1e-4,
        "{label}: analytic {analytic:.6e} vs central difference {numeric:.6e} (diff {diff:.2e})"
    );
}

pub fn rand_tensor(
    rng: &mut ChaCha8Rng,
    dims: (usize, usize, usize, usize, usize),
    lo: f32,
    hi: f32,
) -> Tensor5 {
    let (n, c, d, h, w) = dims;
    let data = (0..n * c * d * h * w).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor5::from_vec(n, c, d, h, w, data).expect("test tensor shape")
}

/// Σ y ⊙ gy accumulated in f64: the scalar every gradient here differentiates.
pub fn dot_loss(y: &Tensor5, gy: &Tensor5) -> f64 {
    y.data().iter().zip(gy.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

fn probe_indices(rng: &mut ChaCha8Rng, len: usize, want: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    all.truncate(want.min(len));
    all
}

/// Central difference of `loss` under a ±eps bump of `data[idx]`.
fn central_diff(data: &mut [f32], idx: usize, eps: f32, mut loss: impl FnMut(&[f32]) -> f64) -> f64 {
    let saved = data[idx];
    data[idx] = saved + eps;
    let up = loss(data);
    data[idx] = saved - eps;
    let down = loss(data);
    data[idx] = saved;
    (up - down) / (2.0 * eps as f64)
}

pub fn random_conv_case(rng: &mut ChaCha8Rng) -> (Tensor5, ConvWeights, ConvGeometry, Tensor5) {
    let k = rng.gen_range(1..=3usize);
    let stride = rng.gen_range(1..=2usize);
    let pad = rng.gen_range(0..=1usize);
    let in_c = rng.gen_range(1..=4usize);
    let out_c = rng.gen_range(1..=4usize);
    let g = ConvGeometry::cubic(in_c, out_c, k, stride, pad);
    let mut ext = || rng.gen_range(k..=8usize);
    let (d, h, w) = (ext(), ext(), ext());
    let n = rng.gen_range(1..=2usize);
    let x = rand_tensor(rng, (n, in_c, d, h, w), -1.0, 1.0);
    let wt = rand_tensor(rng, (out_c, in_c, k, k, k), -0.6, 0.6);
    let bias = (0..out_c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let weights = ConvWeights::new(wt, bias);
    let (od, oh, ow) = g.out_extent((d, h, w)).expect("random geometry is valid");
    let gy = rand_tensor(rng, (n, out_c, od, oh, ow), -1.0, 1.0);
    (x, weights, g, gy)
}

/// Convolution backward vs central differences, all engines, one random case.
pub fn check_conv_gradients(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, w, g, gy) = random_conv_case(&mut rng);
    // The loss is linear in every input, weight and bias coordinate, so a
    // large step keeps the quotient exact and drowns f32 rounding.
    let eps = 0.5f32;
    for engine in ALL_ENGINES {
        let (gx, gw) = conv3d_backward(&x, &w, &g, &gy, engine).expect("conv backward");
        let tag = engine.name();

        let mut xd = x.data().to_vec();
        for idx in probe_indices(&mut rng, xd.len(), 5) {
            let fd = central_diff(&mut xd, idx, eps, |d| {
                let xt = Tensor5::from_vec(x.dims().0, x.dims().1, x.dims().2, x.dims().3, x.dims().4, d.to_vec()).unwrap();
                dot_loss(&conv3d_forward(&xt, &w, &g, engine).unwrap(), &gy)
            });
            assert_grad_close(gx.data()[idx] as f64, fd, 1e-3, &format!("conv/{tag} x[{idx}] seed {seed}"));
        }

        let mut wd = w.w.data().to_vec();
        for idx in probe_indices(&mut rng, wd.len(), 5) {
            let fd = central_diff(&mut wd, idx, eps, |d| {
                let (o, i, kd, kh, kw) = w.w.dims();
                let wt = ConvWeights::new(
                    Tensor5::from_vec(o, i, kd, kh, kw, d.to_vec()).unwrap(),
                    w.bias.clone(),
                );
                dot_loss(&conv3d_forward(&x, &wt, &g, engine).unwrap(), &gy)
            });
            assert_grad_close(gw.w.data()[idx] as f64, fd, 1e-3, &format!("conv/{tag} w[{idx}] seed {seed}"));
        }

        let mut bd = w.bias.clone();
        for idx in probe_indices(&mut rng, bd.len(), 2) {
            let fd = central_diff(&mut bd, idx, eps, |d| {
                let wt = ConvWeights::new(w.w.clone(), d.to_vec());
                dot_loss(&conv3d_forward(&x, &wt, &g, engine).unwrap(), &gy)
            });
            assert_grad_close(gw.bias[idx] as f64, fd, 1e-3, &format!("conv/{tag} bias[{idx}] seed {seed}"));
        }
    }
}

/// Transposed-convolution backward vs central differences.
pub fn check_deconv_gradients(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=3usize);
    let s = rng.gen_range(1..=2usize);
    let stride = (s, s, s);
    let in_c = rng.gen_range(1..=3usize);
    let out_c = rng.gen_range(1..=3usize);
    let (n, d, h, wd) = (
        rng.gen_range(1..=2usize),
        rng.gen_range(2..=5usize),
        rng.gen_range(2..=5usize),
        rng.gen_range(2..=5usize),
    );
    let x = rand_tensor(&mut rng, (n, in_c, d, h, wd), -1.0, 1.0);
    let wt = rand_tensor(&mut rng, (in_c, out_c, k, k, k), -0.6, 0.6);
    let bias: Vec<f32> = (0..out_c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let weights = DeconvWeights::new(wt, bias);
    let y = deconv3d_forward(&x, &weights, stride).expect("deconv forward");
    let gy = rand_tensor(&mut rng, y.dims(), -1.0, 1.0);
    let (gx, gw) = deconv3d_backward(&x, &weights, stride, &gy).expect("deconv backward");

    let eps = 0.5f32;
    let mut xd = x.data().to_vec();
    for idx in probe_indices(&mut rng, xd.len(), 6) {
        let fd = central_diff(&mut xd, idx, eps, |data| {
            let xt = Tensor5::from_vec(n, in_c, d, h, wd, data.to_vec()).unwrap();
            dot_loss(&deconv3d_forward(&xt, &weights, stride).unwrap(), &gy)
        });
        assert_grad_close(gx.data()[idx] as f64, fd, 1e-3, &format!("deconv x[{idx}] seed {seed}"));
    }
    let mut wdata = weights.w.data().to_vec();
    for idx in probe_indices(&mut rng, wdata.len(), 6) {
        let fd = central_diff(&mut wdata, idx, eps, |data| {
            let wt2 = DeconvWeights::new(
                Tensor5::from_vec(in_c, out_c, k, k, k, data.to_vec()).unwrap(),
                weights.bias.clone(),
            );
            dot_loss(&deconv3d_forward(&x, &wt2, stride).unwrap(), &gy)
        });
        assert_grad_close(gw.w.data()[idx] as f64, fd, 1e-3, &format!("deconv w[{idx}] seed {seed}"));
    }
    let mut bdata = weights.bias.clone();
    for idx in probe_indices(&mut rng, bdata.len(), 2) {
        let fd = central_diff(&mut bdata, idx, eps, |data| {
            let wt2 = DeconvWeights::new(weights.w.clone(), data.to_vec());
            dot_loss(&deconv3d_forward(&x, &wt2, stride).unwrap(), &gy)
        });
        assert_grad_close(gw.bias[idx] as f64, fd, 1e-3, &format!("deconv bias[{idx}] seed {seed}"));
    }
}

/// Batch-norm backward (x, gamma, beta) vs central differences.
pub fn check_batchnorm_gradients(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.gen_range(1..=2usize), rng.gen_range(1..=3usize));
    let (d, h, w) = (
        rng.gen_range(2..=4usize),
        rng.gen_range(2..=4usize),
        rng.gen_range(2..=4usize),
    );
    let x = rand_tensor(&mut rng, (n, c, d, h, w), -1.0, 1.0);
    let mut params = BnScaleParams::identity(c);
    for g in &mut params.gamma {
        *g = rng.gen_range(0.5..1.5);
    }
    for b in &mut params.beta {
        *b = rng.gen_range(-0.5..0.5);
    }
    let gy = rand_tensor(&mut rng, (n, c, d, h, w), -1.0, 1.0);

    let (_, cache) = batchnorm3d_train(&x, &mut params.clone()).expect("bn forward");
    let (gx, ggamma, gbeta) =
        batchnorm3d_backward(&x, &params.gamma, &cache, &gy).expect("bn backward");

    let loss_of = |xt: &Tensor5, p: &BnScaleParams| {
        let (y, _) = batchnorm3d_train(xt, &mut p.clone()).unwrap();
        dot_loss(&y, &gy)
    };

    // Normalization is nonlinear in x; keep the step small.
    let mut xd = x.data().to_vec();
    for idx in probe_indices(&mut rng, xd.len(), 6) {
        let fd = central_diff(&mut xd, idx, 1e-2, |data| {
            let xt = Tensor5::from_vec(n, c, d, h, w, data.to_vec()).unwrap();
            loss_of(&xt, &params)
        });
        assert_grad_close(gx.data()[idx] as f64, fd, 1e-3, &format!("bn x[{idx}] seed {seed}"));
    }
    // The output is linear in gamma and beta.
    let mut gammas = params.gamma.clone();
    for idx in probe_indices(&mut rng, gammas.len(), 2) {
        let fd = central_diff(&mut gammas, idx, 0.25, |data| {
            let mut p = params.clone();
            p.gamma = data.to_vec();
            loss_of(&x, &p)
        });
        assert_grad_close(ggamma[idx] as f64, fd, 1e-3, &format!("bn gamma[{idx}] seed {seed}"));
    }
    let mut betas = params.beta.clone();
    for idx in probe_indices(&mut rng, betas.len(), 2) {
        let fd = central_diff(&mut betas, idx, 0.25, |data| {
            let mut p = params.clone();
            p.beta = data.to_vec();
            loss_of(&x, &p)
        });
        assert_grad_close(gbeta[idx] as f64, fd, 1e-3, &format!("bn beta[{idx}] seed {seed}"));
    }
}

/// Max-pool backward vs central differences. Inputs are drawn from a
/// well-separated value lattice so no ±eps bump can flip a window winner.
pub fn check_pool_gradients(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.gen_range(1..=2usize), rng.gen_range(1..=2usize));
    let side = rng.gen_range(4..=6usize) & !1; // even so 2³/2 windows tile
    let numel = n * c * side * side * side;
    let mut values: Vec<f32> = (0..numel).map(|i| (i as f32) * 0.1 - numel as f32 * 0.05).collect();
    values.shuffle(&mut rng);
    let x = Tensor5::from_vec(n, c, side, side, side, values).unwrap();
    let (y, argmax) = maxpool3d(&x, (2, 2, 2), (2, 2, 2)).expect("pool forward");
    let gy = rand_tensor(&mut rng, y.dims(), -1.0, 1.0);
    let gx = maxpool3d_backward(&argmax, &gy, x.dims()).expect("pool backward");

    let mut xd = x.data().to_vec();
    for idx in probe_indices(&mut rng, xd.len(), 8) {
        let fd = central_diff(&mut xd, idx, 1e-2, |data| {
            let xt = Tensor5::from_vec(n, c, side, side, side, data.to_vec()).unwrap();
            let (yt, _) = maxpool3d(&xt, (2, 2, 2), (2, 2, 2)).unwrap();
            dot_loss(&yt, &gy)
        });
        assert_grad_close(gx.data()[idx] as f64, fd, 1e-3, &format!("pool x[{idx}] seed {seed}"));
    }
}

/// ReLU backward vs central differences, probing away from the kink.
pub fn check_relu_gradients(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = (2, 2, 3, 3, 3);
    let mut x = rand_tensor(&mut rng, dims, -1.0, 1.0);
    for v in x.data_mut() {
        // Push every value at least 0.1 from zero.
        *v += 0.1f32.copysign(*v);
    }
    let gy = rand_tensor(&mut rng, dims, -1.0, 1.0);
    let gx = relu_backward(&x, &gy).expect("relu backward");
    let mut xd = x.data().to_vec();
    for idx in probe_indices(&mut rng, xd.len(), 8) {
        let fd = central_diff(&mut xd, idx, 1e-2, |data| {
            let xt = Tensor5::from_vec(dims.0, dims.1, dims.2, dims.3, dims.4, data.to_vec()).unwrap();
            dot_loss(&relu(&xt), &gy)
        });
        assert_grad_close(gx.data()[idx] as f64, fd, 1e-3, &format!("relu x[{idx}] seed {seed}"));
    }
}

pub fn random_assignment(rng: &mut ChaCha8Rng, anchors: &AnchorSpec, side: usize) -> TargetAssignment {
    let extent = (side * 4) as f32;
    let n_nodules = rng.gen_range(1..=2usize);
    let nodules: Vec<([f32; 3], f32)> = (0..n_nodules)
        .map(|_| {
            let c = [
                rng.gen_range(4.0..extent - 4.0),
                rng.gen_range(4.0..extent - 4.0),
                rng.gen_range(4.0..extent - 4.0),
            ];
            (c, rng.gen_range(3.0..10.0))
        })
        .collect();
    assign_targets(&nodules, anchors, side).expect("assignment")
}

/// Multi-task loss head gradient vs central differences, with the hard
/// negative selection frozen so the probed loss is locally smooth.
pub fn check_loss_gradients(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = AnchorSpec::new(vec![4.0, 8.0, 16.0]).unwrap();
    let side = 4;
    let n = 2;
    let tas: Vec<TargetAssignment> =
        (0..n).map(|_| random_assignment(&mut rng, &anchors, side)).collect();
    let mut head = HeadOutput::zeros(n, side, anchors.count());
    for v in head.data_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    let selection = select_hard_negatives(&head, &tas).expect("mining");
    let out = multitask_loss_with_selection(&head, &tas, &selection).expect("loss");

    let grad = out.head_grad.data().to_vec();
    let mut hd = head.data().to_vec();
    // Probe the support of the gradient plus a few zero coordinates.
    let mut support: Vec<usize> = grad
        .iter()
        .enumerate()
        .filter(|(_, g)| g.abs() > 0.0)
        .map(|(i, _)| i)
        .collect();
    support.shuffle(&mut rng);
    support.truncate(10);
    support.extend(probe_indices(&mut rng, hd.len(), 3));
    for idx in support {
        let fd = central_diff(&mut hd, idx, 1e-3, |data| {
            let mut ht = HeadOutput::zeros(n, side, anchors.count());
            ht.data_mut().copy_from_slice(data);
            multitask_loss_with_selection(&ht, &tas, &selection).unwrap().total
        });
        assert_grad_close(grad[idx] as f64, fd, 1e-3, &format!("loss head[{idx}] seed {seed}"));
    }
}

/// Per-parameter-tensor directional derivatives of the full m=16 network:
/// for every trainable tensor, (L(θ+εu) − L(θ−εu)) / 2ε must equal ⟨∇L, u⟩
/// for a random sign vector u. The differences are taken through the f64
/// mirror in [`refnet`] so ε can be small enough (1e-6) that ReLU kinks and
/// pool ties contribute nothing; the analytic gradient comes from the
/// production f32 backward pass. The input-crop gradient is probed the same
/// way.
pub fn check_end_to_end_gradients(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetworkConfig::tiny();
    let (net, mut store) = build_network(&cfg, seed ^ 0xA5A5).expect("build");
    let engine = ConvEngine::GemmLowering;
    let m = cfg.crop_side;
    let batch = 2;

    let x = rand_tensor(&mut rng, (batch, 1, m, m, m), 0.0, 1.0);
    let anchors = AnchorSpec::new(vec![4.0, 8.0, 16.0]).unwrap();
    let tas: Vec<TargetAssignment> = (0..batch)
        .map(|_| random_assignment(&mut rng, &anchors, cfg.head_side()))
        .collect();

    // One analytic pass; the mining selection it produces is frozen for
    // every finite-difference evaluation below, as are the ReLU gates and
    // pool winners the mirror replays. A second identical forward supplies
    // the trace for the mirror since backward consumes the first.
    store.zero_grads();
    let (head, trace) = net.forward_train(&mut store, x.clone(), engine).expect("forward");
    let selection = select_hard_negatives(&head, &tas).expect("mining");
    let out = multitask_loss_with_selection(&head, &tas, &selection).expect("loss");
    let grad_x = net.backward(&mut store, trace, &out.head_grad, engine).expect("backward");
    let (_, frozen) = net.forward_train(&mut store, x.clone(), engine).expect("forward");

    let mut params = refnet::RefParams::from_store(&store);
    let side = cfg.head_side();
    let mut x64 = refnet::T5::zeros(batch, 1, m, m, m);
    x64.data = x.data().iter().map(|&v| v as f64).collect();
    let eval = |p: &refnet::RefParams, xt: &refnet::T5| {
        let h = refnet::forward(&cfg, p, xt, &frozen);
        refnet::loss(&h, side, anchors.count(), &tas, &selection)
    };

    // The mirror must be the same function before its differences mean
    // anything about the production gradients.
    let head64 = refnet::forward(&cfg, &params, &x64, &frozen);
    let drift = head
        .data()
        .iter()
        .zip(&head64)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 5e-3, "f32 and f64 forwards drifted {drift:.2e} apart");

    let names: Vec<String> = store
        .names()
        .iter()
        .filter(|n| store.is_trainable(n))
        .cloned()
        .collect();
    let eps = 1e-6;
    for name in &names {
        let len = store.value_slice(name).len();
        let dirs: Vec<f64> = (0..len).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let analytic: f64 = store
            .grad_slice(name)
            .iter()
            .zip(&dirs)
            .map(|(g, d)| *g as f64 * d)
            .sum();

        for (v, d) in params.get_mut(name).iter_mut().zip(&dirs) {
            *v += eps * d;
        }
        let up = eval(&params, &x64);
        for (v, d) in params.get_mut(name).iter_mut().zip(&dirs) {
            *v -= 2.0 * eps * d;
        }
        let down = eval(&params, &x64);
        for (v, d) in params.get_mut(name).iter_mut().zip(&dirs) {
            *v += eps * d;
        }
        assert_grad_close(
            analytic,
            (up - down) / (2.0 * eps),
            1e-3,
            &format!("network {name} seed {seed}"),
        );
    }

    // Input gradient, same directional form.
    let dirs: Vec<f64> =
        (0..x64.data.len()).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let analytic: f64 =
        grad_x.data().iter().zip(&dirs).map(|(g, d)| *g as f64 * d).sum();
    for (v, d) in x64.data.iter_mut().zip(&dirs) {
        *v += eps * d;
    }
    let up = eval(&params, &x64);
    for (v, d) in x64.data.iter_mut().zip(&dirs) {
        *v -= 2.0 * eps * d;
    }
    let down = eval(&params, &x64);
    assert_grad_close(
        analytic,
        (up - down) / (2.0 * eps),
        1e-3,
        &format!("network input seed {seed}"),
    );
}
