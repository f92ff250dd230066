//! Construction and execution of the fixed-topology proposal network.
//!
//! Down path: stem conv, then five residual groups separated by four 2×
//! max-pools. Up path: two stages of (deconv ×2, BN, ReLU, concat with the
//! matching down-path output, one residual block). Head: a 1³ convolution to
//! A·5 channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{PValue, ParamStore};
use super::{HeadOutput, NetworkConfig};
use crate::error::{Error, Result};
use crate::kernels::{
    batchnorm3d_backward, batchnorm3d_fused, batchnorm3d_train, conv3d_backward, conv3d_forward,
    deconv3d_backward, deconv3d_forward, maxpool3d, maxpool3d_backward, relu, relu_backward,
    BnCache, BnMode, BnScaleParams, ConvEngine, ConvWeights, DeconvWeights,
};
use crate::tensor::{ConvGeometry, Tensor5};

const DECONV_STRIDE: (usize, usize, usize) = (2, 2, 2);

/// Channel plan derived from a config: (in, out) per group, (in, lateral,
/// out) per up stage.
#[derive(Debug, Clone, Copy)]
struct Plan {
    stem: (usize, usize),
    groups: [(usize, usize); 5],
    ups: [(usize, usize, usize); 2],
    head_in: usize,
}

fn plan(cfg: &NetworkConfig) -> Plan {
    let gc = cfg.group_channels;
    Plan {
        stem: (1, gc[0]),
        groups: [
            (gc[0], gc[0]),
            (gc[0], gc[1]),
            (gc[1], gc[2]),
            (gc[2], gc[3]),
            (gc[3], gc[4]),
        ],
        // Deconv output width matches the lateral it concatenates with; the
        // up block then projects 2·width back down to width.
        ups: [(gc[4], gc[3], gc[3]), (gc[3], gc[2], gc[2])],
        head_in: gc[2],
    }
}

/// Channel-axis concatenation of two tensors with equal batch and spatial
/// extents, in (up, lateral) order.
pub fn skip_combine(up: &Tensor5, lateral: &Tensor5) -> Result<Tensor5> {
    let (n1, c1, d1, h1, w1) = up.dims();
    let (n2, c2, d2, h2, w2) = lateral.dims();
    if n1 != n2 || (d1, h1, w1) != (d2, h2, w2) {
        return Err(Error::Shape(format!(
            "cannot combine {:?} with {:?}: batch/spatial extents differ",
            up.dims(),
            lateral.dims()
        )));
    }
    let vol = d1 * h1 * w1;
    let mut out = Tensor5::zeros(n1, c1 + c2, d1, h1, w1);
    for s in 0..n1 {
        let base = s * (c1 + c2) * vol;
        out.data_mut()[base..base + c1 * vol]
            .copy_from_slice(&up.data()[s * c1 * vol..(s + 1) * c1 * vol]);
        out.data_mut()[base + c1 * vol..base + (c1 + c2) * vol]
            .copy_from_slice(&lateral.data()[s * c2 * vol..(s + 1) * c2 * vol]);
    }
    Ok(out)
}

/// Inverse of [`skip_combine`]: splits channels back into the two operands.
pub fn split_channels(g: &Tensor5, c_first: usize) -> (Tensor5, Tensor5) {
    let (n, c, d, h, w) = g.dims();
    assert!(c_first < c, "split point {c_first} outside {c} channels");
    let vol = d * h * w;
    let c_rest = c - c_first;
    let mut a = Tensor5::zeros(n, c_first, d, h, w);
    let mut b = Tensor5::zeros(n, c_rest, d, h, w);
    for s in 0..n {
        let base = s * c * vol;
        a.data_mut()[s * c_first * vol..(s + 1) * c_first * vol]
            .copy_from_slice(&g.data()[base..base + c_first * vol]);
        b.data_mut()[s * c_rest * vol..(s + 1) * c_rest * vol]
            .copy_from_slice(&g.data()[base + c_first * vol..base + c * vol]);
    }
    (a, b)
}

fn add_tensors(mut a: Tensor5, b: &Tensor5) -> Result<Tensor5> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot add {:?} to {:?}",
            b.dims(),
            a.dims()
        )));
    }
    for (av, &bv) in a.data_mut().iter_mut().zip(b.data()) {
        *av += bv;
    }
    Ok(a)
}

/// Saved intermediates of one residual block.
#[derive(Debug)]
pub struct BlockTrace {
    pub x0: Tensor5,
    pub conv1_out: Tensor5,
    pub bn1_out: Tensor5,
    pub relu1_out: Tensor5,
    pub conv2_out: Tensor5,
    pub pre_relu: Tensor5,
    pub bn1: BnCache,
    pub bn2: BnCache,
}

#[derive(Debug)]
pub struct PoolTrace {
    pub argmax: Vec<u64>,
    pub in_dims: (usize, usize, usize, usize, usize),
}

/// Saved intermediates of one up stage.
#[derive(Debug)]
pub struct UpTrace {
    pub x: Tensor5,
    pub deconv_out: Tensor5,
    pub bn_out: Tensor5,
    pub bn: BnCache,
    pub up_channels: usize,
    pub block: BlockTrace,
}

/// Everything the backward pass needs from one training forward. Fields are
/// public so callers can inspect intermediate activations, e.g. to linearize
/// ReLU gates and pool selections when validating gradients numerically.
#[derive(Debug)]
pub struct Trace {
    pub stem_x: Tensor5,
    pub stem_conv_out: Tensor5,
    pub stem_bn_out: Tensor5,
    pub stem_bn: BnCache,
    pub groups: Vec<Vec<BlockTrace>>,
    pub pools: Vec<PoolTrace>,
    pub ups: Vec<UpTrace>,
    pub head_x: Tensor5,
}

/// The fixed-topology network; owns no parameters, only the shape plan.
/// Parameters live in the paired [`ParamStore`] keyed by layer names.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
}

/// Builds the network and a freshly initialized parameter store. Weights are
/// zero-mean uniform scaled by 1/√fan-in, biases zero, BN gamma 1 / beta 0.
pub fn build_network(cfg: &NetworkConfig, rng_seed: u64) -> Result<(Network, ParamStore)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let p = plan(cfg);

    init_conv(&mut store, &mut rng, "stem.conv", p.stem.0, p.stem.1, 3);
    init_bn(&mut store, "stem.bn", p.stem.1);
    for (gi, &(in_c, out_c)) in p.groups.iter().enumerate() {
        for b in 0..cfg.blocks_per_group[gi] {
            let bin = if b == 0 { in_c } else { out_c };
            init_block(&mut store, &mut rng, &format!("g{}.b{b}", gi + 1), bin, out_c);
        }
    }
    for (ui, &(in_c, lat_c, out_c)) in p.ups.iter().enumerate() {
        let prefix = format!("up{}", ui + 1);
        init_deconv(&mut store, &mut rng, &format!("{prefix}.deconv"), in_c, lat_c);
        init_bn(&mut store, &format!("{prefix}.bn"), lat_c);
        init_block(&mut store, &mut rng, &format!("{prefix}.block"), lat_c * 2, out_c);
    }
    init_conv(&mut store, &mut rng, "head", p.head_in, cfg.head_channels(), 1);
    // Start the classification logits low so the untrained network proposes
    // almost nothing; mining then sees informative negatives from step one.
    {
        let anchors = cfg.anchor_count();
        let bias = store.value_slice_mut("head.b");
        for a in 0..anchors {
            bias[a * super::HEAD_VALUES] = -4.0;
        }
    }
    Ok((Network { cfg: cfg.clone() }, store))
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, numel: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
    k: usize,
) {
    let fan_in = in_c * k * k * k;
    let data = uniform_fan_in(rng, out_c * fan_in, fan_in);
    let w = Tensor5::from_vec(out_c, in_c, k, k, k, data).expect("conv init shape");
    store.add(&format!("{name}.w"), PValue::Tensor(w), true);
    store.add(&format!("{name}.b"), PValue::Vector(vec![0.0; out_c]), true);
}

fn init_deconv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
) {
    let k = 2;
    let fan_in = in_c * k * k * k;
    let data = uniform_fan_in(rng, in_c * out_c * k * k * k, fan_in);
    let w = Tensor5::from_vec(in_c, out_c, k, k, k, data).expect("deconv init shape");
    store.add(&format!("{name}.w"), PValue::Tensor(w), true);
    store.add(&format!("{name}.b"), PValue::Vector(vec![0.0; out_c]), true);
}

fn init_bn(store: &mut ParamStore, name: &str, c: usize) {
    store.add(&format!("{name}.gamma"), PValue::Vector(vec![1.0; c]), true);
    store.add(&format!("{name}.beta"), PValue::Vector(vec![0.0; c]), true);
    store.add(&format!("{name}.rmean"), PValue::Vector(vec![0.0; c]), false);
    store.add(&format!("{name}.rvar"), PValue::Vector(vec![1.0; c]), false);
}

fn init_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_c: usize,
    out_c: usize,
) {
    init_conv(store, rng, &format!("{prefix}.conv1"), in_c, out_c, 3);
    init_bn(store, &format!("{prefix}.bn1"), out_c);
    init_conv(store, rng, &format!("{prefix}.conv2"), out_c, out_c, 3);
    init_bn(store, &format!("{prefix}.bn2"), out_c);
    if in_c != out_c {
        init_conv(store, rng, &format!("{prefix}.proj"), in_c, out_c, 1);
    }
}

fn conv_weights(store: &ParamStore, name: &str) -> ConvWeights {
    ConvWeights::new(
        store.tensor(&format!("{name}.w")).clone(),
        store.vector(&format!("{name}.b")).to_vec(),
    )
}

fn deconv_weights(store: &ParamStore, name: &str) -> DeconvWeights {
    DeconvWeights::new(
        store.tensor(&format!("{name}.w")).clone(),
        store.vector(&format!("{name}.b")).to_vec(),
    )
}

fn bn_params(store: &ParamStore, name: &str) -> BnScaleParams {
    let gamma = store.vector(&format!("{name}.gamma")).to_vec();
    let mut p = BnScaleParams::identity(gamma.len());
    p.gamma = gamma;
    p.beta = store.vector(&format!("{name}.beta")).to_vec();
    p.running_mean = store.vector(&format!("{name}.rmean")).to_vec();
    p.running_var = store.vector(&format!("{name}.rvar")).to_vec();
    p
}

fn conv_fw(
    store: &ParamStore,
    name: &str,
    x: &Tensor5,
    g: &ConvGeometry,
    engine: ConvEngine,
) -> Result<Tensor5> {
    conv3d_forward(x, &conv_weights(store, name), g, engine)
}

fn conv_bw(
    store: &mut ParamStore,
    name: &str,
    x: &Tensor5,
    g: &ConvGeometry,
    grad_y: &Tensor5,
    engine: ConvEngine,
) -> Result<Tensor5> {
    let w = conv_weights(store, name);
    let (gx, gw) = conv3d_backward(x, &w, g, grad_y, engine)?;
    store.add_grad(&format!("{name}.w"), gw.w.data());
    store.add_grad(&format!("{name}.b"), &gw.bias);
    Ok(gx)
}

fn bn_fw_train(store: &mut ParamStore, name: &str, x: &Tensor5) -> Result<(Tensor5, BnCache)> {
    let mut p = bn_params(store, name);
    let (y, cache) = batchnorm3d_train(x, &mut p)?;
    store.set_vector(&format!("{name}.rmean"), &p.running_mean);
    store.set_vector(&format!("{name}.rvar"), &p.running_var);
    Ok((y, cache))
}

fn bn_fw_infer(store: &ParamStore, name: &str, x: &Tensor5) -> Result<Tensor5> {
    let mut p = bn_params(store, name);
    batchnorm3d_fused(x, &mut p, BnMode::Infer)
}

fn bn_bw(
    store: &mut ParamStore,
    name: &str,
    x: &Tensor5,
    cache: &BnCache,
    grad_y: &Tensor5,
) -> Result<Tensor5> {
    let gamma = store.vector(&format!("{name}.gamma")).to_vec();
    let (gx, gg, gb) = batchnorm3d_backward(x, &gamma, cache, grad_y)?;
    store.add_grad(&format!("{name}.gamma"), &gg);
    store.add_grad(&format!("{name}.beta"), &gb);
    Ok(gx)
}

fn block_geoms(in_c: usize, out_c: usize) -> (ConvGeometry, ConvGeometry, ConvGeometry) {
    (
        ConvGeometry::cubic(in_c, out_c, 3, 1, 1),
        ConvGeometry::cubic(out_c, out_c, 3, 1, 1),
        ConvGeometry::cubic(in_c, out_c, 1, 1, 0),
    )
}

fn block_fw_train(
    store: &mut ParamStore,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    x: Tensor5,
    engine: ConvEngine,
) -> Result<(Tensor5, BlockTrace)> {
    let (g1, g2, gp) = block_geoms(in_c, out_c);
    let conv1_out = conv_fw(store, &format!("{prefix}.conv1"), &x, &g1, engine)?;
    let (bn1_out, c1) = bn_fw_train(store, &format!("{prefix}.bn1"), &conv1_out)?;
    let relu1_out = relu(&bn1_out);
    let conv2_out = conv_fw(store, &format!("{prefix}.conv2"), &relu1_out, &g2, engine)?;
    let (bn2_out, c2) = bn_fw_train(store, &format!("{prefix}.bn2"), &conv2_out)?;
    let shortcut = if in_c == out_c {
        x.clone()
    } else {
        conv_fw(store, &format!("{prefix}.proj"), &x, &gp, engine)?
    };
    let pre_relu = add_tensors(bn2_out, &shortcut)?;
    let y = relu(&pre_relu);
    Ok((
        y,
        BlockTrace { x0: x, conv1_out, bn1_out, relu1_out, conv2_out, pre_relu, bn1: c1, bn2: c2 },
    ))
}

fn block_fw_infer(
    store: &ParamStore,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    x: &Tensor5,
    engine: ConvEngine,
) -> Result<Tensor5> {
    let (g1, g2, gp) = block_geoms(in_c, out_c);
    let a = conv_fw(store, &format!("{prefix}.conv1"), x, &g1, engine)?;
    let a = bn_fw_infer(store, &format!("{prefix}.bn1"), &a)?;
    let a = relu(&a);
    let a = conv_fw(store, &format!("{prefix}.conv2"), &a, &g2, engine)?;
    let a = bn_fw_infer(store, &format!("{prefix}.bn2"), &a)?;
    let shortcut = if in_c == out_c {
        x.clone()
    } else {
        conv_fw(store, &format!("{prefix}.proj"), x, &gp, engine)?
    };
    Ok(relu(&add_tensors(a, &shortcut)?))
}

fn block_bw(
    store: &mut ParamStore,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    tr: BlockTrace,
    grad_y: &Tensor5,
    engine: ConvEngine,
) -> Result<Tensor5> {
    let (g1, g2, gp) = block_geoms(in_c, out_c);
    let g_pre = relu_backward(&tr.pre_relu, grad_y)?;
    let g_bn2_in = bn_bw(store, &format!("{prefix}.bn2"), &tr.conv2_out, &tr.bn2, &g_pre)?;
    let g_relu1 =
        conv_bw(store, &format!("{prefix}.conv2"), &tr.relu1_out, &g2, &g_bn2_in, engine)?;
    let g_bn1_out = relu_backward(&tr.bn1_out, &g_relu1)?;
    let g_conv1_in = bn_bw(store, &format!("{prefix}.bn1"), &tr.conv1_out, &tr.bn1, &g_bn1_out)?;
    let g_main = conv_bw(store, &format!("{prefix}.conv1"), &tr.x0, &g1, &g_conv1_in, engine)?;
    let g_short = if in_c == out_c {
        g_pre
    } else {
        conv_bw(store, &format!("{prefix}.proj"), &tr.x0, &gp, &g_pre, engine)?
    };
    add_tensors(g_main, &g_short)
}

fn up_bw(
    store: &mut ParamStore,
    prefix: &str,
    (_, lat_c, out_c): (usize, usize, usize),
    tr: UpTrace,
    grad_y: &Tensor5,
    engine: ConvEngine,
) -> Result<(Tensor5, Tensor5)> {
    let g_combined =
        block_bw(store, &format!("{prefix}.block"), lat_c * 2, out_c, tr.block, grad_y, engine)?;
    let (g_up_act, g_lat) = split_channels(&g_combined, tr.up_channels);
    let g_bn_out = relu_backward(&tr.bn_out, &g_up_act)?;
    let g_deconv_out = bn_bw(store, &format!("{prefix}.bn"), &tr.deconv_out, &tr.bn, &g_bn_out)?;
    let dw = deconv_weights(store, &format!("{prefix}.deconv"));
    let (g_x, g_dw) = deconv3d_backward(&tr.x, &dw, DECONV_STRIDE, &g_deconv_out)?;
    store.add_grad(&format!("{prefix}.deconv.w"), g_dw.w.data());
    store.add_grad(&format!("{prefix}.deconv.b"), &g_dw.bias);
    Ok((g_x, g_lat))
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor5) -> Result<()> {
        let (_, c, d, h, w) = x.dims();
        let m = self.cfg.crop_side;
        if c != 1 || d != m || h != m || w != m {
            return Err(Error::Shape(format!(
                "network expects (n, 1, {m}, {m}, {m}) crops, got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// Training forward: batch statistics, running stats updated, trace kept.
    pub fn forward_train(
        &self,
        store: &mut ParamStore,
        x: Tensor5,
        engine: ConvEngine,
    ) -> Result<(HeadOutput, Trace)> {
        self.check_input(&x)?;
        let p = plan(&self.cfg);
        let stem_g = ConvGeometry::cubic(p.stem.0, p.stem.1, 3, 1, 1);
        let stem_conv_out = conv_fw(store, "stem.conv", &x, &stem_g, engine)?;
        let (stem_bn_out, stem_bn) = bn_fw_train(store, "stem.bn", &stem_conv_out)?;
        let mut cur = relu(&stem_bn_out);

        let mut groups = Vec::with_capacity(5);
        let mut pools = Vec::with_capacity(4);
        let mut laterals: Vec<Tensor5> = Vec::with_capacity(2); // [g3 out, g4 out]
        for (gi, &(in_c, out_c)) in p.groups.iter().enumerate() {
            let mut block_traces = Vec::new();
            for b in 0..self.cfg.blocks_per_group[gi] {
                let bin = if b == 0 { in_c } else { out_c };
                let (y, tr) =
                    block_fw_train(store, &format!("g{}.b{b}", gi + 1), bin, out_c, cur, engine)?;
                cur = y;
                block_traces.push(tr);
            }
            groups.push(block_traces);
            if gi < 4 {
                let (pooled, argmax) = maxpool3d(&cur, (2, 2, 2), (2, 2, 2))?;
                pools.push(PoolTrace { argmax, in_dims: cur.dims() });
                // Group 3 and 4 outputs double as up-path laterals.
                if gi == 2 || gi == 3 {
                    laterals.push(cur);
                }
                cur = pooled;
            }
        }

        let mut ups = Vec::with_capacity(2);
        for (ui, &(_, lat_c, out_c)) in p.ups.iter().enumerate() {
            let prefix = format!("up{}", ui + 1);
            let lateral = if ui == 0 { &laterals[1] } else { &laterals[0] };
            let dw = deconv_weights(store, &format!("{prefix}.deconv"));
            let deconv_out = deconv3d_forward(&cur, &dw, DECONV_STRIDE)?;
            let (bn_out, bn) = bn_fw_train(store, &format!("{prefix}.bn"), &deconv_out)?;
            let up_act = relu(&bn_out);
            let combined = skip_combine(&up_act, lateral)?;
            let (y, block) = block_fw_train(
                store,
                &format!("{prefix}.block"),
                lat_c * 2,
                out_c,
                combined,
                engine,
            )?;
            ups.push(UpTrace { x: cur, deconv_out, bn_out, bn, up_channels: lat_c, block });
            cur = y;
        }

        let head_g = ConvGeometry::cubic(p.head_in, self.cfg.head_channels(), 1, 1, 0);
        let head_conv = conv_fw(store, "head", &cur, &head_g, engine)?;
        let head = HeadOutput::from_conv_output(&head_conv, self.cfg.anchor_count())?;
        // The laterals themselves are not traced: each up block's x0 already
        // holds the concatenated activation the backward pass needs.
        let trace = Trace {
            stem_x: x,
            stem_conv_out,
            stem_bn_out,
            stem_bn,
            groups,
            pools,
            ups,
            head_x: cur,
        };
        Ok((head, trace))
    }

    /// Inference forward: running statistics, no trace, store untouched.
    pub fn forward_infer(
        &self,
        store: &ParamStore,
        x: &Tensor5,
        engine: ConvEngine,
    ) -> Result<HeadOutput> {
        self.check_input(x)?;
        let p = plan(&self.cfg);
        let stem_g = ConvGeometry::cubic(p.stem.0, p.stem.1, 3, 1, 1);
        let a = conv_fw(store, "stem.conv", x, &stem_g, engine)?;
        let a = bn_fw_infer(store, "stem.bn", &a)?;
        let mut cur = relu(&a);

        let mut laterals: Vec<Tensor5> = Vec::with_capacity(2);
        for (gi, &(in_c, out_c)) in p.groups.iter().enumerate() {
            for b in 0..self.cfg.blocks_per_group[gi] {
                let bin = if b == 0 { in_c } else { out_c };
                cur =
                    block_fw_infer(store, &format!("g{}.b{b}", gi + 1), bin, out_c, &cur, engine)?;
            }
            if gi < 4 {
                let (pooled, _) = maxpool3d(&cur, (2, 2, 2), (2, 2, 2))?;
                if gi == 2 || gi == 3 {
                    laterals.push(cur);
                }
                cur = pooled;
            }
        }

        for (ui, &(_, lat_c, out_c)) in p.ups.iter().enumerate() {
            let prefix = format!("up{}", ui + 1);
            let lateral = if ui == 0 { &laterals[1] } else { &laterals[0] };
            let dw = deconv_weights(store, &format!("{prefix}.deconv"));
            let a = deconv3d_forward(&cur, &dw, DECONV_STRIDE)?;
            let a = bn_fw_infer(store, &format!("{prefix}.bn"), &a)?;
            let a = relu(&a);
            let combined = skip_combine(&a, lateral)?;
            cur = block_fw_infer(
                store,
                &format!("{prefix}.block"),
                lat_c * 2,
                out_c,
                &combined,
                engine,
            )?;
        }

        let head_g = ConvGeometry::cubic(p.head_in, self.cfg.head_channels(), 1, 1, 0);
        let head_conv = conv_fw(store, "head", &cur, &head_g, engine)?;
        HeadOutput::from_conv_output(&head_conv, self.cfg.anchor_count())
    }

    /// Accumulates parameter gradients for one training forward; returns the
    /// gradient with respect to the input crop.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        trace: Trace,
        head_grad: &HeadOutput,
        engine: ConvEngine,
    ) -> Result<Tensor5> {
        let p = plan(&self.cfg);
        let Trace {
            stem_x,
            stem_conv_out,
            stem_bn_out,
            stem_bn,
            mut groups,
            mut pools,
            ups,
            head_x,
            ..
        } = trace;

        let head_g = ConvGeometry::cubic(p.head_in, self.cfg.head_channels(), 1, 1, 0);
        let g_head_conv = head_grad.to_conv_layout();
        let mut g = conv_bw(store, "head", &head_x, &head_g, &g_head_conv, engine)?;

        let mut ups = ups;
        let up2 = ups.pop().expect("up2 trace");
        let up1 = ups.pop().expect("up1 trace");
        let (g_up1_out, g_lat3) = up_bw(store, "up2", p.ups[1], up2, &g, engine)?;
        let (g_g5_out, g_lat4) = up_bw(store, "up1", p.ups[0], up1, &g_up1_out, engine)?;
        g = g_g5_out;

        for gi in (0..5).rev() {
            let (in_c, out_c) = p.groups[gi];
            let block_traces = groups.pop().expect("group trace");
            for (b, tr) in block_traces.into_iter().enumerate().rev() {
                let bin = if b == 0 { in_c } else { out_c };
                g = block_bw(store, &format!("g{}.b{b}", gi + 1), bin, out_c, tr, &g, engine)?;
            }
            if gi > 0 {
                let pool = pools.pop().expect("pool trace");
                g = maxpool3d_backward(&pool.argmax, &g, pool.in_dims)?;
                // The group-3/4 outputs also fed the up path; merge that grad.
                if gi - 1 == 3 {
                    g = add_tensors(g, &g_lat4)?;
                } else if gi - 1 == 2 {
                    g = add_tensors(g, &g_lat3)?;
                }
            }
        }

        let g_stem_bn_out = relu_backward(&stem_bn_out, &g)?;
        let g_stem_conv_out = bn_bw(store, "stem.bn", &stem_conv_out, &stem_bn, &g_stem_bn_out)?;
        let stem_geom = ConvGeometry::cubic(p.stem.0, p.stem.1, 3, 1, 1);
        conv_bw(store, "stem.conv", &stem_x, &stem_geom, &g_stem_conv_out, engine)
    }
}
