//! The performance lab: wall-clock comparisons of the convolution engines and
//! the batch-norm variants, and an analytic memory model of a training step.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{
    batchnorm3d_backward, batchnorm3d_fused, batchnorm3d_separate, batchnorm3d_train,
    conv3d_backward, conv3d_forward, BnMode, BnScaleParams, ConvEngine, ConvWeights,
};
use crate::net::{NetworkConfig, HEAD_VALUES};
use crate::parallel;
use crate::tensor::{ConvGeometry, Tensor5};

/// Forward/backward medians for one timed strategy, milliseconds.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub name: String,
    pub forward_ms: f64,
    pub backward_ms: f64,
    pub total_ms: f64,
}

/// Total-time ratio of the first (baseline) row against another row.
#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub ratios: Vec<RatioRow>,
    pub threads: usize,
    pub reps: usize,
}

impl BenchReport {
    fn from_rows(rows: Vec<BenchRow>, reps: usize) -> Self {
        let base = &rows[0];
        let ratios = rows[1..]
            .iter()
            .map(|r| RatioRow {
                label: format!("{}/{}", base.name, r.name),
                value: base.total_ms / r.total_ms,
            })
            .collect();
        Self { rows, ratios, threads: parallel::current_threads(), reps }
    }

    /// Aligned text table with one strategy per row plus the ratio lines.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>12} {:>12} {:>12}\n",
            "strategy", "forward_ms", "backward_ms", "total_ms"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>12.3} {:>12.3} {:>12.3}\n",
                r.name, r.forward_ms, r.backward_ms, r.total_ms
            ));
        }
        for ratio in &self.ratios {
            out.push_str(&format!("ratio {:<18} {:>8.3}\n", ratio.label, ratio.value));
        }
        out.push_str(&format!("threads {} / reps {}\n", self.threads, self.reps));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,forward_ms,backward_ms,total_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.name, r.forward_ms, r.backward_ms, r.total_ms
            ));
        }
        for ratio in &self.ratios {
            out.push_str(&format!("ratio {},{},,\n", ratio.label, ratio.value));
        }
        out
    }
}

/// One convolution site of the network: geometry plus its input dims.
#[derive(Debug, Clone)]
pub struct ConvSite {
    pub name: String,
    pub geometry: ConvGeometry,
    pub input: (usize, usize, usize, usize, usize),
}

/// Every standard convolution a training step of the network executes, in
/// forward order, at crop side `m` (deconvolutions excluded: they have no
/// engine choice).
pub fn network_conv_sites(cfg: &NetworkConfig, batch: usize) -> Result<Vec<ConvSite>> {
    cfg.validate()?;
    let m = cfg.crop_side;
    let gc = cfg.group_channels;
    let mut sites = Vec::new();
    let mut push = |name: String, g: ConvGeometry, c_in: usize, s: usize| {
        sites.push(ConvSite { name, geometry: g, input: (batch, c_in, s, s, s) });
    };
    push("stem".into(), ConvGeometry::cubic(1, gc[0], 3, 1, 1), 1, m);
    let group_io = [
        (gc[0], gc[0]),
        (gc[0], gc[1]),
        (gc[1], gc[2]),
        (gc[2], gc[3]),
        (gc[3], gc[4]),
    ];
    let mut side = m;
    for (gi, &(in_c, out_c)) in group_io.iter().enumerate() {
        for b in 0..cfg.blocks_per_group[gi] {
            let bin = if b == 0 { in_c } else { out_c };
            let prefix = format!("g{}.b{b}", gi + 1);
            push(format!("{prefix}.conv1"), ConvGeometry::cubic(bin, out_c, 3, 1, 1), bin, side);
            push(format!("{prefix}.conv2"), ConvGeometry::cubic(out_c, out_c, 3, 1, 1), out_c, side);
            if bin != out_c {
                push(format!("{prefix}.proj"), ConvGeometry::cubic(bin, out_c, 1, 1, 0), bin, side);
            }
        }
        if gi < 4 {
            side /= 2;
        }
    }
    let ups = [(gc[3], m / 8), (gc[2], m / 4)];
    for (ui, &(width, s)) in ups.iter().enumerate() {
        let prefix = format!("up{}.block", ui + 1);
        push(
            format!("{prefix}.conv1"),
            ConvGeometry::cubic(2 * width, width, 3, 1, 1),
            2 * width,
            s,
        );
        push(format!("{prefix}.conv2"), ConvGeometry::cubic(width, width, 3, 1, 1), width, s);
        push(format!("{prefix}.proj"), ConvGeometry::cubic(2 * width, width, 1, 1, 0), 2 * width, s);
    }
    push(
        "head".into(),
        ConvGeometry::cubic(gc[2], cfg.head_channels(), 1, 1, 0),
        gc[2],
        m / 4,
    );
    Ok(sites)
}

fn filled_tensor(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize, usize)) -> Tensor5 {
    let (n, c, d, h, w) = dims;
    let data = (0..n * c * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor5::from_vec(n, c, d, h, w, data).expect("bench tensor shape")
}

fn site_weights(rng: &mut ChaCha8Rng, g: &ConvGeometry) -> ConvWeights {
    let (kd, kh, kw) = g.kernel;
    let numel = g.out_channels * g.in_channels * kd * kh * kw;
    let data = (0..numel).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let w = Tensor5::from_vec(g.out_channels, g.in_channels, kd, kh, kw, data)
        .expect("bench weight shape");
    let bias = (0..g.out_channels).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ConvWeights::new(w, bias)
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Times the full convolution workload of the network under each engine.
/// Before any timing, every engine's forward output is checked against the
/// first engine's on identical inputs (max abs ≤ 1e-4); divergence aborts
/// the benchmark.
pub fn bench_conv(
    cfg: &NetworkConfig,
    batch: usize,
    engines: &[ConvEngine],
    reps: usize,
) -> Result<BenchReport> {
    if reps < 3 {
        return Err(Error::Config(format!("{reps} repetitions; at least 3 required")));
    }
    if engines.is_empty() {
        return Err(Error::Config("no engines selected".into()));
    }
    let sites = network_conv_sites(cfg, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let prepared: Vec<(ConvSite, Tensor5, ConvWeights, Tensor5)> = sites
        .into_iter()
        .map(|site| {
            let x = filled_tensor(&mut rng, site.input);
            let w = site_weights(&mut rng, &site.geometry);
            let (od, oh, ow) = site
                .geometry
                .out_extent((site.input.2, site.input.3, site.input.4))
                .expect("workload geometry is valid");
            let gy = filled_tensor(&mut rng, (site.input.0, site.geometry.out_channels, od, oh, ow));
            (site, x, w, gy)
        })
        .collect();

    // Correctness gate.
    for (site, x, w, _) in &prepared {
        let reference = conv3d_forward(x, w, &site.geometry, engines[0])?;
        for &engine in &engines[1..] {
            let y = conv3d_forward(x, w, &site.geometry, engine)?;
            let diff = max_abs_diff(reference.data(), y.data());
            if diff > 1e-4 {
                return Err(Error::VariantMismatch(format!(
                    "{} differs from {} by {diff:.2e} on {}",
                    engine.name(),
                    engines[0].name(),
                    site.name
                )));
            }
        }
    }

    let mut rows = Vec::new();
    for &engine in engines {
        let mut forward = Vec::with_capacity(reps);
        let mut backward = Vec::with_capacity(reps);
        for rep in 0..=reps {
            let t0 = Instant::now();
            for (site, x, w, _) in &prepared {
                conv3d_forward(x, w, &site.geometry, engine)?;
            }
            let t_fwd = t0.elapsed().as_secs_f64() * 1e3;
            let t1 = Instant::now();
            for (site, x, w, gy) in &prepared {
                conv3d_backward(x, w, &site.geometry, gy, engine)?;
            }
            let t_bwd = t1.elapsed().as_secs_f64() * 1e3;
            if rep > 0 {
                // Iteration 0 is warm-up.
                forward.push(t_fwd);
                backward.push(t_bwd);
            }
        }
        let (f, b) = (median(forward), median(backward));
        rows.push(BenchRow {
            name: engine.name().to_string(),
            forward_ms: f,
            backward_ms: b,
            total_ms: f + b,
        });
    }
    Ok(BenchReport::from_rows(rows, reps))
}

/// Batch-norm sites of the network at crop side `m`: (channels, spatial side).
pub fn network_bn_sites(cfg: &NetworkConfig, batch: usize) -> Result<Vec<(usize, usize, usize)>> {
    cfg.validate()?;
    let gc = cfg.group_channels;
    let m = cfg.crop_side;
    let mut sites = vec![(batch, gc[0], m)];
    let widths = [gc[0], gc[1], gc[2], gc[3], gc[4]];
    let mut side = m;
    for (gi, &c) in widths.iter().enumerate() {
        for _ in 0..cfg.blocks_per_group[gi] {
            sites.push((batch, c, side)); // bn1
            sites.push((batch, c, side)); // bn2
        }
        if gi < 4 {
            side /= 2;
        }
    }
    sites.push((batch, gc[3], m / 8));
    for _ in 0..2 {
        sites.push((batch, gc[3], m / 8)); // up1 block bn1/bn2
    }
    sites.push((batch, gc[2], m / 4));
    for _ in 0..2 {
        sites.push((batch, gc[2], m / 4));
    }
    Ok(sites)
}

/// Times the fused single-pass batch-norm against the two-pass
/// normalize-then-scale variant over the network's normalization sites. Both
/// variants are verified numerically equal (≤ 1e-6) first; the backward pass
/// is the shared analytic one, timed identically for both rows.
pub fn bench_batchnorm(cfg: &NetworkConfig, batch: usize, reps: usize) -> Result<BenchReport> {
    if reps < 3 {
        return Err(Error::Config(format!("{reps} repetitions; at least 3 required")));
    }
    let sites = network_bn_sites(cfg, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B);
    let prepared: Vec<(Tensor5, BnScaleParams, Tensor5)> = sites
        .iter()
        .map(|&(n, c, s)| {
            let x = filled_tensor(&mut rng, (n, c, s, s, s));
            let mut p = BnScaleParams::identity(c);
            for g in &mut p.gamma {
                *g = rng.gen_range(0.5..1.5);
            }
            for b in &mut p.beta {
                *b = rng.gen_range(-0.5..0.5);
            }
            let gy = filled_tensor(&mut rng, (n, c, s, s, s));
            (x, p, gy)
        })
        .collect();

    for (i, (x, p, _)) in prepared.iter().enumerate() {
        let fused = batchnorm3d_fused(x, &mut p.clone(), BnMode::Train)?;
        let separate = batchnorm3d_separate(x, &mut p.clone(), BnMode::Train)?;
        let diff = max_abs_diff(fused.data(), separate.data());
        if diff > 1e-6 {
            return Err(Error::VariantMismatch(format!(
                "fused and separate batch norm differ by {diff:.2e} on site {i}"
            )));
        }
    }

    let caches: Vec<_> = prepared
        .iter()
        .map(|(x, p, _)| batchnorm3d_train(x, &mut p.clone()).map(|(_, cache)| cache))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for fused in [true, false] {
        let mut forward = Vec::with_capacity(reps);
        let mut backward = Vec::with_capacity(reps);
        for rep in 0..=reps {
            let t0 = Instant::now();
            for (x, p, _) in &prepared {
                let mut p = p.clone();
                if fused {
                    batchnorm3d_fused(x, &mut p, BnMode::Train)?;
                } else {
                    batchnorm3d_separate(x, &mut p, BnMode::Train)?;
                }
            }
            let t_fwd = t0.elapsed().as_secs_f64() * 1e3;
            let t1 = Instant::now();
            for ((x, p, gy), cache) in prepared.iter().zip(&caches) {
                batchnorm3d_backward(x, &p.gamma, cache, gy)?;
            }
            let t_bwd = t1.elapsed().as_secs_f64() * 1e3;
            if rep > 0 {
                forward.push(t_fwd);
                backward.push(t_bwd);
            }
        }
        let (f, b) = (median(forward), median(backward));
        rows.push(BenchRow {
            name: if fused { "fused" } else { "separate" }.to_string(),
            forward_ms: f,
            backward_ms: b,
            total_ms: f + b,
        });
    }
    // Report the conventional direction: how much the fused pass saves.
    rows.reverse();
    Ok(BenchReport::from_rows(rows, reps))
}

/// One buffer of the analytic memory model.
#[derive(Debug, Clone, Serialize)]
pub struct LayerMemory {
    pub name: String,
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
    pub workspace_bytes: u64,
}

/// Analytic training-step memory: every tensor a training forward keeps
/// reachable for backward, a same-size gradient mirror, parameters with
/// their gradients, and the engine workspace.
#[derive(Debug, Clone, Serialize)]
pub struct MemoryEstimate {
    pub layers: Vec<LayerMemory>,
    pub parameter_bytes: u64,
    pub activation_total: u64,
    pub gradient_total: u64,
    /// The GEMM engine's im2col buffer is reused across layers, so only the
    /// largest counts; zero for the slice engine.
    pub workspace_peak: u64,
    pub peak_bytes: u64,
}

impl MemoryEstimate {
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>14}\n",
            "buffer", "activation_b", "gradient_b", "workspace_b"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<22} {:>14} {:>14} {:>14}\n",
                l.name, l.activation_bytes, l.gradient_bytes, l.workspace_bytes
            ));
        }
        out.push_str(&format!(
            "totals: activations {} + gradients {} + parameters {} + workspace {} = peak {}\n",
            self.activation_total,
            self.gradient_total,
            self.parameter_bytes,
            self.workspace_peak,
            self.peak_bytes
        ));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("buffer,activation_bytes,gradient_bytes,workspace_bytes\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{}\n",
                l.name, l.activation_bytes, l.gradient_bytes, l.workspace_bytes
            ));
        }
        out.push_str(&format!(
            "total,{},{},{}\n",
            self.activation_total, self.gradient_total, self.workspace_peak
        ));
        out
    }
}

const F32_BYTES: u64 = 4;
const ARGMAX_BYTES: u64 = 8;

/// Predicts training-step memory for the network at crop side `m` and the
/// given batch, without executing anything.
pub fn estimate_memory(
    cfg: &NetworkConfig,
    m: usize,
    batch: usize,
    engine: ConvEngine,
) -> Result<MemoryEstimate> {
    let cfg = NetworkConfig { crop_side: m, ..cfg.clone() };
    cfg.validate()?;
    let gc = cfg.group_channels;
    let n = batch as u64;
    let mut layers: Vec<LayerMemory> = Vec::new();
    fn act(layers: &mut Vec<LayerMemory>, n: u64, name: String, c: usize, side: usize) {
        let bytes = n * c as u64 * (side * side * side) as u64 * F32_BYTES;
        layers.push(LayerMemory {
            name,
            activation_bytes: bytes,
            gradient_bytes: bytes,
            workspace_bytes: 0,
        });
    }

    act(&mut layers, n, "input".into(), 1, m);
    act(&mut layers, n, "stem.conv".into(), gc[0], m);
    act(&mut layers, n, "stem.bn".into(), gc[0], m);
    act(&mut layers, n, "stem.relu".into(), gc[0], m);
    let group_io = [
        (gc[0], gc[0]),
        (gc[0], gc[1]),
        (gc[1], gc[2]),
        (gc[2], gc[3]),
        (gc[3], gc[4]),
    ];
    let mut side = m;
    for (gi, &(in_c, out_c)) in group_io.iter().enumerate() {
        for b in 0..cfg.blocks_per_group[gi] {
            let bin = if b == 0 { in_c } else { out_c };
            let prefix = format!("g{}.b{b}", gi + 1);
            // conv1, bn1, relu1, conv2, pre-relu sum, shortcut, output.
            for suffix in ["conv1", "bn1", "relu1", "conv2", "sum", "shortcut", "out"] {
                act(&mut layers, n, format!("{prefix}.{suffix}"), out_c, side);
            }
            let _ = bin;
        }
        if gi < 4 {
            let pooled = side / 2;
            act(&mut layers, n, format!("pool{}", gi + 1), out_c, pooled);
            let argmax = LayerMemory {
                name: format!("pool{}.argmax", gi + 1),
                activation_bytes: n * out_c as u64 * (pooled * pooled * pooled) as u64
                    * ARGMAX_BYTES,
                gradient_bytes: 0,
                workspace_bytes: 0,
            };
            layers.push(argmax);
            side = pooled;
        }
    }
    let ups = [(gc[3], m / 8), (gc[2], m / 4)];
    for (ui, &(width, s)) in ups.iter().enumerate() {
        let prefix = format!("up{}", ui + 1);
        act(&mut layers, n, format!("{prefix}.deconv"), width, s);
        act(&mut layers, n, format!("{prefix}.bn"), width, s);
        act(&mut layers, n, format!("{prefix}.relu"), width, s);
        act(&mut layers, n, format!("{prefix}.concat"), 2 * width, s);
        for suffix in ["conv1", "bn1", "relu1", "conv2", "sum", "shortcut", "out"] {
            act(&mut layers, n, format!("{prefix}.block.{suffix}"), width, s);
        }
    }
    act(&mut layers, n, "head.conv".into(), cfg.head_channels(), m / 4);
    act(&mut layers, n, "head.grid".into(), cfg.anchor_count() * HEAD_VALUES, m / 4);

    if engine == ConvEngine::GemmLowering {
        let workspace = network_conv_sites(&cfg, 1)?
            .iter()
            .map(|site| {
                let (od, oh, ow) = site
                    .geometry
                    .out_extent((site.input.2, site.input.3, site.input.4))
                    .expect("workload geometry is valid");
                site.geometry.patch_len() as u64 * (od * oh * ow) as u64 * F32_BYTES
            })
            .max()
            .unwrap_or(0);
        layers.push(LayerMemory {
            name: "im2col".into(),
            activation_bytes: 0,
            gradient_bytes: 0,
            workspace_bytes: workspace,
        });
    }

    let parameter_bytes = 2 * F32_BYTES * param_scalar_count(&cfg) as u64;
    let activation_total = layers.iter().map(|l| l.activation_bytes).sum();
    let gradient_total = layers.iter().map(|l| l.gradient_bytes).sum();
    let workspace_peak = layers.iter().map(|l| l.workspace_bytes).max().unwrap_or(0);
    Ok(MemoryEstimate {
        layers,
        parameter_bytes,
        activation_total,
        gradient_total,
        workspace_peak,
        peak_bytes: parameter_bytes + activation_total + gradient_total + workspace_peak,
    })
}

/// Trainable and running-state scalar count of the network (weights, biases,
/// batch-norm parameters and statistics).
fn param_scalar_count(cfg: &NetworkConfig) -> usize {
    let gc = cfg.group_channels;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k * k + cout;
    let bn = |c: usize| 4 * c;
    let block = |cin: usize, cout: usize| {
        let mut t = conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
        if cin != cout {
            t += conv(cin, cout, 1);
        }
        t
    };
    let mut total = conv(1, gc[0], 3) + bn(gc[0]);
    let group_io = [
        (gc[0], gc[0]),
        (gc[0], gc[1]),
        (gc[1], gc[2]),
        (gc[2], gc[3]),
        (gc[3], gc[4]),
    ];
    for (gi, &(in_c, out_c)) in group_io.iter().enumerate() {
        for b in 0..cfg.blocks_per_group[gi] {
            total += block(if b == 0 { in_c } else { out_c }, out_c);
        }
    }
    for &(in_c, width) in &[(gc[4], gc[3]), (gc[3], gc[2])] {
        total += in_c * width * 8 + width; // deconv 2³ kernel
        total += bn(width);
        total += block(2 * width, width);
    }
    total += conv(gc[2], cfg.head_channels(), 1);
    total
}

/// Largest crop side (a multiple of 16) whose estimated peak fits the
/// budget, under the GEMM engine (the default and the larger of the two
/// estimates, so a feasible answer holds for either engine).
pub fn max_feasible_input(cfg: &NetworkConfig, budget_bytes: u64, batch: usize) -> Result<usize> {
    if budget_bytes == 0 {
        return Err(Error::Config("zero memory budget".into()));
    }
    let mut best = None;
    let mut m = 16;
    loop {
        let peak = estimate_memory(cfg, m, batch, ConvEngine::GemmLowering)?.peak_bytes;
        if peak > budget_bytes {
            break;
        }
        best = Some(m);
        m += 16;
        if m > 4096 {
            break;
        }
    }
    best.ok_or_else(|| {
        Error::Config(format!(
            "budget {budget_bytes} B cannot fit even the smallest (m=16) input"
        ))
    })
}
