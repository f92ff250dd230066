//! Double-precision replay of the network forward pass and loss.
//!
//! The production network computes in f32, whose rounding floor makes very
//! small finite-difference steps unreadable, while large steps cross ReLU
//! kinks and max-pool ties. This mirror recomputes the same function in f64
//! with naive loops, so central differences at eps = 1e-6 are clean; the
//! analytic gradients under test still come from the f32 backward pass.
//!
//! ReLU gates and pool selections are frozen from the production trace
//! rather than recomputed: an activation that rounds to opposite signs in
//! f32 and f64 would otherwise put the two passes in different linear
//! regions, and the analytic gradient is by definition the derivative of the
//! region the f32 forward actually chose.

use std::collections::HashMap;

use volprop_core::net::{BlockTrace, NetworkConfig, ParamStore, Trace, UpTrace};
use volprop_core::objective::{AnchorLabel, MiningSelection, TargetAssignment};
use volprop_core::tensor::Tensor5;

const BN_EPSILON: f64 = 1e-5;
pub const HEAD_VALUES: usize = 5;

#[derive(Clone)]
pub struct T5 {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl T5 {
    pub fn zeros(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        T5 { n, c, d, h, w, data: vec![0.0; n * c * d * h * w] }
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((n * self.c + c) * self.d + d) * self.h + h) * self.w + w
    }

    #[inline]
    fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, d, h, w)]
    }
}

/// Every parameter of the store widened to f64, keyed by the same names.
pub struct RefParams {
    pub values: HashMap<String, Vec<f64>>,
}

impl RefParams {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut values = HashMap::new();
        for name in store.names() {
            values.insert(
                name.clone(),
                store.value_slice(name).iter().map(|&v| v as f64).collect(),
            );
        }
        RefParams { values }
    }

    fn get(&self, name: &str) -> &[f64] {
        self.values.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.values.get_mut(name).expect("parameter name")
    }
}

fn conv(x: &T5, w: &[f64], bias: &[f64], out_c: usize, k: usize, pad: usize) -> T5 {
    let in_c = x.c;
    let side = |ext: usize| ext + 2 * pad + 1 - k;
    let (od, oh, ow) = (side(x.d), side(x.h), side(x.w));
    let mut y = T5::zeros(x.n, out_c, od, oh, ow);
    for n in 0..x.n {
        for oc in 0..out_c {
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut sum = bias[oc];
                        for ic in 0..in_c {
                            for kd in 0..k {
                                let id = (zd + kd).wrapping_sub(pad);
                                if id >= x.d {
                                    continue;
                                }
                                for kh in 0..k {
                                    let ih = (zh + kh).wrapping_sub(pad);
                                    if ih >= x.h {
                                        continue;
                                    }
                                    for kw in 0..k {
                                        let iw = (zw + kw).wrapping_sub(pad);
                                        if iw >= x.w {
                                            continue;
                                        }
                                        let wi = (((oc * in_c + ic) * k + kd) * k + kh) * k + kw;
                                        sum += x.at(n, ic, id, ih, iw) * w[wi];
                                    }
                                }
                            }
                        }
                        let yi = y.idx(n, oc, zd, zh, zw);
                        y.data[yi] = sum;
                    }
                }
            }
        }
    }
    y
}

fn batchnorm(x: &T5, gamma: &[f64], beta: &[f64]) -> T5 {
    let count = (x.n * x.d * x.h * x.w) as f64;
    let mut y = x.clone();
    for c in 0..x.c {
        let mut mean = 0.0;
        for n in 0..x.n {
            for d in 0..x.d {
                for h in 0..x.h {
                    for w in 0..x.w {
                        mean += x.at(n, c, d, h, w);
                    }
                }
            }
        }
        mean /= count;
        let mut var = 0.0;
        for n in 0..x.n {
            for d in 0..x.d {
                for h in 0..x.h {
                    for w in 0..x.w {
                        let dv = x.at(n, c, d, h, w) - mean;
                        var += dv * dv;
                    }
                }
            }
        }
        var /= count;
        let inv = 1.0 / (var + BN_EPSILON).sqrt();
        for n in 0..x.n {
            for d in 0..x.d {
                for h in 0..x.h {
                    for w in 0..x.w {
                        let i = y.idx(n, c, d, h, w);
                        y.data[i] = (x.data[i] - mean) * inv * gamma[c] + beta[c];
                    }
                }
            }
        }
    }
    y
}

/// ReLU with the pass/zero decision taken from the production activation.
fn relu_frozen(mut x: T5, gate: &Tensor5) -> T5 {
    assert_eq!(x.data.len(), gate.data().len(), "gate shape");
    for (v, &g) in x.data.iter_mut().zip(gate.data()) {
        if g <= 0.0 {
            *v = 0.0;
        }
    }
    x
}

/// 2x2x2 stride-2 pooling that reads the winners recorded by the production
/// pass instead of comparing values.
fn maxpool2_frozen(x: &T5, argmax: &[u64]) -> T5 {
    let mut y = T5::zeros(x.n, x.c, x.d / 2, x.h / 2, x.w / 2);
    assert_eq!(y.data.len(), argmax.len(), "argmax length");
    for (v, &src) in y.data.iter_mut().zip(argmax) {
        *v = x.data[src as usize];
    }
    y
}

fn deconv2(x: &T5, w: &[f64], bias: &[f64], out_c: usize) -> T5 {
    let in_c = x.c;
    let mut y = T5::zeros(x.n, out_c, x.d * 2, x.h * 2, x.w * 2);
    for n in 0..x.n {
        for ic in 0..in_c {
            for d in 0..x.d {
                for h in 0..x.h {
                    for wd in 0..x.w {
                        let xv = x.at(n, ic, d, h, wd);
                        for oc in 0..out_c {
                            for kd in 0..2 {
                                for kh in 0..2 {
                                    for kw in 0..2 {
                                        let wi = (((ic * out_c + oc) * 2 + kd) * 2 + kh) * 2 + kw;
                                        let yi =
                                            y.idx(n, oc, 2 * d + kd, 2 * h + kh, 2 * wd + kw);
                                        y.data[yi] += xv * w[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for n in 0..x.n {
        for oc in 0..out_c {
            for d in 0..y.d {
                for h in 0..y.h {
                    for wd in 0..y.w {
                        let yi = y.idx(n, oc, d, h, wd);
                        y.data[yi] += bias[oc];
                    }
                }
            }
        }
    }
    y
}

fn concat_channels(a: &T5, b: &T5) -> T5 {
    let mut y = T5::zeros(a.n, a.c + b.c, a.d, a.h, a.w);
    for n in 0..a.n {
        for c in 0..a.c {
            for d in 0..a.d {
                for h in 0..a.h {
                    for w in 0..a.w {
                        let i = y.idx(n, c, d, h, w);
                        y.data[i] = a.at(n, c, d, h, w);
                    }
                }
            }
        }
        for c in 0..b.c {
            for d in 0..b.d {
                for h in 0..b.h {
                    for w in 0..b.w {
                        let i = y.idx(n, a.c + c, d, h, w);
                        y.data[i] = b.at(n, c, d, h, w);
                    }
                }
            }
        }
    }
    y
}

fn add(mut a: T5, b: &T5) -> T5 {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += *y;
    }
    a
}

fn block(p: &RefParams, prefix: &str, in_c: usize, out_c: usize, x: &T5, bt: &BlockTrace) -> T5 {
    let a = conv(x, p.get(&format!("{prefix}.conv1.w")), p.get(&format!("{prefix}.conv1.b")), out_c, 3, 1);
    let a = batchnorm(&a, p.get(&format!("{prefix}.bn1.gamma")), p.get(&format!("{prefix}.bn1.beta")));
    let a = relu_frozen(a, &bt.bn1_out);
    let a = conv(&a, p.get(&format!("{prefix}.conv2.w")), p.get(&format!("{prefix}.conv2.b")), out_c, 3, 1);
    let a = batchnorm(&a, p.get(&format!("{prefix}.bn2.gamma")), p.get(&format!("{prefix}.bn2.beta")));
    let shortcut = if in_c == out_c {
        x.clone()
    } else {
        conv(x, p.get(&format!("{prefix}.proj.w")), p.get(&format!("{prefix}.proj.b")), out_c, 1, 0)
    };
    relu_frozen(add(a, &shortcut), &bt.pre_relu)
}

/// Training-mode forward to the head grid, flat layout
/// `((((s·S+i)·S+j)·S+k)·A+a)·5+v`, matching the production head. Branch
/// decisions are frozen from `trace`.
pub fn forward(cfg: &NetworkConfig, p: &RefParams, x: &T5, trace: &Trace) -> Vec<f64> {
    let gc = cfg.group_channels;
    let a = conv(x, p.get("stem.conv.w"), p.get("stem.conv.b"), gc[0], 3, 1);
    let a = batchnorm(&a, p.get("stem.bn.gamma"), p.get("stem.bn.beta"));
    let mut cur = relu_frozen(a, &trace.stem_bn_out);

    let group_io = [
        (gc[0], gc[0]),
        (gc[0], gc[1]),
        (gc[1], gc[2]),
        (gc[2], gc[3]),
        (gc[3], gc[4]),
    ];
    let mut laterals: Vec<T5> = Vec::new();
    for (gi, &(in_c, out_c)) in group_io.iter().enumerate() {
        for b in 0..cfg.blocks_per_group[gi] {
            let bin = if b == 0 { in_c } else { out_c };
            cur = block(p, &format!("g{}.b{b}", gi + 1), bin, out_c, &cur, &trace.groups[gi][b]);
        }
        if gi < 4 {
            if gi == 2 || gi == 3 {
                laterals.push(cur.clone());
            }
            cur = maxpool2_frozen(&cur, &trace.pools[gi].argmax);
        }
    }

    for (ui, &(width, lat_idx)) in [(gc[3], 1usize), (gc[2], 0usize)].iter().enumerate() {
        let prefix = format!("up{}", ui + 1);
        let ut: &UpTrace = &trace.ups[ui];
        let up = deconv2(&cur, p.get(&format!("{prefix}.deconv.w")), p.get(&format!("{prefix}.deconv.b")), width);
        let up = batchnorm(&up, p.get(&format!("{prefix}.bn.gamma")), p.get(&format!("{prefix}.bn.beta")));
        let up = relu_frozen(up, &ut.bn_out);
        let combined = concat_channels(&up, &laterals[lat_idx]);
        cur = block(p, &format!("{prefix}.block"), 2 * width, width, &combined, &ut.block);
    }

    let anchors = cfg.anchor_count();
    let head = conv(&cur, p.get("head.w"), p.get("head.b"), anchors * HEAD_VALUES, 1, 0);
    let s = head.d;
    let mut flat = vec![0.0; head.n * s * s * s * anchors * HEAD_VALUES];
    for n in 0..head.n {
        for a in 0..anchors {
            for v in 0..HEAD_VALUES {
                let ch = a * HEAD_VALUES + v;
                for i in 0..s {
                    for j in 0..s {
                        for k in 0..s {
                            let dst = ((((n * s + i) * s + j) * s + k) * anchors + a)
                                * HEAD_VALUES
                                + v;
                            flat[dst] = head.at(n, ch, i, j, k);
                        }
                    }
                }
            }
        }
    }
    flat
}

fn bce(logit: f64, g: f64) -> f64 {
    logit.max(0.0) - logit * g + (-logit.abs()).exp().ln_1p()
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// The frozen-selection multi-task loss on a flat head grid.
pub fn loss(
    head: &[f64],
    side: usize,
    anchors: usize,
    tas: &[TargetAssignment],
    selection: &MiningSelection,
) -> f64 {
    let base_of =
        |s: usize, flat: usize| (s * side * side * side * anchors + flat) * HEAD_VALUES;
    let n_cls = selection.total();
    let n_pos: usize = tas
        .iter()
        .map(|ta| {
            ta.labels()
                .iter()
                .filter(|l| matches!(l, AnchorLabel::Positive(_)))
                .count()
        })
        .sum();

    let mut cls_sum = 0.0;
    for (s, (ta, chosen)) in tas.iter().zip(selection.per_sample()).enumerate() {
        for &flat in chosen {
            let g = match ta.labels()[flat] {
                AnchorLabel::Positive(_) => 1.0,
                _ => 0.0,
            };
            cls_sum += bce(head[base_of(s, flat)], g);
        }
    }
    let cls = if n_cls == 0 { 0.0 } else { cls_sum / n_cls as f64 };

    let mut loc_sum = 0.0;
    for (s, ta) in tas.iter().enumerate() {
        for (flat, label) in ta.labels().iter().enumerate() {
            let AnchorLabel::Positive(v) = label else { continue };
            let base = base_of(s, flat);
            for c in 0..4 {
                loc_sum += smooth_l1(head[base + 1 + c] - v[c] as f64);
            }
        }
    }
    let loc = if n_pos == 0 { 0.0 } else { loc_sum / n_pos as f64 };
    cls + loc
}
