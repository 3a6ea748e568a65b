//! Dense loop oracles and brute-force references shared by the integration
//! tests. Nothing here calls the tensor engine: every routine works on flat
//! row-major `f64` arrays and reads parameters by name.

#![allow(dead_code)]

use hsvlt_core::param::ParamStore;
use hsvlt_core::rng::Rng;
use hsvlt_core::tensor::Tensor;

pub const EPS: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rng.vec_uniform(n, -1.0, 1.0), shape).unwrap()
}

/// Redraw every parameter uniformly in ±`scale` so zero-initialised biases
/// and unit gammas cannot hide mistakes.
pub fn randomize(store: &ParamStore, scale: f64, rng: &mut Rng) {
    for p in store.trainable() {
        p.set_data(rng.vec_uniform(p.numel(), -scale, scale)).unwrap();
    }
}

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).value().to_vec()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `y[o][n] = Σ_i w[o][i] x[i][n] + b[o]` for one batch item.
fn linear(w: &[f64], b: &[f64], x: &[f64], cin: usize, n: usize) -> Vec<f64> {
    let cout = b.len();
    let mut y = vec![0.0; cout * n];
    for o in 0..cout {
        for j in 0..n {
            let mut acc = b[o];
            for i in 0..cin {
                acc += w[o * cin + i] * x[i * n + j];
            }
            y[o * n + j] = acc;
        }
    }
    y
}

fn pointwise(store: &ParamStore, name: &str, x: &[f64], cin: usize, n: usize) -> Vec<f64> {
    linear(&param(store, &format!("{name}.weight")), &param(store, &format!("{name}.bias")), x, cin, n)
}

/// Per-row standardisation of a (rows, n) matrix.
fn instance_norm(x: &mut [f64], rows: usize, n: usize) {
    for r in 0..rows {
        let row = &mut x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
}

/// Channel layer norm of one (c, n) item with affine parameters.
fn layer_norm(store: &ParamStore, name: &str, x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let gamma = param(store, &format!("{name}.gamma"));
    let beta = param(store, &format!("{name}.beta"));
    let mut y = vec![0.0; c * n];
    for j in 0..n {
        let mean = (0..c).map(|i| x[i * n + j]).sum::<f64>() / c as f64;
        let var = (0..c).map(|i| (x[i * n + j] - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        for i in 0..c {
            y[i * n + j] = (x[i * n + j] - mean) * inv * gamma[i] + beta[i];
        }
    }
    y
}

fn gate(store: &ParamStore, name: &str, x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut a = pointwise(store, &format!("{name}.conv_a"), x, c, n);
    a.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut g = pointwise(store, &format!("{name}.conv_b"), &a, c, n);
    g.iter_mut().for_each(|v| *v = v.tanh());
    g
}

#[derive(Clone, Copy, Debug)]
pub struct IvlaFlags {
    pub kernel: usize,
    pub gconv: bool,
    pub l_act: bool,
    pub v_gate: bool,
    pub l_gate: bool,
}

pub struct OracleOut {
    /// (B, C, H, W)
    pub visual: Vec<f64>,
    /// (B, C, T)
    pub linguistic: Vec<f64>,
    /// (B, HW, T) raw scores
    pub attention: Vec<f64>,
}

/// The whole attention module for inputs `v` (B,C,H,W) and `l` (B,C,T),
/// one batch item at a time.
#[allow(clippy::too_many_arguments)]
pub fn ivla_oracle(
    store: &ParamStore,
    name: &str,
    f: IvlaFlags,
    v: &[f64],
    l: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    t: usize,
) -> OracleOut {
    let p = h * w;
    let mut out = OracleOut { visual: vec![0.0; b * c * p], linguistic: vec![0.0; b * c * t], attention: vec![0.0; b * p * t] };
    for bi in 0..b {
        let vb = &v[bi * c * p..(bi + 1) * c * p];
        let lb = &l[bi * c * t..(bi + 1) * c * t];

        let mut pv1 = pointwise(store, &format!("{name}.omega_v1"), vb, c, p);
        instance_norm(&mut pv1, c, p);
        let mut pv2 = pointwise(store, &format!("{name}.omega_v2"), vb, c, p);
        instance_norm(&mut pv2, c, p);
        let pl1 = pointwise(store, &format!("{name}.omega_l1"), lb, c, t);
        let pl2 = pointwise(store, &format!("{name}.omega_l2"), lb, c, t);
        let pl3 = pointwise(store, &format!("{name}.omega_l3"), lb, c, t);

        // scores[pos][tok]
        let mut att = vec![0.0; p * t];
        for pos in 0..p {
            for tok in 0..t {
                let mut s = 0.0;
                for ch in 0..c {
                    s += pv1[ch * p + pos] * pl1[ch * t + tok];
                }
                att[pos * t + tok] = s / (c as f64).sqrt();
            }
        }
        out.attention[bi * p * t..(bi + 1) * p * t].copy_from_slice(&att);

        // softmax over positions for each token
        let mut a_sp = vec![0.0; p * t];
        for tok in 0..t {
            let m = (0..p).map(|pos| att[pos * t + tok]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..p).map(|pos| (att[pos * t + tok] - m).exp()).sum();
            for pos in 0..p {
                a_sp[pos * t + tok] = (att[pos * t + tok] - m).exp() / z;
            }
        }
        // softmax over tokens for each position
        let mut a_lb = vec![0.0; p * t];
        for pos in 0..p {
            let row = &att[pos * t..(pos + 1) * t];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for tok in 0..t {
                a_lb[pos * t + tok] = (row[tok] - m).exp() / z;
            }
        }

        let mut l_cross = vec![0.0; c * t];
        for ch in 0..c {
            for tok in 0..t {
                let pooled: f64 = (0..p).map(|pos| pv2[ch * p + pos] * a_sp[pos * t + tok]).sum();
                l_cross[ch * t + tok] = if f.l_act { pl3[ch * t + tok] * pooled } else { pooled };
            }
        }

        let mut v_cross = vec![0.0; c * p];
        for ch in 0..c {
            for pos in 0..p {
                v_cross[ch * p + pos] = (0..t).map(|tok| a_lb[pos * t + tok] * pl2[ch * t + tok]).sum();
            }
        }
        if f.gconv {
            let k = f.kernel;
            let pad = (k as isize - 1) / 2;
            let wk = param(store, &format!("{name}.gconv.weight"));
            let bk = param(store, &format!("{name}.gconv.bias"));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bk[ch];
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y as isize + ky as isize - pad, x as isize + kx as isize - pad);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += wk[(ch * k + ky) * k + kx] * vb[ch * p + sy as usize * w + sx as usize];
                                }
                            }
                        }
                        v_cross[ch * p + y * w + x] += gelu(acc);
                    }
                }
            }
        }

        let gv = f.v_gate.then(|| gate(store, &format!("{name}.v_gate"), &v_cross, c, p));
        let gl = f.l_gate.then(|| gate(store, &format!("{name}.l_gate"), &l_cross, c, t));
        for i in 0..c * p {
            let m = gv.as_ref().map_or(1.0, |g| g[i]);
            out.visual[bi * c * p + i] = vb[i] + v_cross[i] * m;
        }
        for i in 0..c * t {
            let m = gl.as_ref().map_or(1.0, |g| g[i]);
            out.linguistic[bi * c * t + i] = lb[i] + l_cross[i] * m;
        }
    }
    out
}

pub struct BlockOracle {
    pub visual: Vec<f64>,
    pub linguistic: Vec<f64>,
    pub multimodal: Vec<f64>,
}

/// Interaction block: norms around the attention module with residuals.
#[allow(clippy::too_many_arguments)]
pub fn block_oracle(
    store: &ParamStore,
    name: &str,
    f: IvlaFlags,
    v0: &[f64],
    l0: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    t: usize,
) -> BlockOracle {
    let p = h * w;
    let mut v1 = Vec::with_capacity(v0.len());
    let mut l1 = Vec::with_capacity(l0.len());
    for bi in 0..b {
        v1.extend(layer_norm(store, &format!("{name}.norm_v_in"), &v0[bi * c * p..(bi + 1) * c * p], c, p));
        l1.extend(layer_norm(store, &format!("{name}.norm_l_in"), &l0[bi * c * t..(bi + 1) * c * t], c, t));
    }
    let inner = ivla_oracle(store, &format!("{name}.ivla"), f, &v1, &l1, b, c, h, w, t);
    let mut out = BlockOracle { visual: Vec::new(), linguistic: Vec::new(), multimodal: Vec::new() };
    for bi in 0..b {
        let vs: Vec<f64> = (0..c * p).map(|i| v0[bi * c * p + i] + inner.visual[bi * c * p + i]).collect();
        let ls: Vec<f64> = (0..c * t).map(|i| l0[bi * c * t + i] + inner.linguistic[bi * c * t + i]).collect();
        out.visual.extend(layer_norm(store, &format!("{name}.norm_v_out"), &vs, c, p));
        out.linguistic.extend(layer_norm(store, &format!("{name}.norm_l_out"), &ls, c, t));
        out.multimodal.extend(layer_norm(
            store,
            &format!("{name}.norm_s"),
            &inner.linguistic[bi * c * t..(bi + 1) * c * t],
            c,
            t,
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadKind {
    Concat { rank: usize, updates: usize },
    MlpConcat,
    S4,
}

/// Aggregation head on already-selected (B, C_i, T) features. `bases` is the
/// fixed (ΣC_i, rank) dictionary initialisation of the concat head.
pub fn csa_oracle(
    store: &ParamStore,
    kind: HeadKind,
    feats: &[(Vec<f64>, usize)],
    names: &[String],
    bases: Option<&[f64]>,
    b: usize,
    t: usize,
) -> Vec<f64> {
    let mut logits = vec![0.0; b * t];
    for bi in 0..b {
        let item = |k: usize| -> &[f64] {
            let (x, c) = &feats[k];
            &x[bi * c * t..(bi + 1) * c * t]
        };
        let row = match kind {
            HeadKind::S4 => {
                let c = feats[0].1;
                let mut hid = pointwise(store, "csa.head", item(0), c, t);
                hid.iter_mut().for_each(|v| *v = gelu(*v));
                pointwise(store, "csa.class", &hid, c, t)
            }
            HeadKind::MlpConcat => {
                let common = feats.iter().map(|f| f.1).max().unwrap();
                let mut cat = Vec::new();
                for (k, name) in names.iter().enumerate() {
                    let mut y = pointwise(store, name, item(k), feats[k].1, t);
                    y.iter_mut().for_each(|v| *v = gelu(*v));
                    cat.extend(y);
                }
                pointwise(store, "csa.fuse", &cat, common * feats.len(), t)
            }
            HeadKind::Concat { rank: r, updates } => {
                let m: usize = feats.iter().map(|f| f.1).sum();
                let mut x = Vec::with_capacity(m * t);
                for k in 0..feats.len() {
                    x.extend_from_slice(item(k));
                }
                let mut z = pointwise(store, "csa.ham.lower", &x, m, t);
                z.iter_mut().for_each(|v| *v = softplus(*v));
                let mut d = bases.expect("concat head needs bases").to_vec();
                // C = softmax over the rank axis of Dᵀ Z
                let mut cm = vec![0.0; r * t];
                for j in 0..t {
                    let s: Vec<f64> = (0..r).map(|q| (0..m).map(|i| d[i * r + q] * z[i * t + j]).sum()).collect();
                    let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let den: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                    for q in 0..r {
                        cm[q * t + j] = (s[q] - mx).exp() / den;
                    }
                }
                for _ in 0..updates {
                    let mut next_c = vec![0.0; r * t];
                    for q in 0..r {
                        for j in 0..t {
                            let num: f64 = (0..m).map(|i| d[i * r + q] * z[i * t + j]).sum();
                            let mut den = 0.0;
                            for q2 in 0..r {
                                let dtd: f64 = (0..m).map(|i| d[i * r + q] * d[i * r + q2]).sum();
                                den += dtd * cm[q2 * t + j];
                            }
                            next_c[q * t + j] = cm[q * t + j] * num / (den + 1e-6);
                        }
                    }
                    cm = next_c;
                    let mut next_d = vec![0.0; m * r];
                    for i in 0..m {
                        for q in 0..r {
                            let num: f64 = (0..t).map(|j| z[i * t + j] * cm[q * t + j]).sum();
                            let mut den = 0.0;
                            for q2 in 0..r {
                                let cct: f64 = (0..t).map(|j| cm[q2 * t + j] * cm[q * t + j]).sum();
                                den += d[i * r + q2] * cct;
                            }
                            next_d[i * r + q] = d[i * r + q] * num / (den + 1e-6);
                        }
                    }
                    d = next_d;
                }
                let mut recon = vec![0.0; m * t];
                for i in 0..m {
                    for j in 0..t {
                        recon[i * t + j] = (0..r).map(|q| d[i * r + q] * cm[q * t + j]).sum();
                    }
                }
                let up = pointwise(store, "csa.ham.upper", &recon, m, t);
                let mixed: Vec<f64> = x.iter().zip(&up).map(|(a, u)| a + u).collect();
                pointwise(store, "csa.class", &mixed, m, t)
            }
        };
        logits[bi * t..(bi + 1) * t].copy_from_slice(&row);
    }
    logits
}

/// AP by counting, for every positive, how many items outrank it: an item
/// outranks `i` when its score is higher, or equal with a smaller index.
pub fn brute_ap(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let n = scores.len();
    let outranks = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..n).filter(|&i| truths[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &i in &positives {
        let rank = 1 + (0..n).filter(|&j| j != i && outranks(j, i)).count();
        let hits = 1 + positives.iter().filter(|&&j| j != i && outranks(j, i)).count();
        sum += hits as f64 / rank as f64;
    }
    Some(sum / positives.len() as f64)
}

pub fn brute_map(scores: &[f64], truths: &[bool], n: usize, t: usize) -> f64 {
    let aps: Vec<f64> = (0..t)
        .filter_map(|c| {
            let s: Vec<f64> = (0..n).map(|i| scores[i * t + c]).collect();
            let y: Vec<bool> = (0..n).map(|i| truths[i * t + c]).collect();
            brute_ap(&s, &y)
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// [CP, CR, CF1, OP, OR, OF1] from decisions. `top_k = None` thresholds at 0.5.
pub fn brute_prf(scores: &[f64], truths: &[bool], n: usize, t: usize, top_k: Option<usize>) -> [f64; 6] {
    let mut pred = vec![false; n * t];
    for i in 0..n {
        for c in 0..t {
            let s = scores[i * t + c];
            pred[i * t + c] = match top_k {
                None => s > 0.5,
                Some(k) => {
                    let above = (0..t).filter(|&d| scores[i * t + d] > s || (scores[i * t + d] == s && d < c)).count();
                    above < k
                }
            };
        }
    }
    let f1 = |p: f64, r: f64| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let (mut precisions, mut recalls) = (Vec::new(), Vec::new());
    let (mut tp_all, mut pred_all, mut pos_all) = (0, 0, 0);
    for c in 0..t {
        let tp = (0..n).filter(|&i| pred[i * t + c] && truths[i * t + c]).count();
        let np = (0..n).filter(|&i| pred[i * t + c]).count();
        let pos = (0..n).filter(|&i| truths[i * t + c]).count();
        if np > 0 {
            precisions.push(tp as f64 / np as f64);
        }
        if pos > 0 {
            recalls.push(tp as f64 / pos as f64);
        }
        tp_all += tp;
        pred_all += np;
        pos_all += pos;
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (cp, cr) = (mean(&precisions), mean(&recalls));
    let op = if pred_all > 0 { tp_all as f64 / pred_all as f64 } else { 0.0 };
    let or = if pos_all > 0 { tp_all as f64 / pos_all as f64 } else { 0.0 };
    [cp, cr, f1(cp, cr), op, or, f1(op, or)]
}
