//! Finite-difference campaigns over primitives, blocks and the full model.
//!
//! Each check reduces the output to a scalar with a random weighting, so
//! every output coordinate contributes with a distinct sign and size.
//! Parameters are re-drawn at unit scale before checking: init-scale
//! weights keep activations so close to ReLU kinks that finite differences
//! straddle them.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::aggregation::{Csa, CsaConfig, CsaFeatures, CsaVariant, Hamburger};
use crate::config::{ModelConfig, RunConfig};
use crate::encoder::{Encoder, InteractionBlock};
use crate::error::{Error, Result};
use crate::ivla::{Ivla, IvlaConfig};
use crate::model::Hsvlt;
use crate::nn::Mode;
use crate::param::{ParamRef, ParamStore};
use crate::rng::Rng;
use crate::tensor::{grad_check, grad_check_params, Conv2dSpec, GradCheckReport, NormKind, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOL_PRIMITIVE: f64 = 1e-4;
pub const TOL_PIPELINE: f64 = 1e-3;
pub const TOL_LOSS: f64 = 1e-6;
/// Coordinates sampled per parameter tensor in model-scale checks.
const MAX_COORDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GradTarget {
    All,
    Primitives,
    Ivla,
    Encoder,
    Csa,
    Loss,
    Model,
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "primitives" => Self::Primitives,
            "ivla" => Self::Ivla,
            "encoder" => Self::Encoder,
            "csa" => Self::Csa,
            "loss" => Self::Loss,
            "model" => Self::Model,
            other => return Err(Error::InvalidArgument(format!("unknown gradcheck module `{other}`"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckLine {
    pub name: String,
    pub seed: u64,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl fmt::Display for GradCheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} seed={} max_rel_err={:.3e} tol={:.0e} coords={}",
            if self.report.pass { "PASS" } else { "FAIL" },
            self.name,
            self.seed,
            self.report.max_rel_err,
            self.tol,
            self.report.checked
        )?;
        if !self.report.pass {
            if let Some((label, i, a, n)) = &self.report.worst {
                write!(f, " worst={label}[{i}] analytic={a:e} numeric={n:e}")?;
            }
        }
        Ok(())
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rng.vec_uniform(n, -1.0, 1.0), shape).unwrap()
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rng.vec_uniform(n, 0.5, 2.0), shape).unwrap()
}

fn weighted(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.sum())
}

/// Re-draws every trainable parameter uniformly in [-scale, scale].
pub fn randomize(store: &ParamStore, scale: f64, rng: &mut Rng) {
    for p in store.trainable() {
        p.set_data(rng.vec_uniform(p.numel(), -scale, scale)).expect("same shape");
    }
}

fn trainable(store: &ParamStore) -> Vec<ParamRef> {
    store.trainable().cloned().collect()
}

struct Campaign {
    lines: Vec<GradCheckLine>,
    seed: u64,
}

impl Campaign {
    fn push(&mut self, name: impl Into<String>, tol: f64, report: GradCheckReport) {
        self.lines.push(GradCheckLine { name: name.into(), seed: self.seed, tol, report });
    }

    /// Checks `f` against its input, reduced by a random weighting.
    fn unary(&mut self, name: &str, x: &Tensor, rng: &mut Rng, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<()> {
        let shape = f(x)?.shape().to_vec();
        let w = random(&shape, rng);
        let report = grad_check(|x| weighted(&f(x)?, &w), x, STEP, TOL_PRIMITIVE)?;
        self.push(name, TOL_PRIMITIVE, report);
        Ok(())
    }

    /// Checks a binary op against both operands.
    fn binary(
        &mut self,
        name: &str,
        a: &Tensor,
        b: &Tensor,
        rng: &mut Rng,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<()> {
        self.unary(&format!("{name}/lhs"), a, rng, |x| f(x, b))?;
        self.unary(&format!("{name}/rhs"), b, rng, |x| f(a, x))
    }

    fn params(
        &mut self,
        name: &str,
        tol: f64,
        params: &[ParamRef],
        max_coords: Option<usize>,
        rng: &mut Rng,
        loss: impl Fn() -> Result<Tensor>,
    ) -> Result<()> {
        let report = grad_check_params(loss, params, STEP, tol, max_coords, rng)?;
        self.push(name, tol, report);
        Ok(())
    }
}

fn primitives(c: &mut Campaign, rng: &mut Rng) -> Result<()> {
    let a = random(&[2, 3, 4], rng);
    let b = random(&[3, 1], rng);
    c.binary("add", &a, &b, rng, |x, y| x.add(y))?;
    c.binary("sub", &a, &b, rng, |x, y| x.sub(y))?;
    c.binary("mul", &a, &b, rng, |x, y| x.mul(y))?;
    c.binary("div", &a, &positive(&[3, 1], rng), rng, |x, y| x.div(y))?;
    c.binary("matmul", &random(&[2, 3, 4], rng), &random(&[4, 5], rng), rng, |x, y| x.matmul(y))?;

    let x = random(&[2, 4, 6, 6], rng);
    for (tag, spec, cin) in [
        ("conv2d/s2p1", Conv2dSpec { stride: 2, padding: 1, groups: 1 }, 4),
        ("conv2d/depthwise", Conv2dSpec { stride: 1, padding: 2, groups: 4 }, 1),
    ] {
        let k = if spec.groups == 1 { 3 } else { 5 };
        let w = random(&[4, cin, k, k], rng);
        let bias = random(&[4], rng);
        c.unary(&format!("{tag}/x"), &x, rng, |x| x.conv2d(&w, Some(&bias), spec))?;
        c.unary(&format!("{tag}/w"), &w, rng, |w| x.conv2d(w, Some(&bias), spec))?;
        c.unary(&format!("{tag}/bias"), &bias, rng, |b| x.conv2d(&w, Some(b), spec))?;
    }

    let x = random(&[2, 3, 4], rng).scale(3.0);
    for axis in 0..3 {
        c.unary(&format!("softmax/axis{axis}"), &x, rng, |x| x.softmax(axis))?;
    }
    let img = random(&[3, 4, 3, 3], rng).scale(2.0);
    for kind in [NormKind::Layer, NormKind::Batch, NormKind::Instance] {
        c.unary(&format!("normalize/{kind:?}"), &img, rng, |x| x.normalize(kind, 1e-5))?;
    }
    c.unary("relu", &x, rng, |x| Ok(x.relu()))?;
    c.unary("tanh", &x, rng, |x| Ok(x.tanh()))?;
    c.unary("gelu", &x, rng, |x| Ok(x.gelu()))?;
    c.unary("sigmoid", &x, rng, |x| Ok(x.sigmoid()))?;
    c.unary("softplus", &x, rng, |x| Ok(x.softplus()))?;
    c.unary("exp", &x, rng, |x| Ok(x.exp()))?;
    c.unary("scale_shift", &x, rng, |x| Ok(x.scale(-1.5).add_scalar(0.25)))?;
    c.unary("flatten_unflatten", &img, rng, |x| x.flatten_spatial()?.transpose_last2()?.transpose_last2()?.unflatten_spatial(3, 3))?;
    c.unary("reshape", &x, rng, |x| x.reshape(&[6, 4]))?;
    c.unary("broadcast_to", &random(&[1, 3, 1], rng), rng, |x| x.broadcast_to(&[2, 3, 5]))?;
    c.unary("select_last", &x, rng, |x| x.select_last(&[3, 0, 3]))?;
    c.unary("mean", &x, rng, |x| Ok(x.mean()))?;
    let other = random(&[2, 5, 4], rng);
    c.unary("concat", &x, rng, |x| Tensor::concat(&[other.clone(), x.clone()], 1))?;
    Ok(())
}

/// The five IVLA configurations of the component ablation.
pub fn ivla_toggle_rows() -> Vec<(&'static str, [bool; 4])> {
    vec![
        ("gconv", [true, false, false, false]),
        ("gconv+l_act", [true, true, false, false]),
        ("gconv+l_act+v_gate", [true, true, true, false]),
        ("gconv+l_act+l_gate", [true, true, false, true]),
        ("gconv+l_act+v_gate+l_gate", [true, true, true, true]),
    ]
}

pub fn apply_toggles(cfg: &mut IvlaConfig, t: [bool; 4]) {
    [cfg.use_gconv, cfg.use_l_act, cfg.use_v_gate, cfg.use_l_gate] = t;
}

fn ivla(c: &mut Campaign, rng: &mut Rng) -> Result<()> {
    let (b, ch, h, t) = (2, 4, 4, 3);
    for (tag, toggles) in ivla_toggle_rows() {
        let mut cfg = IvlaConfig::new(ch);
        cfg.gconv_kernel = 3;
        apply_toggles(&mut cfg, toggles);
        let mut store = ParamStore::new();
        let m = Ivla::new(&mut store, "ivla", &cfg, rng)?;
        randomize(&store, 0.5, rng);
        let v = random(&[b, ch, h, h], rng);
        let l = random(&[b, ch, t], rng);
        let (wv, wl) = (random(&[b, ch, h, h], rng), random(&[b, ch, t], rng));
        let loss = |v: &Tensor, l: &Tensor| {
            let o = m.forward(v, l)?;
            weighted(&o.visual, &wv)?.add(&weighted(&o.linguistic, &wl)?)
        };
        c.params(&format!("ivla[{tag}]/params"), TOL_PRIMITIVE, &trainable(&store), None, rng, || loss(&v, &l))?;
        let report = grad_check(|v| loss(v, &l), &v, STEP, TOL_PRIMITIVE)?;
        c.push(format!("ivla[{tag}]/visual_input"), TOL_PRIMITIVE, report);
        let report = grad_check(|l| loss(&v, l), &l, STEP, TOL_PRIMITIVE)?;
        c.push(format!("ivla[{tag}]/linguistic_input"), TOL_PRIMITIVE, report);
    }
    Ok(())
}

fn block(c: &mut Campaign, rng: &mut Rng) -> Result<()> {
    let mut cfg = IvlaConfig::new(4);
    cfg.gconv_kernel = 3;
    let mut store = ParamStore::new();
    let blk = InteractionBlock::new(&mut store, "block", &cfg, rng)?;
    randomize(&store, 0.5, rng);
    let v = random(&[2, 4, 4, 4], rng);
    let l = random(&[2, 4, 3], rng);
    let w: Vec<Tensor> = [&[2, 4, 4, 4][..], &[2, 4, 3], &[2, 4, 3]].iter().map(|s| random(s, rng)).collect();
    let loss = |v: &Tensor, l: &Tensor| {
        let o = blk.forward(v, l)?;
        weighted(&o.visual, &w[0])?.add(&weighted(&o.linguistic, &w[1])?)?.add(&weighted(&o.multimodal, &w[2])?)
    };
    c.params("interaction_block/params", TOL_PRIMITIVE, &trainable(&store), None, rng, || loss(&v, &l))?;
    let report = grad_check(|v| loss(v, &l), &v, STEP, TOL_PRIMITIVE)?;
    c.push("interaction_block/visual_input", TOL_PRIMITIVE, report);
    Ok(())
}

/// Desk encoder with one block per stage, batch 2.
fn encoder(c: &mut Campaign, rng: &mut Rng) -> Result<()> {
    let mut cfg = ModelConfig::desk();
    cfg.depths = [1, 1, 1, 1];
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, rng)?;
    randomize(&store, 0.5, rng);
    let images = random(&[2, 3, 32, 32], rng);
    let ids: Vec<usize> = (0..cfg.num_labels).collect();
    let w: Vec<Tensor> = cfg.channels.iter().map(|&ch| random(&[2, ch, cfg.num_labels], rng)).collect();
    let loss = || {
        let out = enc.forward(&images, &ids, Mode::Train)?;
        let mut total = weighted(&out.multimodal[0], &w[0])?;
        for (s, w) in out.multimodal.iter().zip(&w).skip(1) {
            total = total.add(&weighted(s, w)?)?;
        }
        Ok(total)
    };
    c.params("encoder/params", TOL_PRIMITIVE, &trainable(&store), Some(MAX_COORDS), rng, loss)
}

fn csa(c: &mut Campaign, rng: &mut Rng) -> Result<()> {
    let channels = [3, 4, 5, 6];
    let t = 3;
    let s: Vec<Tensor> = channels.iter().map(|&ch| random(&[2, ch, t], rng)).collect();
    let l: Vec<Tensor> = channels.iter().map(|&ch| random(&[2, ch, t], rng)).collect();
    for variant in CsaVariant::ALL {
        let features = if variant == CsaVariant::S4HeadMlp { CsaFeatures::S } else { CsaFeatures::SAndL };
        let cfg = CsaConfig { variant, features, ham_rank: 3, ham_updates: 3, ..CsaConfig::default() };
        let mut store = ParamStore::new();
        let head = Csa::new(&mut store, &cfg, &channels, rng.next_u64(), rng)?;
        randomize(&store, 0.5, rng);
        let w = random(&[2, t], rng);
        c.params(&format!("csa[{}]/params", variant.name()), TOL_PIPELINE, &trainable(&store), None, rng, || {
            weighted(&head.forward(&s, &l)?, &w)
        })?;
        let report = grad_check(|x| weighted(&head.forward(&[s[0].clone(), s[1].clone(), s[2].clone(), x.clone()], &l)?, &w), &s[3], STEP, TOL_PIPELINE)?;
        c.push(format!("csa[{}]/s4_input", variant.name()), TOL_PIPELINE, report);
    }
    let mut store = ParamStore::new();
    let ham = Hamburger::new(&mut store, "ham", 5, 2, 3, rng.next_u64(), rng)?;
    randomize(&store, 0.5, rng);
    let x = random(&[2, 5, 3], rng);
    let w = random(&[2, 5, 3], rng);
    c.params("hamburger/params", TOL_PIPELINE, &trainable(&store), None, rng, || weighted(&ham.forward(&x)?, &w))?;
    let report = grad_check(|x| weighted(&ham.forward(x)?, &w), &x, STEP, TOL_PIPELINE)?;
    c.push("hamburger/input", TOL_PIPELINE, report);
    Ok(())
}

fn loss(c: &mut Campaign, rng: &mut Rng) -> Result<()> {
    let z = random(&[4, 5], rng).scale(4.0);
    let n = 20;
    let targets = Tensor::new((0..n).map(|_| rng.below(2) as f64).collect(), &[4, 5])?;
    let report = grad_check(|z| z.bce_with_logits(&targets), &z, STEP, TOL_LOSS)?;
    c.push("bce_with_logits", TOL_LOSS, report);
    Ok(())
}

fn model(c: &mut Campaign, rng: &mut Rng) -> Result<()> {
    let mut cfg = RunConfig::desk().model;
    cfg.depths = [1, 1, 1, 1];
    cfg.csa.ham_updates = 3;
    cfg.seed = rng.next_u64();
    let m = Hsvlt::new(&cfg)?;
    randomize(&m.store, 0.5, rng);
    let images = random(&[2, 3, 32, 32], rng);
    let truths = Tensor::new((0..2 * cfg.num_labels).map(|_| rng.below(2) as f64).collect(), &[2, cfg.num_labels])?;
    c.params("model/bce", TOL_PIPELINE, &trainable(&m.store), Some(MAX_COORDS), rng, || {
        m.forward(&images, Mode::Train)?.bce_with_logits(&truths)
    })
}

/// Runs the checks of `target` once per seed.
pub fn run_grad_checks(target: GradTarget, seeds: &[u64]) -> Result<Vec<GradCheckLine>> {
    let mut lines = Vec::new();
    for &seed in seeds {
        let mut c = Campaign { lines: Vec::new(), seed };
        let mut rng = Rng::new(seed);
        let all = target == GradTarget::All;
        if all || target == GradTarget::Primitives {
            primitives(&mut c, &mut rng)?;
        }
        if all || target == GradTarget::Ivla {
            ivla(&mut c, &mut rng)?;
            block(&mut c, &mut rng)?;
        }
        if all || target == GradTarget::Encoder {
            encoder(&mut c, &mut rng)?;
        }
        if all || target == GradTarget::Csa {
            csa(&mut c, &mut rng)?;
        }
        if all || target == GradTarget::Loss {
            loss(&mut c, &mut rng)?;
        }
        if all || target == GradTarget::Model {
            model(&mut c, &mut rng)?;
        }
        lines.extend(c.lines);
    }
    Ok(lines)
}
