//! Interactive visual-linguistic attention.
//!
//! One shared cross-modal score matrix `Att` (B, H*W, T) drives both updates:
//! the linguistic stream pools visual features with `Att` normalized over
//! positions, the visual stream pools label embeddings with `Att` normalized
//! over labels. Each update passes through a tanh gate before the residual add.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Pointwise, NORM_EPS};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Conv2dSpec, NormKind, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct IvlaConfig {
    pub channels: usize,
    /// Odd kernel size of the depthwise local branch.
    pub gconv_kernel: usize,
    pub use_gconv: bool,
    pub use_l_act: bool,
    pub use_v_gate: bool,
    pub use_l_gate: bool,
}

impl IvlaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gconv_kernel: 7,
            use_gconv: true,
            use_l_act: true,
            use_v_gate: true,
            use_l_gate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gconv_kernel == 0 || self.gconv_kernel % 2 == 0 {
            return Err(Error::Config(format!("gconv kernel must be odd and >= 1, got {}", self.gconv_kernel)));
        }
        if self.channels == 0 {
            return Err(Error::Config("ivla channels must be positive".into()));
        }
        Ok(())
    }
}

/// Unnormalized cross-modal scores (B, H*W, T), already scaled by 1/sqrt(C).
#[derive(Clone, Debug)]
pub struct CrossModalAttention(pub Tensor);

impl CrossModalAttention {
    pub fn scores(&self) -> &Tensor {
        &self.0
    }

    /// Normalized over positions: every label column sums to one.
    pub fn softmax_spatial(&self) -> Result<Tensor> {
        self.0.softmax(1)
    }

    /// Normalized over labels: every position row sums to one.
    pub fn softmax_label(&self) -> Result<Tensor> {
        self.0.softmax(2)
    }
}

/// `tanh(conv_b(relu(conv_a(x))))` with two 1x1 convolutions.
#[derive(Clone, Debug)]
pub struct Gate {
    pub conv_a: Pointwise,
    pub conv_b: Pointwise,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv_a: Pointwise::new(store, &format!("{name}.conv_a"), channels, channels, rng)?,
            conv_b: Pointwise::new(store, &format!("{name}.conv_b"), channels, channels, rng)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * Pointwise::param_count(channels, channels)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv_b.forward(&self.conv_a.forward(x)?.relu())?.tanh())
    }
}

/// `x1 + x_cross * gate(x_cross)`, or `x1 + x_cross` without a gate.
pub fn gate_regulation(x1: &Tensor, x_cross: &Tensor, gate: Option<&Gate>) -> Result<Tensor> {
    if x1.shape() != x_cross.shape() {
        return Err(Error::ShapeMismatch {
            op: "gate_regulation",
            lhs: x1.shape().to_vec(),
            rhs: x_cross.shape().to_vec(),
        });
    }
    match gate {
        Some(g) => x1.add(&x_cross.mul(&g.forward(x_cross)?)?),
        None => x1.add(x_cross),
    }
}

/// Visual projection: 1x1 conv then instance norm, flattened to (B, C, H*W).
#[derive(Clone, Debug)]
pub struct VisualProjection(pub Pointwise);

impl VisualProjection {
    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        self.0.forward(&v.flatten_spatial()?)?.normalize(NormKind::Instance, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Ivla {
    pub cfg: IvlaConfig,
    pub omega_v1: VisualProjection,
    pub omega_v2: VisualProjection,
    pub omega_l1: Pointwise,
    pub omega_l2: Pointwise,
    pub omega_l3: Pointwise,
    pub gconv: Option<Conv2d>,
    pub v_gate: Option<Gate>,
    pub l_gate: Option<Gate>,
}

#[derive(Clone, Debug)]
pub struct IvlaOutput {
    pub visual: Tensor,
    pub linguistic: Tensor,
    pub attention: CrossModalAttention,
}

impl Ivla {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &IvlaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let pw = |store: &mut ParamStore, part: &str, rng: &mut Rng| Pointwise::new(store, &format!("{name}.{part}"), c, c, rng);
        let omega_v1 = VisualProjection(pw(store, "omega_v1", rng)?);
        let omega_v2 = VisualProjection(pw(store, "omega_v2", rng)?);
        let omega_l1 = pw(store, "omega_l1", rng)?;
        let omega_l2 = pw(store, "omega_l2", rng)?;
        let omega_l3 = pw(store, "omega_l3", rng)?;
        let gconv = if cfg.use_gconv {
            let k = cfg.gconv_kernel;
            let spec = Conv2dSpec { stride: 1, padding: (k - 1) / 2, groups: c };
            Some(Conv2d::new(store, &format!("{name}.gconv"), c, c, k, spec, true, rng)?)
        } else {
            None
        };
        let v_gate = if cfg.use_v_gate { Some(Gate::new(store, &format!("{name}.v_gate"), c, rng)?) } else { None };
        let l_gate = if cfg.use_l_gate { Some(Gate::new(store, &format!("{name}.l_gate"), c, rng)?) } else { None };
        Ok(Self {
            cfg: cfg.clone(),
            omega_v1,
            omega_v2,
            omega_l1,
            omega_l2,
            omega_l3,
            gconv,
            v_gate,
            l_gate,
        })
    }

    pub fn param_count(cfg: &IvlaConfig) -> usize {
        let c = cfg.channels;
        let k = cfg.gconv_kernel;
        let mut n = 5 * Pointwise::param_count(c, c);
        if cfg.use_gconv {
            n += Conv2d::param_count(c, c, k, c, true);
        }
        if cfg.use_v_gate {
            n += Gate::param_count(c);
        }
        if cfg.use_l_gate {
            n += Gate::param_count(c);
        }
        n
    }

    /// Multiply-accumulate count for one image with `positions` = H*W and `tokens` = T.
    pub fn macs(cfg: &IvlaConfig, positions: usize, tokens: usize) -> (usize, usize) {
        let c = cfg.channels;
        let mut visual = 2 * positions * c * c + 3 * positions * c * tokens;
        if cfg.use_gconv {
            visual += positions * c * cfg.gconv_kernel * cfg.gconv_kernel;
        }
        if cfg.use_v_gate {
            visual += 2 * positions * c * c;
        }
        let mut token = 3 * tokens * c * c;
        if cfg.use_l_gate {
            token += 2 * tokens * c * c;
        }
        (visual, token)
    }

    fn check_inputs(&self, v: &Tensor, l: &Tensor) -> Result<()> {
        let ok = v.rank() == 4
            && l.rank() == 3
            && v.dim(0) == l.dim(0)
            && v.dim(1) == self.cfg.channels
            && l.dim(1) == self.cfg.channels;
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "ivla",
                lhs: v.shape().to_vec(),
                rhs: l.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `flatten(omega_v1(V))^T omega_l1(L) / sqrt(C)`, shape (B, H*W, T).
    pub fn cross_modal_attention(&self, v: &Tensor, l: &Tensor) -> Result<CrossModalAttention> {
        self.check_inputs(v, l)?;
        let pv = self.omega_v1.forward(v)?.transpose_last2()?;
        let pl = self.omega_l1.forward(l)?;
        let scale = 1.0 / (self.cfg.channels as f64).sqrt();
        Ok(CrossModalAttention(pv.matmul(&pl)?.scale(scale)))
    }

    /// `omega_l3(L) * (flatten(omega_v2(V)) softmax_spatial(Att))`, (B, C, T).
    /// Without the activation toggle, only the pooled visual term remains.
    pub fn interactive_linguistic_fusion(&self, v: &Tensor, l: &Tensor, att: &CrossModalAttention) -> Result<Tensor> {
        self.check_inputs(v, l)?;
        let pooled = self.omega_v2.forward(v)?.matmul(&att.softmax_spatial()?)?;
        if self.cfg.use_l_act {
            self.omega_l3.forward(l)?.mul(&pooled)
        } else {
            Ok(pooled)
        }
    }

    /// `GConv(V) + unflatten((softmax_label(Att) omega_l2(L)^T)^T)`, (B, C, H, W).
    pub fn interactive_visual_fusion(&self, v: &Tensor, l: &Tensor, att: &CrossModalAttention) -> Result<Tensor> {
        self.check_inputs(v, l)?;
        let (h, w) = (v.dim(2), v.dim(3));
        let projected = self.omega_l2.forward(l)?.transpose_last2()?;
        let global = att
            .softmax_label()?
            .matmul(&projected)?
            .transpose_last2()?
            .unflatten_spatial(h, w)?;
        match &self.gconv {
            Some(conv) => conv.forward(v)?.gelu().add(&global),
            None => Ok(global),
        }
    }

    pub fn forward(&self, v1: &Tensor, l1: &Tensor) -> Result<IvlaOutput> {
        let attention = self.cross_modal_attention(v1, l1)?;
        let v_cross = self.interactive_visual_fusion(v1, l1, &attention)?;
        let l_cross = self.interactive_linguistic_fusion(v1, l1, &attention)?;
        Ok(IvlaOutput {
            visual: gate_regulation(v1, &v_cross, self.v_gate.as_ref())?,
            linguistic: gate_regulation(l1, &l_cross, self.l_gate.as_ref())?,
            attention,
        })
    }
}
