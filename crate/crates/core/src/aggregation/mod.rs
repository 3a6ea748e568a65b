//! Classification heads over the per-stage multi-modal features.
//!
//! The cross-scale head concatenates the selected stage features along
//! channels, refines them with a [`Hamburger`] block and maps every label
//! token to one logit. Two baselines are kept for comparison: per-scale
//! projections fused by a final linear map, and a head that sees only the
//! last stage.

mod count;
mod nmf;

pub use count::{count_params_flops, CountReport};
pub use nmf::{initial_bases, nmf_step, reconstruction_error, Hamburger, NMF_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Pointwise;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsaVariant {
    /// Concat → Hamburger → 1x1 classifier.
    ConcatHeadMlp,
    /// Per-scale linear + GELU → concat → linear.
    MlpConcatMlp,
    /// Last stage only: 1x1 + GELU → 1x1 classifier.
    S4HeadMlp,
}

impl CsaVariant {
    pub const ALL: [CsaVariant; 3] = [Self::S4HeadMlp, Self::MlpConcatMlp, Self::ConcatHeadMlp];

    pub fn name(self) -> &'static str {
        match self {
            Self::ConcatHeadMlp => "concat_head_mlp",
            Self::MlpConcatMlp => "mlp_concat_mlp",
            Self::S4HeadMlp => "s4_head_mlp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsaFeatures {
    S,
    L,
    /// Linguistic features of the selected stages, then the multi-modal ones.
    SAndL,
}

impl CsaFeatures {
    pub const ALL: [CsaFeatures; 3] = [Self::L, Self::S, Self::SAndL];

    pub fn name(self) -> &'static str {
        match self {
            Self::S => "s",
            Self::L => "l",
            Self::SAndL => "s_and_l",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsaConfig {
    pub variant: CsaVariant,
    /// 1-based stage indices, in concatenation order.
    pub stages: Vec<usize>,
    pub features: CsaFeatures,
    pub ham_rank: usize,
    pub ham_updates: usize,
    /// `false` always builds the last-stage head, whatever the variant.
    pub enabled: bool,
}

impl Default for CsaConfig {
    fn default() -> Self {
        Self {
            variant: CsaVariant::ConcatHeadMlp,
            stages: vec![1, 2, 3, 4],
            features: CsaFeatures::S,
            ham_rank: 8,
            ham_updates: 6,
            enabled: true,
        }
    }
}

impl CsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("csa.stages must not be empty".into()));
        }
        let mut seen = [false; 4];
        for &s in &self.stages {
            if !(1..=4).contains(&s) || std::mem::replace(&mut seen[s - 1], true) {
                return Err(Error::Config(format!("csa.stages {:?} must be distinct values in 1..=4", self.stages)));
            }
        }
        if self.ham_rank == 0 || self.ham_updates == 0 {
            return Err(Error::Config("csa.ham_rank and csa.ham_updates must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_variant(&self) -> CsaVariant {
        if self.enabled {
            self.variant
        } else {
            CsaVariant::S4HeadMlp
        }
    }

    /// (is_linguistic, stage) of every concatenated feature, in order.
    pub fn selection(&self) -> Vec<(bool, usize)> {
        let l = self.stages.iter().map(|&s| (true, s));
        let s = self.stages.iter().map(|&s| (false, s));
        match self.features {
            CsaFeatures::S => s.collect(),
            CsaFeatures::L => l.collect(),
            CsaFeatures::SAndL => l.chain(s).collect(),
        }
    }

    /// Channel widths of the selected features, given the four stage widths.
    pub fn selected_widths(&self, channels: &[usize; 4]) -> Vec<usize> {
        self.selection().iter().map(|&(_, s)| channels[s - 1]).collect()
    }
}

#[derive(Clone, Debug)]
enum Head {
    ConcatHeadMlp {
        ham: Hamburger,
        class: Pointwise,
    },
    MlpConcatMlp {
        proj: Vec<Pointwise>,
        fuse: Pointwise,
    },
    S4HeadMlp {
        head: Pointwise,
        class: Pointwise,
    },
}

#[derive(Clone, Debug)]
pub struct Csa {
    cfg: CsaConfig,
    head: Head,
}

impl Csa {
    /// `channels` are the four stage widths; `seed` fixes the NMF bases.
    pub fn new(store: &mut ParamStore, cfg: &CsaConfig, channels: &[usize; 4], seed: u64, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let head = match cfg.effective_variant() {
            CsaVariant::ConcatHeadMlp => {
                let width: usize = cfg.selected_widths(channels).iter().sum();
                Head::ConcatHeadMlp {
                    ham: Hamburger::new(store, "csa.ham", width, cfg.ham_rank, cfg.ham_updates, seed, rng)?,
                    class: Pointwise::new(store, "csa.class", width, 1, rng)?,
                }
            }
            CsaVariant::MlpConcatMlp => {
                let widths = cfg.selected_widths(channels);
                let common = *widths.iter().max().expect("non-empty selection");
                let proj = cfg
                    .selection()
                    .iter()
                    .zip(&widths)
                    .map(|(&(ling, s), &w)| {
                        let tag = if ling { 'l' } else { 's' };
                        Pointwise::new(store, &format!("csa.proj_{tag}{s}"), w, common, rng)
                    })
                    .collect::<Result<_>>()?;
                Head::MlpConcatMlp {
                    proj,
                    fuse: Pointwise::new(store, "csa.fuse", common * widths.len(), 1, rng)?,
                }
            }
            CsaVariant::S4HeadMlp => {
                let c = channels[3];
                Head::S4HeadMlp {
                    head: Pointwise::new(store, "csa.head", c, c, rng)?,
                    class: Pointwise::new(store, "csa.class", c, 1, rng)?,
                }
            }
        };
        Ok(Self { cfg: cfg.clone(), head })
    }

    pub fn param_count(cfg: &CsaConfig, channels: &[usize; 4]) -> usize {
        match cfg.effective_variant() {
            CsaVariant::ConcatHeadMlp => {
                let width: usize = cfg.selected_widths(channels).iter().sum();
                Hamburger::param_count(width) + Pointwise::param_count(width, 1)
            }
            CsaVariant::MlpConcatMlp => {
                let widths = cfg.selected_widths(channels);
                let common = *widths.iter().max().expect("non-empty selection");
                widths.iter().map(|&w| Pointwise::param_count(w, common)).sum::<usize>()
                    + Pointwise::param_count(common * widths.len(), 1)
            }
            CsaVariant::S4HeadMlp => Pointwise::param_count(channels[3], channels[3]) + Pointwise::param_count(channels[3], 1),
        }
    }

    /// Multiply-accumulate count for one image with `tokens` labels.
    pub fn macs(cfg: &CsaConfig, channels: &[usize; 4], tokens: usize) -> usize {
        match cfg.effective_variant() {
            CsaVariant::ConcatHeadMlp => {
                let width: usize = cfg.selected_widths(channels).iter().sum();
                Hamburger::macs(width, tokens, cfg.ham_rank, cfg.ham_updates) + width * tokens
            }
            CsaVariant::MlpConcatMlp => {
                let widths = cfg.selected_widths(channels);
                let common = *widths.iter().max().expect("non-empty selection");
                widths.iter().map(|&w| w * common * tokens).sum::<usize>() + common * widths.len() * tokens
            }
            CsaVariant::S4HeadMlp => channels[3] * channels[3] * tokens + channels[3] * tokens,
        }
    }

    pub fn config(&self) -> &CsaConfig {
        &self.cfg
    }

    pub fn variant(&self) -> CsaVariant {
        self.cfg.effective_variant()
    }

    fn gather(&self, s: &[Tensor], l: &[Tensor]) -> Result<Vec<Tensor>> {
        let pick = |list: &[Tensor], stage: usize| {
            list.get(stage - 1)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("csa: no feature for stage {stage}")))
        };
        let selected: Vec<Tensor> = match self.variant() {
            CsaVariant::S4HeadMlp => vec![pick(s, 4)?],
            _ => self
                .cfg
                .selection()
                .into_iter()
                .map(|(ling, stage)| pick(if ling { l } else { s }, stage))
                .collect::<Result<_>>()?,
        };
        let (b, t) = (selected[0].dim(0), selected[0].dim(2));
        if let Some(bad) = selected.iter().find(|x| x.rank() != 3 || x.dim(0) != b || x.dim(2) != t) {
            return Err(Error::ShapeMismatch {
                op: "csa",
                lhs: selected[0].shape().to_vec(),
                rhs: bad.shape().to_vec(),
            });
        }
        Ok(selected)
    }

    /// Per-label logits (B, T) from the stage features `s` = S_1..S_4 and `l` = L_1..L_4.
    pub fn forward(&self, s: &[Tensor], l: &[Tensor]) -> Result<Tensor> {
        let feats = self.gather(s, l)?;
        let (b, t) = (feats[0].dim(0), feats[0].dim(2));
        let out = match &self.head {
            Head::ConcatHeadMlp { ham, class } => class.forward(&ham.forward(&Tensor::concat(&feats, 1)?)?)?,
            Head::MlpConcatMlp { proj, fuse } => {
                let projected = feats
                    .iter()
                    .zip(proj)
                    .map(|(x, p)| Ok(p.forward(x)?.gelu()))
                    .collect::<Result<Vec<_>>>()?;
                fuse.forward(&Tensor::concat(&projected, 1)?)?
            }
            Head::S4HeadMlp { head, class } => class.forward(&head.forward(&feats[0])?.gelu())?,
        };
        out.reshape(&[b, t])
    }
}
