//! Parameterized layers shared by the encoder and the aggregation head.

use crate::error::{Error, Result};
use crate::param::{Init, ParamRef, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Conv2dSpec, NormKind, Tensor};

/// Epsilon for every normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Standard deviation of truncated-normal weight init.
pub const WEIGHT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 1x1 convolution: a channel-mixing linear map applied per position/token.
/// Accepts (Cin, N), (B, Cin, N) or (B, Cin, H, W).
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: store.param(format!("{name}.weight"), &[cout, cin], Init::TruncatedNormal(WEIGHT_STD), rng)?,
            bias: store.param(format!("{name}.bias"), &[cout], Init::Zeros, rng)?,
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        cin * cout + cout
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cout = self.out_channels();
        let bias = self.bias.value().reshape(&[cout, 1])?;
        match x.rank() {
            2 | 3 => self.weight.value().matmul(x)?.add(&bias),
            4 => {
                let s = x.shape().to_vec();
                let y = self.weight.value().matmul(&x.flatten_spatial()?)?.add(&bias)?;
                y.unflatten_spatial(s[2], s[3])
            }
            _ => Err(Error::InvalidShape {
                op: "pointwise",
                shape: x.shape().to_vec(),
                reason: "expected rank 2, 3 or 4".into(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamRef,
    pub bias: Option<ParamRef>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv {name}: channels {cin}->{cout} not divisible by groups {}",
                spec.groups
            )));
        }
        let weight = store.param(
            format!("{name}.weight"),
            &[cout, cin / spec.groups, kernel, kernel],
            Init::TruncatedNormal(WEIGHT_STD),
            rng,
        )?;
        let bias = if bias {
            Some(store.param(format!("{name}.bias"), &[cout], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize, groups: usize, bias: bool) -> usize {
        cout * (cin / groups) * kernel * kernel + if bias { cout } else { 0 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bias = self.bias.as_ref().map(|b| b.value());
        x.conv2d(&self.weight.value(), bias.as_ref(), self.spec)
    }
}

/// Affine reshaped so it broadcasts along axis 1 of a rank-`rank` tensor.
fn channel_view(p: &ParamRef, rank: usize) -> Result<Tensor> {
    let mut shape = vec![1; rank];
    shape[1] = p.numel();
    p.value().reshape(&shape)
}

/// Layer normalization over the channel axis with a learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            gamma: store.param(format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: store.param(format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        x.normalize(NormKind::Layer, NORM_EPS)?
            .mul(&channel_view(&self.gamma, r)?)?
            .add(&channel_view(&self.beta, r)?)
    }
}

/// Batch normalization for (B, C, H, W) with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub running_mean: ParamRef,
    pub running_var: ParamRef,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            gamma: store.param(format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: store.param(format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
            running_mean: store.buffer(format!("{name}.running_mean"), &[channels], vec![0.0; channels])?,
            running_var: store.buffer(format!("{name}.running_var"), &[channels], vec![1.0; channels])?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// estimates (unbiased variance, momentum 0.1); eval mode uses the
    /// running estimates.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.gamma.numel();
        if x.rank() != 4 || x.dim(1) != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape().to_vec(),
                rhs: vec![c],
            });
        }
        let normalized = match mode {
            Mode::Train => {
                let axes = NormKind::Batch.axes(4)?;
                let (mean, var) = crate::tensor::moments(x.data(), x.shape(), &axes);
                let n = (x.numel() / c) as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = self.running_mean.value();
                let rv = self.running_var.value();
                let new_mean = (0..c).map(|i| (1.0 - BN_MOMENTUM) * rm.data()[i] + BN_MOMENTUM * mean[i]).collect();
                let new_var =
                    (0..c).map(|i| (1.0 - BN_MOMENTUM) * rv.data()[i] + BN_MOMENTUM * var[i] * unbias).collect();
                self.running_mean.set_data(new_mean)?;
                self.running_var.set_data(new_var)?;
                x.normalize(NormKind::Batch, NORM_EPS)?
            }
            Mode::Eval => {
                let mean = channel_view(&self.running_mean, 4)?;
                let inv_std: Vec<f64> =
                    self.running_var.value().data().iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                x.sub(&mean)?.mul(&Tensor::new(inv_std, &[1, c, 1, 1])?)?
            }
        };
        normalized.mul(&channel_view(&self.gamma, 4)?)?.add(&channel_view(&self.beta, 4)?)
    }
}
