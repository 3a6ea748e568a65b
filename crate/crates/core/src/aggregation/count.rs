use std::fmt;

use serde::Serialize;

use super::Csa;
use crate::config::ModelConfig;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::ivla::Ivla;

/// Trainable parameter and multiply-accumulate counts of a model.
///
/// `flops_per_image` splits into the part that scales with spatial area
/// (convolutions, attention over positions) and the part that depends only
/// on the label count (token maps and the head).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CountReport {
    pub params: usize,
    pub encoder_params: usize,
    pub head_params: usize,
    pub flops_per_image: usize,
    pub spatial_flops: usize,
    pub token_flops: usize,
}

impl fmt::Display for CountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "params: {}", self.params)?;
        writeln!(f, "encoder_params: {}", self.encoder_params)?;
        writeln!(f, "head_params: {}", self.head_params)?;
        writeln!(f, "flops_per_image: {}", self.flops_per_image)?;
        writeln!(f, "spatial_flops: {}", self.spatial_flops)?;
        write!(f, "token_flops: {}", self.token_flops)
    }
}

pub fn count_params_flops(cfg: &ModelConfig) -> Result<CountReport> {
    cfg.validate()?;
    let t = cfg.num_labels;
    let (h1, w1) = cfg.stage_size(1);
    let mut spatial = h1 * w1 * cfg.channels[0] * cfg.input_channels * 9;
    let mut token = cfg.linguistic_channels * cfg.channels[0] * t;
    for (i, sc) in cfg.stages().iter().enumerate() {
        let (h, w) = cfg.stage_size(sc.index);
        if i > 0 {
            let prev = cfg.channels[i - 1];
            spatial += h * w * sc.channels * prev * 9;
            token += prev * sc.channels * t;
        }
        let (v, l) = Ivla::macs(&sc.ivla, h * w, t);
        spatial += sc.num_blocks * v;
        token += sc.num_blocks * l;
    }
    // Layer and batch norms contribute no multiply-accumulates.
    token += Csa::macs(&cfg.csa, &cfg.channels, t);
    let encoder_params = Encoder::param_count(cfg);
    let head_params = Csa::param_count(&cfg.csa, &cfg.channels);
    Ok(CountReport {
        params: encoder_params + head_params,
        encoder_params,
        head_params,
        flops_per_image: spatial + token,
        spatial_flops: spatial,
        token_flops: token,
    })
}
