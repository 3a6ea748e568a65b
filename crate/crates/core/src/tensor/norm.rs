use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Which axes a normalization reduces over, for (B, C, ...) tensors.
///
/// - `Layer`: the channel axis, per batch item and position.
/// - `Batch`: batch and every spatial axis, per channel.
/// - `Instance`: every spatial axis, per batch item and channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Batch,
    Instance,
}

impl NormKind {
    pub(crate) fn axes(self, rank: usize) -> Result<Vec<usize>> {
        let axes: Vec<usize> = match self {
            NormKind::Layer => vec![1],
            NormKind::Batch => std::iter::once(0).chain(2..rank).collect(),
            NormKind::Instance => (2..rank).collect(),
        };
        if rank < 2 || axes.is_empty() {
            return Err(Error::InvalidArgument(format!("{self:?} normalization needs more axes than rank {rank}")));
        }
        Ok(axes)
    }
}

/// Group id of every element when reducing over `axes`.
fn group_ids(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let rank = shape.len();
    let mut strides = vec![0; rank];
    let mut groups = 1;
    for d in (0..rank).rev() {
        if !axes.contains(&d) {
            strides[d] = groups;
            groups *= shape[d];
        }
    }
    let total: usize = shape.iter().product();
    let mut ids = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    let mut id = 0;
    for _ in 0..total {
        ids.push(id);
        for d in (0..rank).rev() {
            idx[d] += 1;
            id += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            id -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    (ids, groups)
}

fn group_moments(x: &[f64], ids: &[usize], groups: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (x.len() / groups) as f64;
    let mut mean = vec![0.0; groups];
    for (&v, &g) in x.iter().zip(ids) {
        mean[g] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; groups];
    for (&v, &g) in x.iter().zip(ids) {
        let d = v - mean[g];
        var[g] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Per-group mean and biased variance when reducing over `axes`.
pub(crate) fn moments(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (ids, groups) = group_ids(shape, axes);
    group_moments(x, &ids, groups)
}

impl Tensor {
    /// Zero-mean, unit-variance normalization over the axes selected by
    /// `kind`, without affine parameters: `(x - mean) / sqrt(var + eps)`.
    pub fn normalize(&self, kind: NormKind, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("normalization eps must be positive, got {eps}")));
        }
        let axes = kind.axes(self.rank())?;
        let (ids, groups) = group_ids(self.shape(), &axes);
        let count = self.numel() / groups;
        let x = self.data();
        let (mean, var) = group_moments(x, &ids, groups);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y: Vec<f64> = x.iter().zip(&ids).map(|(&v, &g)| (v - mean[g]) * inv_std[g]).collect();
        let ids = Rc::new(ids);
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g, y| {
            let mut g_mean = vec![0.0; groups];
            let mut gy_mean = vec![0.0; groups];
            for i in 0..g.len() {
                g_mean[ids[i]] += g[i];
                gy_mean[ids[i]] += g[i] * y[i];
            }
            let n = count as f64;
            let gx = (0..g.len())
                .map(|i| {
                    let k = ids[i];
                    inv_std[k] * (g[i] - g_mean[k] / n - y[i] * gy_mean[k] / n)
                })
                .collect();
            vec![Some(gx)]
        }))
    }
}
