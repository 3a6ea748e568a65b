use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Broadcast two shapes, numpy style (right-aligned, size-1 dims stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the (broadcast) input.
pub(crate) fn broadcast_offsets(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        let o = i + rank - input.len();
        strides[o] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// (d/da, d/db) at (a, b).
    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, op: Binary) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect();
        let (ac, bc) = (a.clone(), b.clone());
        return Ok(Tensor::from_op(data, a.shape().to_vec(), vec![a.clone(), b.clone()], move |g, _| {
            let (ad, bd) = (ac.data(), bc.data());
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                let (pa, pb) = op.partials(ad[i], bd[i]);
                ga.push(g[i] * pa);
                gb.push(g[i] * pb);
            }
            vec![ac.requires_grad().then_some(ga), bc.requires_grad().then_some(gb)]
        }));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let ia = broadcast_offsets(a.shape(), &out_shape);
    let ib = broadcast_offsets(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = ia.iter().zip(&ib).map(|(&i, &j)| op.apply(ad[i], bd[j])).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(data, out_shape, vec![a.clone(), b.clone()], move |g, _| {
        let (ad, bd) = (ac.data(), bc.data());
        let mut ga = vec![0.0; ad.len()];
        let mut gb = vec![0.0; bd.len()];
        for k in 0..g.len() {
            let (i, j) = (ia[k], ib[k]);
            let (pa, pb) = op.partials(ad[i], bd[j]);
            ga[i] += g[k] * pa;
            gb[j] += g[k] * pb;
        }
        vec![ac.requires_grad().then_some(ga), bc.requires_grad().then_some(gb)]
    }))
}

/// Which elementwise activation to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c (m,k) += a (m,n) . b(k,n)^T
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += s;
        }
    }
}

/// c (k,n) += a(m,k)^T . b (m,n)
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Div)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|x| x * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], |g, _| vec![Some(g.to_vec())])
    }

    /// Elementwise map with a caller-supplied derivative `df(x, f(x))`.
    pub fn map_with_grad(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], move |g, y| {
            let x = input.data();
            vec![Some((0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect())]
        })
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
            Activation::Gelu => self.gelu(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map_with_grad(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.map_with_grad(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Tensor {
        self.map_with_grad(gelu, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_with_grad(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        self.map_with_grad(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        self.map_with_grad(f64::exp, |_, y| y)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ar, br) = (self.rank(), other.rank());
        let (m, k) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (k2, n) = (other.shape()[br - 2], other.shape()[br - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &self.shape()[..ar - 2];
        let b_batch = &other.shape()[..br - 2];
        let batch = broadcast_shape(a_batch, b_batch).ok_or_else(mismatch)?;
        let a_off = broadcast_offsets(a_batch, &batch);
        let b_off = broadcast_offsets(b_batch, &batch);
        let nb = a_off.len();
        let mut data = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let a = &self.data()[a_off[bi] * m * k..(a_off[bi] + 1) * m * k];
            let b = &other.data()[b_off[bi] * k * n..(b_off[bi] + 1) * k * n];
            matmul_acc(a, b, &mut data[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, shape, vec![self.clone(), other.clone()], move |g, _| {
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![0.0; ac.numel()];
                for bi in 0..nb {
                    let b = &bc.data()[b_off[bi] * k * n..(b_off[bi] + 1) * k * n];
                    let gslice = &g[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut ga[a_off[bi] * m * k..(a_off[bi] + 1) * m * k];
                    matmul_nt_acc(gslice, b, dst, m, n, k);
                }
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![0.0; bc.numel()];
                for bi in 0..nb {
                    let a = &ac.data()[a_off[bi] * m * k..(a_off[bi] + 1) * m * k];
                    let gslice = &g[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut gb[b_off[bi] * k * n..(b_off[bi] + 1) * k * n];
                    matmul_tn_acc(a, gslice, dst, m, k, n);
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// (B, C, H, W) -> (B, C, H*W), row-major: (h, w) lands at h*W + w.
    pub fn flatten_spatial(&self) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "flatten_spatial",
                shape: self.shape().to_vec(),
                reason: "expected rank 4".into(),
            });
        }
        let s = self.shape();
        self.reshape(&[s[0], s[1], s[2] * s[3]])
    }

    pub fn unflatten_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        if self.rank() != 3 || self.shape()[2] != h * w {
            return Err(Error::InvalidShape {
                op: "unflatten_spatial",
                shape: self.shape().to_vec(),
                reason: format!("last axis must equal {h}x{w}"),
            });
        }
        let s = self.shape();
        self.reshape(&[s[0], s[1], h, w])
    }

    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose_last2",
                shape: self.shape().to_vec(),
                reason: "rank below 2".into(),
            });
        }
        let (m, n) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batches = self.numel() / (m * n);
        let transpose = move |src: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; src.len()];
            for b in 0..batches {
                let s = &src[b * rows * cols..(b + 1) * rows * cols];
                let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        d[j * rows + i] = s[i * cols + j];
                    }
                }
            }
            out
        };
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_op(transpose(self.data(), m, n), shape, vec![self.clone()], move |g, _| {
            vec![Some(transpose(g, n, m))]
        }))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let offsets = broadcast_offsets(self.shape(), shape);
        let data = offsets.iter().map(|&i| self.data()[i]).collect();
        let n_in = self.numel();
        Ok(Tensor::from_op(data, shape.to_vec(), vec![self.clone()], move |g, _| {
            let mut gi = vec![0.0; n_in];
            for (k, &i) in offsets.iter().enumerate() {
                gi[i] += g[k];
            }
            vec![Some(gi)]
        }))
    }

    /// Concatenates along `axis`, preserving argument order.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "concat", axis, rank });
        }
        for t in tensors {
            let same = t.rank() == rank
                && (0..rank).all(|d| d == axis || t.shape()[d] == first.shape()[d]);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let chunks: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
        let total_chunk: usize = chunks.iter().sum();
        let mut data = Vec::with_capacity(outer * total_chunk);
        for o in 0..outer {
            for (t, &c) in tensors.iter().zip(&chunks) {
                data.extend_from_slice(&t.data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_chunk / inner;
        Ok(Tensor::from_op(data, shape, tensors.to_vec(), move |g, _| {
            let mut grads: Vec<Vec<f64>> = chunks.iter().map(|&c| Vec::with_capacity(outer * c)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &c) in grads.iter_mut().zip(&chunks) {
                    gi.extend_from_slice(&g[pos..pos + c]);
                    pos += c;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Numerically stable softmax (max-subtracted) along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { op: "softmax", axis, rank: self.rank() });
        }
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer = self.numel() / (len * inner);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    y[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    y[at(l)] /= sum;
                }
            }
        }
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], move |g, y| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Gathers entries of the last axis in the order given by `index`.
    pub fn select_last(&self, index: &[usize]) -> Result<Tensor> {
        let last = *self.shape().last().ok_or_else(|| Error::InvalidShape {
            op: "select_last",
            shape: Vec::new(),
            reason: "scalar input".into(),
        })?;
        if let Some(&bad) = index.iter().find(|&&i| i >= last) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for axis of size {last}")));
        }
        if index.is_empty() {
            return Err(Error::InvalidArgument("empty selection".into()));
        }
        let rows = self.numel() / last;
        let k = index.len();
        let mut data = Vec::with_capacity(rows * k);
        for r in 0..rows {
            data.extend(index.iter().map(|&i| self.data()[r * last + i]));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = k;
        let index = index.to_vec();
        let n_in = self.numel();
        Ok(Tensor::from_op(data, shape, vec![self.clone()], move |g, _| {
            let mut gi = vec![0.0; n_in];
            for r in 0..rows {
                for (j, &i) in index.iter().enumerate() {
                    gi[r * last + i] += g[r * k + j];
                }
            }
            vec![Some(gi)]
        }))
    }

    /// Mean binary cross-entropy with logits against a 0/1 target tensor,
    /// evaluated as `max(z,0) - z*y + log1p(exp(-|z|))`.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor> {
        if self.shape() != targets.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument("bce targets must be 0 or 1".into()));
        }
        let n = self.numel() as f64;
        let loss: f64 = self
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let (zc, yc) = (self.clone(), targets.clone());
        Ok(Tensor::from_op(vec![loss], Vec::new(), vec![self.clone()], move |g, _| {
            let gz = zc
                .data()
                .iter()
                .zip(yc.data())
                .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                .collect();
            vec![Some(gz)]
        }))
    }
}
