use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    /// Valid output range along one axis for kernel offset `kk`, i.e. the
    /// outputs whose input coordinate `o*stride + kk - pad` lies in `0..len`.
    #[inline]
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kk = kk as isize;
        let lo = if p > kk { (p - kk + s - 1) / s } else { 0 };
        let hi_in = len as isize - 1 + p - kk;
        if hi_in < 0 {
            return (0, 0);
        }
        let hi = (hi_in / s + 1).min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    /// Visits every (input index, weight index, output index) triple.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, k, ho, wo) = (self.h, self.w, self.k, self.ho, self.wo);
        for b in 0..self.batch {
            for co in 0..self.cout {
                let g = co / self.cout_g;
                let out_base = (b * self.cout + co) * ho * wo;
                for cig in 0..self.cin_g {
                    let ci = g * self.cin_g + cig;
                    let in_base = (b * self.cin + ci) * h * w;
                    let w_base = (co * self.cin_g + cig) * k * k;
                    for kh in 0..k {
                        let (oh0, oh1) = self.valid(kh, h, ho);
                        for kw in 0..k {
                            let (ow0, ow1) = self.valid(kw, w, wo);
                            let wi = w_base + kh * k + kw;
                            for oh in oh0..oh1 {
                                let ih = oh * self.stride + kh - self.pad;
                                let row_in = in_base + ih * w;
                                let row_out = out_base + oh * wo;
                                for ow in ow0..ow1 {
                                    let iw = ow * self.stride + kw - self.pad;
                                    f(row_in + iw, wi, row_out + ow);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlation (no kernel flip). `x` is (B, Cin, H, W), `weight` is
    /// (Cout, Cin/groups, k, k), `bias` is (Cout).
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let err = |reason: String| Error::InvalidShape {
            op: "conv2d",
            shape: self.shape().to_vec(),
            reason,
        };
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let [batch, cin, h, w] = [self.dim(0), self.dim(1), self.dim(2), self.dim(3)];
        let [cout, cin_g, k, k2] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(err(format!("channels {cin}->{cout} not divisible by groups {groups}")));
        }
        if cin_g != cin / groups || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let (Some(ho), Some(wo)) = (spec.output_size(h, k), spec.output_size(w, k)) else {
            return Err(err(format!("non-positive output size for kernel {k}, padding {}", spec.padding)));
        };
        let geo = Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
            cin_g,
            cout_g: cout / groups,
        };
        let mut out = vec![0.0; batch * cout * ho * wo];
        if let Some(b) = bias {
            for (i, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.fill(b.data()[i % cout]);
            }
        }
        {
            let (xd, wd) = (self.data(), weight.data());
            geo.for_each(|xi, wi, oi| out[oi] += wd[wi] * xd[xi]);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (xc, wc) = (self.clone(), weight.clone());
        let bias_grad = bias.map(Tensor::requires_grad);
        Ok(Tensor::from_op(out, vec![batch, cout, ho, wo], parents, move |g, _| {
            let gx = xc.requires_grad().then(|| {
                let mut gx = vec![0.0; xc.numel()];
                let wd = wc.data();
                geo.for_each(|xi, wi, oi| gx[xi] += wd[wi] * g[oi]);
                gx
            });
            let gw = wc.requires_grad().then(|| {
                let mut gw = vec![0.0; wc.numel()];
                let xd = xc.data();
                geo.for_each(|xi, wi, oi| gw[wi] += xd[xi] * g[oi]);
                gw
            });
            let mut grads = vec![gx, gw];
            if let Some(needs) = bias_grad {
                grads.push(needs.then(|| {
                    let mut gb = vec![0.0; geo.cout];
                    for (i, chunk) in g.chunks(geo.ho * geo.wo).enumerate() {
                        gb[i % geo.cout] += chunk.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }))
    }
}
