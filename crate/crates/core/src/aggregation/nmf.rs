//! Non-negative matrix factorization by multiplicative updates, and the
//! Hamburger global-context block built on it.

use crate::error::{Error, Result};
use crate::nn::Pointwise;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NMF_EPS: f64 = 1e-6;

/// Stream id for the NMF bases, so they never share draws with parameter init.
const BASES_STREAM: u64 = 0x4e4d_465f_4241_5345;

fn require_non_negative(name: &str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("nmf: {name} has entry {v}, expected >= 0")));
    }
    Ok(())
}

/// One pair of multiplicative updates for `X ≈ D C`:
/// `C ← C ⊙ DᵀX ⊘ (DᵀD C + eps)`, then `D ← D ⊙ XCᵀ ⊘ (D CCᵀ + eps)` with the new C.
/// X is (…, m, n), D is (…, m, r), C is (…, r, n); leading dims broadcast.
pub fn nmf_step(x: &Tensor, d: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
    require_non_negative("X", x)?;
    require_non_negative("D", d)?;
    require_non_negative("C", c)?;
    nmf_step_unchecked(x, d, c)
}

fn nmf_step_unchecked(x: &Tensor, d: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
    let dt = d.transpose_last2()?;
    let c = c.mul(&dt.matmul(x)?)?.div(&dt.matmul(d)?.matmul(c)?.add_scalar(NMF_EPS))?;
    let ct = c.transpose_last2()?;
    let d = d.mul(&x.matmul(&ct)?)?.div(&d.matmul(&c.matmul(&ct)?)?.add_scalar(NMF_EPS))?;
    Ok((d, c))
}

/// `‖X − D C‖_F` of a single (m, n) problem.
pub fn reconstruction_error(x: &Tensor, d: &Tensor, c: &Tensor) -> Result<f64> {
    let r = x.sub(&d.matmul(c)?)?;
    Ok(r.data().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Positive (m, r) bases with unit-norm columns, identical for every call with the same seed.
pub fn initial_bases(m: usize, r: usize, seed: u64) -> Tensor {
    let mut rng = Rng::derive(seed, BASES_STREAM);
    let mut d: Vec<f64> = (0..m * r).map(|_| rng.uniform_open()).collect();
    for j in 0..r {
        let norm = (0..m).map(|i| d[i * r + j] * d[i * r + j]).sum::<f64>().sqrt();
        (0..m).for_each(|i| d[i * r + j] /= norm);
    }
    Tensor::new(d, &[m, r]).expect("bases shape")
}

/// Lower bread → softplus → K unrolled NMF steps → upper bread, with a
/// residual connection around the whole block. Gradients flow through every
/// unrolled update.
#[derive(Clone, Debug)]
pub struct Hamburger {
    pub lower: Pointwise,
    pub upper: Pointwise,
    pub rank: usize,
    pub steps: usize,
    bases: Tensor,
}

impl Hamburger {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rank: usize,
        steps: usize,
        seed: u64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank == 0 || steps == 0 {
            return Err(Error::Config(format!("hamburger rank {rank} and steps {steps} must be positive")));
        }
        Ok(Self {
            lower: Pointwise::new(store, &format!("{name}.lower"), channels, channels, rng)?,
            upper: Pointwise::new(store, &format!("{name}.upper"), channels, channels, rng)?,
            rank,
            steps,
            bases: initial_bases(channels, rank, seed),
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * Pointwise::param_count(channels, channels)
    }

    /// Multiply-accumulate count for a (C', T) input.
    pub fn macs(channels: usize, tokens: usize, rank: usize, steps: usize) -> usize {
        let (m, n, r) = (channels, tokens, rank);
        let breads = 2 * m * m * n;
        let init = m * r * n;
        let per_step = r * m * n + r * r * m + r * r * n + m * n * r + r * r * n + m * r * r;
        let reconstruct = m * r * n;
        breads + init + steps * per_step + reconstruct
    }

    pub fn bases(&self) -> &Tensor {
        &self.bases
    }

    /// Non-negative reconstruction `D C` of the softplus-shifted input, before the upper bread.
    pub fn decompose(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.lower.forward(x)?.softplus();
        let mut d = self.bases.clone();
        let mut c = d.transpose_last2()?.matmul(&z)?.softmax(z.rank() - 2)?;
        for _ in 0..self.steps {
            (d, c) = nmf_step_unchecked(&z, &d, &c)?;
        }
        d.matmul(&c)
    }

    /// x is (B, C', T) or (C', T).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.add(&self.upper.forward(&self.decompose(x)?)?)
    }
}
