//! Central finite-difference certification of analytic gradients.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::param::Param;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
    /// Location of the worst coordinate: (label, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Coordinates of a check, scored together once the gradient scale is known.
#[derive(Default)]
struct Samples(Vec<(String, usize, f64, f64)>);

impl Samples {
    fn push(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        self.0.push((label.to_string(), index, analytic, numeric));
    }

    fn report(self, tol: f64) -> GradCheckReport {
        let scale = self.0.iter().fold(0.0f64, |m, s| m.max(s.3.abs()));
        let floor = (SCALE_FRACTION * scale).max(MIN_FLOOR);
        let mut report = GradCheckReport { max_rel_err: 0.0, checked: self.0.len(), pass: true, worst: None };
        for s in self.0 {
            let err = relative_error(s.2, s.3, floor);
            if !(err <= tol) {
                report.pass = false;
            }
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(s);
            }
        }
        report
    }
}

/// Fraction of the largest numeric gradient entry below which a coordinate
/// is judged against the gradient's scale rather than its own magnitude.
/// Central differences carry rounding noise of order ε·|f|/h, so entries
/// that are structurally zero (a bias feeding a normalization) come back as
/// ~1e-10 and cannot be compared relatively.
pub const SCALE_FRACTION: f64 = 1e-3;
const MIN_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Times a disagreeing central difference is retried with a step ten times
/// smaller. A correct gradient only disagrees at step h when a kink (ReLU
/// switch) lies within h of the point; a wrong one disagrees at every step.
pub const REFINEMENTS: u32 = 2;

/// Central difference of `eval` (which returns `f(x + d)` for offset `d`),
/// refined towards smaller steps while it disagrees with `analytic`.
fn central(mut eval: impl FnMut(f64) -> Result<f64>, analytic: f64, step: f64, tol: f64) -> Result<f64> {
    let mut estimate = |h: f64| -> Result<f64> { Ok((eval(h)? - eval(-h)?) / (2.0 * h)) };
    let first = estimate(step)?;
    let mut h = step;
    let mut numeric = first;
    for _ in 0..REFINEMENTS {
        if relative_error(analytic, numeric, MIN_FLOOR) <= tol {
            return Ok(numeric);
        }
        h /= 10.0;
        numeric = estimate(h)?;
    }
    Ok(if relative_error(analytic, numeric, MIN_FLOOR) <= tol { numeric } else { first })
}

fn scalar_of(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::NonScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares the backward pass of scalar `f` at `x` with
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`, refining
/// `h` past kinks (see [`REFINEMENTS`]).
pub fn grad_check(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport> {
    let var = Tensor::variable(x.to_vec(), x.shape())?;
    let out = f(&var)?;
    scalar_of(&out)?;
    out.backward()?;
    let analytic = var.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut samples = Samples::default();
    no_grad(|| -> Result<()> {
        for i in 0..x.numel() {
            let eval = |d: f64| {
                let mut moved = x.to_vec();
                moved[i] += d;
                scalar_of(&f(&Tensor::new(moved, x.shape())?)?)
            };
            samples.push("x", i, analytic[i], central(eval, analytic[i], step, tol)?);
        }
        Ok(())
    })?;
    Ok(samples.report(tol))
}

/// Finite-difference check of `loss` with respect to model parameters.
///
/// With `max_coords = Some(n)`, at most `n` coordinates per parameter are
/// checked, drawn from `rng` without replacement.
pub fn grad_check_params(
    loss: impl Fn() -> Result<Tensor>,
    params: &[std::rc::Rc<Param>],
    step: f64,
    tol: f64,
    max_coords: Option<usize>,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let out = loss()?;
    scalar_of(&out)?;
    out.backward()?;
    let mut samples = Samples::default();
    for p in params.iter().filter(|p| p.trainable()) {
        let value = p.value();
        let analytic = value.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; value.numel()]);
        let mut coords: Vec<usize> = (0..value.numel()).collect();
        if let Some(n) = max_coords {
            if coords.len() > n {
                rng.shuffle(&mut coords);
                coords.truncate(n);
                coords.sort_unstable();
            }
        }
        let base = value.to_vec();
        for &i in &coords {
            let eval = |d: f64| {
                let mut moved = base.clone();
                moved[i] += d;
                p.set_data(moved)?;
                let value = no_grad(|| loss().and_then(|t| scalar_of(&t)));
                p.set_data(base.clone())?;
                value
            };
            let numeric = central(eval, analytic[i], step, tol)?;
            samples.push(p.name(), i, analytic[i], numeric);
        }
    }
    Ok(samples.report(tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let n = shape.iter().product();
        Tensor::new(rng.vec_uniform(n, -1.0, 1.0), shape).unwrap()
    }

    #[test]
    fn tanh_sum_passes() {
        let r = grad_check(|x| Ok(x.tanh().sum()), &random(&[3, 3], 1), 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 9);
    }

    #[test]
    fn linear_map_is_exact() {
        let w = random(&[3, 3], 2);
        let r = grad_check(|x| Ok(x.mul(&w)?.sum()), &random(&[3, 3], 3), 1e-5, 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_backward_is_caught() {
        let bad = |x: &Tensor| Ok(x.map_with_grad(f64::sin, |x, _| 2.0 * x.cos()).sum());
        let r = grad_check(bad, &random(&[2, 2], 4), 1e-5, 1e-4).unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_err > 0.4);
    }

    #[test]
    fn small_wrong_coordinate_is_caught() {
        // wrong by 1% on a coordinate one tenth of the largest gradient
        let w = Tensor::new(vec![1.0, 0.1], &[2]).unwrap();
        let bad = |x: &Tensor| Ok(x.map_with_grad(|v| v, |v, _| if v < 0.0 { 1.01 } else { 1.0 }).mul(&w)?.sum());
        let x = Tensor::new(vec![0.5, -0.5], &[2]).unwrap();
        let r = grad_check(bad, &x, 1e-5, 1e-4).unwrap();
        assert!(!r.pass, "{r:?}");
        assert_eq!(r.worst.unwrap().1, 1);
    }

    #[test]
    fn kink_inside_the_step_is_refined_away() {
        // |x| at 3e-6: the step 1e-5 straddles the kink, 1e-6 does not
        let x = Tensor::new(vec![3e-6, 0.7], &[2]).unwrap();
        let r = grad_check(|x| Ok(x.relu().add(&x.scale(-1.0).relu())?.sum()), &x, 1e-5, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        assert!(matches!(
            grad_check(|x| Ok(x.tanh()), &random(&[2], 5), 1e-5, 1e-4),
            Err(Error::NonScalar(_))
        ));
    }
}
