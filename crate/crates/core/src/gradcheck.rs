//! Central finite-difference gradient checking in float64.

use candle_core::{Tensor, Var};
use rand::Rng;

use crate::ops::to_f64_vec;
use crate::rng::seeded_rng;
use crate::{Error, Result};

pub const STEP: f64 = 1e-5;
/// Smallest magnitude used as the relative-error denominator, so components whose true
/// value is zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const COORDS: usize = 100;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    let v = to_f64_vec(t)?;
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::shape(format!("objective must be a scalar, got {:?}", t.dims()))),
    }
}

fn perturbed(base: &[f64], at: usize, delta: f64, like: &Tensor) -> Result<Tensor> {
    let mut v = base.to_vec();
    v[at] += delta;
    Ok(Tensor::from_vec(v, like.dims(), like.device())?.to_dtype(like.dtype())?)
}

/// Compares the back-propagated gradient of the scalar `f` with central differences at
/// `coords` coordinates drawn uniformly over all elements of `vars`. Every variable is
/// restored before returning.
pub fn check<F>(mut f: F, vars: &[Var], coords: usize, seed: u64) -> Result<GradReport>
where
    F: FnMut() -> Result<Tensor>,
{
    let sizes: Vec<usize> = vars.iter().map(|v| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("gradient check over no elements".into()));
    }
    let grads = f()?.backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| match grads.get(v.as_tensor()) {
            Some(g) => to_f64_vec(g),
            None => Ok(vec![0.0; v.elem_count()]),
        })
        .collect::<Result<_>>()?;
    drop(grads);

    let mut rng = seeded_rng(seed, "gradcheck");
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let var = &vars[which];
        let original = var.as_tensor().detach().copy()?;
        let base = to_f64_vec(&original)?;
        var.set(&perturbed(&base, flat, STEP, &original)?)?;
        let plus = scalar(&f()?);
        var.set(&perturbed(&base, flat, -STEP, &original)?)?;
        let minus = scalar(&f()?);
        var.set(&original)?;
        let numeric = (plus? - minus?) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[which][flat], numeric));
    }
    Ok(GradReport {
        max_rel_error: worst,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn polynomial_gradient_passes() {
        let x = Var::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let r = check(|| Ok((x.as_tensor().powf(3.0)? * 0.5)?.sum_all()?), &[x.clone()], 20, 0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(x.as_tensor().to_vec1::<f64>().unwrap(), vec![0.3, -1.2, 2.0]);
    }

    #[test]
    fn detached_path_is_caught() {
        let x = Var::new(&[0.5f64, 1.5], &Device::Cpu).unwrap();
        let r = check(
            || Ok((x.as_tensor().sqr()?.detach() + x.as_tensor())?.sum_all()?),
            &[x.clone()],
            10,
            0,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-15);
    }
}
