//! Central finite differences, used as an oracle for the tape.
//!
//! Nothing here touches [`crate::autodiff`]; `f` is evaluated on perturbed
//! copies of the input and nothing else.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude gradients are compared absolutely rather than
/// relatively; see [`rel_error`]. Central differences at the default step
/// resolve an O(1) loss to about 1e-10 absolute.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn fd_gradient<F>(f: F, at: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coords: Vec<usize> = (0..at.numel()).collect();
    let partial = fd_partials(f, at, step, &coords)?;
    Tensor::new(at.shape().to_vec(), partial)
}

/// Central differences for a subset of flat coordinates.
pub fn fd_partials<F>(mut f: F, at: &Tensor, step: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let base = at.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut probe = base.clone();
        probe[i] = base[i] + step;
        let plus = f(&Tensor::new(at.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i] - step;
        let minus = f(&Tensor::new(at.shape().to_vec(), probe)?)?;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| rel_error(x, y)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new([1], vec![3.0]).unwrap();
        let g = fd_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, DEFAULT_STEP).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sum_of_sines_at_zero() {
        let x = Tensor::zeros([5]);
        let g = fd_gradient(|t| Ok(t.data().iter().map(|v| v.sin()).sum()), &x, DEFAULT_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let x = Tensor::zeros([1]);
        assert!(fd_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(fd_gradient(|_| Ok(0.0), &x, f64::NAN).is_err());
    }
}
