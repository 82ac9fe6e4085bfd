//! Central finite-difference verification of tape gradients.
//!
//! Runs in `f64`: the probe step sits around 1e-5, and `f32` rounding noise
//! at that scale would swamp the tolerances being enforced.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error between analytic and numeric derivatives, guarded against
/// tiny denominators.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar-valued `f` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h` per element and returns the maximum
/// relative error.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let y = f(&mut tape, x)?;
        if tape.value(y).numel() != 1 {
            return Err(Error::InvalidArgument("grad_check function must be scalar-valued".into()));
        }
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe produced a non-finite value".into()));
        }
        Ok(v)
    };

    // Analytic gradient from one taped evaluation.
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::InvalidArgument("grad_check function must be scalar-valued".into()));
    }
    if !tape.value(y).item().is_finite() {
        return Err(Error::NonFinite("grad_check center evaluation is non-finite".into()));
    }
    let grads = tape.backward(y)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; point.numel()],
    };

    let mut max_rel = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for i in 0..point.numel() {
        let v = point.data()[i];
        let fp = eval(&point.with_element(i, v + step))?;
        let fm = eval(&point.with_element(i, v - step))?;
        let numeric = (fp - fm) / (2.0 * step);
        max_rel = max_rel.max(relative_error(analytic[i], numeric));
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        // Closed form: d/dx sum(x^2) = [2, 4].
        let mut tape = Tape::new();
        let x = tape.leaf(point.clone());
        let sq = tape.square(x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

        let err = grad_check(
            |t, x| {
                let sq = t.square(x)?;
                t.sum_all(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let point = Tensor::new(vec![3], vec![0.4, -1.5, 2.0]).unwrap();
        let err = grad_check(|t, x| t.sum_all(x), &point, 1e-5).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn conv_sigmoid_sum_chain() {
        let point = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 37 % 17) as f64 - 8.0) / 9.0);
        let err = grad_check(
            |t, x| {
                let w = t.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 11) as f64 - 5.0) / 7.0));
                let b = t.constant(Tensor::from_fn(&[3], |i| i as f64 * 0.1 - 0.1));
                // weights held fixed; checking d/d input
                let wl = t.leaf(t.value(w).clone());
                let bl = t.leaf(t.value(b).clone());
                let y = t.conv2d(x, wl, bl, 1, 1)?;
                let s = t.sigmoid(y)?;
                t.sum_all(s)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let point = Tensor::new(vec![1], vec![0.0]).unwrap();
        // 1/x at 0 explodes under perturbation in one direction.
        let r = grad_check(
            |t, x| {
                let sq = t.square(x)?;
                let lg = t.unary(sq, crate::tape::UnaryKind::Log)?;
                t.sum_all(lg)
            },
            &point,
            1e-5,
        );
        assert!(r.is_err());
    }
}
