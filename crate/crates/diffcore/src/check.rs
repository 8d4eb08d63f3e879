//! Central finite-difference gradient checks.

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub coords: usize,
}

fn evaluate<T: Scalar, F>(f: &F, xs: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.numel() != 1 {
        return Err(DiffError::NonScalarRoot {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Checks the tape gradient of scalar `f` at `x` against central differences.
pub fn finite_diff_check<T: Scalar, F>(f: F, x: &Tensor<T>, step: T) -> Result<f64>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    finite_diff_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), step).map(|r| r.max_rel_error)
}

/// Multi-input variant: every coordinate of every input is probed.
pub fn finite_diff_check_multi<T: Scalar, F>(f: F, xs: &[Tensor<T>], step: T) -> Result<FdReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base = tape.value(root).clone();
    let grads = tape.grad(root, &vars)?;
    let analytic: Vec<Tensor<T>> = grads.iter().map(|&g| tape.value(g).clone()).collect();
    drop(tape);

    let again = evaluate(&f, xs)?;
    let third = evaluate(&f, xs)?;
    if again.to_bits_f64() != base.item().to_bits_f64() || again.to_bits_f64() != third.to_bits_f64() {
        return Err(DiffError::NonDeterministic);
    }

    let mut probe: Vec<Tensor<T>> = xs.to_vec();
    let two_h = (step + step).to_f64_lossy();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords: 0,
    };
    for (i, x) in xs.iter().enumerate() {
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = evaluate(&f, &probe)?.to_f64_lossy();
            probe[i].data_mut()[j] = orig - step;
            let minus = evaluate(&f, &probe)?.to_f64_lossy();
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / two_h;
            let a = analytic[i].data()[j].to_f64_lossy();
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coords += 1;
        }
    }
    Ok(report)
}

trait Bits {
    fn to_bits_f64(self) -> u64;
}

impl<T: Scalar> Bits for T {
    fn to_bits_f64(self) -> u64 {
        self.to_f64_lossy().to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn exp_at_zero_is_exact_enough() {
        let err = finite_diff_check(
            |tape, x| {
                let e = tape.exp(x);
                tape.sum_all(e)
            },
            &Tensor::<f64>::zeros(vec![4]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let counter = Cell::new(0.0);
        let err = finite_diff_check(
            |tape, x| {
                counter.set(counter.get() + 1.0);
                let s = tape.sum_all(x)?;
                Ok(tape.add_scalar(s, counter.get()))
            },
            &Tensor::<f64>::zeros(vec![2]),
            1e-5,
        )
        .unwrap_err();
        assert_eq!(err, DiffError::NonDeterministic);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // A function whose recorded graph lies about its derivative: the
        // forward value uses x², the tape sees 3·x.
        let report = finite_diff_check_multi(
            |tape, xs| {
                let v = tape.value(xs[0]).map(|x| x * x);
                let c = tape.constant(v);
                let lin = tape.scale(xs[0], 3.0);
                let zero_lin = tape.scale(lin, 0.0);
                let y = tape.add(c, lin)?;
                let y = tape.sub(y, lin)?;
                let y = tape.add(y, zero_lin)?;
                let y = tape.add(y, lin)?;
                tape.sum_all(y)
            },
            &[Tensor::from_f64(vec![1], &[2.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        // analytic 3, numeric 2·2 + 3 = 7
        assert!(report.max_rel_error > 1.0);
    }
}
