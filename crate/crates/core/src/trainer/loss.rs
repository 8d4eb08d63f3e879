//! Non-saturating adversarial losses and the R1 input-gradient penalty.

use graf_diffcore::{Scalar, Tape, Var};

use crate::error::{invalid, Result};

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `f(t) = −log(1 + exp(−t))` evaluated literally.
pub fn f_objective(t: f64) -> f64 {
    -(1.0 + (-t).exp()).ln()
}

fn check_logits<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.shape(v).len() != 1 {
        return Err(invalid(format!(
            "{what} logits must be a vector, got {:?}",
            tape.shape(v)
        )));
    }
    Ok(())
}

/// `mean softplus(−D(real)) + mean softplus(D(fake)) + λ·r1`.
pub fn loss_discriminator<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var, r1: Var, lambda: f64) -> Result<Var> {
    check_logits(tape, real, "real")?;
    check_logits(tape, fake, "fake")?;
    let neg = tape.neg(real);
    let lr = tape.softplus(neg);
    let lr = tape.mean_all(lr)?;
    let lf = tape.softplus(fake);
    let lf = tape.mean_all(lf)?;
    let reg = tape.scale(r1, T::from_f64_lossy(lambda));
    let reg = tape.reshape(reg, &[])?;
    let sum = tape.add(lr, lf)?;
    Ok(tape.add(sum, reg)?)
}

/// `mean softplus(−D(fake))`.
pub fn loss_generator<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    check_logits(tape, fake, "fake")?;
    let neg = tape.neg(fake);
    let l = tape.softplus(neg);
    Ok(tape.mean_all(l)?)
}

/// Mean over the batch of `‖∂D/∂P‖²`, recorded so it can be differentiated
/// with respect to the discriminator parameters.
pub fn r1_penalty<T: Scalar>(tape: &mut Tape<T>, logits_real: Var, patches: Var) -> Result<Var> {
    let batch = tape.shape(patches).first().copied().unwrap_or(0);
    if batch == 0 {
        return Err(invalid("R1 penalty needs a non-empty batch"));
    }
    let total = tape.sum_all(logits_real)?;
    let g = tape.grad(total, &[patches])?[0];
    let sq = tape.square(g);
    let s = tape.sum_all(sq)?;
    Ok(tape.scale(s, T::one() / T::from_usize(batch).expect("batch size")))
}
