use std::collections::BTreeMap;

use graf_diffcore::{ParamStore, Scalar, Tensor};

use crate::error::{invalid, Result};

/// RMSprop: `acc ← ρ·acc + (1−ρ)·g²`, `p ← p − lr·g / (√acc + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rmsprop<T> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Running second moments, one per trainable parameter.
    pub acc: BTreeMap<String, Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> Rmsprop<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, decay: f64, eps: f64) -> Self {
        let acc = params
            .trainable()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self {
            lr,
            decay,
            eps,
            acc,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let (lr, rho, eps) = (
            T::from_f64_lossy(self.lr),
            T::from_f64_lossy(self.decay),
            T::from_f64_lossy(self.eps),
        );
        let one_minus = T::one() - rho;
        for (name, acc) in &self.acc {
            let g = grads
                .get(name)
                .ok_or_else(|| invalid(format!("no gradient for {name}")))?;
            let p = params
                .get(name)
                .ok_or_else(|| invalid(format!("no parameter {name}")))?;
            if g.shape() != acc.shape() || p.shape() != acc.shape() {
                return Err(invalid(format!(
                    "{name}: gradient {:?}, parameter {:?}, accumulator {:?}",
                    g.shape(),
                    p.shape(),
                    acc.shape()
                )));
            }
        }
        for (name, acc) in self.acc.iter_mut() {
            let g = &grads[name];
            let p = params.get_mut(name).expect("checked above");
            for ((a, pv), &gv) in acc.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *a = rho * *a + one_minus * gv * gv;
                *pv -= lr * gv / (a.sqrt() + eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}
