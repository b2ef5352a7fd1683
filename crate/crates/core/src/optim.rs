//! First-order optimizers over [`ParamSet`]s.

use crate::autodiff::{AutodiffError, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// Step count and, for Adam, first and second moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Option<ParamSet>,
    pub v: Option<ParamSet>,
}

/// One update `theta ← theta − lr · direction(grad)`; advances the step count.
pub fn step(
    opt: Optimizer,
    lr: f64,
    theta: &ParamSet,
    grad: &ParamSet,
    state: &OptimizerState,
) -> Result<(ParamSet, OptimizerState), AutodiffError> {
    if !theta.is_compatible(grad) {
        return Err(AutodiffError::IncompatibleParams(
            "gradient does not match parameter shapes".into(),
        ));
    }
    let t = state.t + 1;
    match opt {
        Optimizer::Sgd => Ok((theta.axpy(-lr, grad)?, OptimizerState { t, m: None, v: None })),
        Optimizer::Adam { beta1, beta2, eps } => {
            let zeros = || theta.zeros_like();
            let m0 = state.m.clone().unwrap_or_else(zeros);
            let v0 = state.v.clone().unwrap_or_else(zeros);
            let m = m0.zip_map(grad, |m, g| beta1 * m + (1.0 - beta1) * g)?;
            let v = v0.zip_map(grad, |v, g| beta2 * v + (1.0 - beta2) * g * g)?;
            let c1 = 1.0 - beta1.powi(t as i32);
            let c2 = 1.0 - beta2.powi(t as i32);
            let direction = m.zip_map(&v, |m, v| (m / c1) / ((v / c2).sqrt() + eps))?;
            Ok((
                theta.axpy(-lr, &direction)?,
                OptimizerState {
                    t,
                    m: Some(m),
                    v: Some(v),
                },
            ))
        }
    }
}
