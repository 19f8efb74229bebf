//! Frozen all-ones invariance head and the IRM objective for squared error.
//!
//! For a batch of logits `H` and targets `T` (`B` rows of `d*k` values) the
//! risk of the scaled prediction `w * H` is
//! `R(w) = 1/(B d k) * sum_b sum_ij (w_ij H_bij - T_bij)^2`, whose gradient at
//! `w = 1` is `g_ij = 2/(B d k) * sum_b (H_bij - T_bij) H_bij`. The penalty
//! `sum_ij g_ij^2` is written directly in terms of `H`, so training needs only
//! first-order gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{DiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvarianceError {
    #[error("invariance config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// The `d x k` all-ones multiplier. It holds no state that could be trained:
/// the weights are rebuilt as exact ones on every use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InvariantHead {
    pub d: usize,
    pub k: usize,
}

impl InvariantHead {
    pub fn new(d: usize, k: usize) -> Self {
        Self { d, k }
    }

    pub fn w_inv(&self) -> Tensor {
        Tensor::ones(&[self.d, self.k])
    }

    fn check(&self, shape: &[usize]) -> Result<(), DiffError> {
        let n = self.d * self.k;
        let ok = match shape {
            [a, b] => (*a, *b) == (self.d, self.k) || *b == n,
            [_, d, k] => (*d, *k) == (self.d, self.k),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(DiffError::dimension("apply_head", shape, &[self.d, self.k]))
        }
    }

    /// `H * w_inv` (Hadamard) on values: returns `H` unchanged.
    pub fn apply(&self, h: &Tensor) -> Result<Tensor, DiffError> {
        self.check(h.shape())?;
        Ok(h.map(|v| v * 1.0))
    }

    /// `H * w_inv` recorded on the tape, for `d x k`, `[B, d*k]` or `[B, d, k]` logits.
    pub fn apply_on(&self, tape: &mut Tape, h: Var) -> Result<Var, DiffError> {
        let shape = tape.value(h).shape().to_vec();
        self.check(&shape)?;
        let ones = tape.constant(Tensor::ones(&shape))?;
        tape.mul(h, ones)
    }
}

fn as_rows(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [b, rest @ ..] if !rest.is_empty() => (*b, rest.iter().product()),
        s => (1, s.iter().product()),
    }
}

fn check_pair(h: &[usize], t: &[usize]) -> Result<(), InvarianceError> {
    if h != t {
        return Err(DiffError::dimension("irm_penalty_mse", h, t).into());
    }
    Ok(())
}

/// Mean squared error of a batch of logits against targets.
pub fn risk_mse(h: &Tensor, targets: &Tensor) -> Result<f64, InvarianceError> {
    check_pair(h.shape(), targets.shape())?;
    let n = h.len() as f64;
    Ok(h.data().iter().zip(targets.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Squared norm of the risk gradient with respect to `w_inv` at `w_inv = 1`.
/// `h` and `targets` are `[B, ...]` batches; an empty batch is impossible to
/// represent, so the batch contract is checked through the shapes.
pub fn irm_penalty_mse(h: &Tensor, targets: &Tensor) -> Result<f64, InvarianceError> {
    check_pair(h.shape(), targets.shape())?;
    let (b, m) = as_rows(h);
    let scale = 2.0 / (b * m) as f64;
    let mut g = vec![0.0; m];
    for (hr, tr) in h.data().chunks(m).zip(targets.data().chunks(m)) {
        for ((gi, &hv), &tv) in g.iter_mut().zip(hr).zip(tr) {
            *gi += (hv - tv) * hv;
        }
    }
    Ok(g.iter().map(|s| (scale * s).powi(2)).sum())
}

/// Tape version of [`risk_mse`].
pub fn risk_mse_on(tape: &mut Tape, h: Var, targets: &Tensor) -> Result<Var, InvarianceError> {
    check_pair(tape.value(h).shape(), targets.shape())?;
    let t = tape.constant(targets.clone())?;
    let r = tape.sub(h, t)?;
    let sq = tape.square(r)?;
    Ok(tape.mean(sq)?)
}

/// Tape version of [`irm_penalty_mse`], differentiable in `h`.
pub fn irm_penalty_on(tape: &mut Tape, h: Var, targets: &Tensor) -> Result<Var, InvarianceError> {
    let shape = tape.value(h).shape().to_vec();
    check_pair(&shape, targets.shape())?;
    let (b, m) = as_rows(targets);
    let h2 = tape.reshape(h, &[b, m])?;
    let t = tape.constant(targets.reshape(&[b, m])?)?;
    let r = tape.sub(h2, t)?;
    let rh = tape.mul(r, h2)?;
    let g = tape.sum_rows(rh)?;
    let g = tape.scale(g, 2.0 / (b * m) as f64)?;
    let g2 = tape.square(g)?;
    Ok(tape.sum(g2)?)
}

fn check_lambda(lambda: f64) -> Result<(), InvarianceError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(InvarianceError::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// `sum_e risk_e + lambda * sum_e penalty_e` over `(logits, targets)` pairs,
/// one per environment. With `lambda == 0` no penalty is recorded, so the
/// result is the plain sum of risks.
pub fn irm_objective(tape: &mut Tape, envs: &[(Var, &Tensor)], lambda: f64) -> Result<Var, InvarianceError> {
    check_lambda(lambda)?;
    if envs.is_empty() {
        return Err(InvarianceError::Contract("irm_objective needs at least one environment".into()));
    }
    let mut total: Option<Var> = None;
    let mut penalty: Option<Var> = None;
    for &(h, t) in envs {
        let r = risk_mse_on(tape, h, t)?;
        total = Some(match total {
            None => r,
            Some(acc) => tape.add(acc, r)?,
        });
        if lambda > 0.0 {
            let p = irm_penalty_on(tape, h, t)?;
            penalty = Some(match penalty {
                None => p,
                Some(acc) => tape.add(acc, p)?,
            });
        }
    }
    let total = total.expect("nonempty");
    match penalty {
        Some(p) => {
            let p = tape.scale(p, lambda)?;
            Ok(tape.add(total, p)?)
        }
        None => Ok(total),
    }
}

/// Value-level [`irm_objective`].
pub fn irm_objective_value(envs: &[(&Tensor, &Tensor)], lambda: f64) -> Result<f64, InvarianceError> {
    check_lambda(lambda)?;
    if envs.is_empty() {
        return Err(InvarianceError::Contract("irm_objective needs at least one environment".into()));
    }
    let mut risk = 0.0;
    let mut pen = 0.0;
    for &(h, t) in envs {
        risk += risk_mse(h, t)?;
        if lambda > 0.0 {
            pen += irm_penalty_mse(h, t)?;
        }
    }
    Ok(if lambda > 0.0 { risk + lambda * pen } else { risk })
}

/// `lambda_pre` for the first `warmup_epochs` epochs, `lambda_main` after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda_pre: f64,
    pub lambda_main: f64,
    pub warmup_epochs: usize,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { lambda_pre: 1.0, lambda_main: 1e4, warmup_epochs: 10 }
    }
}

impl LambdaSchedule {
    pub const ZERO: LambdaSchedule = LambdaSchedule { lambda_pre: 0.0, lambda_main: 0.0, warmup_epochs: 0 };

    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.lambda_pre
        } else {
            self.lambda_main
        }
    }

    pub fn validate(&self) -> Result<(), InvarianceError> {
        check_lambda(self.lambda_pre)?;
        check_lambda(self.lambda_main)
    }
}
