use serde::{Deserialize, Serialize};

use super::{Adam, TrainError};
use crate::diffnum::{Tape, Tensor, Var};
use crate::invariance::{irm_objective, LambdaSchedule};
use crate::models::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub final_loss: f64,
}

/// Full-batch training of a linear featurizer `H = design * a` (no
/// intercept, `a` starting at zero) on the IRM objective. Each environment
/// is a `[n, p]` design with an `[n, 1]` target. Use
/// [`LambdaSchedule::ZERO`] for plain ERM.
pub fn fit_linear(
    envs: &[(Tensor, Tensor)],
    schedule: LambdaSchedule,
    epochs: usize,
    steps_per_epoch: usize,
    learning_rate: f64,
) -> Result<LinearFit, TrainError> {
    let p = envs.first().ok_or_else(|| TrainError::Config("no environments".into()))?.0.cols();
    schedule.validate()?;
    let mut params = ParamStore::new();
    params.add("a", Tensor::zeros(&[p, 1]));
    let mut opt = Adam::new(learning_rate);
    let mut final_loss = f64::NAN;
    for epoch in 0..epochs {
        let lambda = schedule.at(epoch);
        for _ in 0..steps_per_epoch {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape)?;
            let mut hs: Vec<Var> = Vec::with_capacity(envs.len());
            for (x, _) in envs {
                let x = tape.constant(x.clone())?;
                hs.push(tape.matmul(x, vars[0])?);
            }
            let pairs: Vec<(Var, &Tensor)> = hs.iter().copied().zip(envs.iter().map(|e| &e.1)).collect();
            let loss = irm_objective(&mut tape, &pairs, lambda)?;
            final_loss = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let g = grads.wrt(vars[0]);
            if !g.is_finite() {
                return Err(TrainError::Diverged { epoch, lr: learning_rate, detail: "non-finite gradient".into() });
            }
            opt.step(&mut params, &[g]);
        }
    }
    Ok(LinearFit { coefficients: params.tensors()[0].data().to_vec(), final_loss })
}
