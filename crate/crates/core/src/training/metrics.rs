use crate::diffnum::{DiffError, Tensor};

fn check(pred: &Tensor, truth: &Tensor, op: &'static str) -> Result<(), DiffError> {
    if pred.shape() != truth.shape() {
        return Err(DiffError::dimension(op, pred.shape(), truth.shape()));
    }
    Ok(())
}

/// Mean of squared differences over every element.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64, DiffError> {
    check(pred, truth, "mse")?;
    Ok(pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Mean of absolute differences over every element.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64, DiffError> {
    check(pred, truth, "mae")?;
    Ok(pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Running sums for metrics accumulated batch by batch.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ErrorSums {
    sq: f64,
    abs: f64,
    n: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &[f64], truth: &[f64]) {
        for (p, t) in pred.iter().zip(truth) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.n += pred.len();
    }

    pub fn mse(&self) -> f64 {
        self.sq / self.n as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs / self.n as f64
    }
}
