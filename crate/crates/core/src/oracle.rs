//! Closed-form optimal coefficients for predicting `Y` in the static SEM, and
//! a small least-squares fitter used to check them empirically.
//!
//! With `X = e1`, `Y = X + e2`, `Z = Y + e3` the three linear predictors of
//! `Y` (no intercept) are:
//!
//! * `Y ~ a1 X`: `a1 = 1`
//! * `Y ~ a2 Z`: `a2 = sigma2 / (sigma2 + 0.5)`
//! * `Y ~ a1 X + a2 Z`: `(1 / (sigma2 + 1), sigma2 / (sigma2 + 1))`
//!
//! Only the first is the same in every environment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semgen::{generate_static, SemConfig, SemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("design matrix is rank deficient (pivot {pivot:e} in column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error("bad least-squares input: {0}")]
    Input(String),
    #[error(transparent)]
    Sem(#[from] SemError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCoefficients {
    pub alpha1: f64,
    pub alpha2: f64,
}

fn check_sigma2(sigma2: f64) {
    assert!(sigma2 >= 0.0 && sigma2.is_finite(), "sigma2 must be finite and >= 0, got {sigma2}");
}

pub fn alpha1_only(sigma2: f64) -> f64 {
    check_sigma2(sigma2);
    1.0
}

pub fn alpha2_only(sigma2: f64) -> f64 {
    check_sigma2(sigma2);
    sigma2 / (sigma2 + 0.5)
}

pub fn joint(sigma2: f64) -> OracleCoefficients {
    check_sigma2(sigma2);
    let alpha1 = 1.0 / (sigma2 + 1.0);
    // 1 - alpha1 rather than sigma2 / (sigma2 + 1) keeps the sum exactly one
    OracleCoefficients { alpha1, alpha2: 1.0 - alpha1 }
}

/// Least squares via the normal equations `(X^T X) b = X^T y`, solved by
/// Gaussian elimination with partial pivoting. `design` is row-major `n x p`.
pub fn ols_fit(design: &[f64], n: usize, p: usize, target: &[f64]) -> Result<Vec<f64>, OracleError> {
    if p == 0 || n < p {
        return Err(OracleError::Input(format!("need n >= p >= 1, got n={n} p={p}")));
    }
    if design.len() != n * p || target.len() != n {
        return Err(OracleError::Input(format!(
            "design has {} values for {n}x{p}, target has {} for n={n}",
            design.len(),
            target.len()
        )));
    }
    // augmented [X^T X | X^T y]
    let w = p + 1;
    let mut a = vec![0.0; p * w];
    for (row, &y) in design.chunks_exact(p).zip(target) {
        for i in 0..p {
            for j in 0..p {
                a[i * w + j] += row[i] * row[j];
            }
            a[i * w + p] += row[i] * y;
        }
    }
    let scale = (0..p).map(|i| a[i * w + i].abs()).fold(0.0, f64::max);
    let tiny = scale.max(f64::MIN_POSITIVE) * 1e-12;

    for col in 0..p {
        let piv = (col..p).max_by(|&r, &s| a[r * w + col].abs().total_cmp(&a[s * w + col].abs())).unwrap();
        if a[piv * w + col].abs() <= tiny {
            return Err(OracleError::Singular { column: col, pivot: a[piv * w + col] });
        }
        if piv != col {
            for j in 0..w {
                a.swap(piv * w + j, col * w + j);
            }
        }
        for r in col + 1..p {
            let f = a[r * w + col] / a[col * w + col];
            for j in col..w {
                a[r * w + j] -= f * a[col * w + j];
            }
        }
    }
    let mut b = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|j| a[i * w + j] * b[j]).sum();
        b[i] = (a[i * w + p] - s) / a[i * w + i];
    }
    Ok(b)
}

/// OLS estimates of the three predictors on one static-SEM sample.
/// A fit is `None` when its design is singular, which happens for the ones
/// involving `X` at `sigma2 = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalFit {
    pub sigma2: f64,
    pub n: usize,
    pub alpha1_only: Option<f64>,
    pub alpha2_only: Option<f64>,
    pub joint: Option<OracleCoefficients>,
}

pub fn empirical_fit(sigma2: f64, n: usize, seed: u64) -> Result<EmpiricalFit, OracleError> {
    let s = generate_static(&SemConfig::static_model(sigma2, seed).with_length(n))?;
    let optional = |r: Result<Vec<f64>, OracleError>| match r {
        Ok(b) => Ok(Some(b)),
        Err(OracleError::Singular { .. }) => Ok(None),
        Err(e) => Err(e),
    };
    let (x, y, z) = (s.x(), s.y(), s.z());
    let a1 = optional(ols_fit(x, n, 1, y))?.map(|b| b[0]);
    let a2 = optional(ols_fit(z, n, 1, y))?.map(|b| b[0]);
    let xz: Vec<f64> = x.iter().zip(z).flat_map(|(&a, &b)| [a, b]).collect();
    let j = optional(ols_fit(&xz, n, 2, y))?.map(|b| OracleCoefficients { alpha1: b[0], alpha2: b[1] });
    Ok(EmpiricalFit { sigma2, n, alpha1_only: a1, alpha2_only: a2, joint: j })
}

/// One line of the closed-form vs. empirical comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub sigma2: f64,
    pub form: String,
    pub coefficient: String,
    pub closed_form: f64,
    pub empirical: Option<f64>,
    pub abs_error: Option<f64>,
    pub passed: bool,
}

/// Compares [`empirical_fit`] against the closed forms. Singular fits are
/// reported with `empirical = None` and count as passing, since there is
/// nothing to estimate.
pub fn compare(fit: &EmpiricalFit, tol: f64) -> Vec<OracleRow> {
    let s = fit.sigma2;
    let j = joint(s);
    let rows = [
        ("alpha1_only", "alpha1", alpha1_only(s), fit.alpha1_only),
        ("alpha2_only", "alpha2", alpha2_only(s), fit.alpha2_only),
        ("joint", "alpha1", j.alpha1, fit.joint.map(|c| c.alpha1)),
        ("joint", "alpha2", j.alpha2, fit.joint.map(|c| c.alpha2)),
    ];
    rows.into_iter()
        .map(|(form, coef, closed, emp)| {
            let err = emp.map(|e| (e - closed).abs());
            OracleRow {
                sigma2: s,
                form: form.into(),
                coefficient: coef.into(),
                closed_form: closed,
                empirical: emp,
                abs_error: err,
                passed: err.map_or(true, |e| e <= tol),
            }
        })
        .collect()
}
