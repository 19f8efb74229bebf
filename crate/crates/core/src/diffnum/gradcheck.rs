use super::{DiffError, Tape, Tensor, Var};

/// Lower bound on the denominator of the relative error, so that entries
/// whose true gradient is (near) zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// A probe is treated as straddling a kink (e.g. relu at 0) when the second
/// difference `|f(p+e) - 2f(p) + f(p-e)| / e` exceeds this fraction of
/// `max(1, |slope|)`. For smooth `f` that quantity is `e * |f''|`.
const KINK_THRESHOLD: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, flat element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Probes excluded because they straddle a non-differentiable point.
    pub skipped: usize,
    pub tol: f64,
    pub passed: bool,
    pub error: Option<String>,
}

impl GradCheckReport {
    fn failed(tol: f64, err: DiffError) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            max_abs_error: f64::INFINITY,
            worst: None,
            checked: 0,
            skipped: 0,
            tol,
            passed: false,
            error: Some(err.to_string()),
        }
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars = params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(DiffError::Contract(format!("checked function must be scalar, got {:?}", value.shape())));
    }
    Ok(value.item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)` for every element of
/// every parameter.
///
/// Never panics on a failing `f`: errors are recorded in the report.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let analytic = (|| {
        let mut tape = Tape::new();
        let vars = params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        Ok::<_, DiffError>(vars.iter().map(|&v| grads.wrt(v).clone()).collect::<Vec<_>>())
    })();
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => return GradCheckReport::failed(tol, e),
    };
    let base = match evaluate(&f, params) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failed(tol, e),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        tol,
        passed: true,
        error: None,
    };
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = probe[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + eps;
            let plus = evaluate(&f, &probe);
            probe[pi].data_mut()[ei] = orig - eps;
            let minus = evaluate(&f, &probe);
            probe[pi].data_mut()[ei] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.passed = false;
                    report.error = Some(e.to_string());
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let curvature = (plus - 2.0 * base + minus).abs() / eps;
            if curvature > KINK_THRESHOLD * numeric.abs().max(1.0) {
                report.skipped += 1;
                continue;
            }
            let a = grad.data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, ei));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}
