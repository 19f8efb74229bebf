use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use invarcast_core::oracle::{compare, empirical_fit, OracleRow};
use invarcast_core::semgen::{generate_env_suite, DEFAULT_STATIC_LENGTH};

use crate::config::ExperimentConfig;
use crate::data::synthetic_specs;
use crate::Invalid;

pub const MANIFEST: &str = "manifest.csv";
pub const ORACLE_SIGMA2: [f64; 4] = [0.1, 0.5, 1.0, 2.0];
pub const ORACLE_TOLERANCE: f64 = 0.02;

/// Writes `<env_id>.csv` per environment and `manifest.csv`
/// (`env_id,sigma2,seed,role`, where `seed` is the generator stream seed).
pub fn synth_gen(config: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<String>> {
    let specs = synthetic_specs(config)?;
    let samples = generate_env_suite(&specs)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    for sample in &samples {
        let name = format!("{}.csv", sample.env_id);
        let path = out.join(&name);
        let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        sample.write_csv(BufWriter::new(file), true)?;
        written.push(name);
    }
    let path = out.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["env_id", "sigma2", "seed", "role"])?;
    for spec in &specs {
        w.write_record([spec.env_id.clone(), spec.config.sigma2.to_string(), spec.stream_seed().to_string(), spec.role.to_string()])?;
    }
    w.flush()?;
    written.push(MANIFEST.into());
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct OracleOptions {
    pub sigma2: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { sigma2: ORACLE_SIGMA2.to_vec(), samples: DEFAULT_STATIC_LENGTH, seed: 0, tolerance: ORACLE_TOLERANCE }
    }
}

/// Closed-form versus least-squares coefficients for each variance.
pub fn oracle_check(opts: &OracleOptions) -> anyhow::Result<Vec<OracleRow>> {
    if let Some(bad) = opts.sigma2.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Invalid(format!("sigma2 must be finite and >= 0, got {bad}")).into());
    }
    if opts.samples < 2 || !(opts.tolerance >= 0.0) {
        return Err(Invalid("oracle check needs samples >= 2 and tolerance >= 0".into()).into());
    }
    let mut rows = Vec::new();
    for (i, &s) in opts.sigma2.iter().enumerate() {
        let fit = empirical_fit(s, opts.samples, opts.seed.wrapping_add(i as u64))?;
        rows.extend(compare(&fit, opts.tolerance));
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.prec$}"))
}

pub fn write_oracle_table(rows: &[OracleRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{:>7}  {:<12} {:<11} {:>11} {:>11} {:>9}  status", "sigma2", "form", "coefficient", "closed_form", "empirical", "abs_error")?;
    for r in rows {
        writeln!(
            out,
            "{:>7}  {:<12} {:<11} {:>11.4} {:>11} {:>9}  {}",
            r.sigma2,
            r.form,
            r.coefficient,
            r.closed_form,
            fmt_opt(r.empirical, 4),
            fmt_opt(r.abs_error, 4),
            if r.passed { "pass" } else { "FAIL" }
        )?;
    }
    Ok(())
}

pub fn write_oracle_csv(rows: &[OracleRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma2", "form", "coefficient", "closed_form", "empirical", "abs_error", "passed"])?;
    for r in rows {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        w.write_record([
            r.sigma2.to_string(),
            r.form.to_string(),
            r.coefficient.to_string(),
            r.closed_form.to_string(),
            opt(r.empirical),
            opt(r.abs_error),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
