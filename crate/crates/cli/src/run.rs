use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use invarcast_core::models::{Arch, Cell, Forecaster, Window};
use invarcast_core::training::{evaluate, prepare_suite, prepare_suite_with, run_replicates, EvalReport, Mode, Normalizer, ReplicateRun};
use log::info;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::load_envs;
use crate::Invalid;

pub const CONFIG_JSON: &str = "config.json";
pub const NORMALIZER_JSON: &str = "normalizer.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CURVE_CSV: &str = "curve.csv";
pub const SEED_CURVES_CSV: &str = "seed_curves.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const EVAL_CSV: &str = "eval.csv";

/// Table row name such as `Invar-LSTM`.
pub fn model_label(config: &ExperimentConfig, arch: Arch, mode: Mode) -> String {
    let base = match (arch, config.train.model.cell) {
        (Arch::Recurrent, Cell::Lstm) => "LSTM",
        (Arch::Recurrent, Cell::Elman) => "Elman",
        (Arch::Transformer, _) => "Transformer",
    };
    match mode {
        Mode::Erm => base.to_string(),
        Mode::Irm => format!("Invar-{base}"),
    }
}

pub fn checkpoint_path(dir: &Path, arch: Arch, mode: Mode, seed_index: usize) -> PathBuf {
    dir.join(arch.label()).join("checkpoints").join(format!("{}-seed{seed_index}.ckpt", mode.label()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Everything one `run` produced, per architecture in config order.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub test_envs: Vec<String>,
    pub reports: Vec<(Arch, EvalReport)>,
}

impl RunOutput {
    pub fn report(&self, arch: Arch) -> Option<&EvalReport> {
        self.reports.iter().find(|(a, _)| *a == arch).map(|(_, r)| r)
    }
}

/// Trains every requested architecture and mode, writing after each one:
///
/// ```text
/// config.json  normalizer.json  summary.txt  summary.csv
/// <arch>/report.csv  <arch>/curve.csv  <arch>/seed_curves.csv
/// <arch>/checkpoints/<mode>-seed<i>.ckpt
/// ```
///
/// Results of finished combinations stay on disk if a later one fails.
pub fn run(config: &ExperimentConfig, out: &Path) -> anyhow::Result<RunOutput> {
    config.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(CONFIG_JSON), config)?;

    let envs = load_envs(config)?;
    let t = &config.train;
    let suite = prepare_suite(&envs, t.t_in, t.horizon, t.stride, t.target).ok_or_else(|| Invalid("no training data".into()))?;
    write_json(&out.join(NORMALIZER_JSON), &suite.normalizer)?;
    let mut output = RunOutput { dir: out.to_path_buf(), test_envs: suite.test.iter().map(|(id, _)| id.clone()).collect(), reports: Vec::new() };

    for &arch in &config.archs {
        let arch_dir = out.join(arch.label());
        fs::create_dir_all(arch_dir.join("checkpoints")).with_context(|| format!("creating {}", arch_dir.display()))?;
        output.reports.push((arch, EvalReport::default()));
        for &mode in &config.modes {
            info!("training {} ({}) on {}", model_label(config, arch, mode), config.replicates, config.data_label());
            let (report, runs) = run_replicates(&config.train_config(arch, mode), &suite, config.replicates)
                .with_context(|| format!("training {}", model_label(config, arch, mode)))?;
            save_checkpoints(out, arch, &runs)?;
            output.reports.last_mut().expect("pushed above").1.merge(report);
            write_arch_reports(&arch_dir, &output.reports.last().expect("pushed above").1)?;
            write_summary(config, &output)?;
        }
    }
    Ok(output)
}

fn save_checkpoints(out: &Path, arch: Arch, runs: &[ReplicateRun]) -> anyhow::Result<()> {
    for r in runs {
        let path = checkpoint_path(out, arch, r.mode, r.seed_index);
        let mut w = create(&path)?;
        r.model.params().save(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn write_arch_reports(dir: &Path, report: &EvalReport) -> anyhow::Result<()> {
    let mut w = create(&dir.join(REPORT_CSV))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join(CURVE_CSV))?;
    report.write_curve_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join(SEED_CURVES_CSV))?;
    report.write_seed_curve_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// One line of the summary table: test-environment metrics of a model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub arch: Arch,
    pub mode: Mode,
    pub env_id: String,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

pub fn summary_rows(config: &ExperimentConfig, output: &RunOutput) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for (arch, report) in &output.reports {
        for &mode in &config.modes {
            for env in &output.test_envs {
                let (Some(mse), Some(mae)) = (report.get(mode, env, "mse"), report.get(mode, env, "mae")) else { continue };
                rows.push(SummaryRow {
                    model: model_label(config, *arch, mode),
                    arch: *arch,
                    mode,
                    env_id: env.clone(),
                    mse_mean: mse.mean,
                    mse_std: mse.std,
                    mae_mean: mae.mean,
                    mae_std: mae.std,
                });
            }
        }
    }
    rows
}

fn write_summary(config: &ExperimentConfig, output: &RunOutput) -> anyhow::Result<()> {
    let rows = summary_rows(config, output);
    let mut w = csv::Writer::from_path(output.dir.join(SUMMARY_CSV))?;
    w.write_record(["model", "arch", "mode", "env_id", "mse_mean", "mse_std", "mae_mean", "mae_std"])?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.arch.label().to_string(),
            r.mode.label().to_string(),
            r.env_id.clone(),
            r.mse_mean.to_string(),
            r.mse_std.to_string(),
            r.mae_mean.to_string(),
            r.mae_std.to_string(),
        ])?;
    }
    w.flush()?;

    let mut txt = create(&output.dir.join(SUMMARY_TXT))?;
    write_summary_table(config, &output.test_envs, &rows, &mut txt)?;
    txt.flush()?;
    Ok(())
}

/// Aligned text table: one line per model, MSE and MAE columns per test
/// environment.
pub fn write_summary_table(config: &ExperimentConfig, envs: &[String], rows: &[SummaryRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "Test error on {} (mean ± std over {} seeds)", config.data_label(), config.replicates)?;
    writeln!(out)?;
    write!(out, "{:<18}", "model")?;
    for env in envs {
        write!(out, "  {:<21}  {:<21}", format!("{env} MSE"), format!("{env} MAE"))?;
    }
    writeln!(out)?;
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    for model in models {
        write!(out, "{model:<18}")?;
        for env in envs {
            match rows.iter().find(|r| r.model == model && &r.env_id == env) {
                Some(r) => write!(
                    out,
                    "  {:<21}  {:<21}",
                    format!("{:.6} ± {:.6}", r.mse_mean, r.mse_std),
                    format!("{:.6} ± {:.6}", r.mae_mean, r.mae_std)
                )?,
                None => write!(out, "  {:<21}  {:<21}", "-", "-")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub arch: Arch,
    pub mode: Mode,
    pub seed_index: usize,
    pub env_id: String,
    pub role: String,
    pub mse: f64,
    pub mae: f64,
}

/// Re-evaluates the checkpoints of a finished run on every environment of
/// `data` (the run's own data when `None`), using the run's saved transform
/// and window settings. Writes `eval.csv` into `out`.
pub fn eval(run_dir: &Path, data: Option<&ExperimentConfig>, out: &Path) -> anyhow::Result<Vec<EvalRow>> {
    let read = |name: &str| -> anyhow::Result<BufReader<File>> {
        let path = run_dir.join(name);
        Ok(BufReader::new(File::open(&path).with_context(|| format!("reading {}", path.display()))?))
    };
    let run_cfg: ExperimentConfig = serde_json::from_reader(read(CONFIG_JSON)?).context("parsing run config")?;
    run_cfg.validate()?;
    let normalizer: Normalizer = serde_json::from_reader(read(NORMALIZER_JSON)?).context("parsing normalizer")?;

    let mut data_cfg = data.cloned().unwrap_or_else(|| run_cfg.clone());
    data_cfg.train = run_cfg.train.clone();
    let envs = load_envs(&data_cfg)?;
    if envs.iter().any(|e| e.d() != normalizer.mean.len()) {
        return Err(Invalid(format!("data has a different feature count than the run ({})", normalizer.mean.len())).into());
    }
    let t = &run_cfg.train;
    let suite = prepare_suite_with(&envs, normalizer, t.t_in, t.horizon, t.stride, t.target);
    let groups: Vec<(&str, &str, &Vec<Window>)> = suite
        .train
        .iter()
        .map(|(id, w)| (id.as_str(), "train", w))
        .chain(suite.test.iter().map(|(id, w)| (id.as_str(), "test", w)))
        .filter(|(_, _, w)| !w.is_empty())
        .collect();

    let mut rows = Vec::new();
    for &arch in &run_cfg.archs {
        for &mode in &run_cfg.modes {
            let tc = run_cfg.train_config(arch, mode);
            for seed_index in 0..run_cfg.replicates {
                let mut model = Forecaster::new(&tc.model, suite.d(), t.horizon, 0)?;
                let path = checkpoint_path(run_dir, arch, mode, seed_index);
                let file = File::open(&path).with_context(|| format!("reading {}", path.display()))?;
                model.params_mut().load_into(BufReader::new(file)).with_context(|| format!("loading {}", path.display()))?;
                for (env_id, role, windows) in &groups {
                    let refs: Vec<&Window> = windows.iter().collect();
                    let (mse, mae) = evaluate(&model, &refs)?;
                    rows.push(EvalRow { arch, mode, seed_index, env_id: env_id.to_string(), role: role.to_string(), mse, mae });
                }
            }
        }
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = csv::Writer::from_path(out.join(EVAL_CSV))?;
    w.write_record(["arch", "mode", "seed", "env_id", "role", "mse", "mae"])?;
    for r in &rows {
        w.write_record([
            r.arch.label().to_string(),
            r.mode.label().to_string(),
            r.seed_index.to_string(),
            r.env_id.clone(),
            r.role.clone(),
            r.mse.to_string(),
            r.mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
