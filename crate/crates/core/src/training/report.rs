use std::io::Write;
use std::thread;

use log::info;
use serde::{Deserialize, Serialize};

use super::{evaluate, train, EpochStats, Mode, PreparedSuite, TrainConfig, TrainError};
use crate::models::{Forecaster, Window};
use crate::rng::derive_seed;

/// Environment variable capping how many replicates train concurrently.
pub const THREADS_ENV: &str = "INVARCAST_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mode: Mode,
    pub env_id: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Seed-averaged test MSE after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mode: Mode,
    pub test_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedCurve {
    pub seed_index: usize,
    pub epoch: usize,
    pub mode: Mode,
    pub test_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub curve: Vec<CurvePoint>,
    pub seed_curves: Vec<SeedCurve>,
}

/// One trained replicate.
#[derive(Clone, Debug)]
pub struct ReplicateRun {
    pub seed_index: usize,
    pub seed: u64,
    pub mode: Mode,
    pub model: Forecaster,
    pub curve: Vec<EpochStats>,
    /// `(env_id, mse, mae)` per environment: all test windows, every
    /// `eval_stride`-th training window.
    pub metrics: Vec<(String, f64, f64)>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    /// Aggregates replicates of a single mode (mean and sample std over seeds).
    pub fn from_runs(runs: &[ReplicateRun]) -> Self {
        let mut report = EvalReport::default();
        let Some(first) = runs.first() else { return report };
        let mode = first.mode;
        for (i, (env_id, _, _)) in first.metrics.iter().enumerate() {
            for (metric, pick) in [("mse", 1usize), ("mae", 2usize)] {
                let vals: Vec<f64> = runs.iter().map(|r| if pick == 1 { r.metrics[i].1 } else { r.metrics[i].2 }).collect();
                let (mean, std) = mean_std(&vals);
                report.rows.push(MetricRow { mode, env_id: env_id.clone(), metric: metric.into(), mean, std });
            }
        }
        for epoch in 0..first.curve.len() {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.curve[epoch].test_mse).collect();
            if vals.len() == runs.len() {
                report.curve.push(CurvePoint { epoch, mode, test_mse: mean_std(&vals).0 });
            }
        }
        for r in runs {
            for e in &r.curve {
                if let Some(test_mse) = e.test_mse {
                    report.seed_curves.push(SeedCurve { seed_index: r.seed_index, epoch: e.epoch, mode, test_mse });
                }
            }
        }
        report
    }

    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.curve.extend(other.curve);
        self.seed_curves.extend(other.seed_curves);
    }

    pub fn get(&self, mode: Mode, env_id: &str, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.mode == mode && r.env_id == env_id && r.metric == metric)
    }

    /// Final-epoch test MSE of one seed.
    pub fn final_seed_mse(&self, mode: Mode, seed_index: usize) -> Option<f64> {
        self.seed_curves.iter().filter(|c| c.mode == mode && c.seed_index == seed_index).max_by_key(|c| c.epoch).map(|c| c.test_mse)
    }

    /// `mode,env_id,metric,mean,std`
    pub fn write_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "env_id", "metric", "mean", "std"])?;
        for r in &self.rows {
            out.write_record([r.mode.label(), &r.env_id, &r.metric, &r.mean.to_string(), &r.std.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `epoch,mode,test_mse`
    pub fn write_curve_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "mode", "test_mse"])?;
        for c in &self.curve {
            out.write_record([&c.epoch.to_string(), c.mode.label(), &c.test_mse.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `seed,epoch,mode,test_mse`
    pub fn write_seed_curve_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "epoch", "mode", "test_mse"])?;
        for c in &self.seed_curves {
            out.write_record([&c.seed_index.to_string(), &c.epoch.to_string(), c.mode.label(), &c.test_mse.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Worker count from `INVARCAST_THREADS`, else the available cores.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_one(config: &TrainConfig, suite: &PreparedSuite, seed_index: usize) -> Result<ReplicateRun, TrainError> {
    let seed = derive_seed(config.seed, &format!("replicate-{seed_index}"));
    let cfg = TrainConfig { seed, ..config.clone() };
    let test = suite.test_windows();
    let outcome = train(&cfg, &suite.train, &test)?;
    let mut metrics = Vec::new();
    let train = suite.train.iter().map(|e| (e, config.eval_stride));
    for ((env_id, windows), stride) in train.chain(suite.test.iter().map(|e| (e, 1))) {
        if windows.is_empty() {
            continue;
        }
        let refs: Vec<&Window> = windows.iter().step_by(stride).collect();
        let (mse, mae) = evaluate(&outcome.model, &refs)?;
        metrics.push((env_id.clone(), mse, mae));
    }
    info!("{} replicate {seed_index} done", config.mode.label());
    Ok(ReplicateRun { seed_index, seed, mode: config.mode, model: outcome.model, curve: outcome.curve, metrics })
}

/// Trains `n_seeds` replicates with seeds derived from `config.seed` and
/// aggregates them. Replicates run on up to [`thread_budget`] threads; results
/// are ordered by seed index, so the report does not depend on scheduling.
pub fn run_replicates(config: &TrainConfig, suite: &PreparedSuite, n_seeds: usize) -> Result<(EvalReport, Vec<ReplicateRun>), TrainError> {
    if n_seeds == 0 {
        return Err(TrainError::Config("n_seeds must be >= 1".into()));
    }
    let workers = thread_budget().min(n_seeds);
    let mut slots: Vec<Option<Result<ReplicateRun, TrainError>>> = (0..n_seeds).map(|_| None).collect();
    if workers == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_one(config, suite, i));
        }
    } else {
        let done: Vec<Vec<(usize, Result<ReplicateRun, TrainError>)>> = thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| s.spawn(move || (w..n_seeds).step_by(workers).map(|i| (i, run_one(config, suite, i))).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("replicate worker panicked")).collect()
        });
        for (i, r) in done.into_iter().flatten() {
            slots[i] = Some(r);
        }
    }
    let runs = slots.into_iter().map(|s| s.expect("every seed index is assigned")).collect::<Result<Vec<_>, _>>()?;
    Ok((EvalReport::from_runs(&runs), runs))
}
