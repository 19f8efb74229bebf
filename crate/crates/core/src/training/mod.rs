//! Windowing, ERM and IRM training loops, metrics and replicated reports.

mod linear;
mod metrics;
mod optim;
mod report;
mod windows;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{DiffError, Tape, Tensor, Var};
use crate::invariance::{irm_objective, InvarianceError, LambdaSchedule};
use crate::models::{Batch, Forecaster, ModelConfig, ModelError, Window};
use crate::rng::{derive_seed, Stream};

pub use linear::{fit_linear, LinearFit};
pub use metrics::{mae, mse};
pub use optim::Adam;
pub use report::{run_replicates, thread_budget, THREADS_ENV, CurvePoint, EvalReport, MetricRow, ReplicateRun, SeedCurve};
pub use windows::{make_windows, prepare_suite, prepare_suite_with, EnvSeries, Normalizer, PreparedSuite, TargetKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} with learning rate {lr:e}: {detail}")]
    Diverged { epoch: usize, lr: f64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Invariance(#[from] InvarianceError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Erm,
    Irm,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Erm => "erm",
            Mode::Irm => "irm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: Mode,
    pub t_in: usize,
    pub horizon: usize,
    pub stride: usize,
    pub target: TargetKind,
    /// Windows drawn from each training environment per step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the largest
    /// training environment.
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda_pre: f64,
    pub lambda_main: f64,
    pub warmup_epochs: usize,
    /// The per-epoch test curve and the training-environment metrics use
    /// every `eval_stride`-th window; test-environment metrics use all.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let lambda = LambdaSchedule::default();
        Self {
            model: ModelConfig::default(),
            mode: Mode::Irm,
            t_in: 20,
            horizon: 1,
            stride: 1,
            target: TargetKind::Delta,
            batch_size: 32,
            epochs: 20,
            steps_per_epoch: 20,
            learning_rate: 1e-3,
            seed: 0,
            lambda_pre: lambda.lambda_pre,
            lambda_main: lambda.lambda_main,
            warmup_epochs: lambda.warmup_epochs,
            eval_stride: 10,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LambdaSchedule {
        LambdaSchedule { lambda_pre: self.lambda_pre, lambda_main: self.lambda_main, warmup_epochs: self.warmup_epochs }
    }

    /// Penalty weight in effect at `epoch` (always 0 for ERM).
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.mode {
            Mode::Erm => 0.0,
            Mode::Irm => self.schedule().at(epoch),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [
            ("t_in", self.t_in),
            ("horizon", self.horizon),
            ("stride", self.stride),
            ("batch_size", self.batch_size),
            ("eval_stride", self.eval_stride),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.schedule().validate()?;
        self.model.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean training objective over the epoch's steps.
    pub train_loss: f64,
    /// Mean per-environment training risk over the epoch's steps.
    pub train_risk: f64,
    pub test_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Forecaster,
    pub curve: Vec<EpochStats>,
}

/// Draws batches without replacement, reshuffling when a pass is used up.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, count: usize, rng: &mut Stream, out: &mut Vec<usize>) {
        for _ in 0..count.min(self.order.len()) {
            if self.pos == self.order.len() {
                for i in (1..self.order.len()).rev() {
                    let j = rng.index(i + 1);
                    self.order.swap(i, j);
                }
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// MSE and MAE of the model's logits against window targets.
pub fn evaluate(model: &Forecaster, windows: &[&Window]) -> Result<(f64, f64), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::Config("nothing to evaluate".into()));
    }
    let mut sums = metrics::ErrorSums::default();
    for chunk in windows.chunks(EVAL_CHUNK) {
        let batch = Batch::from_windows(chunk)?;
        let pred = model.predict(&batch.inputs)?;
        sums.add(pred.data(), batch.targets.data());
    }
    Ok((sums.mse(), sums.mae()))
}

/// Turns non-finite arithmetic anywhere in a step into a divergence report.
fn as_divergence(err: TrainError, epoch: usize, lr: f64) -> TrainError {
    let detail = match &err {
        TrainError::Diff(e @ DiffError::NonFinite { .. })
        | TrainError::Model(ModelError::Diff(e @ DiffError::NonFinite { .. }))
        | TrainError::Invariance(InvarianceError::Diff(e @ DiffError::NonFinite { .. })) => e.to_string(),
        TrainError::Diverged { detail, .. } => detail.clone(),
        _ => return err,
    };
    TrainError::Diverged { epoch, lr, detail }
}

/// One optimizer step on a batch made of per-environment spans. Returns the
/// objective and the summed per-environment risk.
fn train_step(
    model: &mut Forecaster,
    opt: &mut Adam,
    windows: &[&Window],
    spans: &[std::ops::Range<usize>],
    lambda: f64,
) -> Result<(f64, f64), TrainError> {
    let batch = Batch::from_windows(windows)?;
    let m = batch.targets.cols();
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape)?;
    let h = model.forward(&mut tape, &vars, &batch.inputs)?;
    let mut targets = Vec::with_capacity(spans.len());
    let mut hs: Vec<Var> = Vec::with_capacity(spans.len());
    for span in spans {
        let rows: Vec<usize> = span.clone().collect();
        hs.push(if spans.len() == 1 { h } else { tape.select_rows(h, &rows)? });
        let t = batch.targets.data()[span.start * m..span.end * m].to_vec();
        targets.push(Tensor::matrix(span.len(), m, t));
    }
    let pairs: Vec<(Var, &Tensor)> = hs.iter().copied().zip(&targets).collect();
    let loss = irm_objective(&mut tape, &pairs, lambda)?;
    let grads = tape.backward(loss)?;
    let grads: Vec<&Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Diverged { epoch: 0, lr: opt.lr, detail: "non-finite gradient".into() });
    }
    opt.step(model.params_mut(), &grads);
    let mut risk = 0.0;
    for (&hv, t) in hs.iter().zip(&targets) {
        risk += mse(tape.value(hv), t)?;
    }
    Ok((tape.value(loss).item(), risk))
}

/// Trains a fresh model on the given environments.
///
/// Each step draws `batch_size` windows from every training environment and
/// minimizes `sum_e risk_e + lambda * sum_e penalty_e`; ERM is the same
/// objective with `lambda = 0`, so both modes see identical batches. The
/// per-epoch test MSE is measured on every `eval_stride`-th window of `test`.
pub fn train(config: &TrainConfig, envs: &[(String, Vec<Window>)], test: &[&Window]) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let envs: Vec<&(String, Vec<Window>)> = envs
        .iter()
        .filter(|(id, w)| {
            if w.is_empty() {
                warn!("training environment {id} has no windows; skipped");
            }
            !w.is_empty()
        })
        .collect();
    let first = envs.first().ok_or_else(|| TrainError::Config("no training environment has windows".into()))?;
    let (d, k) = (first.1[0].d(), first.1[0].k());

    let mut model = Forecaster::new(&config.model, d, k, derive_seed(config.seed, "init"))?;
    let mut rng = Stream::new(derive_seed(config.seed, "batches"));
    let mut opt = Adam::new(config.learning_rate);
    let mut samplers: Vec<Sampler> = envs.iter().map(|(_, w)| Sampler::new(w.len())).collect();
    let steps = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        envs.iter().map(|(_, w)| w.len().div_ceil(config.batch_size)).max().unwrap_or(1)
    };
    let curve_windows: Vec<&Window> = test.iter().step_by(config.eval_stride).copied().collect();

    let mut curve = Vec::with_capacity(config.epochs);
    let mut picked = Vec::new();
    for epoch in 0..config.epochs {
        let lambda = config.lambda_at(epoch);
        let (mut loss_sum, mut risk_sum) = (0.0, 0.0);
        for _ in 0..steps {
            let mut batch_windows: Vec<&Window> = Vec::new();
            let mut spans = Vec::with_capacity(envs.len());
            for ((_, windows), sampler) in envs.iter().zip(&mut samplers) {
                picked.clear();
                sampler.next(config.batch_size, &mut rng, &mut picked);
                let start = batch_windows.len();
                batch_windows.extend(picked.iter().map(|&i| &windows[i]));
                spans.push(start..batch_windows.len());
            }
            let (loss_value, risk) = train_step(&mut model, &mut opt, &batch_windows, &spans, lambda)
                .map_err(|e| as_divergence(e, epoch, config.learning_rate))?;
            loss_sum += loss_value;
            risk_sum += risk / envs.len() as f64;
        }
        let test_mse = if curve_windows.is_empty() { None } else { Some(evaluate(&model, &curve_windows)?.0) };
        let stats = EpochStats {
            epoch,
            lambda,
            train_loss: loss_sum / steps as f64,
            train_risk: risk_sum / steps as f64,
            test_mse,
        };
        debug!("{:?} epoch {epoch}: loss {:.6} test {:?}", config.mode, stats.train_loss, stats.test_mse);
        curve.push(stats);
    }
    Ok(TrainOutcome { model, curve })
}
