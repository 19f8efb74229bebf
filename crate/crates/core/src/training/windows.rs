use log::warn;
use serde::{Deserialize, Serialize};

use crate::diffnum::Tensor;
use crate::models::Window;
use crate::semgen::{Role, SeriesSample};

/// How window targets are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// `x_{T+j}` itself.
    Level,
    /// `x_{T+j} - x_T`, the change from the last input step. Forecast errors
    /// are identical to the level encoding, so every metric is unchanged.
    Delta,
}

/// One environment's series: one or more `d x T` segments (real data can be
/// split by long gaps).
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSeries {
    pub env_id: String,
    pub role: Role,
    pub segments: Vec<Tensor>,
}

impl EnvSeries {
    pub fn from_sample(sample: &SeriesSample, role: Role) -> Self {
        Self { env_id: sample.env_id.clone(), role, segments: vec![sample.values.clone()] }
    }

    pub fn d(&self) -> usize {
        self.segments.first().map_or(0, Tensor::rows)
    }
}

/// Sliding windows over a `d x T` series: inputs are columns `s..s+t_in`,
/// targets the following `k` columns, for `s = 0, stride, 2*stride, ...`.
/// A series shorter than `t_in + k` yields no windows (with a warning).
pub fn make_windows(values: &Tensor, env_id: &str, t_in: usize, k: usize, stride: usize, target: TargetKind) -> Vec<Window> {
    assert!(t_in >= 1 && k >= 1 && stride >= 1, "t_in, k and stride must be >= 1");
    let (d, len) = (values.rows(), values.cols());
    if len < t_in + k {
        warn!("series {env_id} has {len} steps, fewer than t_in + k = {}; no windows", t_in + k);
        return Vec::new();
    }
    let x = values.data();
    let count = (len - t_in - k) / stride + 1;
    (0..count)
        .map(|w| {
            let s = w * stride;
            let mut inputs = Vec::with_capacity(d * t_in);
            let mut targets = Vec::with_capacity(d * k);
            for i in 0..d {
                let row = &x[i * len..(i + 1) * len];
                inputs.extend_from_slice(&row[s..s + t_in]);
                let base = match target {
                    TargetKind::Level => 0.0,
                    TargetKind::Delta => row[s + t_in - 1],
                };
                targets.extend(row[s + t_in..s + t_in + k].iter().map(|v| v - base));
            }
            Window { inputs: Tensor::matrix(d, t_in, inputs), targets: Tensor::matrix(d, k, targets), env_id: env_id.to_string() }
        })
        .collect()
}

/// Per-feature z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on every value of the given `d x T` series pooled together.
    /// A feature with zero spread gets `std = 1` so the transform stays finite.
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a Tensor>) -> Option<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        let series: Vec<&Tensor> = series.into_iter().collect();
        for s in &series {
            let (d, len) = (s.rows(), s.cols());
            if sum.is_empty() {
                sum = vec![0.0; d];
                sq = vec![0.0; d];
            }
            if d != sum.len() {
                return None;
            }
            for i in 0..d {
                sum[i] += s.data()[i * len..(i + 1) * len].iter().sum::<f64>();
            }
            n += len;
        }
        if n == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        // second pass for a stable variance
        for s in &series {
            let len = s.cols();
            for (i, m) in mean.iter().enumerate() {
                sq[i] += s.data()[i * len..(i + 1) * len].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|q| (q / n as f64).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Some(Self { mean, std })
    }

    pub fn apply(&self, series: &Tensor) -> Tensor {
        let len = series.cols();
        let mut out = series.clone().into_data();
        for (i, row) in out.chunks_mut(len).enumerate() {
            for v in row {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
        Tensor::matrix(series.rows(), len, out)
    }
}

/// Normalized windows for every environment, with the transform fitted on the
/// training environments only.
#[derive(Clone, Debug)]
pub struct PreparedSuite {
    pub normalizer: Normalizer,
    pub train: Vec<(String, Vec<Window>)>,
    pub test: Vec<(String, Vec<Window>)>,
}

impl PreparedSuite {
    pub fn d(&self) -> usize {
        self.normalizer.mean.len()
    }

    pub fn test_windows(&self) -> Vec<&Window> {
        self.test.iter().flat_map(|(_, w)| w.iter()).collect()
    }
}

pub fn prepare_suite(envs: &[EnvSeries], t_in: usize, k: usize, stride: usize, target: TargetKind) -> Option<PreparedSuite> {
    let train_series = envs.iter().filter(|e| e.role == Role::Train).flat_map(|e| e.segments.iter());
    let normalizer = Normalizer::fit(train_series)?;
    Some(prepare_suite_with(envs, normalizer, t_in, k, stride, target))
}

/// Like [`prepare_suite`] with a transform fitted elsewhere, e.g. the one
/// saved alongside a trained model.
pub fn prepare_suite_with(
    envs: &[EnvSeries],
    normalizer: Normalizer,
    t_in: usize,
    k: usize,
    stride: usize,
    target: TargetKind,
) -> PreparedSuite {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for env in envs {
        let windows: Vec<Window> = env
            .segments
            .iter()
            .flat_map(|s| make_windows(&normalizer.apply(s), &env.env_id, t_in, k, stride, target))
            .collect();
        match env.role {
            Role::Train => train.push((env.env_id.clone(), windows)),
            Role::Test => test.push((env.env_id.clone(), windows)),
        }
    }
    PreparedSuite { normalizer, train, test }
}
