//! Multi-environment synthetic data from two structural equation models.
//!
//! Temporal form, one step per `t >= 1`:
//!
//! ```text
//! X_t = X_{t-1}           + N(0, sigma2)
//! Y_t = Y_{t-1} + X_{t-1} + N(0, sigma2)
//! Z_t = Z_{t-1} + Y_{t-1} + N(0, 1)
//! ```
//!
//! Static form, i.i.d. rows: `X = e1`, `Y = X + e2`, `Z = Y + e3` with
//! `e1, e2 ~ N(0, sigma2)` and `e3 ~ N(0, 1)`.
//!
//! The X, Y and Z noise terms come from substreams 0, 1 and 2 of a ChaCha8
//! generator keyed by the configured seed (see [`crate::rng`]).

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::Tensor;
use crate::rng::{derive_seed, Stream};

pub const DEFAULT_TEMPORAL_LENGTH: usize = 10_000;
pub const DEFAULT_STATIC_LENGTH: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemError {
    #[error("invalid SEM config: {0}")]
    InvalidConfig(String),
    #[error("duplicate environment id {0:?}")]
    DuplicateEnv(String),
    #[error("environment suite is empty")]
    EmptySuite,
    #[error("unknown env-type preset {0:?} (expected 2, 3-1B or 3-2G)")]
    UnknownPreset(String),
    #[error("wrong generator for {0:?} mode")]
    WrongMode(SemMode),
    #[error("csv output failed: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemMode {
    Temporal,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemConfig {
    pub sigma2: f64,
    pub length: usize,
    pub seed: u64,
    pub mode: SemMode,
    /// Initial `(X_0, Y_0, Z_0)`; temporal mode only.
    #[serde(default)]
    pub initial_state: [f64; 3],
}

impl SemConfig {
    pub fn temporal(sigma2: f64, seed: u64) -> Self {
        Self { sigma2, length: DEFAULT_TEMPORAL_LENGTH, seed, mode: SemMode::Temporal, initial_state: [0.0; 3] }
    }

    pub fn static_model(sigma2: f64, seed: u64) -> Self {
        Self { sigma2, length: DEFAULT_STATIC_LENGTH, seed, mode: SemMode::Static, initial_state: [0.0; 3] }
    }

    pub fn with_length(mut self, length: usize) -> Self {
        self.length = length;
        self
    }

    pub fn validate(&self) -> Result<(), SemError> {
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(SemError::InvalidConfig(format!("sigma2 must be finite and >= 0, got {}", self.sigma2)));
        }
        if self.length == 0 {
            return Err(SemError::InvalidConfig("length must be >= 1".into()));
        }
        if self.initial_state.iter().any(|v| !v.is_finite()) {
            return Err(SemError::InvalidConfig(format!("non-finite initial state {:?}", self.initial_state)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub env_id: String,
    pub config: SemConfig,
    pub role: Role,
}

impl EnvironmentSpec {
    /// Seed actually used to generate this environment's series.
    pub fn stream_seed(&self) -> u64 {
        derive_seed(self.config.seed, &self.env_id)
    }
}

/// One environment's observations, rows `(X, Y, Z)` by columns `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesSample {
    pub env_id: String,
    pub values: Tensor,
}

impl SeriesSample {
    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.values.data()[i * n..(i + 1) * n]
    }

    pub fn x(&self) -> &[f64] {
        self.row(0)
    }

    pub fn y(&self) -> &[f64] {
        self.row(1)
    }

    pub fn z(&self) -> &[f64] {
        self.row(2)
    }

    /// Writes rows `env_id,t,x,y,z` (with header when `header` is set).
    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> Result<(), SemError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let io = |e: csv::Error| SemError::Io(e.to_string());
        if header {
            w.write_record(["env_id", "t", "x", "y", "z"]).map_err(io)?;
        }
        for t in 0..self.len() {
            w.write_record([
                self.env_id.clone(),
                t.to_string(),
                self.x()[t].to_string(),
                self.y()[t].to_string(),
                self.z()[t].to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| SemError::Io(e.to_string()))
    }
}

struct Noise {
    x: Stream,
    y: Stream,
    z: Stream,
}

impl Noise {
    fn new(seed: u64) -> Self {
        Self {
            x: Stream::with_substream(seed, 0),
            y: Stream::with_substream(seed, 1),
            z: Stream::with_substream(seed, 2),
        }
    }
}

fn into_sample(env_id: &str, x: Vec<f64>, y: Vec<f64>, z: Vec<f64>) -> SeriesSample {
    let n = x.len();
    let mut data = x;
    data.extend(y);
    data.extend(z);
    SeriesSample { env_id: env_id.to_string(), values: Tensor::matrix(3, n, data) }
}

fn temporal_with_seed(env_id: &str, config: &SemConfig, seed: u64) -> SeriesSample {
    let sd = config.sigma2.sqrt();
    let mut noise = Noise::new(seed);
    let n = config.length;
    let (mut x, mut y, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let [x0, y0, z0] = config.initial_state;
    x.push(x0);
    y.push(y0);
    z.push(z0);
    for t in 1..n {
        let (xp, yp, zp) = (x[t - 1], y[t - 1], z[t - 1]);
        x.push(xp + sd * noise.x.normal());
        y.push(yp + xp + sd * noise.y.normal());
        z.push(zp + yp + noise.z.normal());
    }
    into_sample(env_id, x, y, z)
}

fn static_with_seed(env_id: &str, config: &SemConfig, seed: u64) -> SeriesSample {
    let sd = config.sigma2.sqrt();
    let mut noise = Noise::new(seed);
    let n = config.length;
    let (mut x, mut y, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let xi = sd * noise.x.normal();
        let yi = xi + sd * noise.y.normal();
        let zi = yi + noise.z.normal();
        x.push(xi);
        y.push(yi);
        z.push(zi);
    }
    into_sample(env_id, x, y, z)
}

/// Temporal SEM series of `config.length` steps, `t = 0` holding the initial state.
pub fn generate_temporal(config: &SemConfig) -> Result<SeriesSample, SemError> {
    if config.mode != SemMode::Temporal {
        return Err(SemError::WrongMode(config.mode));
    }
    config.validate()?;
    Ok(temporal_with_seed("", config, config.seed))
}

/// `config.length` i.i.d. draws from the static SEM.
pub fn generate_static(config: &SemConfig) -> Result<SeriesSample, SemError> {
    if config.mode != SemMode::Static {
        return Err(SemError::WrongMode(config.mode));
    }
    config.validate()?;
    Ok(static_with_seed("", config, config.seed))
}

/// One sample per spec, each seeded by `derive_seed(config.seed, env_id)`.
pub fn generate_env_suite(specs: &[EnvironmentSpec]) -> Result<Vec<SeriesSample>, SemError> {
    if specs.is_empty() {
        return Err(SemError::EmptySuite);
    }
    let mut seen = BTreeSet::new();
    for s in specs {
        if !seen.insert(s.env_id.as_str()) {
            return Err(SemError::DuplicateEnv(s.env_id.clone()));
        }
        s.config.validate()?;
    }
    Ok(specs
        .iter()
        .map(|s| match s.config.mode {
            SemMode::Temporal => temporal_with_seed(&s.env_id, &s.config, s.stream_seed()),
            SemMode::Static => static_with_seed(&s.env_id, &s.config, s.stream_seed()),
        })
        .collect())
}

/// The three synthetic environment layouts: training variances plus a
/// held-out test environment at `sigma2 = 2.0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "PresetName")]
pub enum EnvType {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3-1B")]
    ThreeOneB,
    #[serde(rename = "3-2G")]
    ThreeTwoG,
}

pub const TEST_SIGMA2: f64 = 2.0;

impl EnvType {
    pub const ALL: [EnvType; 3] = [EnvType::Two, EnvType::ThreeOneB, EnvType::ThreeTwoG];

    pub fn train_sigma2(self) -> &'static [f64] {
        match self {
            EnvType::Two => &[0.1, 1.0],
            EnvType::ThreeOneB => &[0.1, 1.0, 0.01],
            EnvType::ThreeTwoG => &[0.1, 1.0, 2.0],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EnvType::Two => "2",
            EnvType::ThreeOneB => "3-1B",
            EnvType::ThreeTwoG => "3-2G",
        }
    }

    /// Specs `e1, e2[, e3]` for training and `et` for testing, all sharing
    /// `master_seed` (streams differ through the env id).
    pub fn specs(self, mode: SemMode, length: usize, master_seed: u64) -> Vec<EnvironmentSpec> {
        let cfg = |sigma2| SemConfig { sigma2, length, seed: master_seed, mode, initial_state: [0.0; 3] };
        let mut specs: Vec<EnvironmentSpec> = self
            .train_sigma2()
            .iter()
            .enumerate()
            .map(|(i, &s)| EnvironmentSpec { env_id: format!("e{}", i + 1), config: cfg(s), role: Role::Train })
            .collect();
        specs.push(EnvironmentSpec { env_id: "et".into(), config: cfg(TEST_SIGMA2), role: Role::Test });
        specs
    }
}

/// Accepts `"3-1B"` as well as a bare `2`.
#[derive(Deserialize)]
#[serde(untagged)]
enum PresetName {
    Text(String),
    Number(u64),
}

impl TryFrom<PresetName> for EnvType {
    type Error = SemError;

    fn try_from(name: PresetName) -> Result<Self, SemError> {
        match name {
            PresetName::Text(s) => s.parse(),
            PresetName::Number(n) => n.to_string().parse(),
        }
    }
}

impl fmt::Display for EnvType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EnvType {
    type Err = SemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "2" => Ok(EnvType::Two),
            "3-1B" | "3-1b" => Ok(EnvType::ThreeOneB),
            "3-2G" | "3-2g" => Ok(EnvType::ThreeTwoG),
            other => Err(SemError::UnknownPreset(other.to_string())),
        }
    }
}
