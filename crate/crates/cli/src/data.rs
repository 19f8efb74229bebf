use std::collections::BTreeSet;

use invarcast_core::ingest::{fill_missing, load_many, partition_environments, to_env_series};
use invarcast_core::semgen::{generate_env_suite, EnvironmentSpec, Role, SemMode};
use invarcast_core::training::EnvSeries;
use log::warn;

use crate::config::{DataKind, ExperimentConfig};
use crate::Invalid;

/// Synthetic environment specs of a `preset` or `envs` config.
pub fn synthetic_specs(config: &ExperimentConfig) -> Result<Vec<EnvironmentSpec>, Invalid> {
    match config.data_kind()? {
        DataKind::Preset(p) => Ok(p.specs(SemMode::Temporal, config.length, config.seed)),
        DataKind::Explicit => Ok(config.envs.clone().unwrap_or_default()),
        DataKind::Real => Err(Invalid("synthetic data needs preset or envs, not real".into())),
    }
}

/// Every environment of the configured source, unnormalized.
pub fn load_envs(config: &ExperimentConfig) -> anyhow::Result<Vec<EnvSeries>> {
    if config.data_kind()? != DataKind::Real {
        let specs = synthetic_specs(config)?;
        if let Some(s) = specs.iter().find(|s| s.config.mode != SemMode::Temporal) {
            return Err(Invalid(format!("env {}: forecasting needs temporal mode", s.env_id)).into());
        }
        let samples = generate_env_suite(&specs)?;
        return Ok(samples.iter().zip(&specs).map(|(s, spec)| EnvSeries::from_sample(s, spec.role)).collect());
    }

    let real = config.real.as_ref().expect("checked by data_kind");
    let min_len = config.train.t_in + config.train.horizon;
    let mut cleaned = Vec::new();
    for series in load_many(&real.paths)? {
        cleaned.extend(fill_missing(&series, min_len)?);
    }
    let groups = partition_environments(cleaned, real.grouping);
    let test: BTreeSet<&str> = real.test_envs.iter().map(String::as_str).collect();
    let train: Option<BTreeSet<&str>> = real.train_envs.as_ref().map(|v| v.iter().map(String::as_str).collect());
    for id in test.iter().chain(train.iter().flatten()) {
        if !groups.contains_key(*id) {
            return Err(Invalid(format!("environment {id:?} not found; available: {:?}", groups.keys().collect::<Vec<_>>())).into());
        }
    }
    if let Some(both) = train.as_ref().and_then(|t| t.intersection(&test).next()) {
        return Err(Invalid(format!("environment {both:?} is both train and test")).into());
    }

    let mut envs = Vec::new();
    for (id, series) in &groups {
        let role = if test.contains(id.as_str()) {
            Role::Test
        } else if train.as_ref().map_or(true, |t| t.contains(id.as_str())) {
            Role::Train
        } else {
            continue;
        };
        match to_env_series(id, role, series) {
            Some(env) => envs.push(env),
            None => warn!("environment {id} has incomplete series after cleaning; skipped"),
        }
    }
    if !envs.iter().any(|e| e.role == Role::Train) {
        return Err(Invalid("no training environment".into()).into());
    }
    Ok(envs)
}
