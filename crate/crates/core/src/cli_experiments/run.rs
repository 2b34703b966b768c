//! Training driver with periodic checkpoints and a JSON-lines metrics log.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Checkpoint, ModelState};
use super::{ExperimentConfig, Mode};
use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::meta_learning::{maml, train_step, MetaState};
use crate::pac_bound::BoundReport;
use crate::task_environments::Environment;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    /// Iteration count after this update.
    pub iteration: u64,
    pub mode: Mode,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundReport>,
    /// Mean unclipped query NLL of the meta-batch.
    pub query_nll: f64,
    /// Whether `query_nll` includes the likelihood normaliser.
    pub nll_includes_normaliser: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub start_iteration: u64,
    pub final_state: ModelState,
}

fn normaliser(env: &Environment) -> f64 {
    if env.is_classification() {
        0.0
    } else {
        0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// First path at which two JSON values differ, if any.
fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: String) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, p) {
                            return Some(d);
                        }
                    }
                    None => return Some(p),
                }
            }
            y.keys().find(|k| !x.contains_key(*k)).map(|k| if path.is_empty() { k.clone() } else { format!("{path}.{k}") })
        }
        _ if a == b => None,
        _ => Some(if path.is_empty() { "<root>".into() } else { path }),
    }
}

/// Resuming is allowed when only the iteration budget and checkpoint cadence differ.
fn check_resume(saved: &ExperimentConfig, cfg: &ExperimentConfig) -> Result<()> {
    let strip = |c: &ExperimentConfig| -> Result<serde_json::Value> {
        let mut c = c.clone();
        c.train.iterations = 0;
        c.checkpoint_every = 1;
        Ok(serde_json::to_value(c)?)
    };
    match first_difference(&strip(saved)?, &strip(cfg)?, String::new()) {
        None => Ok(()),
        Some(field) => Err(Error::Checkpoint(format!("resume mismatch: `{field}` differs from the checkpointed configuration"))),
    }
}

fn read_metrics(path: &Path, before: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["iteration"].as_u64().is_some_and(|i| i <= before) {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn persist(ck_path: &Path, metrics_path: &Path, config: &ExperimentConfig, state: &ModelState, lines: &[String]) -> Result<()> {
    checkpoint::save(ck_path, &Checkpoint { config: config.clone(), state: state.clone() })?;
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(metrics_path, text.as_bytes())
}

/// Trains to `cfg.train.iterations`, resuming from `checkpoint` when that
/// file exists. Checkpoint and metrics are rewritten atomically every
/// `checkpoint_every` iterations, at the end, and before returning a
/// training error (with the last finite state).
pub fn run_train<F>(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: Option<&Path>, mut progress: F) -> Result<TrainOutcome>
where
    F: FnMut(&MetricsLine),
{
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let env = cfg.environment()?;
    let arch = cfg.architecture_for(&env)?;
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out_dir.join(CHECKPOINT_FILE));
    let metrics_path = out_dir.join(METRICS_FILE);

    let mut state = if ck_path.exists() {
        let ck = checkpoint::load(&ck_path)?;
        check_resume(&ck.config, cfg)?;
        ck.state
    } else {
        match cfg.mode {
            Mode::Simpa => ModelState::Simpa(MetaState::init(&arch, &cfg.train)?),
            Mode::Maml => ModelState::Maml(maml::MamlState::init(&arch.base, &cfg.train)),
        }
    };
    match &state {
        ModelState::Simpa(s) => s.check_architecture(&arch)?,
        ModelState::Maml(s) if s.weights.len() != arch.base.param_count() => {
            return Err(Error::ArchitectureMismatch(format!("baseline holds {} weights, network expects {}", s.weights.len(), arch.base.param_count())))
        }
        ModelState::Maml(_) => {}
    }
    let start = state.iteration();
    let mut lines = read_metrics(&metrics_path, start)?;
    let norm = normaliser(&env);

    while state.iteration() < cfg.train.iterations {
        let before = state.clone();
        let step = match &mut state {
            ModelState::Simpa(s) => train_step(&arch, s, &env, &cfg.train).map(|r| (Some(r.bound), r.query_nll)),
            ModelState::Maml(s) => maml::train_step(&arch.base, s, &env, &cfg.train).map(|l| (None, l)),
        };
        let (bound, nll) = match step {
            Ok(v) => v,
            Err(e) => {
                persist(&ck_path, &metrics_path, cfg, &before, &lines)?;
                return Err(e);
            }
        };
        let line = MetricsLine { iteration: state.iteration(), mode: cfg.mode, bound, query_nll: nll + norm, nll_includes_normaliser: true };
        lines.push(serde_json::to_string(&line)?);
        progress(&line);
        if state.iteration() % cfg.checkpoint_every == 0 {
            persist(&ck_path, &metrics_path, cfg, &state, &lines)?;
        }
    }
    persist(&ck_path, &metrics_path, cfg, &state, &lines)?;
    Ok(TrainOutcome { checkpoint: ck_path, metrics: metrics_path, start_iteration: start, final_state: state })
}
