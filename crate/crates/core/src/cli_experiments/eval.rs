//! Evaluation over fresh episodes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelState;
use super::ExperimentConfig;
use crate::atomic::write_atomic;
use crate::autodiff::Tensor;
use crate::calibration_metrics::{self, classification_nll, classification_reliability, ece_mce, gaussian_nll, mixture_nll, regression_reliability, ReliabilityCurve};
use crate::error::{Error, Result};
use crate::meta_learning::{bound_trial, maml, predict, Predictive};
use crate::networks::Architecture;
use crate::stochastic::{Purpose, RngStream};
use crate::task_environments::{Environment, TaskBatch, TaskKind, Targets};

pub const REPORT_FILE: &str = "eval_report.json";
pub const TASKS_FILE: &str = "eval_tasks.csv";
pub const TASKS_HEADER: [&str; 5] = ["task", "kind", "nll", "mse", "accuracy"];

/// Evaluation stream iterations: episodes, predictions and bound trials.
const EPISODE_STREAM: u64 = 0;
const PREDICT_STREAM: u64 = 1;
const BOUND_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: usize,
    pub kind: TaskKind,
    /// Mean per-point NLL including the normaliser.
    pub nll: f64,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCurve {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub truth: Vec<f64>,
    pub support_x: Vec<f64>,
    pub support_y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTally {
    pub trials: usize,
    pub holds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: TaskKind,
    pub tasks: usize,
    pub nll: f64,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: super::Mode,
    pub n_tasks: usize,
    pub mean_nll: Option<f64>,
    pub mean_mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub by_kind: Vec<KindSummary>,
    pub ece: Option<f64>,
    pub mce: Option<f64>,
    pub reliability: Option<ReliabilityCurve>,
    pub bound: Option<BoundTally>,
    pub curve: Option<RegressionCurve>,
    pub tasks: Vec<TaskRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-point predictive samples or class probabilities for one task.
enum Readout {
    Regression(Vec<Vec<f64>>),
    Classification(Vec<Vec<f64>>),
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn readout(arch: &Architecture, cfg: &ExperimentConfig, state: &ModelState, support: &crate::task_environments::Split, x: &Tensor, classification: bool, stream: RngStream) -> Result<Readout> {
    Ok(match state {
        ModelState::Simpa(s) => match predict(arch, s, support, x, classification, &cfg.train, stream)? {
            Predictive::Regression { samples } => Readout::Regression(samples),
            Predictive::Classification { probs } => Readout::Classification(probs),
        },
        ModelState::Maml(s) => {
            let w = maml::adapt(&arch.base, &s.weights, support, &cfg.train)?;
            let out = maml::forward(&arch.base, &w, x)?;
            let (m, c) = out.dims2();
            let rows = (0..m).map(|i| out.data()[i * c..(i + 1) * c].to_vec());
            if classification {
                Readout::Classification(rows.map(|r| softmax(&r)).collect())
            } else {
                Readout::Regression(rows.collect())
            }
        }
    })
}

/// Draws from the unit-variance Gaussian readout around each sampled output.
fn readout_draws(samples: &[f64], n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|j| samples[j % samples.len()] + crate::task_environments::std_normal(rng)).collect()
}

pub fn check_state(arch: &Architecture, state: &ModelState) -> Result<()> {
    match state {
        ModelState::Simpa(s) => s.check_architecture(arch),
        ModelState::Maml(s) if s.weights.len() != arch.base.param_count() => {
            Err(Error::ArchitectureMismatch(format!("baseline holds {} weights, network expects {}", s.weights.len(), arch.base.param_count())))
        }
        ModelState::Maml(_) => Ok(()),
    }
}

/// Evaluation episodes; identical for every model under the same seed.
pub fn eval_tasks(env: &Environment, seed: u64, n_tasks: usize) -> Result<Vec<TaskBatch>> {
    (0..n_tasks).map(|j| env.sample_task(&mut RngStream::new(seed, EPISODE_STREAM, j as u64, Purpose::Evaluation).rng())).collect()
}

/// Evaluates `state` on `n_tasks` fresh episodes drawn with the config seed.
pub fn run_eval(cfg: &ExperimentConfig, state: &ModelState, n_tasks: usize) -> Result<EvalReport> {
    let env = cfg.environment()?;
    let arch = cfg.architecture_for(&env)?;
    check_state(&arch, state)?;
    let tasks = eval_tasks(&env, cfg.train.seed, n_tasks)?;
    evaluate_tasks(cfg, &arch, state, &tasks, env.is_classification())
}

pub fn evaluate_tasks(cfg: &ExperimentConfig, arch: &Architecture, state: &ModelState, tasks: &[TaskBatch], classification: bool) -> Result<EvalReport> {
    let seed = cfg.train.seed;
    let mut rows = Vec::with_capacity(tasks.len());
    let mut pooled_draws: Vec<Vec<f64>> = Vec::new();
    let mut pooled_targets: Vec<f64> = Vec::new();
    let mut pooled_probs: Vec<Vec<f64>> = Vec::new();
    let mut pooled_labels: Vec<usize> = Vec::new();

    for (j, task) in tasks.iter().enumerate() {
        let stream = RngStream::new(seed, PREDICT_STREAM, j as u64, Purpose::Evaluation);
        match (readout(arch, cfg, state, &task.support, &task.query.x, classification, stream)?, &task.query.y) {
            (Readout::Regression(samples), Targets::Values(y)) => {
                let mse = mean(samples.iter().zip(y).map(|(s, t)| (s.iter().sum::<f64>() / s.len() as f64 - t).powi(2))).unwrap_or(f64::NAN);
                let nll = match state {
                    ModelState::Simpa(_) => mixture_nll(&samples, 1.0, y)?.value,
                    ModelState::Maml(_) => mean(samples.iter().zip(y).map(|(s, &t)| gaussian_nll(s[0], 1.0, t))).unwrap_or(f64::NAN),
                };
                let mut rng = stream.with_purpose(Purpose::Test).rng();
                for (s, &t) in samples.iter().zip(y) {
                    pooled_draws.push(readout_draws(s, cfg.eval.readout_draws, &mut rng));
                    pooled_targets.push(t);
                }
                rows.push(TaskRow { task: j, kind: task.kind, nll, mse: Some(mse), accuracy: None });
            }
            (Readout::Classification(probs), Targets::Classes(labels)) => {
                let nll = classification_nll(&probs, labels)?.value;
                let acc = mean(probs.iter().zip(labels).map(|(p, &l)| f64::from(calibration_metrics::argmax(p).0 == l))).unwrap_or(f64::NAN);
                pooled_probs.extend(probs);
                pooled_labels.extend(labels);
                rows.push(TaskRow { task: j, kind: task.kind, nll, mse: None, accuracy: Some(acc) });
            }
            _ => return Err(Error::InvalidArgument(format!("task {j} targets do not match the environment"))),
        }
    }

    let reliability = if classification && !pooled_probs.is_empty() {
        Some(classification_reliability(&pooled_probs, &pooled_labels, cfg.eval.bins)?)
    } else if !classification && pooled_targets.len() >= calibration_metrics::MIN_REGRESSION_POINTS {
        Some(regression_reliability(&pooled_draws, &pooled_targets, &calibration_metrics::uniform_levels(cfg.eval.bins + 1))?)
    } else {
        None
    };
    let (ece, mce) = match &reliability {
        Some(c) => {
            let (e, m) = ece_mce(c);
            (Some(e), Some(m))
        }
        None => (None, None),
    };

    let bound = match state {
        ModelState::Simpa(s) if tasks.iter().all(|t| t.oracle_query.is_some()) && !tasks.is_empty() => {
            let t = cfg.train.tasks();
            let mut tally = BoundTally { trials: 0, holds: 0 };
            for (c, chunk) in tasks.chunks_exact(t).enumerate() {
                let trial = bound_trial(arch, s, chunk, &cfg.train, RngStream::new(seed, BOUND_STREAM, 0, Purpose::Evaluation).with_index(c as u64 * (1 << 32)))?;
                tally.trials += 1;
                tally.holds += usize::from(trial.holds());
            }
            Some(tally)
        }
        _ => None,
    };

    let curve = match tasks.first() {
        Some(t) if !classification && cfg.eval.curve_points >= 2 => Some(regression_curve(cfg, arch, state, t, seed)?),
        _ => None,
    };

    let mut kinds: Vec<TaskKind> = rows.iter().map(|r| r.kind).collect();
    kinds.sort_by_key(|k| *k as u8);
    kinds.dedup();
    let by_kind = kinds
        .into_iter()
        .map(|k| {
            let sel: Vec<&TaskRow> = rows.iter().filter(|r| r.kind == k).collect();
            KindSummary {
                kind: k,
                tasks: sel.len(),
                nll: mean(sel.iter().map(|r| r.nll)).unwrap_or(f64::NAN),
                mse: mean(sel.iter().filter_map(|r| r.mse)),
                accuracy: mean(sel.iter().filter_map(|r| r.accuracy)),
            }
        })
        .collect();

    Ok(EvalReport {
        mode: state.mode(),
        n_tasks: tasks.len(),
        mean_nll: mean(rows.iter().map(|r| r.nll)),
        mean_mse: mean(rows.iter().filter_map(|r| r.mse)),
        accuracy: mean(rows.iter().filter_map(|r| r.accuracy)),
        by_kind,
        ece,
        mce,
        reliability,
        bound,
        curve,
        tasks: rows,
    })
}

fn regression_curve(cfg: &ExperimentConfig, arch: &Architecture, state: &ModelState, task: &TaskBatch, seed: u64) -> Result<RegressionCurve> {
    let n = cfg.eval.curve_points;
    let x: Vec<f64> = (0..n).map(|i| -5.0 + 10.0 * i as f64 / (n - 1) as f64).collect();
    let xt = Tensor::matrix(n, 1, x.clone())?;
    let stream = RngStream::new(seed, PREDICT_STREAM, 0, Purpose::Evaluation);
    let Readout::Regression(samples) = readout(arch, cfg, state, &task.support, &xt, false, stream)? else {
        return Err(Error::InvalidArgument("regression curve needs a regression model".into()));
    };
    let summary = Predictive::Regression { samples }.summary().expect("regression");
    let truth = task.spec.map(|s| x.iter().map(|&v| s.mean(v)).collect()).unwrap_or_default();
    let (support_x, support_y) = match &task.support.y {
        Targets::Values(y) => (task.support.x.data().to_vec(), y.clone()),
        Targets::Classes(_) => (vec![], vec![]),
    };
    Ok(RegressionCurve { x, mean: summary.iter().map(|s| s.0).collect(), std: summary.iter().map(|s| s.1).collect(), truth, support_x, support_y })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-task rows followed by one `summary` row of means.
pub fn tasks_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TASKS_HEADER).map_err(csv_err)?;
    for r in &report.tasks {
        let kind = serde_json::to_value(r.kind)?.as_str().unwrap_or_default().to_string();
        w.write_record([r.task.to_string(), kind, r.nll.to_string(), fmt_opt(r.mse), fmt_opt(r.accuracy)]).map_err(csv_err)?;
    }
    if !report.tasks.is_empty() {
        w.write_record(["summary".into(), "all".into(), fmt_opt(report.mean_nll), fmt_opt(report.mean_mse), fmt_opt(report.accuracy)]).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Writes the JSON report and the per-task CSV into `out_dir`.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&out_dir.join(TASKS_FILE), tasks_csv(report)?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
