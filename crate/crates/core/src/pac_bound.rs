//! Generalisation bound terms: loss clipping, the task- and sample-level
//! regularisers `R₀` and `Rᵢ`, confidence budget splitting and assembly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub delta: f64,
    pub tau: f64,
    #[serde(rename = "T")]
    pub tasks: usize,
}

impl BoundConfig {
    pub fn new(delta: f64, tau: f64, tasks: usize) -> Result<Self> {
        let cfg = Self { delta, tau, tasks };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config { field: "delta".into(), reason: format!("{} is not in (0, 1]", self.delta) });
        }
        if !(self.tau > 1.0 && self.tau.is_finite()) {
            return Err(Error::Config { field: "tau".into(), reason: format!("{} must exceed 1", self.tau) });
        }
        if self.tasks < 2 {
            return Err(Error::Config { field: "T".into(), reason: format!("{} tasks, at least 2 required", self.tasks) });
        }
        Ok(())
    }

    /// `τT / ((τ − 1) δ)`, the factor in front of `ln m` inside `Rᵢ`.
    pub fn sample_log_factor(&self) -> f64 {
        self.tau * self.tasks as f64 / ((self.tau - 1.0) * self.delta)
    }
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self { delta: 0.1, tau: 2.0, tasks: 2 }
    }
}

pub fn clip_loss(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

pub fn clip_loss_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    Ok(g.clip(x, 0.0, 1.0)?)
}

fn check_kl(kl: f64) -> Result<()> {
    if kl.is_finite() && kl >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("KL term {kl} must be finite and non-negative")))
    }
}

/// `R₀ = sqrt((KL_hyper + ln(τT/δ)) / (2(T − 1)))`.
pub fn compute_r0(kl_hyper: f64, cfg: &BoundConfig) -> Result<f64> {
    cfg.validate()?;
    check_kl(kl_hyper)?;
    let t = cfg.tasks as f64;
    Ok(((kl_hyper + (cfg.tau * t / cfg.delta).ln()) / (2.0 * (t - 1.0))).sqrt())
}

/// `Rᵢ = sqrt((E[KLᵢ] + τT/((τ−1)δ) · ln m) / (2(m − 1)))`.
pub fn compute_ri(expected_task_kl: f64, m_v: usize, cfg: &BoundConfig) -> Result<f64> {
    cfg.validate()?;
    check_kl(expected_task_kl)?;
    if m_v < 2 {
        return Err(Error::InvalidArgument(format!("query set of {m_v} points, at least 2 required")));
    }
    let m = m_v as f64;
    Ok(((expected_task_kl + cfg.sample_log_factor() * m.ln()) / (2.0 * (m - 1.0))).sqrt())
}

/// `dRᵢ/dKL`, used to route the regulariser's gradient through the KL estimate.
pub fn ri_kl_slope(ri: f64, m_v: usize) -> f64 {
    1.0 / (4.0 * (m_v as f64 - 1.0) * ri)
}

/// `dR₀/dKL_hyper`.
pub fn r0_kl_slope(r0: f64, cfg: &BoundConfig) -> f64 {
    1.0 / (4.0 * (cfg.tasks as f64 - 1.0) * r0)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// `δ₀ = δ/τ` and `δᵢ = (τ−1)δ/(τT)`. The last `δᵢ` absorbs the rounding
/// residual so that the compensated total is exactly `δ`.
pub fn split_confidence(cfg: &BoundConfig) -> (f64, Vec<f64>) {
    let t = cfg.tasks as f64;
    let delta0 = cfg.delta / cfg.tau;
    let each = (cfg.tau - 1.0) * cfg.delta / (cfg.tau * t);
    let mut di = vec![each; cfg.tasks];
    for _ in 0..4 {
        let mut all = Vec::with_capacity(cfg.tasks + 1);
        all.push(delta0);
        all.extend_from_slice(&di);
        let residual = cfg.delta - compensated_sum(&all);
        if residual == 0.0 {
            break;
        }
        if let Some(last) = di.last_mut() {
            *last += residual;
        }
    }
    (delta0, di)
}

/// Per-task inputs to the bound, each averaged over hyper-posterior samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTerms {
    pub emp_loss: f64,
    pub vfe: f64,
    pub kl: f64,
    pub m_v: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: f64,
    pub r0: f64,
    pub ri: Vec<f64>,
    pub kl_hyper: f64,
    pub kl_task: Vec<f64>,
    pub emp_loss: Vec<f64>,
    pub vfe: Vec<f64>,
    pub delta0: f64,
    pub delta_i: Vec<f64>,
    pub k_samples: usize,
}

impl BoundReport {
    pub fn is_finite(&self) -> bool {
        [self.bound, self.r0, self.kl_hyper, self.delta0].iter().all(|x| x.is_finite())
            && self.ri.iter().chain(&self.kl_task).chain(&self.emp_loss).chain(&self.vfe).all(|x| x.is_finite())
    }
}

/// `(1/T) Σᵢ (L̂ᵢ + KLᵢ + Rᵢ) + R₀`. KL estimates are floored at zero before
/// entering the regularisers.
pub fn assemble_bound(tasks: &[TaskTerms], kl_hyper: f64, k_samples: usize, cfg: &BoundConfig) -> Result<BoundReport> {
    if tasks.len() != cfg.tasks {
        return Err(Error::InvalidArgument(format!("{} task records for T = {}", tasks.len(), cfg.tasks)));
    }
    let r0 = compute_r0(kl_hyper, cfg)?;
    let mut ri = Vec::with_capacity(tasks.len());
    let mut per_task = Vec::with_capacity(tasks.len());
    for t in tasks {
        if !(0.0..=1.0).contains(&t.emp_loss) {
            return Err(Error::InvalidArgument(format!("empirical loss {} is not clipped to [0, 1]", t.emp_loss)));
        }
        let kl = t.kl.max(0.0);
        let r = compute_ri(kl, t.m_v, cfg)?;
        ri.push(r);
        per_task.push(t.emp_loss + kl + r);
    }
    let bound = compensated_sum(&per_task) / cfg.tasks as f64 + r0;
    let (delta0, delta_i) = split_confidence(cfg);
    Ok(BoundReport {
        bound,
        r0,
        ri,
        kl_hyper,
        kl_task: tasks.iter().map(|t| t.kl).collect(),
        emp_loss: tasks.iter().map(|t| t.emp_loss).collect(),
        vfe: tasks.iter().map(|t| t.vfe).collect(),
        delta0,
        delta_i,
        k_samples,
    })
}
