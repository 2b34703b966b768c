//! Deterministic MAML-style baseline: one shared base-network weight vector,
//! adapted to each task by plain gradient steps on the support loss.

use serde::{Deserialize, Serialize};

use super::{pointwise_nll, sample_meta_batch, TrainConfig};
use crate::autodiff::{Graph, InnerGradMode, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::networks::MlpSpec;
use crate::optim::{Optimizer, OptimizerKind};
use crate::stochastic::{Purpose, RngStream};
use crate::task_environments::{Environment, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MamlState {
    pub weights: Vec<f64>,
    pub opt: Optimizer,
    pub iteration: u64,
}

impl MamlState {
    pub fn init(base: &MlpSpec, cfg: &TrainConfig) -> Self {
        let w = base.init(&mut RngStream::new(cfg.seed, 0, 0, Purpose::Init).with_index(3).rng());
        Self { opt: Optimizer::new(OptimizerKind::Adam, w.len(), cfg.alpha_v), weights: w, iteration: 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// Mean unclipped NLL (half squared error or cross-entropy) of `split`.
pub fn split_loss_node(base: &MlpSpec, g: &mut Graph, w: NodeId, split: &Split) -> Result<NodeId> {
    if split.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let x = g.constant(split.x.clone());
    let out = base.forward(g, w, 0, x)?;
    let nll = pointwise_nll(g, out, &split.y)?;
    Ok(g.mean(nll)?)
}

/// η gradient steps at α_t from the node `w`. In first-order mode each inner
/// gradient is detached.
fn adapt_node(base: &MlpSpec, g: &mut Graph, w: NodeId, support: &Split, cfg: &TrainConfig) -> Result<NodeId> {
    let mut cur = w;
    for _ in 0..cfg.eta {
        let l = split_loss_node(base, g, cur, support)?;
        let mut grad = g.grad(l, &[cur])?.remove(0);
        if cfg.inner_grad == InnerGradMode::FirstOrder {
            grad = g.detach(grad)?;
        }
        let step = g.scale(grad, cfg.alpha_t)?;
        cur = g.sub(cur, step)?;
    }
    Ok(cur)
}

/// Task-adapted weights.
pub fn adapt(base: &MlpSpec, weights: &[f64], support: &Split, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(weights.to_vec()));
    let a = adapt_node(base, &mut g, w, support, cfg)?;
    Ok(g.value(a).data().to_vec())
}

/// Raw network outputs `[m, out]` on `x`.
pub fn forward(base: &MlpSpec, weights: &[f64], x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = g.constant(Tensor::vector(weights.to_vec()));
    let xn = g.constant(x.clone());
    let out = base.forward(&mut g, w, 0, xn)?;
    Ok(g.value(out).clone())
}

/// One outer step over a fresh meta-batch; returns the mean query loss.
pub fn train_step(base: &MlpSpec, state: &mut MamlState, env: &Environment, cfg: &TrainConfig) -> Result<f64> {
    let tasks = sample_meta_batch(env, cfg.seed, state.iteration, cfg.tasks())?;
    let mut grad = vec![0.0; state.weights.len()];
    let mut loss = 0.0;
    let t = tasks.len() as f64;
    for task in &tasks {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(state.weights.clone()));
        let a = adapt_node(base, &mut g, w, &task.support, cfg)?;
        let q = split_loss_node(base, &mut g, a, &task.query)?;
        loss += g.value(q).item() / t;
        let gw = g.grad_values(q, &[w])?.remove(0);
        for (acc, v) in grad.iter_mut().zip(gw.data()) {
            *acc += v / t;
        }
    }
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("baseline meta-gradient".into()));
    }
    state.opt.step(&mut state.weights, &grad);
    state.iteration += 1;
    Ok(loss)
}

pub fn train<F>(base: &MlpSpec, state: &mut MamlState, env: &Environment, cfg: &TrainConfig, mut on_iteration: F) -> Result<Vec<f64>>
where
    F: FnMut(&MamlState, f64) -> Result<()>,
{
    cfg.validate()?;
    if state.weights.len() != base.param_count() {
        return Err(Error::ArchitectureMismatch(format!("baseline holds {} weights, network expects {}", state.weights.len(), base.param_count())));
    }
    let mut losses = Vec::new();
    while state.iteration < cfg.iterations {
        let l = train_step(base, state, env, cfg)?;
        on_iteration(state, l)?;
        losses.push(l);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::Activation;
    use crate::task_environments::{RegressionEnv, Targets};

    fn linear() -> MlpSpec {
        MlpSpec::new(vec![1, 1], Activation::Relu, Activation::Identity).unwrap()
    }

    #[test]
    fn one_step_on_linear_model_matches_hand_gradient() {
        let cfg = TrainConfig { eta: 1, alpha_t: 0.1, ..TrainConfig::regression_default() };
        let support = Split::new(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(), Targets::Values(vec![3.0, 5.0])).unwrap();
        let (w, b) = (0.5, 0.0);
        let a = adapt(&linear(), &[w, b], &support, &cfg).unwrap();
        // L = mean ½(wx + b − y)²
        let r = [w * 1.0 + b - 3.0, w * 2.0 + b - 5.0];
        let gw = (r[0] * 1.0 + r[1] * 2.0) / 2.0;
        let gb = (r[0] + r[1]) / 2.0;
        assert!((a[0] - (w - 0.1 * gw)).abs() < 1e-12);
        assert!((a[1] - (b - 0.1 * gb)).abs() < 1e-12);
    }

    #[test]
    fn second_order_differs_from_first_order_on_curved_loss() {
        let base = MlpSpec::new(vec![1, 3, 1], Activation::Tanh, Activation::Identity).unwrap();
        let env = Environment::Regression(RegressionEnv::default());
        let cfg = TrainConfig { iterations: 1, eta: 2, alpha_t: 0.1, ..TrainConfig::regression_default() };
        let mut a = MamlState::init(&base, &cfg);
        let mut b = a.clone();
        train_step(&base, &mut a, &env, &cfg).unwrap();
        train_step(&base, &mut b, &env, &TrainConfig { inner_grad: InnerGradMode::SecondOrder, ..cfg }).unwrap();
        assert_ne!(a.opt.m, b.opt.m);
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let base = MlpSpec::new(vec![1, 8, 1], Activation::Relu, Activation::Identity).unwrap();
        let env = Environment::Regression(RegressionEnv::default());
        let cfg = TrainConfig { iterations: 5, ..TrainConfig::regression_default() };
        let run = || {
            let mut s = MamlState::init(&base, &cfg);
            let l = train(&base, &mut s, &env, &cfg, |_, _| Ok(())).unwrap();
            (s, l)
        };
        let (a, la) = run();
        assert_eq!(run(), (a.clone(), la));
        assert!(a.is_finite());
        assert_eq!(a.iteration, 5);
    }
}
