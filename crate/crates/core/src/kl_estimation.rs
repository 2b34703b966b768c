//! KL divergence between two implicit weight distributions by probabilistic
//! classification.
//!
//! A discriminator `D = sigmoid(V)` is trained to tell prior samples
//! `G(z; θ)` (label 1) from posterior samples `G(z; λ)` (label 0). At the
//! optimum `V = ln p/q`, so `KL[q ‖ p] = E_q[ln q/p] ≈ −E_q[V]`.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::networks::{Architecture, DiscriminatorState, GeneratorParams, MlpSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::stochastic::{sample_latent, LatentNoiseParams, NoiseFamily, Purpose, RngStream};

/// Real labels are drawn from `U[low, 1]`; fake labels are `1 − real`.
pub const SMOOTHED_REAL_LOW: f64 = 0.95;

/// Per-sample classification targets for one discriminator batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLabels {
    /// Targets for prior samples (nominally 1).
    pub prior: Vec<f64>,
    /// Targets for posterior samples (nominally 0).
    pub posterior: Vec<f64>,
}

impl DiscriminatorLabels {
    pub fn hard(n_prior: usize, n_posterior: usize) -> Self {
        Self { prior: vec![1.0; n_prior], posterior: vec![0.0; n_posterior] }
    }

    pub fn smoothed(n_prior: usize, n_posterior: usize, rng: &mut impl Rng) -> Self {
        let prior = (0..n_prior).map(|_| rng.random_range(SMOOTHED_REAL_LOW..=1.0)).collect();
        let posterior = (0..n_posterior).map(|_| 1.0 - rng.random_range(SMOOTHED_REAL_LOW..=1.0)).collect();
        Self { prior, posterior }
    }

    pub fn new(smoothing: bool, n_prior: usize, n_posterior: usize, rng: &mut impl Rng) -> Self {
        if smoothing {
            Self::smoothed(n_prior, n_posterior, rng)
        } else {
            Self::hard(n_prior, n_posterior)
        }
    }
}

/// Discriminator logits `V` for a `[B, P]` batch of weight vectors, as `[B]`.
pub fn logits_node(g: &mut Graph, disc: &MlpSpec, omega: NodeId, weights: NodeId) -> Result<NodeId> {
    let v = disc.forward(g, omega, 0, weights)?;
    let rows = g.value(v).dims2().0;
    Ok(g.reshape(v, &[rows])?)
}

/// `mean[t ln σ(V) + (1 − t) ln σ(−V)]` written with softplus so it cannot overflow.
fn mean_log_likelihood(g: &mut Graph, v: NodeId, targets: &[f64]) -> Result<NodeId> {
    let t = g.constant(Tensor::vector(targets.to_vec()));
    let one_minus = g.constant(Tensor::vector(targets.iter().map(|x| 1.0 - x).collect()));
    let neg_v = g.neg(v)?;
    let sp_neg = g.softplus(neg_v)?; // −ln σ(V)
    let sp_pos = g.softplus(v)?; // −ln σ(−V)
    let a = g.mul(t, sp_neg)?;
    let b = g.mul(one_minus, sp_pos)?;
    let nll = g.add(a, b)?;
    let m = g.mean(nll)?;
    Ok(g.neg(m)?)
}

/// Discriminator objective on explicit weight batches (to be maximised).
pub fn discriminator_loss_node(
    g: &mut Graph,
    disc: &MlpSpec,
    omega: NodeId,
    prior_w: NodeId,
    posterior_w: NodeId,
    labels: &DiscriminatorLabels,
) -> Result<NodeId> {
    let vp = logits_node(g, disc, omega, prior_w)?;
    let vq = logits_node(g, disc, omega, posterior_w)?;
    if labels.prior.len() != g.value(vp).len() || labels.posterior.len() != g.value(vq).len() {
        return Err(Error::InvalidArgument("label counts do not match sample counts".into()));
    }
    let lp = mean_log_likelihood(g, vp, &labels.prior)?;
    let lq = mean_log_likelihood(g, vq, &labels.posterior)?;
    Ok(g.add(lp, lq)?)
}

fn generate_batch(arch: &Architecture, g: &mut Graph, params: &GeneratorParams, z: NodeId) -> Result<NodeId> {
    let p = g.constant(params.to_tensor());
    arch.generator.forward(g, p, 0, z)
}

/// Discriminator objective with prior and posterior samples generated from
/// the same latent batch.
pub fn discriminator_loss(
    arch: &Architecture,
    omega: &DiscriminatorState,
    theta: &GeneratorParams,
    lambda: &GeneratorParams,
    z_batch: &Tensor,
    labels: &DiscriminatorLabels,
) -> Result<f64> {
    if z_batch.dims2().0 == 0 {
        return Err(Error::InvalidArgument("discriminator batch must hold at least one sample".into()));
    }
    let mut g = Graph::new();
    let z = g.constant(z_batch.clone());
    let wp = generate_batch(arch, &mut g, theta, z)?;
    let wq = generate_batch(arch, &mut g, lambda, z)?;
    let om = g.param(omega.to_tensor());
    let l = discriminator_loss_node(&mut g, &arch.discriminator, om, wp, wq, labels)?;
    Ok(g.value(l).item())
}

/// One gradient-ascent step on explicit batches; returns the new parameters,
/// the objective before the step and its gradient.
pub fn ascent_direction(
    disc: &MlpSpec,
    omega: &[f64],
    prior_w: &Tensor,
    posterior_w: &Tensor,
    labels: &DiscriminatorLabels,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let om = g.param(Tensor::vector(omega.to_vec()));
    let wp = g.constant(prior_w.clone());
    let wq = g.constant(posterior_w.clone());
    let l = discriminator_loss_node(&mut g, disc, om, wp, wq, labels)?;
    let grad = g.grad_values(l, &[om])?.remove(0).into_data();
    Ok((g.value(l).item(), grad))
}

/// Hyper-parameters of task-level discriminator adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub smoothing: bool,
    pub family: NoiseFamily,
}

/// Plain gradient ascent from `omega0` on batches provided by `sampler`.
/// Divergence is caught as a non-finite objective.
pub fn adapt_discriminator_with<F>(disc: &MlpSpec, omega0: &DiscriminatorState, steps: usize, lr: f64, mut sampler: F) -> Result<DiscriminatorState>
where
    F: FnMut(usize) -> Result<(Tensor, Tensor, DiscriminatorLabels)>,
{
    let mut omega = omega0.0.clone();
    for step in 0..steps {
        let (wp, wq, labels) = sampler(step)?;
        let (loss, grad) = ascent_direction(disc, &omega, &wp, &wq, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("discriminator objective at step {step}")));
        }
        for (o, d) in omega.iter_mut().zip(&grad) {
            *o += lr * d;
        }
    }
    Ok(DiscriminatorState(omega))
}

/// Generated prior and posterior weight batches for one shared latent draw.
pub fn generated_pair(arch: &Architecture, theta: &GeneratorParams, lambda: &GeneratorParams, z: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let zn = g.constant(z.clone());
    let wp = generate_batch(arch, &mut g, theta, zn)?;
    let wq = generate_batch(arch, &mut g, lambda, zn)?;
    Ok((g.value(wp).clone(), g.value(wq).clone()))
}

/// Task-level adaptation `ωᵢ ← ωᵢ + γ ∇ L_D(ωᵢ)` from `ω₀`, each step on a
/// fresh latent batch from `p(z | βᵢ)`.
pub fn adapt_discriminator(
    arch: &Architecture,
    omega0: &DiscriminatorState,
    theta: &GeneratorParams,
    lambda: &GeneratorParams,
    noise: &LatentNoiseParams,
    cfg: &AdaptConfig,
    stream: RngStream,
) -> Result<DiscriminatorState> {
    adapt_discriminator_with(&arch.discriminator, omega0, cfg.steps, cfg.lr, |step| {
        let mut rng = stream.with_purpose(Purpose::DiscriminatorNoise).with_index(step as u64).rng();
        let z = sample_latent(cfg.family, noise, cfg.batch, &mut rng)?;
        let (wp, wq) = generated_pair(arch, theta, lambda, &z)?;
        let mut lrng = stream.with_purpose(Purpose::LabelSmoothing).with_index(step as u64).rng();
        let labels = DiscriminatorLabels::new(cfg.smoothing, cfg.batch, cfg.batch, &mut lrng);
        Ok((wp, wq, labels))
    })
}

/// Optimiser-driven training to (near) convergence, used where the
/// discriminator must approximate the optimal density-ratio classifier.
pub fn train_discriminator<F>(
    disc: &MlpSpec,
    omega0: &DiscriminatorState,
    steps: usize,
    optimizer: OptimizerKind,
    lr: f64,
    mut sampler: F,
) -> Result<DiscriminatorState>
where
    F: FnMut(usize) -> Result<(Tensor, Tensor, DiscriminatorLabels)>,
{
    let mut omega = omega0.0.clone();
    let mut opt = Optimizer::new(optimizer, omega.len(), lr);
    for step in 0..steps {
        let (wp, wq, labels) = sampler(step)?;
        let (loss, grad) = ascent_direction(disc, &omega, &wp, &wq, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("discriminator objective at step {step}")));
        }
        let descent: Vec<f64> = grad.iter().map(|d| -d).collect();
        opt.step(&mut omega, &descent);
    }
    Ok(DiscriminatorState(omega))
}

/// `−mean V` over a `[B]` logit node.
pub fn kl_from_logits_node(g: &mut Graph, v: NodeId) -> Result<NodeId> {
    let m = g.mean(v)?;
    Ok(g.neg(m)?)
}

/// KL estimate `−(1/L) Σ V(w_l; ω)` on explicit posterior samples.
pub fn estimate_kl_from_weights(disc: &MlpSpec, omega: &DiscriminatorState, posterior_w: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let om = g.constant(omega.to_tensor());
    let w = g.constant(posterior_w.clone());
    let v = logits_node(&mut g, disc, om, w)?;
    let kl = kl_from_logits_node(&mut g, v)?;
    Ok(g.value(kl).item())
}

/// KL estimate for `q(w; λ)` against the prior the discriminator was adapted to.
pub fn estimate_kl(arch: &Architecture, lambda: &GeneratorParams, omega: &DiscriminatorState, z_batch: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(z_batch.clone());
    let w = generate_batch(arch, &mut g, lambda, z)?;
    let om = g.constant(omega.to_tensor());
    let v = logits_node(&mut g, &arch.discriminator, om, w)?;
    let kl = kl_from_logits_node(&mut g, v)?;
    Ok(g.value(kl).item())
}
