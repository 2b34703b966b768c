//! Training and prediction: task-level adaptation of the generator and
//! discriminator (E-step), the meta-update of the hyper-posterior mean,
//! encoder and meta-discriminator (M-step), and Monte-Carlo prediction.

pub mod maml;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, InnerGradMode, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::kl_estimation::{self, DiscriminatorLabels};
use crate::networks::{encode_task_node, Architecture, DiscriminatorState, EncoderParams, GeneratorParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pac_bound::{self, assemble_bound, BoundConfig, BoundReport, TaskTerms};
use crate::stochastic::{gaussian_kl, gaussian_kl_grad, latent_node, sample_latent, sample_theta, HyperPosterior, LatentNoiseParams, NoiseFamily, Purpose, RngStream};
use crate::task_environments::{Environment, Split, TaskBatch, Targets};

/// Stride separating hyper-posterior draws inside one stream index.
const K_STRIDE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub bound: BoundConfig,
    pub k_samples: usize,
    pub l_t: usize,
    pub l_v: usize,
    pub l_d: usize,
    pub eta: usize,
    pub alpha_t: f64,
    pub alpha_v: f64,
    pub gamma_t: f64,
    pub gamma_v: f64,
    pub nu: f64,
    pub sigma_theta: f64,
    pub prior_mu0: f64,
    pub prior_sigma0: f64,
    pub label_smoothing: bool,
    pub inner_grad: InnerGradMode,
    pub noise_family: NoiseFamily,
    pub iterations: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.bound.validate()?;
        for (field, v) in [("k_samples", self.k_samples), ("l_t", self.l_t), ("l_v", self.l_v), ("l_d", self.l_d)] {
            if v == 0 {
                return Err(Error::Config { field: field.into(), reason: "must be at least 1".into() });
            }
        }
        for (field, v) in [
            ("alpha_t", self.alpha_t),
            ("alpha_v", self.alpha_v),
            ("gamma_t", self.gamma_t),
            ("gamma_v", self.gamma_v),
            ("nu", self.nu),
            ("sigma_theta", self.sigma_theta),
            ("prior_sigma0", self.prior_sigma0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config { field: field.into(), reason: format!("{v} must be positive") });
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.bound.tasks
    }

    /// Regression defaults: δ = 0.01, K = 4, L_t = L_v = 16, L_D = 128, five
    /// inner updates.
    pub fn regression_default() -> Self {
        Self {
            bound: BoundConfig { delta: 0.01, tau: 2.0, tasks: 2 },
            k_samples: 4,
            l_t: 16,
            l_v: 16,
            l_d: 128,
            eta: 5,
            alpha_t: 1e-3,
            alpha_v: 1e-4,
            gamma_t: 1e-4,
            gamma_v: 1e-5,
            nu: 1e-4,
            sigma_theta: 1e-8,
            prior_mu0: 0.0,
            prior_sigma0: 10.0,
            label_smoothing: false,
            inner_grad: InnerGradMode::FirstOrder,
            noise_family: NoiseFamily::Beta,
            iterations: 10_000,
            seed: 0,
        }
    }

    pub fn classification_default() -> Self {
        Self {
            bound: BoundConfig { delta: 0.1, tau: 2.0, tasks: 2 },
            k_samples: 2,
            l_d: 1024,
            alpha_t: 1e-2,
            label_smoothing: true,
            ..Self::regression_default()
        }
    }
}

/// Everything the M-step updates, with its optimiser moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub hyper: HyperPosterior,
    pub enc: EncoderParams,
    pub disc_meta: DiscriminatorState,
    pub opt_psi: Optimizer,
    pub opt_enc: Optimizer,
    pub opt_disc: Optimizer,
    pub iteration: u64,
}

impl MetaState {
    pub fn init(arch: &Architecture, cfg: &TrainConfig) -> Result<Self> {
        let stream = RngStream::new(cfg.seed, 0, 0, Purpose::Init);
        let psi = arch.generator.init(&mut stream.with_index(0).rng());
        let enc = arch.encoder.init(&mut stream.with_index(1).rng());
        let disc = arch.discriminator.init(&mut stream.with_index(2).rng());
        let hyper = HyperPosterior::new(psi, cfg.sigma_theta, cfg.prior_mu0, cfg.prior_sigma0)?;
        Ok(Self {
            opt_psi: Optimizer::new(OptimizerKind::Adam, hyper.psi.len(), cfg.alpha_v),
            opt_enc: Optimizer::new(OptimizerKind::Adam, enc.len(), cfg.nu),
            opt_disc: Optimizer::new(OptimizerKind::Adam, disc.len(), cfg.gamma_v),
            hyper,
            enc: EncoderParams(enc),
            disc_meta: DiscriminatorState(disc),
            iteration: 0,
        })
    }

    pub fn check_architecture(&self, arch: &Architecture) -> Result<()> {
        let checks = [
            ("generator", self.hyper.psi.len(), arch.generator.param_count()),
            ("encoder", self.enc.len(), arch.encoder.param_count()),
            ("discriminator", self.disc_meta.len(), arch.discriminator.param_count()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::ArchitectureMismatch(format!("{name} holds {got} parameters, architecture expects {want}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [&self.hyper.psi, &self.enc.0, &self.disc_meta.0].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Per-point negative log-likelihood of a base-network output without
/// normalising constants: `½(y − ŷ)²` or softmax cross-entropy. `[m]`.
pub fn pointwise_nll(g: &mut Graph, out: NodeId, y: &Targets) -> Result<NodeId> {
    match y {
        Targets::Values(v) => {
            let pred = g.reshape(out, &[v.len()])?;
            let t = g.constant(Tensor::vector(v.clone()));
            let r = g.sub(pred, t)?;
            let sq = g.mul(r, r)?;
            Ok(g.scale(sq, 0.5)?)
        }
        Targets::Classes(c) => {
            let (m, n) = g.value(out).dims2();
            let mut onehot = vec![0.0; m * n];
            for (i, &l) in c.iter().enumerate() {
                if l >= n {
                    return Err(Error::InvalidArgument(format!("label {l} outside {n} classes")));
                }
                onehot[i * n + l] = 1.0;
            }
            let oh = g.constant(Tensor::matrix(m, n, onehot)?);
            let lse = g.logsumexp_rows(out)?;
            let picked = g.mul(out, oh)?;
            let picked = g.sum_cols(picked)?;
            Ok(g.sub(lse, picked)?)
        }
    }
}

/// Base-network outputs for every generated weight row, `L × [m, out]`.
fn base_outputs(arch: &Architecture, g: &mut Graph, weights: NodeId, x: &Tensor) -> Result<Vec<NodeId>> {
    let rows = g.value(weights).dims2().0;
    let p = arch.base.param_count();
    let xn = g.constant(x.clone());
    (0..rows).map(|l| arch.base.forward(g, weights, l * p, xn)).collect()
}

/// `(1/L) Σ_l [−V(w_l; ω) + Σ_k NLL(y_k | x_k, w_l)]` with `w_l = G(z_l; λ)`.
pub fn vfe_node(arch: &Architecture, g: &mut Graph, lambda: NodeId, omega: NodeId, z: NodeId, support: &Split) -> Result<NodeId> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let w = arch.generator.forward(g, lambda, 0, z)?;
    let v = kl_estimation::logits_node(g, &arch.discriminator, omega, w)?;
    let mut total = g.sum(v)?;
    total = g.neg(total)?;
    for out in base_outputs(arch, g, w, &support.x)? {
        let nll = pointwise_nll(g, out, &support.y)?;
        let s = g.sum(nll)?;
        total = g.add(total, s)?;
    }
    let l = g.value(z).dims2().0 as f64;
    Ok(g.scale(total, 1.0 / l)?)
}

pub fn vfe(arch: &Architecture, lambda: &GeneratorParams, omega: &DiscriminatorState, support: &Split, z_batch: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.param(lambda.to_tensor());
    let om = g.constant(omega.to_tensor());
    let z = g.constant(z_batch.clone());
    let f = vfe_node(arch, &mut g, l, om, z, support)?;
    let v = g.value(f).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("variational free energy".into()));
    }
    Ok(v)
}

/// Mean over query points and weight draws of the clipped per-point NLL.
pub fn query_loss_node(arch: &Architecture, g: &mut Graph, lambda: NodeId, z: NodeId, query: &Split) -> Result<NodeId> {
    Ok(query_terms(arch, g, lambda, z, query)?.0)
}

/// Clipped loss node and the unclipped mean NLL value (without constants).
fn query_terms(arch: &Architecture, g: &mut Graph, lambda: NodeId, z: NodeId, query: &Split) -> Result<(NodeId, f64)> {
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let w = arch.generator.forward(g, lambda, 0, z)?;
    let outs = base_outputs(arch, g, w, &query.x)?;
    let denom = (outs.len() * query.len()) as f64;
    let mut total: Option<NodeId> = None;
    let mut raw = 0.0;
    for out in outs {
        let nll = pointwise_nll(g, out, &query.y)?;
        raw += g.value(nll).sum();
        let clipped = pac_bound::clip_loss_node(g, nll)?;
        let s = g.sum(clipped)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok((g.scale(total.expect("at least one draw"), 1.0 / denom)?, raw / denom))
}

pub fn query_loss(arch: &Architecture, lambda: &GeneratorParams, noise: &LatentNoiseParams, query: &Split, cfg: &TrainConfig, stream: RngStream) -> Result<f64> {
    let z_batch = sample_latent(cfg.noise_family, noise, cfg.l_v, &mut stream.with_purpose(Purpose::QueryNoise).rng())?;
    let mut g = Graph::new();
    let l = g.constant(lambda.to_tensor());
    let z = g.constant(z_batch);
    let q = query_loss_node(arch, &mut g, l, z, query)?;
    Ok(g.value(q).item())
}

/// Result of task-level adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub lambda: GeneratorParams,
    pub omega: DiscriminatorState,
    pub noise: LatentNoiseParams,
    /// VFE after the last update, on the last update's latent batch.
    pub vfe: f64,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn discriminator_update(
    arch: &Architecture,
    theta: &GeneratorParams,
    lambda: &GeneratorParams,
    omega: &mut [f64],
    noise: &LatentNoiseParams,
    cfg: &TrainConfig,
    stream: RngStream,
) -> Result<()> {
    let mut rng = stream.with_purpose(Purpose::DiscriminatorNoise).rng();
    let z = sample_latent(cfg.noise_family, noise, cfg.l_d, &mut rng)?;
    let (wp, wq) = kl_estimation::generated_pair(arch, theta, lambda, &z)?;
    let labels = DiscriminatorLabels::new(cfg.label_smoothing, cfg.l_d, cfg.l_d, &mut stream.with_purpose(Purpose::LabelSmoothing).rng());
    let (_, grad) = kl_estimation::ascent_direction(&arch.discriminator, omega, &wp, &wq, &labels)?;
    check_finite(&grad, "discriminator gradient")?;
    for (o, d) in omega.iter_mut().zip(&grad) {
        *o += cfg.gamma_t * d;
    }
    Ok(())
}

/// η alternations of discriminator ascent and VFE descent from `(θ, ω₀)`.
/// `stream` identifies the task and hyper-posterior draw; every alternation
/// draws fresh latent batches.
pub fn e_step(
    arch: &Architecture,
    theta: &GeneratorParams,
    omega0: &DiscriminatorState,
    enc: &EncoderParams,
    support: &Split,
    cfg: &TrainConfig,
    stream: RngStream,
) -> Result<Adapted> {
    let noise = crate::networks::encode_task(arch, &split_rows(support), enc)?;
    let mut lambda = theta.0.clone();
    let mut omega = omega0.0.clone();
    let mut last_vfe = f64::NAN;
    for step in 0..cfg.eta {
        let s = stream.with_index(stream.index + step as u64);
        discriminator_update(arch, theta, &GeneratorParams(lambda.clone()), &mut omega, &noise, cfg, s)?;
        let z = sample_latent(cfg.noise_family, &noise, cfg.l_t, &mut s.with_purpose(Purpose::VfeNoise).rng())?;
        let mut g = Graph::new();
        let l = g.param(Tensor::vector(lambda));
        let om = g.constant(Tensor::vector(omega.clone()));
        let zn = g.constant(z);
        let f = vfe_node(arch, &mut g, l, om, zn, support)?;
        last_vfe = g.value(f).item();
        let grad = g.grad_values(f, &[l])?.remove(0);
        check_finite(grad.data(), "VFE gradient")?;
        let mut next = g.value(l).data().to_vec();
        for (p, d) in next.iter_mut().zip(grad.data()) {
            *p -= cfg.alpha_t * d;
        }
        lambda = next;
    }
    if cfg.eta == 0 {
        let z = sample_latent(cfg.noise_family, &noise, cfg.l_t, &mut stream.with_purpose(Purpose::VfeNoise).rng())?;
        last_vfe = vfe(arch, theta, omega0, support, &z)?;
    }
    Ok(Adapted { lambda: GeneratorParams(lambda), omega: DiscriminatorState(omega), noise, vfe: last_vfe })
}

fn split_rows(s: &Split) -> Vec<Tensor> {
    (0..s.len()).map(|i| Tensor::vector(s.row(i).to_vec())).collect()
}

/// Gradient contributions of one task, summed over the K hyper-posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub emp_loss: Vec<f64>,
    pub kl: Vec<f64>,
    pub vfe: Vec<f64>,
    /// Unclipped query NLL without normalising constants.
    pub nll: Vec<f64>,
    pub m_v: usize,
    pub grad_loss_psi: Vec<f64>,
    pub grad_kl_psi: Vec<f64>,
    pub grad_loss_enc: Vec<f64>,
    pub grad_kl_enc: Vec<f64>,
    pub grad_disc: Vec<f64>,
}

impl TaskRecord {
    pub fn zeros(n_psi: usize, n_enc: usize, n_disc: usize, m_v: usize) -> Self {
        Self {
            emp_loss: vec![],
            kl: vec![],
            vfe: vec![],
            nll: vec![],
            m_v,
            grad_loss_psi: vec![0.0; n_psi],
            grad_kl_psi: vec![0.0; n_psi],
            grad_loss_enc: vec![0.0; n_enc],
            grad_kl_enc: vec![0.0; n_enc],
            grad_disc: vec![0.0; n_disc],
        }
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn terms(&self) -> TaskTerms {
        TaskTerms { emp_loss: Self::mean(&self.emp_loss), vfe: Self::mean(&self.vfe), kl: Self::mean(&self.kl), m_v: self.m_v }
    }
}

fn add_into(acc: &mut [f64], t: &Tensor) {
    for (a, v) in acc.iter_mut().zip(t.data()) {
        *a += v;
    }
}

/// Records λ as a function of the θ leaf by unrolling the inner updates with
/// their gradients kept on the tape. Discriminator states are computed from
/// values and enter as constants.
#[allow(clippy::too_many_arguments)]
fn unrolled_lambda(
    arch: &Architecture,
    g: &mut Graph,
    theta_leaf: NodeId,
    alpha: NodeId,
    beta: NodeId,
    omega0: &DiscriminatorState,
    support: &Split,
    cfg: &TrainConfig,
    stream: RngStream,
) -> Result<(NodeId, DiscriminatorState, f64)> {
    let theta = GeneratorParams(g.value(theta_leaf).data().to_vec());
    let noise = LatentNoiseParams::new(g.value(alpha).data().to_vec(), g.value(beta).data().to_vec())?;
    let mut lambda = theta_leaf;
    let mut omega = omega0.0.clone();
    let mut last_vfe = f64::NAN;
    for step in 0..cfg.eta {
        let s = stream.with_index(stream.index + step as u64);
        let lambda_val = GeneratorParams(g.value(lambda).data().to_vec());
        discriminator_update(arch, &theta, &lambda_val, &mut omega, &noise, cfg, s)?;
        let z = latent_node(g, cfg.noise_family, alpha, beta, cfg.l_t, &mut s.with_purpose(Purpose::VfeNoise).rng())?;
        let om = g.constant(Tensor::vector(omega.clone()));
        let f = vfe_node(arch, g, lambda, om, z, support)?;
        last_vfe = g.value(f).item();
        let grad = g.grad(f, &[lambda])?.remove(0);
        check_finite(g.value(grad).data(), "VFE gradient")?;
        let stepped = g.scale(grad, cfg.alpha_t)?;
        lambda = g.sub(lambda, stepped)?;
    }
    Ok((lambda, DiscriminatorState(omega), last_vfe))
}

/// Adaptation and gradient contributions of one task for one θ draw.
#[allow(clippy::too_many_arguments)]
pub fn task_contribution(
    arch: &Architecture,
    state: &MetaState,
    theta: &GeneratorParams,
    task: &TaskBatch,
    cfg: &TrainConfig,
    stream: RngStream,
    record: &mut TaskRecord,
) -> Result<()> {
    let mut g = Graph::new();
    let enc = g.param(state.enc.to_tensor());
    let xs = g.constant(task.support.x.clone());
    let (alpha, beta) = encode_task_node(arch, &mut g, enc, xs)?;

    // `wrt` is the leaf the generator gradient is taken against: λ itself in
    // first-order mode, θ when the inner updates are unrolled.
    let (lambda, wrt, omega, vfe) = match cfg.inner_grad {
        InnerGradMode::FirstOrder => {
            let adapted = e_step(arch, theta, &state.disc_meta, &state.enc, &task.support, cfg, stream)?;
            let l = g.param(adapted.lambda.to_tensor());
            (l, l, adapted.omega, adapted.vfe)
        }
        InnerGradMode::SecondOrder => {
            let t = g.param(theta.to_tensor());
            let (l, omega, vfe) = unrolled_lambda(arch, &mut g, t, alpha, beta, &state.disc_meta, &task.support, cfg, stream)?;
            (l, t, omega, vfe)
        }
    };

    let zq = latent_node(&mut g, cfg.noise_family, alpha, beta, cfg.l_v, &mut stream.with_purpose(Purpose::QueryNoise).rng())?;
    let (loss, raw_nll) = query_terms(arch, &mut g, lambda, zq, &task.query)?;
    let zk = latent_node(&mut g, cfg.noise_family, alpha, beta, cfg.l_t, &mut stream.with_purpose(Purpose::KlNoise).rng())?;
    let wk = arch.generator.forward(&mut g, lambda, 0, zk)?;
    let om = g.constant(omega.to_tensor());
    let v = kl_estimation::logits_node(&mut g, &arch.discriminator, om, wk)?;
    let kl = kl_estimation::kl_from_logits_node(&mut g, v)?;

    let gl = g.grad_values(loss, &[wrt, enc])?;
    let gk = g.grad_values(kl, &[wrt, enc])?;
    for t in gl.iter().chain(&gk) {
        check_finite(t.data(), "meta-gradient")?;
    }
    add_into(&mut record.grad_loss_psi, &gl[0]);
    add_into(&mut record.grad_loss_enc, &gl[1]);
    add_into(&mut record.grad_kl_psi, &gk[0]);
    add_into(&mut record.grad_kl_enc, &gk[1]);
    record.emp_loss.push(g.value(loss).item());
    record.kl.push(g.value(kl).item());
    record.vfe.push(vfe);
    record.nll.push(raw_nll);

    // First-order meta-discriminator gradient at the adapted state.
    let lambda_val = GeneratorParams(g.value(lambda).data().to_vec());
    let noise = LatentNoiseParams::new(g.value(alpha).data().to_vec(), g.value(beta).data().to_vec())?;
    let ms = stream.with_purpose(Purpose::MetaDiscriminatorNoise);
    let z = sample_latent(cfg.noise_family, &noise, cfg.l_d, &mut ms.rng())?;
    let (wp, wq) = kl_estimation::generated_pair(arch, theta, &lambda_val, &z)?;
    let labels = DiscriminatorLabels::new(cfg.label_smoothing, cfg.l_d, cfg.l_d, &mut ms.with_purpose(Purpose::LabelSmoothing).with_index(u64::MAX).rng());
    let (_, gd) = kl_estimation::ascent_direction(&arch.discriminator, &omega.0, &wp, &wq, &labels)?;
    check_finite(&gd, "meta-discriminator gradient")?;
    for (a, d) in record.grad_disc.iter_mut().zip(&gd) {
        *a += d;
    }
    Ok(())
}

/// Applies the meta-update from the task records of one meta-batch and
/// returns the bound assembled from the same records.
pub fn m_step(state: &mut MetaState, records: &[TaskRecord], cfg: &TrainConfig) -> Result<BoundReport> {
    let t = cfg.tasks();
    if records.len() != t {
        return Err(Error::InvalidArgument(format!("{} task records for T = {t}", records.len())));
    }
    let k = records[0].emp_loss.len();
    if k == 0 || records.iter().any(|r| r.emp_loss.len() != k) {
        return Err(Error::InvalidArgument("every task record needs the same positive number of draws".into()));
    }
    let terms: Vec<TaskTerms> = records.iter().map(TaskRecord::terms).collect();
    let kl_hyper = gaussian_kl(&state.hyper);
    let report = assemble_bound(&terms, kl_hyper, k, &cfg.bound)?;

    let scale = 1.0 / (t * k) as f64;
    let mut g_psi = vec![0.0; state.hyper.psi.len()];
    let mut g_enc = vec![0.0; state.enc.len()];
    let mut g_disc = vec![0.0; state.disc_meta.len()];
    for (r, (term, ri)) in records.iter().zip(terms.iter().zip(&report.ri)) {
        let c = if term.kl > 0.0 { pac_bound::ri_kl_slope(*ri, term.m_v) } else { 0.0 };
        for i in 0..g_psi.len() {
            g_psi[i] += scale * (r.grad_loss_psi[i] + (1.0 + c) * r.grad_kl_psi[i]);
        }
        for i in 0..g_enc.len() {
            g_enc[i] += scale * (r.grad_loss_enc[i] + c * r.grad_kl_enc[i]);
        }
        for i in 0..g_disc.len() {
            // Ascent on the discriminator objective.
            g_disc[i] -= scale * r.grad_disc[i];
        }
    }
    let c0 = pac_bound::r0_kl_slope(report.r0, &cfg.bound);
    for (gp, h) in g_psi.iter_mut().zip(gaussian_kl_grad(&state.hyper)) {
        *gp += (1.0 + c0) * h;
    }
    for (v, what) in [(&g_psi, "hyper-posterior gradient"), (&g_enc, "encoder gradient"), (&g_disc, "meta-discriminator gradient")] {
        check_finite(v, what)?;
    }
    state.opt_psi.step(&mut state.hyper.psi, &g_psi);
    state.opt_enc.step(&mut state.enc.0, &g_enc);
    state.opt_disc.step(&mut state.disc_meta.0, &g_disc);
    state.iteration += 1;
    Ok(report)
}

/// Tasks of meta-iteration `iteration`, drawn from their own streams.
pub fn sample_meta_batch(env: &Environment, seed: u64, iteration: u64, tasks: usize) -> Result<Vec<TaskBatch>> {
    (0..tasks).map(|i| env.sample_task(&mut RngStream::new(seed, iteration, i as u64, Purpose::Task).rng())).collect()
}

/// Outcome of one meta-iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub bound: BoundReport,
    /// Mean unclipped query NLL over tasks and draws, without constants.
    pub query_nll: f64,
}

/// One meta-iteration at `state.iteration`.
pub fn train_step(arch: &Architecture, state: &mut MetaState, env: &Environment, cfg: &TrainConfig) -> Result<StepReport> {
    let it = state.iteration;
    let tasks = sample_meta_batch(env, cfg.seed, it, cfg.tasks())?;
    let thetas: Vec<GeneratorParams> =
        (0..cfg.k_samples).map(|k| sample_theta(&state.hyper, &mut RngStream::new(cfg.seed, it, k as u64, Purpose::Theta).rng())).collect();
    let mut records = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let mut rec = TaskRecord::zeros(state.hyper.psi.len(), state.enc.len(), state.disc_meta.len(), task.query.len());
        for (k, theta) in thetas.iter().enumerate() {
            let stream = RngStream::new(cfg.seed, it, i as u64, Purpose::Episode).with_index(k as u64 * K_STRIDE);
            task_contribution(arch, state, theta, task, cfg, stream, &mut rec)?;
        }
        records.push(rec);
    }
    let n = records.iter().map(|r| r.nll.len()).sum::<usize>() as f64;
    let query_nll = records.iter().flat_map(|r| &r.nll).sum::<f64>() / n;
    let bound = m_step(state, &records, cfg)?;
    if !state.is_finite() {
        return Err(Error::NonFinite(format!("meta-parameters after iteration {it}")));
    }
    Ok(StepReport { bound, query_nll })
}

/// Runs meta-iterations until `state.iteration` reaches `cfg.iterations`,
/// calling `on_iteration` after each one. A callback error aborts training.
pub fn train<F>(arch: &Architecture, state: &mut MetaState, env: &Environment, cfg: &TrainConfig, mut on_iteration: F) -> Result<Vec<BoundReport>>
where
    F: FnMut(&MetaState, &StepReport) -> Result<()>,
{
    cfg.validate()?;
    state.check_architecture(arch)?;
    let mut reports = Vec::new();
    while state.iteration < cfg.iterations {
        let step = train_step(arch, state, env, cfg)?;
        on_iteration(state, &step)?;
        reports.push(step.bound);
    }
    Ok(reports)
}

/// A bound assembled on held-out tasks next to the clipped loss on their
/// oracle query sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub report: BoundReport,
    /// Mean over tasks and hyper-posterior draws of the oracle query loss.
    pub oracle_loss: f64,
}

impl BoundTrial {
    pub fn holds(&self) -> bool {
        self.oracle_loss <= self.report.bound
    }
}

/// Adapts to each of the `T` tasks with the current meta-parameters and
/// assembles the bound from their query sets.
pub fn bound_trial(arch: &Architecture, state: &MetaState, tasks: &[TaskBatch], cfg: &TrainConfig, stream: RngStream) -> Result<BoundTrial> {
    if tasks.len() != cfg.tasks() {
        return Err(Error::InvalidArgument(format!("{} tasks for T = {}", tasks.len(), cfg.tasks())));
    }
    let k_n = cfg.k_samples as f64;
    let mut terms = Vec::with_capacity(tasks.len());
    let mut oracle_total = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let oracle = task.oracle_query.as_ref().ok_or_else(|| Error::InvalidArgument(format!("task {i} has no oracle query set")))?;
        let (mut emp, mut kl, mut vfe) = (0.0, 0.0, 0.0);
        for k in 0..cfg.k_samples {
            let s = RngStream { task: i as u64, ..stream }.with_index(k as u64 * K_STRIDE);
            let theta = sample_theta(&state.hyper, &mut s.with_purpose(Purpose::Theta).rng());
            let a = e_step(arch, &theta, &state.disc_meta, &state.enc, &task.support, cfg, s)?;
            emp += query_loss(arch, &a.lambda, &a.noise, &task.query, cfg, s)?;
            oracle_total += query_loss(arch, &a.lambda, &a.noise, oracle, cfg, s)?;
            let z = sample_latent(cfg.noise_family, &a.noise, cfg.l_t, &mut s.with_purpose(Purpose::KlNoise).rng())?;
            kl += kl_estimation::estimate_kl(arch, &a.lambda, &a.omega, &z)?;
            vfe += a.vfe;
        }
        terms.push(TaskTerms { emp_loss: emp / k_n, vfe: vfe / k_n, kl: kl / k_n, m_v: task.query.len() });
    }
    let report = assemble_bound(&terms, gaussian_kl(&state.hyper), cfg.k_samples, &cfg.bound)?;
    Ok(BoundTrial { report, oracle_loss: oracle_total / (k_n * tasks.len() as f64) })
}

/// Monte-Carlo predictive distribution on query inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictive {
    /// Per query point, the `K·L_v` sampled network outputs.
    Regression { samples: Vec<Vec<f64>> },
    /// Per query point, class probabilities averaged over all draws.
    Classification { probs: Vec<Vec<f64>> },
}

impl Predictive {
    /// Mean and standard deviation of the sampled regression outputs.
    pub fn summary(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            Predictive::Regression { samples } => Some(
                samples
                    .iter()
                    .map(|s| {
                        let n = s.len() as f64;
                        let m = s.iter().sum::<f64>() / n;
                        let var = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
                        (m, var.sqrt())
                    })
                    .collect(),
            ),
            Predictive::Classification { .. } => None,
        }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Adapts to `support` once per hyper-posterior draw and averages the
/// predictive over `L_v` generated networks per draw.
pub fn predict(
    arch: &Architecture,
    state: &MetaState,
    support: &Split,
    x_query: &Tensor,
    classification: bool,
    cfg: &TrainConfig,
    stream: RngStream,
) -> Result<Predictive> {
    let (m, _) = x_query.dims2();
    let out_w = arch.base.output_width();
    let mut samples = vec![Vec::with_capacity(cfg.k_samples * cfg.l_v); m];
    let mut probs = vec![vec![0.0; out_w]; m];
    let draws = (cfg.k_samples * cfg.l_v) as f64;
    for k in 0..cfg.k_samples {
        let theta = sample_theta(&state.hyper, &mut stream.with_purpose(Purpose::Theta).with_index(k as u64).rng());
        let s = stream.with_index(k as u64 * K_STRIDE);
        let adapted = e_step(arch, &theta, &state.disc_meta, &state.enc, support, cfg, s)?;
        let z = sample_latent(cfg.noise_family, &adapted.noise, cfg.l_v, &mut s.with_purpose(Purpose::QueryNoise).rng())?;
        let mut g = Graph::new();
        let l = g.constant(adapted.lambda.to_tensor());
        let zn = g.constant(z);
        let w = arch.generator.forward(&mut g, l, 0, zn)?;
        for out in base_outputs(arch, &mut g, w, x_query)? {
            let o = g.value(out).data();
            for j in 0..m {
                let row = &o[j * out_w..(j + 1) * out_w];
                if classification {
                    for (p, q) in probs[j].iter_mut().zip(softmax_row(row)) {
                        *p += q / draws;
                    }
                } else {
                    samples[j].push(row[0]);
                }
            }
        }
    }
    Ok(if classification { Predictive::Classification { probs } } else { Predictive::Regression { samples } })
}
