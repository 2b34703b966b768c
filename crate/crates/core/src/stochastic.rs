//! Reparameterised sampling, the Gaussian hyper-posterior and keyed RNG streams.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::beta::{beta_reg, ln_beta};

use crate::autodiff::{Graph, NodeId, PathwiseGrad, Tensor};
use crate::error::{Error, Result};
use crate::networks::GeneratorParams;

/// Smallest concentration accepted by the Beta sampler.
pub const MIN_CONCENTRATION: f64 = 1e-6;

/// Samples are kept this far away from 0 and 1.
const UNIT_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    /// `z ~ Beta(alpha, beta)` componentwise, `z ∈ (0, 1)^Z`.
    #[default]
    Beta,
    /// `z ~ N(alpha, beta²)` componentwise: the first half of the encoding is
    /// the mean and the second half the standard deviation.
    Gaussian,
}

/// Parameters of the latent noise distribution `p(z | βᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNoiseParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LatentNoiseParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "concentration vectors must be non-empty and equally long ({} vs {})",
                alpha.len(),
                beta.len()
            )));
        }
        if let Some(v) = alpha.iter().chain(&beta).find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("concentrations must be positive and finite, got {v}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }
}

/// Diagonal-Gaussian hyper-posterior `q(θ; ψ) = N(ψ, σ_θ² I)` together with
/// the hyper-prior `p(θ) = N(μ₀ 1, σ₀² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPosterior {
    pub psi: Vec<f64>,
    pub sigma_theta: f64,
    pub prior_mu0: f64,
    pub prior_sigma0: f64,
}

impl HyperPosterior {
    pub fn new(psi: Vec<f64>, sigma_theta: f64, prior_mu0: f64, prior_sigma0: f64) -> Result<Self> {
        if !(sigma_theta > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_theta must be positive, got {sigma_theta}")));
        }
        if !(prior_sigma0 > 0.0) {
            return Err(Error::InvalidArgument(format!("prior_sigma0 must be positive, got {prior_sigma0}")));
        }
        Ok(Self { psi, sigma_theta, prior_mu0, prior_sigma0 })
    }
}

/// What a random stream is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Theta,
    Task,
    DiscriminatorNoise,
    LabelSmoothing,
    VfeNoise,
    QueryNoise,
    KlNoise,
    MetaDiscriminatorNoise,
    Episode,
    Evaluation,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        self as u64
    }
}

/// Key of a counter-based random stream. Equal keys give identical sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub iteration: u64,
    pub task: u64,
    pub purpose: Purpose,
    pub index: u64,
}

impl RngStream {
    pub fn new(seed: u64, iteration: u64, task: u64, purpose: Purpose) -> Self {
        Self { seed, iteration, task, purpose, index: 0 }
    }

    pub fn with_index(self, index: u64) -> Self {
        Self { index, ..self }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        Self { purpose, ..self }
    }

    /// ChaCha8 generator keyed by a SHA-256 digest of the stream id.
    pub fn rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut h = Sha256::new();
        h.update(b"simpa-rng-v1");
        for v in [self.seed, self.iteration, self.task, self.purpose.tag(), self.index] {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}

/// `∂I_x(a, b)/∂a` and `∂I_x(a, b)/∂b` by central differences of the
/// regularised incomplete beta function.
fn beta_cdf_param_partials(x: f64, a: f64, b: f64) -> (f64, f64) {
    let ha = 1e-6 * a.max(1e-3);
    let hb = 1e-6 * b.max(1e-3);
    let da = (beta_reg(a + ha, b, x) - beta_reg((a - ha).max(MIN_CONCENTRATION * 0.5), b, x)) / (a + ha - (a - ha).max(MIN_CONCENTRATION * 0.5));
    let db = (beta_reg(a, b + hb, x) - beta_reg(a, (b - hb).max(MIN_CONCENTRATION * 0.5), x)) / (b + hb - (b - hb).max(MIN_CONCENTRATION * 0.5));
    (da, db)
}

fn beta_ln_pdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

/// Implicit reparameterisation gradient of a Beta sample:
/// `∂z/∂θ = −(∂F(z; α, β)/∂θ) / f(z; α, β)`.
pub fn beta_sample_partials(z: f64, a: f64, b: f64) -> (f64, f64) {
    let pdf = beta_ln_pdf(z, a, b).exp();
    if !(pdf > 0.0) || !pdf.is_finite() {
        return (0.0, 0.0);
    }
    let (fa, fb) = beta_cdf_param_partials(z, a, b);
    let (da, db) = (-fa / pdf, -fb / pdf);
    (if da.is_finite() { da } else { 0.0 }, if db.is_finite() { db } else { 0.0 })
}

struct BetaPathwise;

impl PathwiseGrad for BetaPathwise {
    fn partials(&self, sample: &Tensor, inputs: &[&Tensor]) -> Vec<Tensor> {
        let (_, cols) = sample.dims2();
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let mut da = Vec::with_capacity(sample.len());
        let mut db = Vec::with_capacity(sample.len());
        for (i, &z) in sample.data().iter().enumerate() {
            let j = i % cols;
            let (pa, pb) = beta_sample_partials(z, a[j], b[j]);
            da.push(pa);
            db.push(pb);
        }
        let shape = sample.shape().to_vec();
        vec![Tensor::new(shape.clone(), da).expect("same shape"), Tensor::new(shape, db).expect("same shape")]
    }
}

struct GaussianPathwise {
    eps: Tensor,
}

impl PathwiseGrad for GaussianPathwise {
    fn partials(&self, sample: &Tensor, _inputs: &[&Tensor]) -> Vec<Tensor> {
        vec![Tensor::filled(sample.shape(), 1.0), self.eps.clone()]
    }
}

/// Draws `n` latent vectors as a `[n, Z]` matrix.
pub fn sample_latent(family: NoiseFamily, params: &LatentNoiseParams, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    Ok(sample_latent_with_rule(family, params, n, rng)?.0)
}

fn sample_latent_with_rule(
    family: NoiseFamily,
    params: &LatentNoiseParams,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Arc<dyn PathwiseGrad>)> {
    let z_dim = params.dim();
    match family {
        NoiseFamily::Beta => {
            let dists = params
                .alpha
                .iter()
                .zip(&params.beta)
                .map(|(&a, &b)| {
                    if a < MIN_CONCENTRATION || b < MIN_CONCENTRATION {
                        return Err(Error::InvalidArgument(format!("Beta concentration underflow: ({a}, {b})")));
                    }
                    Beta::new(a, b).map_err(|e| Error::InvalidArgument(format!("Beta({a}, {b}): {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut data = Vec::with_capacity(n * z_dim);
            for _ in 0..n {
                for d in &dists {
                    let z: f64 = d.sample(rng);
                    data.push(z.clamp(UNIT_MARGIN, 1.0 - UNIT_MARGIN));
                }
            }
            Ok((Tensor::matrix(n, z_dim, data)?, Arc::new(BetaPathwise)))
        }
        NoiseFamily::Gaussian => {
            let mut eps = Vec::with_capacity(n * z_dim);
            let mut data = Vec::with_capacity(n * z_dim);
            for _ in 0..n {
                for j in 0..z_dim {
                    let e: f64 = StandardNormal.sample(rng);
                    eps.push(e);
                    data.push(params.alpha[j] + params.beta[j] * e);
                }
            }
            let eps = Tensor::matrix(n, z_dim, eps)?;
            Ok((Tensor::matrix(n, z_dim, data)?, Arc::new(GaussianPathwise { eps })))
        }
    }
}

/// Records `n` latent draws on the graph, differentiable with respect to the
/// two parameter nodes through the pathwise rule of the noise family.
pub fn latent_node(
    g: &mut Graph,
    family: NoiseFamily,
    alpha: NodeId,
    beta: NodeId,
    n: usize,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let params = LatentNoiseParams::new(g.value(alpha).data().to_vec(), g.value(beta).data().to_vec())?;
    let (sample, rule) = sample_latent_with_rule(family, &params, n, rng)?;
    Ok(g.pathwise(sample, &[alpha, beta], rule)?)
}

/// Draws `n` Beta latent vectors. The gradient path to the concentrations is
/// available through [`latent_node`]; this returns plain values.
pub fn sample_beta(params: &LatentNoiseParams, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    sample_latent(NoiseFamily::Beta, params, n, rng)
}

/// `θ = ψ + σ_θ ε`, `ε ~ N(0, I)`.
pub fn sample_theta(h: &HyperPosterior, rng: &mut impl Rng) -> GeneratorParams {
    GeneratorParams(
        h.psi
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                m + h.sigma_theta * e
            })
            .collect(),
    )
}

/// Closed-form `KL[q(θ; ψ) ‖ p(θ)]` for the two diagonal Gaussians.
pub fn gaussian_kl(h: &HyperPosterior) -> f64 {
    let (s, s0) = (h.sigma_theta, h.prior_sigma0);
    let per_dim_const = (s0 / s).ln() + s * s / (2.0 * s0 * s0) - 0.5;
    h.psi.iter().map(|&m| per_dim_const + (m - h.prior_mu0).powi(2) / (2.0 * s0 * s0)).sum()
}

/// `∂ KL[q(θ; ψ) ‖ p(θ)] / ∂ψ`.
pub fn gaussian_kl_grad(h: &HyperPosterior) -> Vec<f64> {
    let v0 = h.prior_sigma0 * h.prior_sigma0;
    h.psi.iter().map(|&m| (m - h.prior_mu0) / v0).collect()
}
