//! The four parametric families: base network, weight generator,
//! discriminator and pooling task encoder.
//!
//! Every network is a fully connected MLP whose parameters live in one flat
//! vector. Layer `k` stores its `[in, out]` weight matrix row-major followed
//! by its `[out]` bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::stochastic::LatentNoiseParams;

/// Floor added after softplus so Beta concentrations never degenerate.
pub const CONCENTRATION_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    /// Row-wise softmax.
    Softmax,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x)?,
            Activation::Tanh => g.tanh(x)?,
            Activation::Sigmoid => g.sigmoid(x)?,
            Activation::Softplus => g.softplus(x)?,
            Activation::Softmax => {
                let cols = g.value(x).dims2().1;
                let lse = g.logsumexp_rows(x)?;
                let b = g.broadcast_cols(lse, cols)?;
                let centered = g.sub(x, b)?;
                g.exp(centered)?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    weight_offset: usize,
    bias_offset: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, hidden_activation: Activation, output_activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least an input and an output layer".into()));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer widths must be positive, got {layer_widths:?}")));
        }
        if !matches!(hidden_activation, Activation::Relu | Activation::Tanh) {
            return Err(Error::InvalidArgument(format!("hidden activation must be relu or tanh, got {hidden_activation:?}")));
        }
        if matches!(output_activation, Activation::Relu) {
            return Err(Error::InvalidArgument("relu is not an output activation".into()));
        }
        Ok(Self { layer_widths, hidden_activation, output_activation })
    }

    /// Widths `[input, hidden.., output]`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, hidden_activation: Activation, output_activation: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, hidden_activation, output_activation)
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> Vec<LayerLayout> {
        let mut off = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let l = LayerLayout { weight_offset: off, bias_offset: off + w[0] * w[1], fan_in: w[0], fan_out: w[1] };
                off += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    /// Records the forward pass for a `[n, input]` batch. The parameters are
    /// read from `params` starting at flat position `offset`, which lets one
    /// row of a generated `[L, P]` weight matrix drive a base network.
    pub fn forward(&self, g: &mut Graph, params: NodeId, offset: usize, x: NodeId) -> Result<NodeId> {
        let xs = g.value(x).shape();
        if xs.len() != 2 || xs[1] != self.input_width() {
            return Err(Error::InvalidArgument(format!(
                "input of shape {xs:?} does not match network input width {}",
                self.input_width()
            )));
        }
        if g.value(params).len() < offset + self.param_count() {
            return Err(Error::ParamLength { expected: offset + self.param_count(), got: g.value(params).len() });
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut h = x;
        for (k, l) in layers.iter().enumerate() {
            let w = g.slice_flat(params, offset + l.weight_offset, &[l.fan_in, l.fan_out])?;
            let b = g.slice_flat(params, offset + l.bias_offset, &[l.fan_out])?;
            let pre = g.matmul(h, w)?;
            let pre = g.add_row(pre, b)?;
            let act = if k == last { self.output_activation } else { self.hidden_activation };
            h = act.apply(g, pre)?;
        }
        Ok(h)
    }

    /// He-uniform weights for ReLU layers, Glorot-uniform otherwise; zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut params = vec![0.0; self.param_count()];
        for (k, l) in layers.iter().enumerate() {
            let act = if k == last { self.output_activation } else { self.hidden_activation };
            let limit = match act {
                Activation::Relu => (6.0 / l.fan_in as f64).sqrt(),
                _ => (6.0 / (l.fan_in + l.fan_out) as f64).sqrt(),
            };
            for v in &mut params[l.weight_offset..l.bias_offset] {
                *v = rng.random_range(-limit..limit);
            }
        }
        params
    }
}

/// Flat base-network weights together with the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub spec: MlpSpec,
    pub values: Vec<f64>,
}

impl BaseWeights {
    pub fn new(spec: MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::ParamLength { expected: spec.param_count(), got: values.len() });
        }
        Ok(Self { spec, values })
    }
}

macro_rules! param_vector {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn len(&self) -> usize {
                self.0.len()
            }
            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }
            pub fn to_tensor(&self) -> Tensor {
                Tensor::vector(self.0.clone())
            }
            pub fn zeros(n: usize) -> Self {
                Self(vec![0.0; n])
            }
        }
    };
}

param_vector!(
    /// Weight-generator parameters. Plays both the shared prior parameter θ
    /// and the task posterior parameter λᵢ.
    GeneratorParams
);
param_vector!(
    /// Discriminator parameters (meta-initialisation ω₀ or task-adapted ωᵢ).
    DiscriminatorState
);
param_vector!(
    /// Per-example encoder parameters of the pooling task encoder.
    EncoderParams
);

/// Shapes of all four networks for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_dim: usize,
    pub base: MlpSpec,
    pub generator: MlpSpec,
    pub discriminator: MlpSpec,
    pub encoder: MlpSpec,
}

impl Architecture {
    /// Builds the generator, discriminator and encoder around a base network.
    /// The encoder mirrors the base input and emits `2·latent_dim` values.
    pub fn new(
        base: MlpSpec,
        latent_dim: usize,
        generator_hidden: &[usize],
        discriminator_hidden: &[usize],
        encoder_hidden: &[usize],
        generator_output: Activation,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent dimension must be positive".into()));
        }
        let p = base.param_count();
        let generator = MlpSpec::with_hidden(latent_dim, generator_hidden, p, Activation::Relu, generator_output)?;
        let discriminator = MlpSpec::with_hidden(p, discriminator_hidden, 1, Activation::Relu, Activation::Identity)?;
        let encoder = MlpSpec::with_hidden(base.input_width(), encoder_hidden, 2 * latent_dim, Activation::Relu, Activation::Identity)?;
        Ok(Self { latent_dim, base, generator, discriminator, encoder })
    }

    /// Regression networks: base 1-40-40-1 ReLU, Z = 40, generator hidden
    /// (128, 512), discriminator hidden (512, 128, 40), encoder mirroring the
    /// base network.
    pub fn regression_default() -> Self {
        let base = MlpSpec::new(vec![1, 40, 40, 1], Activation::Relu, Activation::Identity).expect("static spec");
        Self::new(base, 40, &[128, 512], &[512, 128, 40], &[40, 40], Activation::Tanh).expect("static spec")
    }

    /// Feature-input classification networks: base `dim-128-32-N`, Z = 128,
    /// generator hidden (256, 512), discriminator hidden (512, 256, 128),
    /// encoder hidden (256, 256).
    pub fn classification_default(input_dim: usize, n_way: usize) -> Result<Self> {
        let base = MlpSpec::with_hidden(input_dim, &[128, 32], n_way, Activation::Relu, Activation::Identity)?;
        Self::new(base, 128, &[256, 512], &[512, 256, 128], &[256, 256], Activation::Tanh)
    }

    pub fn base_param_count(&self) -> usize {
        self.base.param_count()
    }
}

fn input_matrix(x: &Tensor, width: usize) -> Result<Tensor> {
    match x.shape() {
        [n, d] if *d == width => Ok(x.reshaped(&[*n, *d])?),
        [d] if *d == width => Ok(x.reshaped(&[1, *d])?),
        s => Err(Error::InvalidArgument(format!("input of shape {s:?} does not match width {width}"))),
    }
}

/// Evaluates the base network on `x` (`[n, input]` or a single `[input]` row).
pub fn base_forward(w: &BaseWeights, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xm = g.input(input_matrix(x, w.spec.input_width())?);
    let p = g.param(Tensor::vector(w.values.clone()));
    let out = w.spec.forward(&mut g, p, 0, xm)?;
    Ok(g.value(out).clone())
}

/// Maps one latent vector through the generator to base-network weights.
pub fn generate_weights(arch: &Architecture, z: &Tensor, theta: &GeneratorParams) -> Result<BaseWeights> {
    if z.len() != arch.latent_dim {
        return Err(Error::InvalidArgument(format!("latent vector has {} entries, expected {}", z.len(), arch.latent_dim)));
    }
    if theta.len() != arch.generator.param_count() {
        return Err(Error::ParamLength { expected: arch.generator.param_count(), got: theta.len() });
    }
    let mut g = Graph::new();
    let zn = g.input(z.reshaped(&[1, arch.latent_dim])?);
    let p = g.param(theta.to_tensor());
    let out = arch.generator.forward(&mut g, p, 0, zn)?;
    BaseWeights::new(arch.base.clone(), g.value(out).data().to_vec())
}

/// Discriminator logit `V` and probability `D = sigmoid(V)` for one weight vector.
pub fn discriminate(arch: &Architecture, w: &BaseWeights, d: &DiscriminatorState) -> Result<(f64, f64)> {
    if d.len() != arch.discriminator.param_count() {
        return Err(Error::ParamLength { expected: arch.discriminator.param_count(), got: d.len() });
    }
    let mut g = Graph::new();
    let wn = g.input(input_matrix(&Tensor::vector(w.values.clone()), arch.discriminator.input_width())?);
    let p = g.param(d.to_tensor());
    let v = arch.discriminator.forward(&mut g, p, 0, wn)?;
    let prob = g.sigmoid(v)?;
    Ok((g.value(v).item(), g.value(prob).item()))
}

/// Records the pooling encoder on a `[m, d]` support batch and returns the
/// nodes of the two positive `[Z]` parameter vectors.
///
/// Rows are summed in their given order, so callers that need bit-identical
/// results across permutations must present the batch in a canonical order.
pub fn encode_task_node(arch: &Architecture, g: &mut Graph, enc: NodeId, x_support: NodeId) -> Result<(NodeId, NodeId)> {
    let rows = g.value(x_support).dims2().0;
    if rows == 0 || g.value(x_support).is_empty() {
        return Err(Error::EmptySupport);
    }
    let h = arch.encoder.forward(g, enc, 0, x_support)?;
    let pooled = g.sum_rows(h)?;
    let pooled = g.scale(pooled, 1.0 / rows as f64)?;
    let pos = g.softplus(pooled)?;
    let pos = g.add_scalar(pos, CONCENTRATION_FLOOR)?;
    let z = arch.latent_dim;
    let first = g.slice_flat(pos, 0, &[z])?;
    let second = g.slice_flat(pos, z, &[z])?;
    Ok((first, second))
}

/// Raw pooled encoder output before the positivity map.
pub fn pooled_encoding(arch: &Architecture, x_support: &[Tensor], e: &EncoderParams) -> Result<Vec<f64>> {
    let x = stack_rows(x_support, arch.encoder.input_width())?;
    let mut g = Graph::new();
    let xn = g.input(x);
    let p = g.param(e.to_tensor());
    let h = arch.encoder.forward(&mut g, p, 0, xn)?;
    let rows = g.value(xn).dims2().0;
    let pooled = g.sum_rows(h)?;
    let pooled = g.scale(pooled, 1.0 / rows as f64)?;
    Ok(g.value(pooled).data().to_vec())
}

/// Encodes the support inputs into latent-noise parameters.
pub fn encode_task(arch: &Architecture, x_support: &[Tensor], e: &EncoderParams) -> Result<LatentNoiseParams> {
    if e.len() != arch.encoder.param_count() {
        return Err(Error::ParamLength { expected: arch.encoder.param_count(), got: e.len() });
    }
    let x = stack_rows(x_support, arch.encoder.input_width())?;
    let mut g = Graph::new();
    let xn = g.input(x);
    let p = g.param(e.to_tensor());
    let (a, b) = encode_task_node(arch, &mut g, p, xn)?;
    LatentNoiseParams::new(g.value(a).data().to_vec(), g.value(b).data().to_vec())
}

/// Stacks equally sized input vectors into a `[m, width]` matrix.
pub fn stack_rows(rows: &[Tensor], width: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::InvalidArgument(format!("row of {} values, expected {width}", r.len())));
        }
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::matrix(rows.len(), width, data)?)
}
