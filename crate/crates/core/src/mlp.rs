//! Fully connected feed-forward networks used as state, output, encoder,
//! decoder and static-nonlinearity maps.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn record(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => v.sigmoid(),
            Activation::Relu => v.relu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsInit {
    #[default]
    Glorot,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasInit {
    #[default]
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InitSpec {
    pub weights: WeightsInit,
    pub bias: BiasInit,
    pub seed: u64,
}

impl InitSpec {
    pub fn glorot(seed: u64) -> Self {
        Self {
            weights: WeightsInit::Glorot,
            bias: BiasInit::Zeros,
            seed,
        }
    }

    pub fn zeros() -> Self {
        Self {
            weights: WeightsInit::Zeros,
            bias: BiasInit::Zeros,
            seed: 0,
        }
    }
}

/// Hidden widths used when none are given.
pub const DEFAULT_LAYER_SIZES: [usize; 2] = [64, 64];

/// Uniform draws in `[0, 1)` from ChaCha8 seeded with `seed`: each draw takes
/// the top 53 bits of one `u64` output.
pub struct UniformStream(ChaCha8Rng);

impl UniformStream {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[-a, a)`.
    pub fn symmetric(&mut self, a: f64) -> f64 {
        a * (2.0 * self.next_f64() - 1.0)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Alternating affine/activation layers ending with an affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpDocument", try_from = "MlpDocument")]
pub struct MlpNetwork {
    input_dim: usize,
    output_dim: usize,
    layer_sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
    seed: u64,
}

pub fn create_mlp(
    input_dim: usize,
    output_dim: usize,
    layer_sizes: &[usize],
    activation: Activation,
    init: InitSpec,
) -> Result<MlpNetwork> {
    if input_dim == 0 || output_dim == 0 || layer_sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "network dimensions must be positive: {input_dim} -> {layer_sizes:?} -> {output_dim}"
        )));
    }
    let mut dims = vec![input_dim];
    dims.extend_from_slice(layer_sizes);
    dims.push(output_dim);
    let mut rng = UniformStream::new(init.seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = match init.weights {
                WeightsInit::Zeros => DMatrix::zeros(fan_out, fan_in),
                WeightsInit::Glorot => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let vals: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.symmetric(a)).collect();
                    DMatrix::from_row_slice(fan_out, fan_in, &vals)
                }
            };
            Layer {
                weights,
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpNetwork {
        input_dim,
        output_dim,
        layer_sizes: layer_sizes.to_vec(),
        activation,
        layers,
        seed: init.seed,
    })
}

impl MlpNetwork {
    /// Two hidden layers of 64 tanh units, Glorot weights, zero biases.
    pub fn with_defaults(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        create_mlp(
            input_dim,
            output_dim,
            &DEFAULT_LAYER_SIZES,
            Activation::Tanh,
            InitSpec::glorot(seed),
        )
    }

    /// Single affine layer `W x + b`.
    pub fn affine(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weights.nrows() || weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::DimensionMismatch("affine layer shapes".into()));
        }
        Ok(Self {
            input_dim: weights.ncols(),
            output_dim: weights.nrows(),
            layer_sizes: vec![],
            activation: Activation::Tanh,
            layers: vec![Layer { weights, bias }],
            seed: 0,
        })
    }

    /// Builds a network from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("a network needs at least one layer".into()))?;
        let input_dim = first.weights.ncols();
        let mut prev = input_dim;
        for l in &layers {
            if l.weights.ncols() != prev || l.bias.len() != l.weights.nrows() {
                return Err(Error::DimensionMismatch("layer shapes do not chain".into()));
            }
            prev = l.weights.nrows();
        }
        let layer_sizes = layers[..layers.len() - 1].iter().map(|l| l.weights.nrows()).collect();
        Ok(Self {
            input_dim,
            output_dim: prev,
            layer_sizes,
            activation,
            layers,
            seed: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let mut h = DVector::from_column_slice(x);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = &l.weights * h + &l.bias;
            if i < last {
                h.apply(|v| *v = self.activation.apply(*v));
            }
        }
        Ok(h.as_slice().to_vec())
    }

    /// Puts every weight and bias on `tape` as leaves.
    pub fn record<'t>(&self, tape: &'t Tape) -> MlpVars<'t> {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.matrix(&l.weights), tape.row(l.bias.as_slice())))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Layer-major; weights (row-major) before biases within a layer.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                p.extend(l.weights.row(r).iter());
            }
            p.extend(l.bias.iter());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "network has {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let (rows, cols) = l.weights.shape();
            for r in 0..rows {
                for c in 0..cols {
                    l.weights[(r, c)] = p[k];
                    k += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = p[k];
                k += 1;
            }
        }
        Ok(())
    }
}

/// Network parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
}

impl<'t> MlpVars<'t> {
    /// Batched forward pass: `x` is `batch x input_dim`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul_t(w)?.add_row(b)?;
            if i < last {
                h = self.activation.record(h);
            }
        }
        Ok(h)
    }

    /// Leaves in parameter order, for [`Tape::gradient`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// First-layer weight matrix (`hidden x input`).
    pub fn first_weights(&self) -> Var<'t> {
        self.layers[0].0
    }
}

/// Serialized form of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDocument {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl From<MlpNetwork> for MlpDocument {
    fn from(net: MlpNetwork) -> Self {
        Self {
            params: net.params(),
            input_dim: net.input_dim,
            output_dim: net.output_dim,
            layer_sizes: net.layer_sizes,
            activation: net.activation,
            seed: net.seed,
        }
    }
}

impl TryFrom<MlpDocument> for MlpNetwork {
    type Error = Error;

    fn try_from(doc: MlpDocument) -> Result<Self> {
        let mut net = create_mlp(
            doc.input_dim,
            doc.output_dim,
            &doc.layer_sizes,
            doc.activation,
            InitSpec::zeros(),
        )?;
        net.seed = doc.seed;
        net.set_params(&doc.params)?;
        Ok(net)
    }
}
