//! Small embedding extractors: TDNN, residual and Res2Net blocks, statistics
//! pooling and dense layers, with analytic gradients.

mod gradcheck;
mod layers;
mod spec;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::tensor_io::{read_named, take, write_named, NamedMatrix};

pub use gradcheck::{
    check_gradients, check_gradients_against, check_gradients_with, GradCheckOptions,
    GradCheckReport, TensorCheck,
};
pub use layers::{Dense, FactoredDense, Layer, Res2Block, ResBlock, TemporalAffine, STATS_VAR_FLOOR};
pub use spec::{LayerSpec, NetworkSpec};

use layers::Cache;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    pool_index: usize,
}

/// Intermediate results of a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
    /// Output of every layer, in order.
    pub outputs: Vec<DMatrix<f64>>,
    input_shape: (usize, usize),
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("network has layers")
    }
}

/// Gradients for every parameter tensor, in [`Network::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub tensors: Vec<DMatrix<f64>>,
}

impl ParamGradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            tensors: net.params().iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b * scale;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            *t *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl Network {
    /// All parameters zero.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let dims = spec.validate()?;
        let mut in_dim = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, &out_dim) in spec.layers.iter().zip(&dims) {
            layers.push(match l {
                LayerSpec::Tdnn { out, context } => {
                    Layer::Tdnn(TemporalAffine::zeros(context.clone(), in_dim, *out)?)
                }
                LayerSpec::ResBlock { kernel } => Layer::Res(ResBlock::zeros(in_dim, *kernel)?),
                LayerSpec::Res2Block { scale, width, kernel } => {
                    Layer::Res2(Res2Block::zeros(*scale, *width, *kernel)?)
                }
                LayerSpec::StatsPool => Layer::StatsPool,
                LayerSpec::Dense { out } => Layer::Dense(Dense::zeros(in_dim, *out)),
                LayerSpec::FactoredDense { out, rank } => {
                    Layer::FactoredDense(FactoredDense::zeros(in_dim, *rank, *out))
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::BatchNorm => Layer::FeatureNorm,
                LayerSpec::Dropout { rate } => Layer::Dropout(*rate),
            });
            in_dim = out_dim;
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            pool_index: spec.pool_index().expect("validated"),
        })
    }

    /// Random initialization: He-scaled weights before rectifiers, unit-gain
    /// elsewhere, zero biases. Residual branches start at half scale.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = 2f64.sqrt();
        for layer in &mut net.layers {
            match layer {
                Layer::Tdnn(a) => a.init(&mut rng, he),
                Layer::Res(b) => {
                    b.conv1.init(&mut rng, he);
                    b.conv2.init(&mut rng, 0.5);
                }
                Layer::Res2(b) => b.convs.iter_mut().for_each(|c| c.init(&mut rng, 0.5)),
                Layer::Dense(d) => d.init(&mut rng, 1.0),
                Layer::FactoredDense(f) => f.init(&mut rng),
                _ => {}
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn pool_index(&self) -> usize {
        self.pool_index
    }

    pub fn pooled_dim(&self) -> usize {
        self.spec.validate().expect("validated")[self.pool_index]
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim().expect("validated")
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(n, _)| format!("{i}.{}.{n}", l.kind()))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(|(_, p)| p))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Inference forward pass (dropout disabled) keeping what backward needs.
    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Result<Trace> {
        self.run(x, None)
    }

    /// Training forward pass; dropout masks are drawn from `rng`.
    pub fn forward_train(&self, x: &DMatrix<f64>, rng: &mut dyn RngCore) -> Result<Trace> {
        self.run(x, Some(rng))
    }

    fn run(&self, x: &DMatrix<f64>, mut rng: Option<&mut dyn RngCore>) -> Result<Trace> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::InsufficientData("input has no frames".into()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let (y, cache) = layer.forward(input, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite activation after layer {i} ({})",
                    layer.kind()
                )));
            }
            caches.push(cache);
            outputs.push(y);
        }
        Ok(Trace {
            caches,
            outputs,
            input_shape: x.shape(),
        })
    }

    /// Final network output for one utterance (`1 x embedding_dim`).
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_trace(x)?.outputs.pop().expect("network has layers"))
    }

    /// Activations of every layer before statistics pooling.
    pub fn frame_activations(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let mut t = self.forward_trace(x)?;
        t.outputs.truncate(self.pool_index);
        Ok(t.outputs)
    }

    pub fn backward(&self, trace: &Trace, upstream: &DMatrix<f64>) -> Result<ParamGradients> {
        let last = self.layers.len() - 1;
        Ok(self.backward_taps(trace, &[(last, upstream)])?.0)
    }

    /// Backpropagates gradients injected at the outputs of arbitrary layers
    /// (e.g. an auxiliary head on the pooled vector). Returns the parameter
    /// gradients and the gradient with respect to the input features.
    pub fn backward_taps(
        &self,
        trace: &Trace,
        taps: &[(usize, &DMatrix<f64>)],
    ) -> Result<(ParamGradients, DMatrix<f64>)> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::arg("trace", "trace was produced by a different network"));
        }
        for &(i, g) in taps {
            let out = trace.outputs.get(i).ok_or_else(|| Error::arg("taps", format!("no layer {i}")))?;
            if g.shape() != out.shape() {
                return Err(Error::DimensionMismatch {
                    context: "upstream gradient",
                    expected: out.len(),
                    actual: g.len(),
                });
            }
        }
        let mut per_layer: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); self.layers.len()];
        let last = trace.output();
        let mut grad = DMatrix::zeros(last.nrows(), last.ncols());
        for i in (0..self.layers.len()).rev() {
            for &(j, g) in taps {
                if j == i {
                    grad += g;
                }
            }
            let (gin, pg) = self.layers[i].backward(&trace.caches[i], &grad);
            per_layer[i] = pg;
            grad = gin;
        }
        debug_assert_eq!(grad.shape(), trace.input_shape);
        let grads = ParamGradients {
            tensors: per_layer.into_iter().flatten().collect(),
        };
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok((grads, grad))
    }

    /// Overwrites parameters from `values`, checking names and shapes.
    pub fn set_params(&mut self, mut values: Vec<NamedMatrix>) -> Result<()> {
        let names = self.param_names();
        for (name, p) in names.iter().zip(self.params_mut()) {
            let v = take(&mut values, name)?;
            if v.shape() != p.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    p.shape(),
                    v.shape()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("parameter {name} is not finite")));
            }
            *p = v;
        }
        if let Some(extra) = values.first() {
            return Err(Error::Format(format!("unexpected parameter '{}'", extra.name)));
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<NamedMatrix> {
        self.param_names()
            .into_iter()
            .zip(self.params())
            .map(|(name, p)| NamedMatrix {
                name,
                value: p.clone(),
            })
            .collect()
    }

    /// Writes the layer list and the parameters to two files.
    pub fn save(&self, spec_path: &Path, params_path: &Path) -> Result<()> {
        std::fs::write(spec_path, self.spec.to_string())?;
        let mut w = BufWriter::new(File::create(params_path)?);
        write_named(&mut w, &self.named_params())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(spec_path: &Path, params_path: &Path) -> Result<Self> {
        let spec: NetworkSpec = std::fs::read_to_string(spec_path)?.parse()?;
        let mut net = Self::zeros(&spec)?;
        net.set_params(read_named(BufReader::new(File::open(params_path)?))?)?;
        Ok(net)
    }
}

/// Embedding of one utterance at the final dense layer.
pub fn forward_embedding(net: &Network, feat: &FeatureMatrix) -> Result<DVector<f64>> {
    let out = net.forward(&feat.values)?;
    Ok(DVector::from_iterator(out.len(), out.iter().copied()))
}

/// Forward then backward for a gradient arriving at the network output.
pub fn backward(net: &Network, feat: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<ParamGradients> {
    let trace = net.forward_trace(feat)?;
    net.backward(&trace, upstream)
}

/// Single Res2Net block applied to `x`.
pub fn res2net_block_forward(x: &DMatrix<f64>, block: &Res2Block) -> Result<DMatrix<f64>> {
    Ok(Layer::Res2(block.clone()).forward(x, None)?.0)
}

/// Single TDNN layer (affine over spliced context, then ReLU).
pub fn tdnn_layer_forward(x: &DMatrix<f64>, layer: &TemporalAffine) -> Result<DMatrix<f64>> {
    Ok(Layer::Tdnn(layer.clone()).forward(x, None)?.0)
}

/// Per-dimension mean and population standard deviation over frames.
pub fn stats_pool(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let out = Layer::StatsPool.forward(x, None)?.0;
    Ok(DVector::from_iterator(out.len(), out.iter().copied()))
}
