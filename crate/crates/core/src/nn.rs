//! Fully connected classifier with explicit forward and backward passes and
//! an SGD-with-momentum optimizer.
//!
//! Hidden layers use ReLU, the output layer is affine (raw logits). Weights
//! are stored `[out × in]` and batches as rows, so a layer computes
//! `a · Wᵀ + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    fn same_shape(&self, other: &Dense<T>) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }

    fn params(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

fn check_same_layout<T: Scalar>(a: &[Dense<T>], b: &[Dense<T>], what: &str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_shape(y)) {
        return Err(Error::Shape(format!("{what}: parameter layouts differ")));
    }
    Ok(())
}

/// Multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with layer widths `[input, hidden..., classes]`.
    ///
    /// Weights are drawn from `U(-1/√fan_in, 1/√fan_in)` and biases start at
    /// zero; the same `seed` always yields the same parameters.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "layer_widths needs at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer_widths must all be positive, got {widths:?}"
            )));
        }
        let mut rng = stream_rng(Stream::Init, &[seed]);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| T::of(rng.random_range(-bound..bound)));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} but {} outputs",
                    layer.bias.len(),
                    layer.outputs()
                )));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    k + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(Dense::outputs))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().all(|p| p.is_finite()))
    }

    /// All parameters, layer by layer, weights (row-major) before bias.
    pub fn to_flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(Dense::params).copied().collect()
    }

    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut out = self.clone();
        for (p, &v) in out.layers.iter_mut().flat_map(Dense::params_mut).zip(flat) {
            *p = v;
        }
        Ok(out)
    }

    fn check_input(&self, features: &ArrayView2<T>) -> Result<()> {
        if features.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "features have width {} but the model expects {}",
                features.ncols(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Logits for a batch of rows, without keeping intermediate activations.
    pub fn logits(&self, features: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&features)?;
        let mut a = affine(&self.layers[0], features);
        for layer in &self.layers[1..] {
            relu_inplace(&mut a);
            a = affine(layer, a.view());
        }
        Ok(a)
    }

    /// Logits plus the per-layer inputs needed by [`Mlp::backward`].
    pub fn forward(&self, features: ArrayView2<T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_input(&features)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = features.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, a.view());
            inputs.push(a);
            if k + 1 < self.layers.len() {
                relu_inplace(&mut z);
            }
            a = z;
        }
        Ok((a, ForwardCache { inputs }))
    }

    /// Propagates `dlogits` back through the cached forward pass.
    ///
    /// `dlogits` is taken as the gradient of the already batch-averaged loss,
    /// so no further `1/B` scaling happens here.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: ArrayView2<T>) -> Result<Gradients<T>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "forward cache holds {} layer inputs, model has {} layers",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let batch = cache.inputs[0].nrows();
        for (k, (input, layer)) in cache.inputs.iter().zip(&self.layers).enumerate() {
            if input.nrows() != batch || input.ncols() != layer.inputs() {
                return Err(Error::Usage(format!(
                    "forward cache entry {k} does not belong to this model"
                )));
            }
        }
        if dlogits.dim() != (batch, self.num_classes()) {
            return Err(Error::Shape(format!(
                "dlogits is {:?}, forward produced ({batch}, {})",
                dlogits.dim(),
                self.num_classes()
            )));
        }

        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        let mut delta = dlogits.to_owned();
        for k in (0..self.layers.len()).rev() {
            let input = &cache.inputs[k];
            let weights = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut upstream = delta.dot(&self.layers[k].weights);
                // input is a post-ReLU activation: positive exactly where the
                // pre-activation was positive.
                Zip::from(&mut upstream).and(input).for_each(|d, &a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = upstream;
            }
            grads.push(Dense { weights, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// `self += alpha · (other - base)`, used for delta aggregation.
    pub fn add_scaled_delta(&mut self, alpha: T, other: &Mlp<T>, base: &Mlp<T>) -> Result<()> {
        check_same_layout(&self.layers, &other.layers, "aggregation")?;
        check_same_layout(&self.layers, &base.layers, "aggregation")?;
        for ((s, o), b) in self.layers.iter_mut().zip(&other.layers).zip(&base.layers) {
            Zip::from(&mut s.weights)
                .and(&o.weights)
                .and(&b.weights)
                .for_each(|s, &o, &b| *s = *s + alpha * (o - b));
            Zip::from(&mut s.bias)
                .and(&o.bias)
                .and(&b.bias)
                .for_each(|s, &o, &b| *s = *s + alpha * (o - b));
        }
        Ok(())
    }

    pub fn squared_distance(&self, other: &Mlp<T>) -> Result<T> {
        check_same_layout(&self.layers, &other.layers, "distance")?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.params().zip(b.params()))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
    }
}

fn affine<T: Scalar>(layer: &Dense<T>, a: ArrayView2<T>) -> Array2<T> {
    let mut z = a.dot(&layer.weights.t());
    for mut row in z.rows_mut() {
        row.scaled_add(T::one(), &layer.bias);
    }
    z
}

fn relu_inplace<T: Scalar>(a: &mut Array2<T>) {
    a.mapv_inplace(|x| if x > T::zero() { x } else { T::zero() });
}

/// Inputs seen by each layer during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    inputs: Vec<Array2<T>>,
}

impl<T> ForwardCache<T> {
    /// Post-ReLU activations of the hidden layers.
    pub fn hidden_activations(&self) -> &[Array2<T>] {
        &self.inputs[1..]
    }
}

/// Parameter-space gradient, laid out exactly like [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Mlp<T>) -> Self {
        Self {
            layers: model.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(Dense::params).copied().collect()
    }

    pub fn add_scaled(&mut self, alpha: T, other: &Gradients<T>) -> Result<()> {
        check_same_layout(&self.layers, &other.layers, "gradient")?;
        for (g, o) in self.layers.iter_mut().zip(&other.layers) {
            g.weights.scaled_add(alpha, &o.weights);
            g.bias.scaled_add(alpha, &o.bias);
        }
        Ok(())
    }

    /// `self += alpha · (a - b)` for two models with this layout.
    pub fn add_scaled_difference(&mut self, alpha: T, a: &Mlp<T>, b: &Mlp<T>) -> Result<()> {
        check_same_layout(&self.layers, &a.layers, "gradient")?;
        check_same_layout(&self.layers, &b.layers, "gradient")?;
        for ((g, a), b) in self.layers.iter_mut().zip(&a.layers).zip(&b.layers) {
            for ((g, &a), &b) in g.params_mut().zip(a.params()).zip(b.params()) {
                *g = *g + alpha * (a - b);
            }
        }
        Ok(())
    }
}

/// SGD hyper-parameters plus one momentum buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    buffers: Vec<Dense<T>>,
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Mlp<T>, learning_rate: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(learning_rate >= T::zero() && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= T::zero() && weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {weight_decay}"
            )));
        }
        Ok(Self {
            buffers: model.layers.iter().map(Dense::zeros_like).collect(),
            learning_rate,
            momentum,
            weight_decay,
        })
    }

    pub fn buffers(&self) -> &[Dense<T>] {
        &self.buffers
    }
}

/// One momentum step:
/// `buf ← momentum·buf + grad + weight_decay·param`, `param ← param − lr·buf`.
/// Weight decay covers biases as well as weights.
pub fn sgd_step<T: Scalar>(
    model: &mut Mlp<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    check_same_layout(&model.layers, &grads.layers, "sgd_step gradients")?;
    check_same_layout(&model.layers, &state.buffers, "sgd_step momentum buffers")?;
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((layer, grad), buf) in model.layers.iter_mut().zip(&grads.layers).zip(&mut state.buffers) {
        for ((p, &g), b) in layer.params_mut().zip(grad.params()).zip(buf.params_mut()) {
            *b = mu * *b + g + wd * *p;
            *p = *p - lr * *b;
        }
    }
    Ok(())
}
