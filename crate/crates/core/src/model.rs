//! The target classifier: a small sequential convolutional network with exact
//! reverse-mode gradients with respect to both its inputs and its parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RandomSeed;
use crate::tensor::{ensure_shape, LabeledExample, Shape, Tensor};

/// Anything that maps an image to `K` logits and can differentiate its
/// cross-entropy loss with respect to the input.
///
/// [`Network`] is the in-repo implementation; externally trained models can
/// be plugged into attacks, saliency and the DSS loop through this trait.
pub trait Classifier {
    fn input_shape(&self) -> Shape;

    fn class_count(&self) -> usize;

    /// Logits for `x`. Must be deterministic.
    fn forward(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// Exact gradient of `cross_entropy(forward(x), label)` with respect to `x`.
    fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor>;

    fn predict(&self, x: &Tensor) -> Result<usize> {
        self.forward(x).map(|logits| argmax(&logits))
    }

    fn loss(&self, x: &Tensor, label: usize) -> Result<f64> {
        cross_entropy(&self.forward(x)?, label)
    }

    /// Cross-entropy taken at the model's own prediction.
    fn self_loss(&self, x: &Tensor) -> Result<f64> {
        let logits = self.forward(x)?;
        cross_entropy(&logits, argmax(&logits))
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn input_shape(&self) -> Shape {
        (**self).input_shape()
    }
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
    fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        (**self).forward(x)
    }
    fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor> {
        (**self).input_gradient(x, label)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(logits.iter().map(|&z| libm::exp(z - max)).sum::<f64>())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| libm::exp(z - lse)).collect()
}

/// `-log softmax(logits)[label]`, stabilized with log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Sigmoid,
    /// `ln(1 + e^x)`, a smooth ramp.
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    libm::log1p(libm::exp(x))
                }
            }
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    /// Stride-1 convolution with zero padding.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    /// Non-overlapping average pooling.
    AvgPool { size: usize },
    Activation(Activation),
    /// Fully connected layer over the flattened input.
    Affine { inputs: usize, outputs: usize },
}

impl Layer {
    fn param_count(&self) -> usize {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            Layer::Affine { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            Layer::Conv2d { in_channels, out_channels, kernel, padding } => {
                if input.channels != in_channels {
                    return Err(Error::invalid(format!(
                        "conv expects {in_channels} channels, got shape {input}"
                    )));
                }
                let h = (input.height + 2 * padding).checked_sub(kernel).map(|v| v + 1);
                let w = (input.width + 2 * padding).checked_sub(kernel).map(|v| v + 1);
                match (h, w) {
                    (Some(h), Some(w)) if kernel > 0 => Shape::new(out_channels, h, w),
                    _ => Err(Error::invalid(format!("kernel {kernel} does not fit input {input}"))),
                }
            }
            Layer::AvgPool { size } => {
                if size == 0 || !input.height.is_multiple_of(size) || !input.width.is_multiple_of(size) {
                    return Err(Error::invalid(format!("pool size {size} does not tile input {input}")));
                }
                Shape::new(input.channels, input.height / size, input.width / size)
            }
            Layer::Activation(_) => Ok(input),
            Layer::Affine { inputs, outputs } => {
                if input.len() != inputs {
                    return Err(Error::invalid(format!(
                        "affine layer expects {inputs} inputs, got shape {input}"
                    )));
                }
                Shape::new(outputs, 1, 1)
            }
        }
    }
}

/// Ordered layer list plus the expected input shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// LeNet-style network: two convolution + average-pool blocks followed by
    /// two affine layers, with `tanh` nonlinearities throughout.
    ///
    /// For 28x28 inputs this is 6@5x5 (padded) -> pool -> 16@5x5 -> pool ->
    /// 100 -> `classes`.
    pub fn lenet(input: Shape, classes: usize) -> Self {
        let act = Layer::Activation(Activation::Tanh);
        let after_conv2 = |d: usize| ((d / 2).saturating_sub(4)) / 2;
        let flat = 16 * after_conv2(input.height) * after_conv2(input.width);
        Architecture {
            input,
            layers: vec![
                Layer::Conv2d { in_channels: input.channels, out_channels: 6, kernel: 5, padding: 2 },
                act,
                Layer::AvgPool { size: 2 },
                Layer::Conv2d { in_channels: 6, out_channels: 16, kernel: 5, padding: 0 },
                act,
                Layer::AvgPool { size: 2 },
                Layer::Affine { inputs: flat, outputs: 100 },
                act,
                Layer::Affine { inputs: 100, outputs: classes },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Plan {
    input: Shape,
    output: Shape,
    offset: usize,
}

/// Sequential network with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    plans: Vec<Plan>,
    params: Vec<f64>,
}

impl Network {
    fn plan(arch: &Architecture) -> Result<(Vec<Plan>, usize)> {
        if arch.layers.is_empty() {
            return Err(Error::invalid("architecture has no layers"));
        }
        let mut shape = arch.input;
        let mut offset = 0;
        let mut plans = Vec::with_capacity(arch.layers.len());
        for layer in &arch.layers {
            let output = layer.output_shape(shape)?;
            plans.push(Plan { input: shape, output, offset });
            offset += layer.param_count();
            shape = output;
        }
        if shape.height != 1 || shape.width != 1 {
            return Err(Error::invalid(format!("network output {shape} is not a logit vector")));
        }
        Ok((plans, offset))
    }

    /// Builds a network from explicit parameters (e.g. a checkpoint).
    pub fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let (plans, count) = Self::plan(&arch)?;
        if params.len() != count {
            return Err(Error::invalid(format!(
                "architecture needs {count} parameters, got {}",
                params.len()
            )));
        }
        Ok(Network { arch, plans, params })
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: RandomSeed) -> Result<Self> {
        let (plans, count) = Self::plan(&arch)?;
        let mut params = vec![0.0; count];
        let mut rng = seed.rng();
        for (layer, plan) in arch.layers.iter().zip(&plans) {
            let (weights, fan_in, fan_out) = match *layer {
                Layer::Conv2d { in_channels, out_channels, kernel, .. } => (
                    out_channels * in_channels * kernel * kernel,
                    in_channels * kernel * kernel,
                    out_channels * kernel * kernel,
                ),
                Layer::Affine { inputs, outputs } => (inputs * outputs, inputs, outputs),
                _ => continue,
            };
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            for w in &mut params[plan.offset..plan.offset + weights] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(Network { arch, plans, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        ensure_shape(self.arch.input, x.shape())
    }

    /// Runs every layer, keeping each intermediate activation.
    fn forward_trace(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.plans.len() + 1);
        acts.push(x.data().to_vec());
        for (layer, plan) in self.arch.layers.iter().zip(&self.plans) {
            let out = self.layer_forward(layer, plan, acts.last().unwrap());
            acts.push(out);
        }
        acts
    }

    fn layer_forward(&self, layer: &Layer, plan: &Plan, input: &[f64]) -> Vec<f64> {
        match *layer {
            Layer::Conv2d { in_channels, out_channels, kernel, padding } => {
                let (inp, out) = (plan.input, plan.output);
                let weights = &self.params[plan.offset..];
                let bias = &weights[out_channels * in_channels * kernel * kernel..];
                let mut y = vec![0.0; out.len()];
                for o in 0..out_channels {
                    let plane = &mut y[o * out.plane()..(o + 1) * out.plane()];
                    plane.iter_mut().for_each(|v| *v = bias[o]);
                    for c in 0..in_channels {
                        let src = &input[c * inp.plane()..(c + 1) * inp.plane()];
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let w = weights[((o * in_channels + c) * kernel + ky) * kernel + kx];
                                let (x_lo, x_hi) = valid_range(kx, padding, inp.width, out.width);
                                for oy in 0..out.height {
                                    let Some(iy) = (oy + ky).checked_sub(padding).filter(|&iy| iy < inp.height) else {
                                        continue;
                                    };
                                    let dst = &mut plane[oy * out.width + x_lo..oy * out.width + x_hi];
                                    let row = &src[iy * inp.width + x_lo + kx - padding..];
                                    for (d, s) in dst.iter_mut().zip(row) {
                                        *d += w * s;
                                    }
                                }
                            }
                        }
                    }
                }
                y
            }
            Layer::AvgPool { size } => {
                let (inp, out) = (plan.input, plan.output);
                let scale = 1.0 / (size * size) as f64;
                let mut y = vec![0.0; out.len()];
                for c in 0..inp.channels {
                    for i in 0..inp.height {
                        for j in 0..inp.width {
                            y[out.index(c, i / size, j / size)] += input[inp.index(c, i, j)];
                        }
                    }
                }
                y.iter_mut().for_each(|v| *v *= scale);
                y
            }
            Layer::Activation(act) => input.iter().map(|&v| act.apply(v)).collect(),
            Layer::Affine { inputs, outputs } => {
                let weights = &self.params[plan.offset..plan.offset + inputs * outputs];
                let bias = &self.params[plan.offset + inputs * outputs..];
                (0..outputs)
                    .map(|o| {
                        let row = &weights[o * inputs..(o + 1) * inputs];
                        bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    /// Backpropagates `grad` (dLoss/dLogits) through the trace. Parameter
    /// gradients are accumulated into `param_grad` when given. Returns the
    /// gradient with respect to the network input.
    fn backward(&self, acts: &[Vec<f64>], mut grad: Vec<f64>, mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        for (idx, (layer, plan)) in self.arch.layers.iter().zip(&self.plans).enumerate().rev() {
            let input = &acts[idx];
            let output = &acts[idx + 1];
            let pg = param_grad.as_deref_mut().map(|g| &mut g[plan.offset..plan.offset + layer.param_count()]);
            grad = self.layer_backward(layer, plan, input, output, &grad, pg);
        }
        grad
    }

    fn layer_backward(
        &self,
        layer: &Layer,
        plan: &Plan,
        input: &[f64],
        output: &[f64],
        grad_out: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        match *layer {
            Layer::Conv2d { in_channels, out_channels, kernel, padding } => {
                let (inp, out) = (plan.input, plan.output);
                let n_weights = out_channels * in_channels * kernel * kernel;
                let weights = &self.params[plan.offset..plan.offset + n_weights];
                let mut grad_in = vec![0.0; inp.len()];
                for o in 0..out_channels {
                    let g_plane = &grad_out[o * out.plane()..(o + 1) * out.plane()];
                    if let Some(pg) = param_grad.as_deref_mut() {
                        pg[n_weights + o] += g_plane.iter().sum::<f64>();
                    }
                    for c in 0..in_channels {
                        let src = &input[c * inp.plane()..(c + 1) * inp.plane()];
                        let dst = &mut grad_in[c * inp.plane()..(c + 1) * inp.plane()];
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let widx = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                                let w = weights[widx];
                                let (x_lo, x_hi) = valid_range(kx, padding, inp.width, out.width);
                                let mut dw = 0.0;
                                for oy in 0..out.height {
                                    let Some(iy) = (oy + ky).checked_sub(padding).filter(|&iy| iy < inp.height) else {
                                        continue;
                                    };
                                    let g_row = &g_plane[oy * out.width + x_lo..oy * out.width + x_hi];
                                    let start = iy * inp.width + x_lo + kx - padding;
                                    let s_row = &src[start..start + g_row.len()];
                                    let d_row = &mut dst[start..start + g_row.len()];
                                    for ((g, s), d) in g_row.iter().zip(s_row).zip(d_row) {
                                        dw += g * s;
                                        *d += w * g;
                                    }
                                }
                                if let Some(pg) = param_grad.as_deref_mut() {
                                    pg[widx] += dw;
                                }
                            }
                        }
                    }
                }
                grad_in
            }
            Layer::AvgPool { size } => {
                let (inp, out) = (plan.input, plan.output);
                let scale = 1.0 / (size * size) as f64;
                let mut grad_in = vec![0.0; inp.len()];
                for c in 0..inp.channels {
                    for i in 0..inp.height {
                        for j in 0..inp.width {
                            grad_in[inp.index(c, i, j)] = scale * grad_out[out.index(c, i / size, j / size)];
                        }
                    }
                }
                grad_in
            }
            Layer::Activation(act) => input
                .iter()
                .zip(output)
                .zip(grad_out)
                .map(|((&x, &y), &g)| g * act.derivative(x, y))
                .collect(),
            Layer::Affine { inputs, outputs } => {
                let weights = &self.params[plan.offset..plan.offset + inputs * outputs];
                let mut grad_in = vec![0.0; inputs];
                for (o, &g) in grad_out.iter().enumerate().take(outputs) {
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    for (d, w) in grad_in.iter_mut().zip(row) {
                        *d += w * g;
                    }
                }
                if let Some(pg) = param_grad {
                    let (dw, db) = pg.split_at_mut(inputs * outputs);
                    for (o, &g) in grad_out.iter().enumerate().take(outputs) {
                        db[o] += g;
                        for (d, x) in dw[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
                            *d += g * x;
                        }
                    }
                }
                grad_in
            }
        }
    }

    /// Loss at `label`, accumulating its parameter gradient into `param_grad`.
    pub fn accumulate_param_gradient(&self, x: &Tensor, label: usize, param_grad: &mut [f64]) -> Result<f64> {
        self.check_input(x)?;
        if param_grad.len() != self.params.len() {
            return Err(Error::invalid("parameter gradient buffer has the wrong length"));
        }
        let acts = self.forward_trace(x);
        let logits = acts.last().unwrap();
        let loss = cross_entropy(logits, label)?;
        self.backward(&acts, loss_gradient(logits, label), Some(param_grad));
        Ok(loss)
    }

    /// Minibatch gradient descent on the mean cross-entropy.
    ///
    /// `on_epoch` receives the epoch index and its mean training loss.
    pub fn train(
        &mut self,
        examples: &[LabeledExample],
        config: &TrainConfig,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<()> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let classes = self.class_count();
        if let Some(bad) = examples.iter().find(|e| e.label >= classes) {
            return Err(Error::invalid(format!("label {} out of range for {classes} classes", bad.label)));
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = config.seed.derive(0x0074_7261_696e).rng();
        let mut grad = vec![0.0; self.params.len()];
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in batch {
                    let ex = &examples[i];
                    total += self.accumulate_param_gradient(&ex.image, ex.label, &mut grad)?;
                }
                let step = config.learning_rate / batch.len() as f64;
                for (p, g) in self.params.iter_mut().zip(&grad) {
                    *p -= step * g;
                }
            }
            on_epoch(epoch, total / examples.len() as f64);
        }
        Ok(())
    }
}

/// Columns `[lo, hi)` of an output row whose kernel tap `kx` lands inside the
/// input row.
fn valid_range(kx: usize, padding: usize, in_width: usize, out_width: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx);
    let hi = (in_width + padding).saturating_sub(kx).min(out_width);
    (lo, hi.max(lo))
}

/// dCE/dlogits = softmax(logits) - onehot(label).
fn loss_gradient(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

impl Classifier for Network {
    fn input_shape(&self) -> Shape {
        self.arch.input
    }

    fn class_count(&self) -> usize {
        self.plans.last().map(|p| p.output.channels).unwrap_or(0)
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_trace(x).pop().unwrap())
    }

    fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let acts = self.forward_trace(x);
        let logits = acts.last().unwrap();
        if label >= logits.len() {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
        }
        let g = self.backward(&acts, loss_gradient(logits, label), None);
        Tensor::new(x.shape(), g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: RandomSeed,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 32, learning_rate: 0.1, seed: RandomSeed(0) }
    }
}

/// Seeded initialization followed by [`Network::train`]. With `epochs = 0`
/// the initialization is returned unchanged.
pub fn train_classifier(
    examples: &[LabeledExample],
    arch: Architecture,
    config: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<Network> {
    if examples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut net = Network::init(arch, config.seed)?;
    net.train(examples, config, on_epoch)?;
    Ok(net)
}

/// Fraction of `examples` whose prediction matches the label.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let mut correct = 0usize;
    for ex in examples {
        if model.predict(&ex.image)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}
