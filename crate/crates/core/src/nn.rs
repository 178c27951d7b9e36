//! Dense feed-forward networks with hand-written reverse-mode gradients and
//! an Adam optimizer.
//!
//! A network is a chain of affine layers, each followed by an element-wise
//! activation. Batches are row-major `B x width` matrices. The backward pass
//! returns both parameter gradients and the gradient with respect to the
//! input rows, which is what guidance needs at sampling time.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `z * sigmoid(z)`
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z * sigmoid(z),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

/// Intermediate values kept by [`DenseNetwork::forward_trace`] for the
/// backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// One gradient per parameter, laid out like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    /// Flattened in the same order as [`DenseNetwork::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn unflatten_like(net: &DenseNetwork, flat: &[f64]) -> Result<Self> {
        if flat.len() != net.parameter_count() {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                net.parameter_count(),
                flat.len()
            )));
        }
        let mut g = Gradients::zeros_like(net);
        let mut it = flat.iter().copied();
        for l in &mut g.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(g)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn shape_matches(&self, net: &DenseNetwork) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.len() == l.bias.len())
    }
}

/// Per-row loss values plus the gradient of their sum with respect to the
/// network outputs.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub per_row: Array1<f64>,
    pub grad: Array2<f64>,
}

impl LossEval {
    pub fn total(&self) -> f64 {
        self.per_row.sum()
    }
}

/// A scalar loss over a batch of network outputs. The scalar is the sum of
/// `per_row`; any batch averaging belongs inside the implementation.
pub trait Loss {
    fn evaluate(&self, output: ArrayView2<'_, f64>) -> LossEval;
}

impl<F> Loss for F
where
    F: Fn(ArrayView2<'_, f64>) -> LossEval,
{
    fn evaluate(&self, output: ArrayView2<'_, f64>) -> LossEval {
        self(output)
    }
}

#[derive(Clone, Debug)]
pub struct Backprop {
    pub loss: f64,
    pub grads: Gradients,
    /// Gradient of the loss with respect to each input row.
    pub input_grad: Array2<f64>,
}

impl DenseNetwork {
    /// He-style uniform initialization: weights in `±sqrt(6 / fan_in)` for
    /// hidden layers, `±sqrt(3 / fan_in)` for the linear output layer, zero
    /// biases. Hidden layers use SiLU, the output layer is linear.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        check_widths(widths)?;
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let last = i + 1 == n;
                let limit = if last {
                    (3.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let weight =
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if last { Activation::Identity } else { Activation::Silu },
                }
            })
            .collect();
        Ok(DenseNetwork { layers })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| DenseLayer {
                weight: Array2::zeros((widths[i], widths[i + 1])),
                bias: Array1::zeros(widths[i + 1]),
                activation: if i + 1 == n { Activation::Identity } else { Activation::Silu },
            })
            .collect();
        Ok(DenseNetwork { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::shape(format!(
                    "layer {i}: bias length {} != fan_out {}",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(DenseNetwork { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(DenseLayer::fan_out))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {} (batch {}x{})",
                x.ncols(),
                self.input_width(),
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            if l.activation != Activation::Identity {
                z.mapv_inplace(|v| l.activation.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight);
            z += &l.bias;
            let a = if l.activation == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| l.activation.apply(v))
            };
            inputs.push(h);
            preacts.push(z);
            h = a;
        }
        Ok(ForwardTrace { inputs, preacts, output: h })
    }

    /// Back-propagates `grad_out` (dL/d output) through a recorded forward
    /// pass, returning parameter gradients and dL/d input.
    pub fn backward_from(
        &self,
        trace: &ForwardTrace,
        grad_out: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if grad_out.dim() != trace.output.dim() {
            return Err(Error::shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.dim(),
                trace.output.dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation != Activation::Identity {
                delta.zip_mut_with(&trace.preacts[i], |d, &z| *d *= l.activation.derivative(z));
            }
            let gw = trace.inputs[i].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(LayerGradient { weight: gw, bias: gb });
            delta = delta.dot(&l.weight.t());
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Reverse-mode gradient of a scalar loss of the network outputs.
    ///
    /// Rejects non-finite losses, naming the first offending batch row.
    pub fn backward<L: Loss + ?Sized>(&self, x: ArrayView2<'_, f64>, loss: &L) -> Result<Backprop> {
        let trace = self.forward_trace(x)?;
        let eval = loss.evaluate(trace.output.view());
        if eval.per_row.len() != trace.output.nrows() {
            return Err(Error::shape(format!(
                "loss returned {} row values for a batch of {}",
                eval.per_row.len(),
                trace.output.nrows()
            )));
        }
        if let Some(index) = eval.per_row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { index });
        }
        let (grads, input_grad) = self.backward_from(&trace, eval.grad.view())?;
        Ok(Backprop { loss: eval.total(), grads, input_grad })
    }

    /// Vector-Jacobian product with respect to the inputs: row `b` of the
    /// result is `J_b^T w_b`, where `J_b` is the Jacobian of output row `b`
    /// with respect to input row `b`. Parameter gradients are not formed.
    pub fn input_vjp(&self, x: ArrayView2<'_, f64>, out_weights: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let trace = self.forward_trace(x)?;
        if out_weights.dim() != trace.output.dim() {
            return Err(Error::shape(format!(
                "output weights {:?} do not match output {:?}",
                out_weights.dim(),
                trace.output.dim()
            )));
        }
        let mut delta = out_weights.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation != Activation::Identity {
                delta.zip_mut_with(&trace.preacts[i], |d, &z| *d *= l.activation.derivative(z));
            }
            delta = delta.dot(&l.weight.t());
        }
        Ok(delta)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::shape("need at least input and output widths"));
    }
    if let Some(i) = widths.iter().position(|&w| w == 0) {
        return Err(Error::shape(format!("width {i} is zero")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &DenseNetwork) -> Self {
        Adam {
            config,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.first
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.second
    }

    pub fn step(&mut self, net: &mut DenseNetwork, grads: &Gradients) -> Result<()> {
        if !grads.shape_matches(net) || !self.first.shape_matches(net) {
            return Err(Error::shape("gradient/optimizer layout does not match the network"));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            config: self.config,
            step: self.step,
            first: self.first.flatten(),
            second: self.second.flatten(),
        }
    }

    pub fn restore(snapshot: &OptimizerSnapshot, net: &DenseNetwork) -> Result<Self> {
        Ok(Adam {
            config: snapshot.config,
            first: Gradients::unflatten_like(net, &snapshot.first)?,
            second: Gradients::unflatten_like(net, &snapshot.second)?,
            step: snapshot.step,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "sbdc-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Network,
    Score,
    Discriminator,
    Classifier,
}

/// Versioned JSON checkpoint. Floats are written in shortest round-trip
/// form and parsed with exact round-tripping, so save/load is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub role: ModelRole,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub seed: u64,
    pub step: u64,
    /// Role-specific model metadata (conditioning sizes, preconditioning, schedule).
    #[serde(default)]
    pub model: serde_json::Value,
}

impl Checkpoint {
    pub fn new(role: ModelRole, net: &DenseNetwork, optimizer: Option<&Adam>, seed: u64, step: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            role,
            widths: net.widths(),
            activations: net.activations(),
            params: net.flat_params(),
            optimizer: optimizer.map(Adam::snapshot),
            seed,
            step,
            model: serde_json::Value::Null,
        }
    }

    pub fn network(&self) -> Result<DenseNetwork> {
        let mut net = DenseNetwork::zeros(&self.widths)?;
        if self.activations.len() != net.layers.len() {
            return Err(Error::shape("activation list does not match layer count"));
        }
        for (l, a) in net.layers.iter_mut().zip(&self.activations) {
            l.activation = *a;
        }
        net.set_flat_params(&self.params)?;
        Ok(net)
    }

    pub fn expect_role(&self, role: ModelRole) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("not a checkpoint (format `{}`)", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.role != role {
            return Err(Error::invalid(format!("checkpoint role is {:?}, expected {:?}", self.role, role)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }
}
