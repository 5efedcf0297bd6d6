//! Differentiable model families over flat parameter vectors: multinomial
//! logistic regression and a one-hidden-layer perceptron, trained with
//! mini-batch SGD with momentum.
//!
//! Parameters are stored row-major, layer after layer. For `Linear` the
//! layout is `weight [classes x input]` followed by `bias [classes]`; for
//! `Mlp1` it is `w1 [hidden x input]`, `b1 [hidden]`, `w2 [classes x hidden]`,
//! `b2 [classes]`.

use crate::data::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{all_finite, Scalar};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// One named block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub name: &'static str,
    pub dims: Vec<usize>,
}

impl Layer {
    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Linear,
            input_dim,
            hidden_dim: 0,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp1(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        activation: Activation,
    ) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp1,
            input_dim,
            hidden_dim,
            num_classes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        match self.architecture {
            Architecture::Linear if self.hidden_dim != 0 => Err(Error::config(
                "model.hidden_dim",
                "must be 0 for the linear architecture",
            )),
            Architecture::Mlp1 if self.hidden_dim == 0 => Err(Error::config(
                "model.hidden_dim",
                "must be positive for mlp1",
            )),
            _ => Ok(()),
        }
    }

    pub fn layers(&self) -> Vec<Layer> {
        match self.architecture {
            Architecture::Linear => vec![
                Layer {
                    name: "weight",
                    dims: vec![self.num_classes, self.input_dim],
                },
                Layer {
                    name: "bias",
                    dims: vec![self.num_classes],
                },
            ],
            Architecture::Mlp1 => vec![
                Layer {
                    name: "w1",
                    dims: vec![self.hidden_dim, self.input_dim],
                },
                Layer {
                    name: "b1",
                    dims: vec![self.hidden_dim],
                },
                Layer {
                    name: "w2",
                    dims: vec![self.num_classes, self.hidden_dim],
                },
                Layer {
                    name: "b2",
                    dims: vec![self.num_classes],
                },
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(Layer::size).sum()
    }
}

/// Flat model parameters with the layer layout they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector<T> {
    values: Vec<T>,
    layout: Arc<[Layer]>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let layout: Arc<[Layer]> = spec.layers().into();
        let d = layout.iter().map(Layer::size).sum();
        ParameterVector {
            values: vec![T::zero(); d],
            layout,
        }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<T>) -> Result<Self> {
        let layout: Arc<[Layer]> = spec.layers().into();
        let d: usize = layout.iter().map(Layer::size).sum();
        if values.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: values.len(),
            });
        }
        Ok(ParameterVector { values, layout })
    }

    /// A vector with the same layout as `self` and new values.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: values.len(),
            });
        }
        Ok(ParameterVector {
            values,
            layout: Arc::clone(&self.layout),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ParameterVector {
            values: vec![T::zero(); self.values.len()],
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn layout(&self) -> &[Layer] {
        &self.layout
    }

    /// Borrow one layer's block by name.
    pub fn layer(&self, name: &str) -> Option<&[T]> {
        let mut offset = 0;
        for layer in self.layout.iter() {
            if layer.name == name {
                return Some(&self.values[offset..offset + layer.size()]);
            }
            offset += layer.size();
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            local_epochs: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "optimizer.learning_rate",
                "must be a positive finite number",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("optimizer.local_epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_parameters<T: Scalar>(spec: &ModelSpec, seed: u64) -> ParameterVector<T> {
    let mut theta = ParameterVector::zeros(spec);
    let mut rng = rng::rng(seed);
    let mut offset = 0;
    for layer in spec.layers() {
        let size = layer.size();
        if layer.dims.len() == 2 {
            let (fan_out, fan_in) = (layer.dims[0], layer.dims[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut theta.values[offset..offset + size] {
                *v = T::lit(rng.random_range(-a..a));
            }
        }
        offset += size;
    }
    theta
}

fn check_input<T: Scalar>(spec: &ModelSpec, theta: &ParameterVector<T>, x: &[T]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: x.len(),
        });
    }
    let d = spec.num_params();
    if theta.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: theta.len(),
        });
    }
    Ok(())
}

/// `out = W x + b` for a row-major `W [out.len() x x.len()]`.
fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row
            .iter()
            .zip(x)
            .fold(b[r], |acc, (&wi, &xi)| acc + wi * xi);
    }
}

fn activate<T: Scalar>(act: Activation, z: T) -> T {
    match act {
        Activation::Relu => z.max(T::zero()),
        Activation::Tanh => z.tanh(),
    }
}

/// Derivative expressed through the pre-activation `z` and activation `h`.
fn activate_grad<T: Scalar>(act: Activation, z: T, h: T) -> T {
    match act {
        Activation::Relu => {
            if z > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Tanh => T::one() - h * h,
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace<T> {
    pre: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
}

fn forward_trace<T: Scalar>(theta: &[T], spec: &ModelSpec, x: &[T]) -> Trace<T> {
    let (c, i) = (spec.num_classes, spec.input_dim);
    let mut logits = vec![T::zero(); c];
    match spec.architecture {
        Architecture::Linear => {
            let (w, b) = theta.split_at(c * i);
            affine(w, b, x, &mut logits);
            Trace {
                pre: Vec::new(),
                hidden: Vec::new(),
                logits,
            }
        }
        Architecture::Mlp1 => {
            let h = spec.hidden_dim;
            let (w1, rest) = theta.split_at(h * i);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut pre = vec![T::zero(); h];
            affine(w1, b1, x, &mut pre);
            let hidden: Vec<T> = pre.iter().map(|&z| activate(spec.activation, z)).collect();
            affine(w2, b2, &hidden, &mut logits);
            Trace {
                pre,
                hidden,
                logits,
            }
        }
    }
}

/// Log-sum-exp with max shift.
fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = logits
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    exps.into_iter().map(|e| e / total).collect()
}

/// Class probabilities (softmax of the final logits).
pub fn forward<T: Scalar>(theta: &ParameterVector<T>, spec: &ModelSpec, x: &[T]) -> Result<Vec<T>> {
    check_input(spec, theta, x)?;
    Ok(softmax(&forward_trace(theta.values(), spec, x).logits))
}

/// Final-layer logits.
pub fn logits<T: Scalar>(theta: &ParameterVector<T>, spec: &ModelSpec, x: &[T]) -> Result<Vec<T>> {
    check_input(spec, theta, x)?;
    Ok(forward_trace(theta.values(), spec, x).logits)
}

/// Accumulates the per-sample gradient of the cross-entropy into `grad` and
/// returns the per-sample loss.
fn accumulate_sample<T: Scalar>(
    theta: &[T],
    spec: &ModelSpec,
    sample: &Sample<T>,
    grad: &mut [T],
) -> T {
    let (c, i) = (spec.num_classes, spec.input_dim);
    let trace = forward_trace(theta, spec, &sample.x);
    let lse = log_sum_exp(&trace.logits);
    let loss = lse - trace.logits[sample.y];
    // dL/dlogit = softmax - onehot
    let delta: Vec<T> = trace
        .logits
        .iter()
        .enumerate()
        .map(|(k, &z)| {
            let p = (z - lse).exp();
            if k == sample.y {
                p - T::one()
            } else {
                p
            }
        })
        .collect();
    match spec.architecture {
        Architecture::Linear => {
            let (gw, gb) = grad.split_at_mut(c * i);
            for (k, &dk) in delta.iter().enumerate() {
                for (g, &xj) in gw[k * i..(k + 1) * i].iter_mut().zip(&sample.x) {
                    *g += dk * xj;
                }
                gb[k] += dk;
            }
        }
        Architecture::Mlp1 => {
            let h = spec.hidden_dim;
            let w2 = &theta[h * i + h..h * i + h + c * h];
            let (gw1, rest) = grad.split_at_mut(h * i);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            let mut dhidden = vec![T::zero(); h];
            for (k, &dk) in delta.iter().enumerate() {
                let row = &w2[k * h..(k + 1) * h];
                for j in 0..h {
                    gw2[k * h + j] += dk * trace.hidden[j];
                    dhidden[j] += row[j] * dk;
                }
                gb2[k] += dk;
            }
            for j in 0..h {
                let dpre =
                    dhidden[j] * activate_grad(spec.activation, trace.pre[j], trace.hidden[j]);
                for (g, &xk) in gw1[j * i..(j + 1) * i].iter_mut().zip(&sample.x) {
                    *g += dpre * xk;
                }
                gb1[j] += dpre;
            }
        }
    }
    loss
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn loss_and_gradient<T: Scalar>(
    theta: &ParameterVector<T>,
    spec: &ModelSpec,
    batch: &[Sample<T>],
) -> Result<(T, ParameterVector<T>)> {
    loss_and_gradient_iter(theta, spec, batch.iter())
}

/// Same as [`loss_and_gradient`] over `samples[idx]` for every index.
pub fn loss_and_gradient_indexed<T: Scalar>(
    theta: &ParameterVector<T>,
    spec: &ModelSpec,
    samples: &[Sample<T>],
    idx: &[usize],
) -> Result<(T, ParameterVector<T>)> {
    loss_and_gradient_iter(theta, spec, idx.iter().map(|&k| &samples[k]))
}

pub fn loss_and_gradient_iter<'a, T: Scalar>(
    theta: &ParameterVector<T>,
    spec: &ModelSpec,
    batch: impl Iterator<Item = &'a Sample<T>>,
) -> Result<(T, ParameterVector<T>)> {
    let mut grad = theta.zeros_like();
    // Running mean keeps the loss of a constant batch exact.
    let mut loss = T::zero();
    let mut count = 0usize;
    for sample in batch {
        check_input(spec, theta, &sample.x)?;
        if sample.y >= spec.num_classes {
            return Err(Error::LabelOutOfRange {
                label: sample.y,
                num_classes: spec.num_classes,
            });
        }
        let l = accumulate_sample(theta.values(), spec, sample, &mut grad.values);
        count += 1;
        loss += (l - loss) / T::from_count(count);
    }
    if count == 0 {
        return Err(Error::Empty("batch"));
    }
    let scale = T::one() / T::from_count(count);
    for g in grad.values.iter_mut() {
        *g *= scale;
    }
    if !(loss.is_finite() && grad.is_finite()) {
        return Err(Error::NonFinite("loss or gradient"));
    }
    Ok((loss.max(T::zero()), grad))
}

/// One momentum step: `v' = beta v + g`, `theta' = theta - eta v'`.
pub fn sgd_step<T: Scalar>(
    theta: &ParameterVector<T>,
    grad: &ParameterVector<T>,
    velocity: &ParameterVector<T>,
    cfg: &OptimizerConfig,
) -> (ParameterVector<T>, ParameterVector<T>) {
    let mut theta = theta.clone();
    let mut velocity = velocity.clone();
    sgd_step_in_place(&mut theta, grad, &mut velocity, cfg);
    (theta, velocity)
}

fn sgd_step_in_place<T: Scalar>(
    theta: &mut ParameterVector<T>,
    grad: &ParameterVector<T>,
    velocity: &mut ParameterVector<T>,
    cfg: &OptimizerConfig,
) {
    let (eta, beta) = (T::lit(cfg.learning_rate), T::lit(cfg.momentum));
    for ((t, v), &g) in theta
        .values
        .iter_mut()
        .zip(velocity.values.iter_mut())
        .zip(&grad.values)
    {
        *v = beta * *v + g;
        *t -= eta * *v;
    }
}

/// `cfg.local_epochs` passes of mini-batch SGD with a fresh momentum buffer.
pub fn local_train<T: Scalar>(
    theta: &ParameterVector<T>,
    spec: &ModelSpec,
    data: &ClientDataset<T>,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<ParameterVector<T>> {
    local_train_epochs(theta, spec, data, cfg, cfg.local_epochs, seed)
}

/// Like [`local_train`] with an explicit epoch count; zero epochs is a no-op.
pub fn local_train_epochs<T: Scalar>(
    theta: &ParameterVector<T>,
    spec: &ModelSpec,
    data: &ClientDataset<T>,
    cfg: &OptimizerConfig,
    epochs: usize,
    seed: u64,
) -> Result<ParameterVector<T>> {
    if data.samples.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    let mut theta = theta.clone();
    let mut velocity = theta.zeros_like();
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut rng = rng::rng(seed);
    let batch_size = cfg.batch_size.max(1);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let (_, grad) = loss_and_gradient_indexed(&theta, spec, &data.samples, batch)?;
            sgd_step_in_place(&mut theta, &grad, &mut velocity, cfg);
        }
    }
    if !theta.is_finite() {
        return Err(Error::NonFinite("parameters after local training"));
    }
    Ok(theta)
}

/// Predicted class; ties go to the lowest class index.
pub fn predict<T: Scalar>(theta: &ParameterVector<T>, spec: &ModelSpec, x: &[T]) -> Result<usize> {
    let z = logits(theta, spec, x)?;
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use rand::Rng;

    fn sample(x: &[f64], y: usize) -> Sample<f64> {
        Sample { x: x.to_vec(), y }
    }

    fn random_batch(rng: &mut rng::Rng, n: usize, dim: usize, classes: usize) -> Vec<Sample<f64>> {
        (0..n)
            .map(|_| Sample {
                x: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                y: rng.random_range(0..classes),
            })
            .collect()
    }

    // Central differences on the returned loss, independent of backprop.
    fn finite_difference(
        theta: &ParameterVector<f64>,
        spec: &ModelSpec,
        batch: &[Sample<f64>],
    ) -> Vec<f64> {
        let h = 1e-5;
        (0..theta.len())
            .map(|k| {
                let mut plus = theta.clone();
                plus.values_mut()[k] += h;
                let mut minus = theta.clone();
                minus.values_mut()[k] -= h;
                let lp = loss_and_gradient(&plus, spec, batch).unwrap().0;
                let lm = loss_and_gradient(&minus, spec, batch).unwrap().0;
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelSpec::linear(2, 2).num_params(), 6);
        assert_eq!(ModelSpec::mlp1(4, 8, 3, Activation::Relu).num_params(), 67);
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = ModelSpec::linear(2, 2);
        let a = init_parameters::<f64>(&spec, 7);
        let b = init_parameters::<f64>(&spec, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a.layer("bias").unwrap(), &[0.0, 0.0]);
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(a.layer("weight").unwrap().iter().all(|w| w.abs() < bound));
        assert_ne!(a, init_parameters::<f64>(&spec, 8));
    }

    #[test]
    fn mlp_init_layers() {
        let spec = ModelSpec::mlp1(4, 8, 3, Activation::Tanh);
        let theta = init_parameters::<f64>(&spec, 1);
        assert_eq!(theta.len(), 67);
        assert!(theta.layer("b1").unwrap().iter().all(|&b| b == 0.0));
        assert!(theta.layer("b2").unwrap().iter().all(|&b| b == 0.0));
        assert!(theta.layer("w2").unwrap().iter().any(|&w| w != 0.0));
    }

    #[test]
    fn forward_of_zero_parameters_is_uniform() {
        let spec = ModelSpec::linear(3, 4);
        let p = forward(
            &ParameterVector::<f64>::zeros(&spec),
            &spec,
            &[1.0, -2.0, 5.0],
        )
        .unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn forward_hand_softmax() {
        let spec = ModelSpec::linear(2, 2);
        let theta =
            ParameterVector::from_values(&spec, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let p = forward(&theta, &spec, &[3.0, 0.0]).unwrap();
        let e3 = 3.0f64.exp();
        assert!((p[0] - e3 / (e3 + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e3 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.95257).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let spec = ModelSpec::linear(2, 2);
        let theta = ParameterVector::<f64>::zeros(&spec);
        assert!(matches!(
            forward(&theta, &spec, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_parameters_give_log_classes_loss() {
        let mut r = rng::rng(3);
        for classes in [2usize, 3, 7, 10] {
            let spec = ModelSpec::linear(3, classes);
            let batch = random_batch(&mut r, 13, 3, classes);
            let (loss, _) =
                loss_and_gradient(&ParameterVector::zeros(&spec), &spec, &batch).unwrap();
            assert_eq!(loss, (classes as f64).ln());
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let spec = ModelSpec::linear(2, 2);
        assert!(matches!(
            loss_and_gradient::<f64>(&ParameterVector::zeros(&spec), &spec, &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let spec = ModelSpec::linear(2, 2);
        let err = loss_and_gradient(
            &ParameterVector::zeros(&spec),
            &spec,
            &[sample(&[0.0, 1.0], 2)],
        );
        assert!(matches!(err, Err(Error::LabelOutOfRange { label: 2, .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::rng(11);
        let specs = [
            ModelSpec::linear(5, 4),
            ModelSpec::mlp1(4, 6, 3, Activation::Tanh),
            ModelSpec::mlp1(3, 5, 4, Activation::Relu),
        ];
        for spec in &specs {
            for trial in 0..4 {
                let theta = init_parameters::<f64>(spec, 100 + trial);
                let batch = random_batch(&mut r, 10, spec.input_dim, spec.num_classes);
                let (_, grad) = loss_and_gradient(&theta, spec, &batch).unwrap();
                let fd = finite_difference(&theta, spec, &batch);
                let err = max_rel_error(grad.values(), &fd);
                assert!(err < 1e-4, "{spec:?}: relative error {err}");
            }
        }
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_gradient() {
        let mut r = rng::rng(5);
        let spec = ModelSpec::mlp1(3, 4, 3, Activation::Tanh);
        let theta = init_parameters::<f64>(&spec, 2);
        let batch = random_batch(&mut r, 7, 3, 3);
        let doubled: Vec<_> = batch.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let (l1, g1) = loss_and_gradient(&theta, &spec, &batch).unwrap();
        let (l2, g2) = loss_and_gradient(&theta, &spec, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_cases() {
        let spec = ModelSpec::linear(1, 2);
        let pv = |v: Vec<f64>| ParameterVector::from_values(&spec, v).unwrap();
        let mut cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: 1,
            local_epochs: 1,
        };
        let (t, _) = sgd_step(
            &pv(vec![1.0, 1.0, 0.0, 0.0]),
            &pv(vec![10.0, 0.0, 0.0, 0.0]),
            &pv(vec![0.0; 4]),
            &cfg,
        );
        assert_eq!(t.values(), &[0.0, 1.0, 0.0, 0.0]);

        let theta = pv(vec![0.3, -0.2, 0.1, 0.5]);
        let (t, v) = sgd_step(&theta, &pv(vec![0.0; 4]), &pv(vec![0.0; 4]), &cfg);
        assert_eq!(t, theta);
        assert_eq!(v.values(), &[0.0; 4]);

        cfg.momentum = 0.9;
        let (t, v) = sgd_step(
            &pv(vec![0.0; 4]),
            &pv(vec![1.0, 0.0, 0.0, 0.0]),
            &pv(vec![1.0, 0.0, 0.0, 0.0]),
            &cfg,
        );
        assert!((v.values()[0] - 1.9).abs() < 1e-15);
        assert!((t.values()[0] + 0.19).abs() < 1e-15);
    }

    fn separable_dataset() -> ClientDataset<f64> {
        let mut r = rng::rng(21);
        let samples = (0..40)
            .map(|k| {
                let y = k % 2;
                let cx = if y == 0 { -2.0 } else { 2.0 };
                Sample {
                    x: vec![cx + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                    y,
                }
            })
            .collect();
        ClientDataset {
            client_id: 0,
            samples,
            true_cluster: 0,
        }
    }

    #[test]
    fn local_train_zero_epochs_is_identity() {
        let spec = ModelSpec::linear(2, 2);
        let theta = init_parameters::<f64>(&spec, 4);
        let cfg = OptimizerConfig::default();
        let out = local_train_epochs(&theta, &spec, &separable_dataset(), &cfg, 0, 9).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn local_train_is_deterministic() {
        let spec = ModelSpec::mlp1(2, 4, 2, Activation::Relu);
        let theta = init_parameters::<f64>(&spec, 4);
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            local_epochs: 3,
        };
        let data = separable_dataset();
        let a = local_train(&theta, &spec, &data, &cfg, 17).unwrap();
        let b = local_train(&theta, &spec, &data, &cfg, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, local_train(&theta, &spec, &data, &cfg, 18).unwrap());
    }

    #[test]
    fn local_train_separates_linearly_separable_data() {
        let spec = ModelSpec::linear(2, 2);
        let data = separable_dataset();
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: 8,
            local_epochs: 20,
        };
        let theta = local_train(&init_parameters(&spec, 1), &spec, &data, &cfg, 3).unwrap();
        let correct = data
            .samples
            .iter()
            .filter(|s| predict(&theta, &spec, &s.x).unwrap() == s.y)
            .count();
        assert_eq!(correct, 40);
    }

    #[test]
    fn vanishing_learning_rate_keeps_parameters() {
        let spec = ModelSpec::mlp1(2, 3, 2, Activation::Tanh);
        let theta = init_parameters::<f64>(&spec, 4);
        let cfg = OptimizerConfig {
            learning_rate: 1e-30,
            momentum: 0.9,
            batch_size: 4,
            local_epochs: 5,
        };
        let out = local_train(&theta, &spec, &separable_dataset(), &cfg, 1).unwrap();
        for (a, b) in out.values().iter().zip(theta.values()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn predict_breaks_ties_low() {
        let spec = ModelSpec::linear(2, 3);
        assert_eq!(
            predict(&ParameterVector::<f64>::zeros(&spec), &spec, &[1.0, 1.0]).unwrap(),
            0
        );
    }

    #[test]
    fn works_in_single_precision() {
        let spec = ModelSpec::linear(2, 2);
        let theta = init_parameters::<f32>(&spec, 7);
        let (loss, grad) = loss_and_gradient(
            &theta,
            &spec,
            &[Sample {
                x: vec![1.0f32, -1.0],
                y: 1,
            }],
        )
        .unwrap();
        assert!(loss > 0.0 && grad.is_finite());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_simplex_point(
                // logit gaps stay below ~20 so 1 - p is representable
                w in proptest::collection::vec(-1.0f64..1.0, 12),
                x in proptest::collection::vec(-3.0f64..3.0, 3),
            ) {
                let spec = ModelSpec::linear(3, 3);
                let theta = ParameterVector::from_values(&spec, w).unwrap();
                let p = forward(&theta, &spec, &x).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            }

            #[test]
            fn gradient_agrees_with_finite_differences(seed in 0u64..1000) {
                let mut r = rng::rng(seed);
                let spec = ModelSpec::mlp1(3, 4, 3, Activation::Tanh);
                let theta = init_parameters::<f64>(&spec, seed);
                let batch = random_batch(&mut r, 10, 3, 3);
                let (_, grad) = loss_and_gradient(&theta, &spec, &batch).unwrap();
                let fd = finite_difference(&theta, &spec, &batch);
                prop_assert!(max_rel_error(grad.values(), &fd) < 1e-4);
            }
        }
    }
}
