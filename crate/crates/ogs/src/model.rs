//! Dense feed-forward models with exact per-sample gradients.
//!
//! Everything downstream (geometry scores, the selection policy, the training
//! pipeline) works on flat `f64` parameter vectors and flat gradient vectors
//! produced here. Hidden layers apply the configured activation; the output
//! layer is affine, and the loss is applied to the raw outputs.
//!
//! Parameter layout for widths `[w0, w1, ..., wL]`: for each layer `l`, the
//! row-major weight block (`w_{l+1} x w_l`) followed by the bias block
//! (`w_{l+1}`), concatenated in layer order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn forward(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the post-activation value.
    /// ReLU uses the subgradient 0 at exactly zero.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    SoftmaxCrossEntropy,
}

/// Architecture of a small feed-forward model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "model needs at least 2 layer widths, got {}",
                layer_widths.len()
            )));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidInput("layer widths must be >= 1".into()));
        }
        Ok(ModelSpec {
            layer_widths,
            activation,
            loss,
        })
    }

    /// Total parameter count: sum over layers of `w_l * w_{l+1} + w_{l+1}`.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Stable identifier used to bind parameter vectors to their spec.
    pub fn id(&self) -> u64 {
        let mut bytes = Vec::new();
        for &w in &self.layer_widths {
            bytes.extend_from_slice(&(w as u64).to_le_bytes());
        }
        bytes.push(match self.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        });
        bytes.push(match self.loss {
            LossKind::SquaredError => 0,
            LossKind::SoftmaxCrossEntropy => 1,
        });
        seed::fnv1a64(&bytes)
    }
}

/// A flat parameter vector bound to the spec it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    values: Vec<f64>,
    spec_id: u64,
}

impl ModelParams {
    pub fn new(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                what: "model parameters",
                expected: spec.param_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite model parameter".into()));
        }
        Ok(ModelParams {
            values,
            spec_id: spec.id(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spec_id(&self) -> u64 {
        self.spec_id
    }

    /// Content identity of this exact parameter vector (used to tag the
    /// snapshot an anchor gradient was computed at).
    pub fn content_id(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * self.values.len() + 8);
        bytes.extend_from_slice(&self.spec_id.to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        seed::fnv1a64(&bytes)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.spec_id != spec.id() {
            return Err(Error::InvalidInput(
                "parameters were built for a different model spec".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded initialization: every weight and bias of a layer with fan-in `n`
/// drawn uniformly from `[-1/sqrt(n), +1/sqrt(n)]`.
pub fn init_params(spec: &ModelSpec, seed_value: u64) -> ModelParams {
    let mut rng = seed::indexed_rng(seed_value, "model-init", spec.id());
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(fan_in * fan_out + fan_out) {
            values.push(rng.gen_range(-limit..limit));
        }
    }
    ModelParams {
        values,
        spec_id: spec.id(),
    }
}

/// Which population a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolTag {
    Domain,
    General,
}

impl std::fmt::Display for PoolTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolTag::Domain => write!(f, "domain"),
            PoolTag::General => write!(f, "general"),
        }
    }
}

/// Supervision target for a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Regression(Vec<f64>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub target: Target,
    pub pool: PoolTag,
}

/// Provenance of a gradient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradOrigin {
    PerSample,
    BatchMean,
    Anchor,
}

/// A flat gradient with the same layout as the owning model's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub origin: GradOrigin,
}

impl GradientVector {
    pub fn dot(&self, other: &GradientVector) -> Result<f64> {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "dot product",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Forward pass; returns the raw model outputs.
pub fn forward(spec: &ModelSpec, params: &ModelParams, features: &[f64]) -> Result<Vec<f64>> {
    let acts = run_forward(spec, params, features)?;
    Ok(acts.into_iter().last().unwrap())
}

/// Forward pass keeping every layer's post-activation values (index 0 is the
/// input itself).
fn run_forward(spec: &ModelSpec, params: &ModelParams, features: &[f64]) -> Result<Vec<Vec<f64>>> {
    params.check(spec)?;
    if features.len() != spec.input_width() {
        return Err(Error::DimensionMismatch {
            what: "input features",
            expected: spec.input_width(),
            got: features.len(),
        });
    }
    let mut acts = Vec::with_capacity(spec.layer_widths.len());
    acts.push(features.to_vec());
    let mut offset = 0;
    let last = spec.layer_count() - 1;
    for (l, w) in spec.layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = &params.values[offset..offset + fan_in * fan_out];
        let biases = &params.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;

        let input = &acts[l];
        let mut out = Vec::with_capacity(fan_out);
        for (o, &bias) in biases.iter().enumerate() {
            let mut z = bias;
            let row = o * fan_in;
            for (i, &x) in input.iter().enumerate() {
                z += weights[row + i] * x;
            }
            out.push(if l == last { z } else { spec.activation.forward(z) });
        }
        acts.push(out);
    }
    Ok(acts)
}

/// Loss of one sample. Squared error is the plain sum of squared residuals;
/// cross-entropy is computed through log-sum-exp.
pub fn loss_value(spec: &ModelSpec, params: &ModelParams, sample: &Sample) -> Result<f64> {
    let output = forward(spec, params, &sample.features)?;
    let loss = loss_only(spec, &output, sample)?;
    if !loss.is_finite() {
        return Err(Error::DegenerateSample {
            sample_id: sample.id,
            reason: format!("non-finite loss {loss}"),
        });
    }
    Ok(loss)
}

/// Mean loss over a set of samples.
pub fn mean_loss(spec: &ModelSpec, params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("mean_loss over empty set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += loss_value(spec, params, s)?;
    }
    Ok(total / samples.len() as f64)
}

fn loss_only(spec: &ModelSpec, output: &[f64], sample: &Sample) -> Result<f64> {
    match (spec.loss, &sample.target) {
        (LossKind::SquaredError, Target::Regression(t)) => {
            if t.len() != output.len() {
                return Err(Error::DimensionMismatch {
                    what: "regression target",
                    expected: output.len(),
                    got: t.len(),
                });
            }
            Ok(output
                .iter()
                .zip(t)
                .map(|(y, t)| (y - t) * (y - t))
                .sum())
        }
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            if *c >= output.len() {
                return Err(Error::InvalidInput(format!(
                    "class index {c} out of range for output width {}",
                    output.len()
                )));
            }
            Ok(log_sum_exp(output) - output[*c])
        }
        _ => Err(Error::InvalidInput(
            "target kind does not match the model's loss kind".into(),
        )),
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradient of the loss at the model output.
fn loss_output_gradient(spec: &ModelSpec, output: &[f64], sample: &Sample) -> Result<Vec<f64>> {
    match (spec.loss, &sample.target) {
        (LossKind::SquaredError, Target::Regression(t)) => {
            if t.len() != output.len() {
                return Err(Error::DimensionMismatch {
                    what: "regression target",
                    expected: output.len(),
                    got: t.len(),
                });
            }
            Ok(output.iter().zip(t).map(|(y, t)| 2.0 * (y - t)).collect())
        }
        (LossKind::SoftmaxCrossEntropy, Target::Class(c)) => {
            let m = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = output.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
            g[*c] -= 1.0;
            Ok(g)
        }
        _ => Err(Error::InvalidInput(
            "target kind does not match the model's loss kind".into(),
        )),
    }
}

/// Exact reverse-mode gradient of the sample loss with respect to every
/// parameter, in the flat layout.
pub fn per_sample_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    sample: &Sample,
) -> Result<GradientVector> {
    let acts = run_forward(spec, params, &sample.features)?;
    let output = acts.last().unwrap();
    let loss = loss_only(spec, output, sample)?;
    if !loss.is_finite() {
        return Err(Error::DegenerateSample {
            sample_id: sample.id,
            reason: format!("non-finite loss {loss}"),
        });
    }
    let d_out = loss_output_gradient(spec, output, sample)?;
    let values = backprop(spec, params, &acts, d_out);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSample {
            sample_id: sample.id,
            reason: "non-finite gradient".into(),
        });
    }
    Ok(GradientVector {
        values,
        origin: GradOrigin::PerSample,
    })
}

/// Gradient of `<d_output, f(x)>` with respect to the parameters: backprop
/// from a caller-supplied output gradient, bypassing the loss head. This is
/// what the policy optimizer uses to drive custom objectives.
pub fn backward_from_output_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    features: &[f64],
    d_output: &[f64],
) -> Result<Vec<f64>> {
    if d_output.len() != spec.output_width() {
        return Err(Error::DimensionMismatch {
            what: "output gradient",
            expected: spec.output_width(),
            got: d_output.len(),
        });
    }
    let acts = run_forward(spec, params, features)?;
    Ok(backprop(spec, params, &acts, d_output.to_vec()))
}

#[allow(clippy::needless_range_loop)] // explicit indices mirror the row-major weight layout
fn backprop(spec: &ModelSpec, params: &ModelParams, acts: &[Vec<f64>], d_out: Vec<f64>) -> Vec<f64> {
    let mut grad = vec![0.0; params.values.len()];
    let layer_offsets: Vec<usize> = {
        let mut offs = vec![0];
        for w in spec.layer_widths.windows(2) {
            offs.push(offs.last().unwrap() + w[0] * w[1] + w[1]);
        }
        offs
    };

    let last = spec.layer_count() - 1;
    let mut d_current = d_out;
    for l in (0..spec.layer_count()).rev() {
        let fan_in = spec.layer_widths[l];
        let fan_out = spec.layer_widths[l + 1];
        let offset = layer_offsets[l];
        let weights = &params.values[offset..offset + fan_in * fan_out];

        let input = &acts[l];
        let output = &acts[l + 1];
        let mut d_input = vec![0.0; fan_in];
        for o in 0..fan_out {
            let dz = if l == last {
                d_current[o]
            } else {
                d_current[o] * spec.activation.grad_from_output(output[o])
            };
            let row = o * fan_in;
            grad[offset + fan_in * fan_out + o] = dz;
            for i in 0..fan_in {
                grad[offset + row + i] = dz * input[i];
                d_input[i] += weights[row + i] * dz;
            }
        }
        d_current = d_input;
    }
    grad
}

/// Arithmetic mean of the per-sample gradients of a non-empty batch,
/// accumulated in batch order.
pub fn batch_mean_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &[Sample],
) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut acc = vec![0.0; spec.param_count()];
    for sample in batch {
        let g = per_sample_gradient(spec, params, sample)?;
        for (a, v) in acc.iter_mut().zip(&g.values) {
            *a += v;
        }
    }
    let n = batch.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(GradientVector {
        values: acc,
        origin: GradOrigin::BatchMean,
    })
}

/// One plain gradient step `theta - lr * g`; the input is untouched.
pub fn sgd_step(params: &ModelParams, gradient: &GradientVector, lr: f64) -> Result<ModelParams> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("learning rate must be positive, got {lr}")));
    }
    if gradient.values.len() != params.values.len() {
        return Err(Error::DimensionMismatch {
            what: "sgd gradient",
            expected: params.values.len(),
            got: gradient.values.len(),
        });
    }
    let values: Vec<f64> = params
        .values
        .iter()
        .zip(&gradient.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDivergence(
            "sgd step produced non-finite parameters".into(),
        ));
    }
    Ok(ModelParams {
        values,
        spec_id: params.spec_id,
    })
}
