//! Models `f = g ∘ h`: a feature extractor `h` (affine map or one-hidden-layer
//! MLP) followed by an affine classifier `g(z) = A z + b`, where `A` may be
//! the fixed identity so that features are the logits themselves.
//!
//! Parameters are exposed as one flat vector so optimizers, finite-difference
//! checks and checkpoints all share a single layout:
//!
//! | extractor | layout                                            |
//! |-----------|---------------------------------------------------|
//! | linear    | `W` (row-major, d×n), `b1` (d)                    |
//! | mlp1      | `W1` (m×n), `b1` (m), `W2` (d×m), `b2` (d)        |
//!
//! followed by the classifier: `A` (row-major, K×d, absent when identity),
//! then its bias (K).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{axpy, norm2, svd_spectrum, Matrix, RandomSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    // derivative expressed through the pre-activation
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Linear {
        weight: Matrix,
        bias: Vec<f64>,
    },
    Mlp {
        hidden_weight: Matrix,
        hidden_bias: Vec<f64>,
        activation: Activation,
        out_weight: Matrix,
        out_bias: Vec<f64>,
    },
}

/// Affine classifier on features. `weight == None` means `A = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Option<Matrix>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    extractor: Extractor,
    classifier: Classifier,
}

/// Features and logits for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Softmax cross-entropy value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// Scalar training objectives supported by [`Model::grad_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Mean cross-entropy at the loss points.
    CrossEntropy,
    /// Mean `||h(x1) - h(x2)||_2` over the variation pairs.
    Variation,
    /// Cross-entropy plus `lambda` times variation.
    Regularized { lambda: f64 },
}

/// One batch element for [`Model::grad_params`]. Variation pairs are treated
/// as constants: gradients flow only through the parameters.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSample<'a> {
    pub input: &'a [f64],
    pub label: usize,
    pub pair: Option<(&'a [f64], &'a [f64])>,
}

/// Log-sum-exp stabilized softmax cross-entropy.
pub fn ce_loss(logits: &[f64], label: usize) -> LossValue {
    let probs = softmax(logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let value = (lse - logits[label]).max(0.0);
    let mut grad_logits = probs;
    grad_logits[label] -= 1.0;
    LossValue { value, grad_logits }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

// Cached intermediate values of a forward pass.
struct Trace {
    pre_activation: Option<Vec<f64>>,
    hidden: Option<Vec<f64>>,
    features: Vec<f64>,
    logits: Vec<f64>,
}

impl Model {
    pub fn new(extractor: Extractor, classifier: Classifier) -> Result<Self> {
        let m = Self { extractor, classifier };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        match &self.extractor {
            Extractor::Linear { weight, bias } => check_dim(weight.rows(), bias.len())?,
            Extractor::Mlp { hidden_weight, hidden_bias, out_weight, out_bias, .. } => {
                check_dim(hidden_weight.rows(), hidden_bias.len())?;
                check_dim(hidden_weight.rows(), out_weight.cols())?;
                check_dim(out_weight.rows(), out_bias.len())?;
            }
        }
        let d = self.feature_dim();
        match &self.classifier.weight {
            Some(a) => {
                check_dim(d, a.cols())?;
                check_dim(a.rows(), self.classifier.bias.len())?;
            }
            None => check_dim(d, self.classifier.bias.len())?,
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidInput("a classifier needs at least two classes".into()));
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite model parameter".into()));
        }
        Ok(())
    }

    /// Affine extractor and affine classifier, initialized like a default
    /// dense layer: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn linear_random(
        input_dim: usize,
        feature_dim: usize,
        num_classes: usize,
        identity_classifier: bool,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let (weight, bias) = dense_init(feature_dim, input_dim, rng);
        let classifier = classifier_init(feature_dim, num_classes, identity_classifier, rng);
        Self::new(Extractor::Linear { weight, bias }, classifier)
    }

    pub fn mlp_random(
        input_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        num_classes: usize,
        activation: Activation,
        identity_classifier: bool,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let (hidden_weight, hidden_bias) = dense_init(hidden_dim, input_dim, rng);
        let (out_weight, out_bias) = dense_init(feature_dim, hidden_dim, rng);
        let classifier = classifier_init(feature_dim, num_classes, identity_classifier, rng);
        Self::new(
            Extractor::Mlp { hidden_weight, hidden_bias, activation, out_weight, out_bias },
            classifier,
        )
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn input_dim(&self) -> usize {
        match &self.extractor {
            Extractor::Linear { weight, .. } => weight.cols(),
            Extractor::Mlp { hidden_weight, .. } => hidden_weight.cols(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.extractor {
            Extractor::Linear { weight, .. } => weight.rows(),
            Extractor::Mlp { out_weight, .. } => out_weight.rows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.bias.len()
    }

    /// The extractor weight when `h` is affine.
    pub fn linear_weight(&self) -> Option<&Matrix> {
        match &self.extractor {
            Extractor::Linear { weight, .. } => Some(weight),
            Extractor::Mlp { .. } => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.extractor, Extractor::Linear { .. })
    }

    pub fn is_binary_linear(&self) -> bool {
        self.is_linear() && self.num_classes() == 2
    }

    /// Classifier weight as an explicit matrix (identity materialized).
    pub fn classifier_matrix(&self) -> Matrix {
        self.classifier.weight.clone().unwrap_or_else(|| Matrix::identity(self.feature_dim()))
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let (pre_activation, hidden, features) = match &self.extractor {
            Extractor::Linear { weight, bias } => {
                let mut z = weight.matvec_unchecked(x);
                axpy(1.0, bias, &mut z);
                (None, None, z)
            }
            Extractor::Mlp { hidden_weight, hidden_bias, activation, out_weight, out_bias } => {
                let mut pre = hidden_weight.matvec_unchecked(x);
                axpy(1.0, hidden_bias, &mut pre);
                let hid: Vec<f64> = pre.iter().map(|&z| activation.apply(z)).collect();
                let mut z = out_weight.matvec_unchecked(&hid);
                axpy(1.0, out_bias, &mut z);
                (Some(pre), Some(hid), z)
            }
        };
        let mut logits = match &self.classifier.weight {
            Some(a) => a.matvec_unchecked(&features),
            None => features.clone(),
        };
        axpy(1.0, &self.classifier.bias, &mut logits);
        Trace { pre_activation, hidden, features, logits }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        check_dim(self.input_dim(), x.len())?;
        let t = self.trace(x);
        Ok(Forward { features: t.features, logits: t.logits })
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(self.trace(x).features)
    }

    pub(crate) fn features_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).features
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.logits))
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(ce_loss(&self.forward(x)?.logits, label).value)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Gradient of the cross-entropy at `x` with respect to `x`.
    pub fn grad_input(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad_input(x, label)?.1)
    }

    /// Loss and its input gradient from one forward/backward pass.
    pub fn loss_and_grad_input(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        check_dim(self.input_dim(), x.len())?;
        self.check_label(label)?;
        let t = self.trace(x);
        let loss = ce_loss(&t.logits, label);
        let upstream = self.classifier_backward(&t, &loss.grad_logits, 1.0, None);
        let g = self.extractor_backward(x, &t, &upstream, 1.0, None);
        Ok((loss.value, g))
    }

    /// `J_h(x)^T u`: vector-Jacobian product of the extractor at `x`.
    pub fn extractor_vjp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.feature_dim(), u.len())?;
        Ok(self.extractor_vjp_unchecked(x, u))
    }

    pub(crate) fn extractor_vjp_unchecked(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match &self.extractor {
            // skip the forward pass when the Jacobian is constant
            Extractor::Linear { weight, .. } => weight.tr_matvec_unchecked(u),
            Extractor::Mlp { .. } => {
                let t = self.trace(x);
                self.extractor_backward(x, &t, u, 1.0, None)
            }
        }
    }

    // Backpropagates dL/dlogits to dL/dfeatures, accumulating `scale * dL/dA`
    // and `scale * dL/db` into `grads` when given.
    fn classifier_backward(&self, t: &Trace, grad_logits: &[f64], scale: f64, grads: Option<&mut [f64]>) -> Vec<f64> {
        if let Some(g) = grads {
            let off = self.extractor_param_count();
            let mut k = off;
            if self.classifier.weight.is_some() {
                for &gl in grad_logits {
                    for &f in &t.features {
                        g[k] += scale * gl * f;
                        k += 1;
                    }
                }
            }
            for &gl in grad_logits {
                g[k] += scale * gl;
                k += 1;
            }
        }
        match &self.classifier.weight {
            Some(a) => a.tr_matvec_unchecked(grad_logits),
            None => grad_logits.to_vec(),
        }
    }

    // Backpropagates dL/dfeatures to dL/dx, accumulating extractor parameter
    // gradients (times `scale`) into `grads` when given.
    fn extractor_backward(
        &self,
        x: &[f64],
        t: &Trace,
        upstream: &[f64],
        scale: f64,
        grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        match &self.extractor {
            Extractor::Linear { weight, .. } => {
                if let Some(g) = grads {
                    let mut k = 0;
                    for &u in upstream {
                        for &xi in x {
                            g[k] += scale * u * xi;
                            k += 1;
                        }
                    }
                    for &u in upstream {
                        g[k] += scale * u;
                        k += 1;
                    }
                }
                weight.tr_matvec_unchecked(upstream)
            }
            Extractor::Mlp { hidden_weight, activation, out_weight, .. } => {
                let pre = t.pre_activation.as_ref().expect("mlp trace");
                let hid = t.hidden.as_ref().expect("mlp trace");
                let d_hidden = out_weight.tr_matvec_unchecked(upstream);
                let d_pre: Vec<f64> =
                    d_hidden.iter().zip(pre).map(|(dh, &z)| dh * activation.derivative(z)).collect();
                if let Some(g) = grads {
                    let mut k = 0;
                    for &dp in &d_pre {
                        for &xi in x {
                            g[k] += scale * dp * xi;
                            k += 1;
                        }
                    }
                    for &dp in &d_pre {
                        g[k] += scale * dp;
                        k += 1;
                    }
                    for &u in upstream {
                        for &h in hid {
                            g[k] += scale * u * h;
                            k += 1;
                        }
                    }
                    for &u in upstream {
                        g[k] += scale * u;
                        k += 1;
                    }
                }
                hidden_weight.tr_matvec_unchecked(&d_pre)
            }
        }
    }

    fn extractor_param_count(&self) -> usize {
        match &self.extractor {
            Extractor::Linear { weight, bias } => weight.as_slice().len() + bias.len(),
            Extractor::Mlp { hidden_weight, hidden_bias, out_weight, out_bias, .. } => {
                hidden_weight.as_slice().len() + hidden_bias.len() + out_weight.as_slice().len() + out_bias.len()
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.extractor_param_count()
            + self.classifier.weight.as_ref().map_or(0, |a| a.as_slice().len())
            + self.classifier.bias.len()
    }

    /// All trainable parameters in the documented flat layout.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match &self.extractor {
            Extractor::Linear { weight, bias } => {
                out.extend_from_slice(weight.as_slice());
                out.extend_from_slice(bias);
            }
            Extractor::Mlp { hidden_weight, hidden_bias, out_weight, out_bias, .. } => {
                out.extend_from_slice(hidden_weight.as_slice());
                out.extend_from_slice(hidden_bias);
                out.extend_from_slice(out_weight.as_slice());
                out.extend_from_slice(out_bias);
            }
        }
        if let Some(a) = &self.classifier.weight {
            out.extend_from_slice(a.as_slice());
        }
        out.extend_from_slice(&self.classifier.bias);
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter update".into()));
        }
        let mut rest = params;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        match &mut self.extractor {
            Extractor::Linear { weight, bias } => {
                take(weight.as_mut_slice());
                take(bias);
            }
            Extractor::Mlp { hidden_weight, hidden_bias, out_weight, out_bias, .. } => {
                take(hidden_weight.as_mut_slice());
                take(hidden_bias);
                take(out_weight.as_mut_slice());
                take(out_bias);
            }
        }
        if let Some(a) = &mut self.classifier.weight {
            take(a.as_mut_slice());
        }
        take(&mut self.classifier.bias);
        Ok(())
    }

    /// Value and flat parameter gradient of the batch-mean objective.
    pub fn grad_params(&self, batch: &[ObjectiveSample<'_>], objective: Objective) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let (loss_w, var_w) = match objective {
            Objective::CrossEntropy => (1.0, 0.0),
            Objective::Variation => (0.0, 1.0),
            Objective::Regularized { lambda } => (1.0, lambda),
        };
        let scale = 1.0 / batch.len() as f64;
        let mut grads = vec![0.0; self.num_params()];
        let mut total = 0.0;
        for s in batch {
            if loss_w != 0.0 {
                check_dim(self.input_dim(), s.input.len())?;
                self.check_label(s.label)?;
                let t = self.trace(s.input);
                let loss = ce_loss(&t.logits, s.label);
                total += loss_w * loss.value;
                let up = self.classifier_backward(&t, &loss.grad_logits, scale * loss_w, Some(&mut grads));
                self.extractor_backward(s.input, &t, &up, scale * loss_w, Some(&mut grads));
            }
            if var_w != 0.0 {
                let (x1, x2) = s.pair.ok_or_else(|| {
                    Error::InvalidInput("variation objective needs a witness pair for every sample".into())
                })?;
                total += var_w * self.accumulate_variation_grad(x1, x2, scale * var_w, &mut grads)?;
            }
        }
        let value = total * scale;
        if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite objective or gradient".into()));
        }
        Ok((value, grads))
    }

    // d/dθ ||h(x1) - h(x2)||_2 at fixed inputs; the subgradient at zero is 0.
    fn accumulate_variation_grad(&self, x1: &[f64], x2: &[f64], scale: f64, grads: &mut [f64]) -> Result<f64> {
        check_dim(self.input_dim(), x1.len())?;
        check_dim(self.input_dim(), x2.len())?;
        let t1 = self.trace(x1);
        let t2 = self.trace(x2);
        let diff: Vec<f64> = t1.features.iter().zip(&t2.features).map(|(a, b)| a - b).collect();
        let v = norm2(&diff);
        if v > 0.0 {
            let u: Vec<f64> = diff.iter().map(|d| d / v).collect();
            self.extractor_backward(x1, &t1, &u, scale, Some(grads));
            self.extractor_backward(x2, &t2, &u, -scale, Some(grads));
        }
        Ok(v)
    }

    /// Lipschitz constant of the classifier w.r.t. `l_2`: `sigma_max(A)`, or 1
    /// for the identity.
    pub fn classifier_lipschitz(&self) -> Result<f64> {
        match &self.classifier.weight {
            None => Ok(1.0),
            Some(a) => Ok(svd_spectrum(a)?.sigma_max),
        }
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint {
        let (kind, hidden, activation, parameters) = match &self.extractor {
            Extractor::Linear { weight, bias } => (
                ModelKind::Linear,
                None,
                None,
                CheckpointParams {
                    w: weight.as_slice().to_vec(),
                    b1: bias.clone(),
                    w2: None,
                    b2h: None,
                    a: None,
                    b2: self.classifier.bias.clone(),
                },
            ),
            Extractor::Mlp { hidden_weight, hidden_bias, activation, out_weight, out_bias } => (
                ModelKind::Mlp1,
                Some(hidden_weight.rows()),
                Some(*activation),
                CheckpointParams {
                    w: hidden_weight.as_slice().to_vec(),
                    b1: hidden_bias.clone(),
                    w2: Some(out_weight.as_slice().to_vec()),
                    b2h: Some(out_bias.clone()),
                    a: None,
                    b2: self.classifier.bias.clone(),
                },
            ),
        };
        let mut parameters = parameters;
        parameters.a = self.classifier.weight.as_ref().map(|a| a.as_slice().to_vec());
        Checkpoint {
            kind,
            dims: Dims {
                input: self.input_dim(),
                hidden,
                features: self.feature_dim(),
                classes: self.num_classes(),
            },
            parameters,
            activation,
            identity_classifier: self.classifier.weight.is_none(),
            seed,
            epoch,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let d = c.dims;
        let p = &c.parameters;
        let extractor = match c.kind {
            ModelKind::Linear => Extractor::Linear {
                weight: Matrix::new(d.features, d.input, p.w.clone())?,
                bias: p.b1.clone(),
            },
            ModelKind::Mlp1 => {
                let m = d.hidden.ok_or_else(|| Error::InvalidInput("mlp1 checkpoint without hidden size".into()))?;
                Extractor::Mlp {
                    hidden_weight: Matrix::new(m, d.input, p.w.clone())?,
                    hidden_bias: p.b1.clone(),
                    activation: c.activation.unwrap_or_default(),
                    out_weight: Matrix::new(
                        d.features,
                        m,
                        p.w2.clone().ok_or_else(|| Error::InvalidInput("mlp1 checkpoint without w2".into()))?,
                    )?,
                    out_bias: p.b2h.clone().ok_or_else(|| Error::InvalidInput("mlp1 checkpoint without b2h".into()))?,
                }
            }
        };
        let weight = match (&p.a, c.identity_classifier) {
            (None, true) => None,
            (Some(a), false) => Some(Matrix::new(d.classes, d.features, a.clone())?),
            _ => {
                return Err(Error::InvalidInput(
                    "classifier weight presence disagrees with identity_classifier".into(),
                ))
            }
        };
        let m = Self::new(extractor, Classifier { weight, bias: p.b2.clone() })?;
        check_dim(d.classes, m.num_classes())?;
        Ok(m)
    }
}

fn dense_init(rows: usize, cols: usize, rng: &mut RandomSource) -> (Matrix, Vec<f64>) {
    let bound = 1.0 / (cols.max(1) as f64).sqrt();
    let w = Matrix::random_uniform(rows, cols, bound, rng);
    let b = (0..rows).map(|_| rng.uniform(-bound, bound)).collect();
    (w, b)
}

fn classifier_init(features: usize, classes: usize, identity: bool, rng: &mut RandomSource) -> Classifier {
    if identity {
        Classifier { weight: None, bias: vec![0.0; features] }
    } else {
        let (w, b) = dense_init(classes, features, rng);
        Classifier { weight: Some(w), bias: b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub input: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub features: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointParams {
    pub w: Vec<f64>,
    pub b1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2h: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
    pub b2: Vec<f64>,
}

/// On-disk JSON model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub dims: Dims,
    pub parameters: CheckpointParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    pub identity_classifier: bool,
    pub seed: u64,
    pub epoch: usize,
}

pub fn save_model(model: &Model, path: &Path, seed: u64, epoch: usize) -> Result<()> {
    let json = serde_json::to_string_pretty(&model.to_checkpoint(seed, epoch))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let text = fs::read_to_string(path)?;
    let schema = |message: String| Error::Schema { path: path.to_path_buf(), message };
    let c: Checkpoint = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    let m = Model::from_checkpoint(&c).map_err(|e| schema(e.to_string()))?;
    Ok((m, c))
}

/// Margin `logit_y - logit_other` for a two-class model.
pub fn binary_margin(logits: &[f64], label: usize) -> f64 {
    logits[label] - logits[1 - label]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, finite_diff_check_floor};

    fn identity_model() -> Model {
        Model::new(
            Extractor::Linear { weight: Matrix::identity(2), bias: vec![0.0; 2] },
            Classifier { weight: None, bias: vec![0.0; 2] },
        )
        .unwrap()
    }

    #[test]
    fn forward_identity() {
        let f = identity_model().forward(&[1.0, 2.0]).unwrap();
        assert_eq!(f.features, vec![1.0, 2.0]);
        assert_eq!(f.logits, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut m = Model::linear_random(3, 2, 2, false, &mut RandomSource::new(1)).unwrap();
        let mut p = vec![0.0; m.num_params()];
        let n = p.len();
        p[n - 2] = 0.25;
        p[n - 1] = -0.5;
        m.set_params(&p).unwrap();
        assert_eq!(m.forward(&[1.0, 2.0, 3.0]).unwrap().logits, vec![0.25, -0.5]);
        assert_eq!(m.grad_input(&[1.0, 2.0, 3.0], 0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn forward_matches_explicit_products() {
        let mut rng = RandomSource::new(4);
        let m = Model::linear_random(6, 4, 3, false, &mut rng).unwrap();
        let x = rng.normal_vec(6);
        let w = m.linear_weight().unwrap();
        let Extractor::Linear { bias, .. } = m.extractor() else { unreachable!() };
        let a = m.classifier_matrix();
        let mut expect = vec![0.0; 3];
        for k in 0..3 {
            let mut s = m.classifier().bias[k];
            for j in 0..4 {
                let mut h = bias[j];
                for i in 0..6 {
                    h += w.get(j, i) * x[i];
                }
                s += a.get(k, j) * h;
            }
            expect[k] = s;
        }
        let got = m.forward(&x).unwrap().logits;
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_loss_values() {
        assert!((ce_loss(&[0.0, 0.0], 0).value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_loss(&[50.0, -50.0], 0).value < 1e-40);
        let big = ce_loss(&[1000.0, -1000.0], 1);
        assert!((big.value - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = RandomSource::new(9);
        for _ in 0..20 {
            let z = rng.normal_vec(4);
            let y = rng.index(4);
            let err = finite_diff_check(|v| ce_loss(v, y).value, |v| ce_loss(v, y).grad_logits, &z, 1e-6).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn softmax_and_gradient_norm_bounds() {
        let mut rng = RandomSource::new(2);
        for _ in 0..1000 {
            let k = 2 + rng.index(9);
            let z: Vec<f64> = rng.normal_vec(k).into_iter().map(|v| 10.0 * v).collect();
            let s: f64 = softmax(&z).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let l = ce_loss(&z, rng.index(k));
            assert!(l.value >= 0.0);
            assert!(norm2(&l.grad_logits) <= 2f64.sqrt() + 1e-9);
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mut rng = RandomSource::new(21);
        let models = [
            Model::linear_random(5, 3, 2, false, &mut rng).unwrap(),
            Model::linear_random(5, 3, 3, true, &mut rng).unwrap(),
            Model::mlp_random(5, 6, 3, 2, Activation::Tanh, false, &mut rng).unwrap(),
            Model::mlp_random(5, 6, 3, 3, Activation::Relu, false, &mut rng).unwrap(),
        ];
        for m in &models {
            for _ in 0..5 {
                let x = rng.normal_vec(5);
                let y = rng.index(m.num_classes());
                let err = finite_diff_check_floor(
                    |v| m.loss(v, y).unwrap(),
                    |v| m.grad_input(v, y).unwrap(),
                    &x,
                    1e-6,
                    1e-8,
                )
                .unwrap();
                assert!(err < 1e-5, "{err}");
            }
        }
    }

    #[test]
    fn linear_input_gradient_closed_form() {
        let mut rng = RandomSource::new(5);
        let m = Model::linear_random(4, 3, 2, false, &mut rng).unwrap();
        let x = rng.normal_vec(4);
        let logits = m.forward(&x).unwrap().logits;
        let r = ce_loss(&logits, 1).grad_logits;
        let aw = m.classifier_matrix().matmul(m.linear_weight().unwrap()).unwrap();
        let expect = aw.tr_matvec(&r).unwrap();
        let got = m.grad_input(&x, 1).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn variation_param_gradient_by_hand() {
        // batch of one, linear h: d/dW ||W(x1-x2)|| = u (x1-x2)^T
        let m = Model::linear_random(3, 2, 2, false, &mut RandomSource::new(8)).unwrap();
        let (x1, x2) = ([0.1, 0.2, 0.3], [0.0, -0.1, 0.4]);
        let s = ObjectiveSample { input: &x1, label: 0, pair: Some((&x1, &x2)) };
        let (v, g) = m.grad_params(&[s], Objective::Variation).unwrap();
        let delta: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let wd = m.linear_weight().unwrap().matvec(&delta).unwrap();
        assert!((v - norm2(&wd)).abs() < 1e-15);
        for r in 0..2 {
            for c in 0..3 {
                let expect = wd[r] / norm2(&wd) * delta[c];
                assert!((g[r * 3 + c] - expect).abs() < 1e-13);
            }
        }
        assert!(g[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lambda_equals_cross_entropy() {
        let mut rng = RandomSource::new(3);
        let m = Model::linear_random(4, 3, 2, false, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4)).collect();
        let batch: Vec<ObjectiveSample> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| ObjectiveSample { input: x, label: i % 2, pair: Some((x, &xs[0])) })
            .collect();
        let a = m.grad_params(&batch, Objective::CrossEntropy).unwrap();
        let b = m.grad_params(&batch, Objective::Regularized { lambda: 0.0 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regularized_objective_gradient_matches_finite_differences() {
        let mut rng = RandomSource::new(13);
        for m in [
            Model::linear_random(3, 2, 2, false, &mut rng).unwrap(),
            Model::mlp_random(3, 4, 2, 2, Activation::Tanh, false, &mut rng).unwrap(),
        ] {
            let xs: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3)).collect();
            let x1s: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v + 0.1 * rng.normal()).collect()).collect();
            let x2s: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v + 0.1 * rng.normal()).collect()).collect();
            let batch: Vec<ObjectiveSample> = (0..4)
                .map(|i| ObjectiveSample { input: &xs[i], label: i % 2, pair: Some((&x1s[i], &x2s[i])) })
                .collect();
            let obj = Objective::Regularized { lambda: 0.7 };
            let eval = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p).unwrap();
                mm.grad_params(&batch, obj).unwrap().0
            };
            let grad = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p).unwrap();
                mm.grad_params(&batch, obj).unwrap().1
            };
            let err = finite_diff_check_floor(eval, grad, &m.params(), 1e-6, 1e-8).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn empty_batch_and_missing_pair() {
        let m = identity_model();
        assert!(matches!(m.grad_params(&[], Objective::CrossEntropy), Err(Error::Empty(_))));
        let x = [0.0, 0.0];
        let s = ObjectiveSample { input: &x, label: 0, pair: None };
        assert!(m.grad_params(&[s], Objective::Variation).is_err());
    }

    #[test]
    fn lipschitz_of_classifier() {
        assert_eq!(identity_model().classifier_lipschitz().unwrap(), 1.0);
        let m = Model::new(
            Extractor::Linear { weight: Matrix::identity(2), bias: vec![0.0; 2] },
            Classifier { weight: Some(Matrix::from_diag(&[2.0, 0.5])), bias: vec![0.0; 2] },
        )
        .unwrap();
        assert_eq!(m.classifier_lipschitz().unwrap(), 2.0);

        let mut rng = RandomSource::new(6);
        let m = Model::linear_random(4, 5, 3, false, &mut rng).unwrap();
        let l = m.classifier_lipschitz().unwrap();
        let a = m.classifier_matrix();
        for _ in 0..1000 {
            let z1 = rng.normal_vec(5);
            let z2 = rng.normal_vec(5);
            let d: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
            assert!(norm2(&a.matvec(&d).unwrap()) <= l * norm2(&d) + 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RandomSource::new(30);
        for m in [
            Model::linear_random(7, 3, 2, false, &mut rng).unwrap(),
            Model::linear_random(7, 3, 3, true, &mut rng).unwrap(),
            Model::mlp_random(7, 5, 3, 2, Activation::Relu, false, &mut rng).unwrap(),
        ] {
            let path = dir.path().join("m.json");
            save_model(&m, &path, 11, 4).unwrap();
            let (back, c) = load_model(&path).unwrap();
            assert_eq!((c.seed, c.epoch), (11, 4));
            let x = rng.normal_vec(7);
            assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
            assert_eq!(m, back);
        }
    }

    #[test]
    fn corrupt_checkpoint_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"kind":"linear","dims":{"input":2}}"#).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Schema { .. })));
        let m = identity_model();
        save_model(&m, &path, 0, 0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"input\": 2", "\"input\": 3");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Schema { .. })));
    }
}
