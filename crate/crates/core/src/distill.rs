//! Neuron distillation of teacher features and the multi-knowledge loss.
//!
//! `h_T = (1/N) Σ_j σ(W_j h_sc + b_j)` maps a source-level teacher vector into
//! the student's graph-feature space. The student is trained on
//! `α · CE(softmax h_T, softmax h_S) + β · BCE(y, Y)`.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{named, named_mut, sigmoid, uniform, Activation, ParamSet};
use crate::{Error, Result};

pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronParams {
    /// `N x D_g x D_s`
    pub w: Array3<f64>,
    /// `N x D_g`
    pub b: Array2<f64>,
    pub activation: Activation,
}

impl NeuronParams {
    pub fn init(
        rng: &mut impl Rng,
        neurons: usize,
        graph_dim: usize,
        source_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if neurons == 0 {
            return Err(Error::Config("at least one distillation neuron is required".into()));
        }
        Ok(Self {
            w: uniform(rng, (neurons, graph_dim, source_dim), source_dim),
            b: uniform(rng, (neurons, graph_dim), source_dim),
            activation,
        })
    }

    pub fn neurons(&self) -> usize {
        self.w.len_of(Axis(0))
    }

    pub fn graph_dim(&self) -> usize {
        self.w.len_of(Axis(1))
    }

    pub fn source_dim(&self) -> usize {
        self.w.len_of(Axis(2))
    }
}

impl ParamSet for NeuronParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![named("nd.", "w", &self.w), named("nd.", "b", &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![named_mut("nd.", "w", &mut self.w), named_mut("nd.", "b", &mut self.b)]
    }
}

#[derive(Debug, Clone)]
pub struct NdCache {
    input: Array1<f64>,
    /// Per-neuron activation outputs, `N x D_g`.
    outputs: Array2<f64>,
}

pub fn nd_forward(params: &NeuronParams, h_sc: &Array1<f64>) -> Result<(Array1<f64>, NdCache)> {
    if h_sc.len() != params.source_dim() {
        return Err(Error::Shape(format!(
            "teacher feature has dim {}, neurons expect {}",
            h_sc.len(),
            params.source_dim()
        )));
    }
    let n = params.neurons();
    let mut outputs = Array2::zeros((n, params.graph_dim()));
    for j in 0..n {
        let pre = params.w.index_axis(Axis(0), j).dot(h_sc) + params.b.row(j);
        outputs
            .row_mut(j)
            .assign(&pre.mapv(|v| params.activation.apply(v)));
    }
    let mean = outputs.mean_axis(Axis(0)).expect("N >= 1");
    Ok((
        mean,
        NdCache {
            input: h_sc.clone(),
            outputs,
        },
    ))
}

/// Parameter and input gradients given `d_ht`.
pub fn nd_backward(params: &NeuronParams, cache: &NdCache, d_ht: &Array1<f64>) -> (NeuronParams, Array1<f64>) {
    let n = params.neurons();
    let mut grads = params.zeros_like();
    let mut d_in = Array1::zeros(cache.input.len());
    for j in 0..n {
        let act = params.activation;
        let d_pre = d_ht / n as f64 * &cache.outputs.row(j).mapv(|y| act.grad_from_output(y));
        grads
            .w
            .index_axis_mut(Axis(0), j)
            .assign(&d_pre.view().insert_axis(Axis(1)).dot(&cache.input.view().insert_axis(Axis(0))));
        grads.b.row_mut(j).assign(&d_pre);
        d_in += &params.w.index_axis(Axis(0), j).t().dot(&d_pre);
    }
    (grads, d_in)
}

/// Binary cross-entropy of one prediction, clamped to `[ε, 1-ε]`.
pub fn bce(y: f64, target: f64) -> f64 {
    let y = y.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * y.ln() + (1.0 - target) * (1.0 - y).ln())
}

/// Mean BCE over a batch.
pub fn pre_loss(y: &[f64], targets: &[f64]) -> Result<f64> {
    if y.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            y.len(),
            targets.len()
        )));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    Ok(y.iter().zip(targets).map(|(&p, &t)| bce(p, t)).sum::<f64>() / y.len() as f64)
}

/// BCE computed from the logit, with its gradient `σ(z) - Y`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let y = sigmoid(logit);
    (bce(y, target), y - target)
}

pub fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn log_softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.mapv(|v| v - lse)
}

/// Entropy of `softmax(h)`.
pub fn softmax_entropy(h: &Array1<f64>) -> f64 {
    -(softmax(h) * log_softmax(h)).sum()
}

fn check_dims(a: &Array1<f64>, b: &Array1<f64>, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: dim {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `-Σ softmax(h_t) · log softmax(h_s)`.
pub fn msl_loss(h_t: &Array1<f64>, h_s: &Array1<f64>) -> Result<f64> {
    check_dims(h_t, h_s, "semantic loss")?;
    Ok(-(softmax(h_t) * log_softmax(h_s)).sum())
}

/// Loss plus gradients with respect to `h_t` and `h_s`.
pub fn msl_loss_grad(h_t: &Array1<f64>, h_s: &Array1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    check_dims(h_t, h_s, "semantic loss")?;
    let p_t = softmax(h_t);
    let p_s = softmax(h_s);
    let g = -log_softmax(h_s);
    let loss = p_t.dot(&g);
    let d_t = &p_t * &(&g - loss);
    let d_s = &p_s - &p_t;
    Ok((loss, d_t, d_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 1.0 }
    }
}

impl LossConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = Self { alpha, beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite()) || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }

    /// `α / β`; infinite when β is zero.
    pub fn ratio(&self) -> f64 {
        self.alpha / self.beta
    }
}

pub fn mk_loss(l_msl: f64, l_pre: f64, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.alpha * l_msl + cfg.beta * l_pre)
}

/// Plain mean squared error between raw feature vectors.
pub fn feature_mse_baseline(h_t: &Array1<f64>, h_s: &Array1<f64>) -> Result<f64> {
    Ok(feature_mse_grad(h_t, h_s)?.0)
}

/// Loss plus gradients with respect to `h_t` and `h_s`.
pub fn feature_mse_grad(h_t: &Array1<f64>, h_s: &Array1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    check_dims(h_t, h_s, "feature MSE")?;
    let d = h_t.len();
    if d == 0 {
        return Ok((0.0, Array1::zeros(0), Array1::zeros(0)));
    }
    let diff = h_s - h_t;
    let loss = diff.dot(&diff) / d as f64;
    let d_s = &diff * (2.0 / d as f64);
    Ok((loss, -&d_s, d_s))
}
