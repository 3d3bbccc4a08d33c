//! Named parameter tensors shared by every trainable component.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Dimension};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A fixed, ordered collection of named f64 tensors. Gradients use the same
/// type as the parameters they belong to.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += alpha * other`.
    fn axpy(&mut self, alpha: f64, other: &Self) {
        for ((_, mut p), (_, g)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            p.scaled_add(alpha, &g);
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, mut t) in self.tensors_mut() {
            t *= s;
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn to_named(&self) -> Vec<(String, ArrayD<f64>)> {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_owned()))
            .collect()
    }
}

pub(crate) fn named<'a, D: Dimension>(
    prefix: &str,
    name: &str,
    a: &'a ndarray::Array<f64, D>,
) -> (String, ArrayViewD<'a, f64>) {
    (format!("{prefix}{name}"), a.view().into_dyn())
}

pub(crate) fn named_mut<'a, D: Dimension>(
    prefix: &str,
    name: &str,
    a: &'a mut ndarray::Array<f64, D>,
) -> (String, ArrayViewMutD<'a, f64>) {
    (format!("{prefix}{name}"), a.view_mut().into_dyn())
}

/// Uniform in `(-r, r)` with `r = 1/sqrt(fan_in)`.
pub(crate) fn uniform<Sh, D>(rng: &mut impl Rng, shape: Sh, fan_in: usize) -> ndarray::Array<f64, D>
where
    Sh: ndarray::ShapeBuilder<Dim = D>,
    D: Dimension,
{
    let r = 1.0 / (fan_in.max(1) as f64).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || rng.random_range(-r..r))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}
