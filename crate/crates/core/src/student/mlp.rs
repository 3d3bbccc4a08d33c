use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::params::{named, named_mut, sigmoid, uniform, ParamSet};

/// `logit = w2 · tanh(W1 x + b1) + b2`, prediction `sigmoid(logit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    /// Length 1.
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn init(rng: &mut impl Rng, input_dim: usize, hidden: usize) -> Self {
        Self {
            w1: uniform(rng, (hidden, input_dim), input_dim),
            b1: uniform(rng, hidden, input_dim),
            w2: uniform(rng, hidden, hidden),
            b2: uniform(rng, 1, hidden),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input_dim)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: Array1::zeros(1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            named("mlp.", "w1", &self.w1),
            named("mlp.", "b1", &self.b1),
            named("mlp.", "w2", &self.w2),
            named("mlp.", "b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            named_mut("mlp.", "w1", &mut self.w1),
            named_mut("mlp.", "b1", &mut self.b1),
            named_mut("mlp.", "w2", &mut self.w2),
            named_mut("mlp.", "b2", &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array1<f64>,
    hidden: Array1<f64>,
}

pub fn mlp_forward(params: &MlpParams, x: &Array1<f64>) -> (f64, MlpCache) {
    let hidden = (params.w1.dot(x) + &params.b1).mapv(f64::tanh);
    let logit = params.w2.dot(&hidden) + params.b2[0];
    (
        logit,
        MlpCache {
            input: x.clone(),
            hidden,
        },
    )
}

pub fn mlp_predict(params: &MlpParams, x: &Array1<f64>) -> f64 {
    sigmoid(mlp_forward(params, x).0)
}

/// Gradients given `d_logit`; returns parameter and input gradients.
pub fn mlp_backward(params: &MlpParams, cache: &MlpCache, d_logit: f64) -> (MlpParams, Array1<f64>) {
    let d_hidden = &params.w2 * d_logit;
    let d_pre = &d_hidden * &cache.hidden.mapv(|h| 1.0 - h * h);
    let grads = MlpParams {
        w1: d_pre
            .view()
            .insert_axis(Axis(1))
            .dot(&cache.input.view().insert_axis(Axis(0))),
        b1: d_pre.clone(),
        w2: &cache.hidden * d_logit,
        b2: Array1::from_elem(1, d_logit),
    };
    let dx = params.w1.t().dot(&d_pre);
    (grads, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_predict_half() {
        let p = MlpParams::zeros(4, 3);
        let x = Array1::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(mlp_predict(&p, &x), 0.5);
    }

    #[test]
    fn large_logits_saturate() {
        let mut p = MlpParams::zeros(2, 2);
        let x = Array1::zeros(2);
        let mut last = 0.5;
        for b in [1.0, 10.0, 30.0] {
            p.b2[0] = b;
            let y = mlp_predict(&p, &x);
            assert!(y > last && y <= 1.0);
            last = y;
        }
        assert!(1.0 - last < 1e-12);
    }

    #[test]
    fn matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = MlpParams::init(&mut rng, 3, 4);
        let x = Array1::from_vec(vec![0.2, -0.7, 1.1]);
        let mut logit = p.b2[0];
        for h in 0..4 {
            let mut a = p.b1[h];
            for k in 0..3 {
                a += p.w1[[h, k]] * x[k];
            }
            logit += p.w2[h] * a.tanh();
        }
        let want = 1.0 / (1.0 + (-logit).exp());
        assert!((mlp_predict(&p, &x) - want).abs() < 1e-15);
    }
}
