#![allow(dead_code)]

//! Shared test oracles: central finite differences and the per-kernel
//! gradient suite used by both the gradient tests and the acceptance run.

pub mod oracle;

use std::collections::BTreeSet;

use evmhunt_core::distill::{self, NeuronParams};
use evmhunt_core::params::{Activation, ParamSet};
use evmhunt_core::student::{self, GatParams, IseorParams, LstmParams, MlpParams, StudentConfig};
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// A bare tensor treated as a parameter set, for input gradients.
#[derive(Debug, Clone)]
pub struct Input(pub ArrayD<f64>);

impl Input {
    pub fn from2(a: &Array2<f64>) -> Self {
        Self(a.clone().into_dyn())
    }

    pub fn from1(a: &Array1<f64>) -> Self {
        Self(a.clone().into_dyn())
    }

    pub fn as2(&self) -> Array2<f64> {
        self.0.clone().into_dimensionality().unwrap()
    }

    pub fn as1(&self) -> Array1<f64> {
        self.0.clone().into_dimensionality().unwrap()
    }
}

impl ParamSet for Input {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("input".into(), self.0.view())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![("input".into(), self.0.view_mut())]
    }
}

fn nudge<P: ParamSet>(p: &mut P, t: usize, k: usize, delta: f64) {
    let mut ts = p.tensors_mut();
    let slice = ts[t].1.as_slice_mut().expect("contiguous tensor");
    slice[k] += delta;
}

/// Central differences of `f` with respect to every entry of `p`.
pub fn numeric_grad<P: ParamSet>(p: &P, f: impl Fn(&P) -> f64) -> P {
    let mut work = p.clone();
    let mut grad = p.zeros_like();
    let sizes: Vec<usize> = p.tensors().iter().map(|(_, t)| t.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            nudge(&mut work, t, k, FD_STEP);
            let plus = f(&work);
            nudge(&mut work, t, k, -2.0 * FD_STEP);
            let minus = f(&work);
            nudge(&mut work, t, k, FD_STEP);
            nudge(&mut grad, t, k, (plus - minus) / (2.0 * FD_STEP));
        }
    }
    grad
}

/// `‖a - n‖ / max(‖a‖, ‖n‖, 1e-8)` per named tensor.
pub fn relative_errors<P: ParamSet>(analytic: &P, numeric: &P) -> Vec<(String, f64)> {
    analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, n))| {
            let diff = a.iter().zip(n.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            (name, diff / na.max(nn).max(1e-8))
        })
        .collect()
}

fn check<P: ParamSet>(label: &str, p: &P, analytic: &P, f: impl Fn(&P) -> f64) -> Vec<(String, f64)> {
    relative_errors(analytic, &numeric_grad(p, f))
        .into_iter()
        .map(|(n, e)| (format!("{label}/{n}"), e))
        .collect()
}

pub fn random2(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-scale..scale))
}

pub fn random1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.random_range(-scale..scale))
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for a in 0..n {
        for b in 0..n {
            if rng.random_bool(0.35) {
                edges.insert((a, b));
            }
        }
    }
    edges
}

/// Loss `Σ out ⊙ r` so the upstream gradient is exactly `r`.
fn project2(out: &Array2<f64>, r: &Array2<f64>) -> f64 {
    (out * r).sum()
}

pub fn lstm_errors(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    let (n, d_in, h) = (4, 3, 3);
    let reverse = rng.random_bool(0.5);
    let p = LstmParams::init(rng, d_in, h, "lstm.");
    let x = random2(rng, n, d_in, 1.0);
    let r = random2(rng, n, h, 1.0);
    let (_, cache) = student::lstm_forward(&p, &x, reverse);
    let (g, dx) = student::lstm_backward(&p, &cache, &r);
    let mut out = check("lstm", &p, &g, |q| project2(&student::lstm_forward(q, &x, reverse).0, &r));
    out.extend(check("lstm", &Input::from2(&x), &Input::from2(&dx), |q| {
        project2(&student::lstm_forward(&p, &q.as2(), reverse).0, &r)
    }));
    out
}

pub fn iseor_errors(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    let cfg = StudentConfig {
        lstm_hidden: 3,
        feature_dim: 4,
        heads: 2,
        head_dim: 2,
        negative_slope: 0.2,
        mlp_hidden: 3,
    };
    let p = IseorParams::init(rng, 3, &cfg);
    let x = random2(rng, 4, 3, 1.0);
    let r = random2(rng, 4, 4, 1.0);
    let (_, cache) = student::iseor_forward(&p, &x);
    let (g, dx) = student::iseor_backward(&p, &cache, &r);
    let mut out = check("iseor", &p, &g, |q| project2(&student::iseor_forward(q, &x).0, &r));
    out.extend(check("iseor", &Input::from2(&x), &Input::from2(&dx), |q| {
        project2(&student::iseor_forward(&p, &q.as2()).0, &r)
    }));
    out
}

pub fn gat_errors(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    let (n, d, k, dh) = (5, 4, 2, 3);
    let p = GatParams::init(rng, d, k, dh, 0.2);
    let h = random2(rng, n, d, 1.5);
    let edges = random_edges(rng, n);
    let r = random2(rng, n, k * dh, 1.0);
    let (_, cache) = student::gat_forward(&p, &h, &edges);
    let (g, dh_in) = student::gat_backward(&p, &cache, &r);
    let mut out = check("gat", &p, &g, |q| project2(&student::gat_forward(q, &h, &edges).0, &r));
    out.extend(check("gat", &Input::from2(&h), &Input::from2(&dh_in), |q| {
        project2(&student::gat_forward(&p, &q.as2(), &edges).0, &r)
    }));

    // Through mean pooling.
    let r1 = random1(rng, k * dh, 1.0);
    let (_, pc) = student::gfeor_forward(&p, &h, &edges).unwrap();
    let (g, dh_in) = student::gfeor_backward(&p, &pc, &r1);
    let pooled = |q: &GatParams, x: &Array2<f64>| student::gfeor_forward(q, x, &edges).unwrap().0.dot(&r1);
    out.extend(check("pool", &p, &g, |q| pooled(q, &h)));
    out.extend(check("pool", &Input::from2(&h), &Input::from2(&dh_in), |q| pooled(&p, &q.as2())));
    out
}

pub fn mlp_errors(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    let p = MlpParams::init(rng, 4, 3);
    let x = random1(rng, 4, 1.0);
    let target = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    // Drive the head with the BCE loss so the logit gradient path is covered too.
    let loss = |q: &MlpParams, x: &Array1<f64>| distill::bce_with_logit(student::mlp_forward(q, x).0, target).0;
    let (logit, cache) = student::mlp_forward(&p, &x);
    let (_, d_logit) = distill::bce_with_logit(logit, target);
    let (g, dx) = student::mlp_backward(&p, &cache, d_logit);
    let mut out = check("mlp", &p, &g, |q| loss(q, &x));
    out.extend(check("mlp", &Input::from1(&x), &Input::from1(&dx), |q| loss(&p, &q.as1())));
    out
}

pub fn nd_errors(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Identity] {
        let p = NeuronParams::init(rng, 3, 4, 5, act).unwrap();
        let x = random1(rng, 5, 1.0);
        let r = random1(rng, 4, 1.0);
        let (_, cache) = distill::nd_forward(&p, &x).unwrap();
        let (g, dx) = distill::nd_backward(&p, &cache, &r);
        let f = |q: &NeuronParams, x: &Array1<f64>| distill::nd_forward(q, x).unwrap().0.dot(&r);
        let label = format!("nd-{act:?}");
        out.extend(check(&label, &p, &g, |q| f(q, &x)));
        out.extend(check(&label, &Input::from1(&x), &Input::from1(&dx), |q| f(&p, &q.as1())));
    }
    out
}

pub fn loss_errors(rng: &mut ChaCha8Rng) -> Vec<(String, f64)> {
    let mut out = Vec::new();

    let hp = random2(rng, 4, 3, 1.0);
    let hs = random2(rng, 4, 3, 1.0);
    let (_, d) = student::noise_loss_grad(&hp, &hs).unwrap();
    out.extend(check("noise", &Input::from2(&hs), &Input::from2(&d), |q| {
        student::noise_loss(&hp, &q.as2()).unwrap()
    }));

    let z = rng.random_range(-4.0..4.0);
    let target = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let (_, dz) = distill::bce_with_logit(z, target);
    let zin = Input::from1(&Array1::from_elem(1, z));
    out.extend(check("pre", &zin, &Input::from1(&Array1::from_elem(1, dz)), |q| {
        distill::pre_loss(&[evmhunt_core::params::sigmoid(q.0[[0]])], &[target]).unwrap()
    }));

    let ht = random1(rng, 5, 2.0);
    let hs1 = random1(rng, 5, 2.0);
    let (_, dt, ds) = distill::msl_loss_grad(&ht, &hs1).unwrap();
    out.extend(check("msl/t", &Input::from1(&ht), &Input::from1(&dt), |q| {
        distill::msl_loss(&q.as1(), &hs1).unwrap()
    }));
    out.extend(check("msl/s", &Input::from1(&hs1), &Input::from1(&ds), |q| {
        distill::msl_loss(&ht, &q.as1()).unwrap()
    }));

    let (_, dt, ds) = distill::feature_mse_grad(&ht, &hs1).unwrap();
    out.extend(check("fmse/t", &Input::from1(&ht), &Input::from1(&dt), |q| {
        distill::feature_mse_baseline(&q.as1(), &hs1).unwrap()
    }));
    out.extend(check("fmse/s", &Input::from1(&hs1), &Input::from1(&ds), |q| {
        distill::feature_mse_baseline(&ht, &q.as1()).unwrap()
    }));
    out
}

/// Every kernel's gradient error at one random point.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = lstm_errors(&mut rng);
    out.extend(iseor_errors(&mut rng));
    out.extend(gat_errors(&mut rng));
    out.extend(mlp_errors(&mut rng));
    out.extend(nd_errors(&mut rng));
    out.extend(loss_errors(&mut rng));
    out
}
