//! Multi-head graph attention layer over a directed graph with self-loops.
//!
//! Node `i` attends over `{i} ∪ {j : (j, i) ∈ E}`:
//! `e_ij = leaky_relu(a_dst·W h_i + a_src·W h_j)`, `α = softmax_j(e)`,
//! `out_i = elu(Σ_j α_ij W h_j)`, heads concatenated.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::params::{named, named_mut, uniform, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    /// `K x D_h x D`
    pub w: Array3<f64>,
    /// `K x D_h`
    pub a_src: Array2<f64>,
    /// `K x D_h`
    pub a_dst: Array2<f64>,
    pub negative_slope: f64,
}

impl GatParams {
    pub fn init(rng: &mut impl Rng, input_dim: usize, heads: usize, head_dim: usize, negative_slope: f64) -> Self {
        Self {
            w: uniform(rng, (heads, head_dim, input_dim), input_dim),
            a_src: uniform(rng, (heads, head_dim), head_dim),
            a_dst: uniform(rng, (heads, head_dim), head_dim),
            negative_slope,
        }
    }

    pub fn heads(&self) -> usize {
        self.w.len_of(Axis(0))
    }

    pub fn head_dim(&self) -> usize {
        self.w.len_of(Axis(1))
    }

    pub fn input_dim(&self) -> usize {
        self.w.len_of(Axis(2))
    }

    pub fn output_dim(&self) -> usize {
        self.heads() * self.head_dim()
    }
}

impl ParamSet for GatParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            named("gat.", "w", &self.w),
            named("gat.", "a_src", &self.a_src),
            named("gat.", "a_dst", &self.a_dst),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            named_mut("gat.", "w", &mut self.w),
            named_mut("gat.", "a_src", &mut self.a_src),
            named_mut("gat.", "a_dst", &mut self.a_dst),
        ]
    }
}

/// Sorted attention neighbourhoods: self plus in-neighbours.
pub fn neighbourhoods(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    for &(src, dst) in edges {
        sets[dst].insert(src);
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone)]
pub struct GatCache {
    input: Array2<f64>,
    neigh: Vec<Vec<usize>>,
    /// Per head: projected features `n x D_h`.
    z: Vec<Array2<f64>>,
    /// Per head, per node: pre-leaky scores and attention weights over `neigh[i]`.
    pre: Vec<Vec<Vec<f64>>>,
    alpha: Vec<Vec<Vec<f64>>>,
    /// Per head: aggregated messages before the ELU.
    m: Vec<Array2<f64>>,
}

impl GatCache {
    /// Attention weights of head `k` for node `i`, aligned with `neighbourhood(i)`.
    pub fn attention(&self, k: usize, i: usize) -> &[f64] {
        &self.alpha[k][i]
    }

    pub fn neighbourhood(&self, i: usize) -> &[usize] {
        &self.neigh[i]
    }
}

pub fn gat_forward(
    params: &GatParams,
    h: &Array2<f64>,
    edges: &BTreeSet<(usize, usize)>,
) -> (Array2<f64>, GatCache) {
    let n = h.nrows();
    let (heads, dh) = (params.heads(), params.head_dim());
    let neigh = neighbourhoods(n, edges);
    let mut out = Array2::zeros((n, heads * dh));
    let mut cache = GatCache {
        input: h.clone(),
        neigh,
        z: Vec::with_capacity(heads),
        pre: Vec::with_capacity(heads),
        alpha: Vec::with_capacity(heads),
        m: Vec::with_capacity(heads),
    };
    for k in 0..heads {
        let w = params.w.index_axis(Axis(0), k);
        let z = h.dot(&w.t());
        let src = z.dot(&params.a_src.row(k));
        let dst = z.dot(&params.a_dst.row(k));
        let mut m = Array2::zeros((n, dh));
        let mut pre_k = Vec::with_capacity(n);
        let mut alpha_k = Vec::with_capacity(n);
        for i in 0..n {
            let nb = &cache.neigh[i];
            let pre: Vec<f64> = nb.iter().map(|&j| dst[i] + src[j]).collect();
            let e: Vec<f64> = pre.iter().map(|&p| leaky(p, params.negative_slope)).collect();
            let max = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = e.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let alpha: Vec<f64> = exps.iter().map(|v| v / sum).collect();
            let mut mi = m.row_mut(i);
            for (&j, &a) in nb.iter().zip(&alpha) {
                mi.scaled_add(a, &z.row(j));
            }
            pre_k.push(pre);
            alpha_k.push(alpha);
        }
        out.slice_mut(s![.., k * dh..(k + 1) * dh])
            .assign(&m.mapv(elu));
        cache.z.push(z);
        cache.pre.push(pre_k);
        cache.alpha.push(alpha_k);
        cache.m.push(m);
    }
    (out, cache)
}

pub fn gat_backward(params: &GatParams, cache: &GatCache, d_out: &Array2<f64>) -> (GatParams, Array2<f64>) {
    let n = cache.input.nrows();
    let dh = params.head_dim();
    let mut grads = params.zeros_like();
    let mut d_input = Array2::zeros(cache.input.raw_dim());
    for k in 0..params.heads() {
        let z = &cache.z[k];
        let m = &cache.m[k];
        let a_src = params.a_src.row(k);
        let a_dst = params.a_dst.row(k);
        let dm = &d_out.slice(s![.., k * dh..(k + 1) * dh]) * &m.mapv(elu_grad);
        let mut dz = Array2::<f64>::zeros(z.raw_dim());
        let mut d_src = Array1::<f64>::zeros(n);
        let mut d_dst = Array1::<f64>::zeros(n);
        for i in 0..n {
            let nb = &cache.neigh[i];
            let alpha = &cache.alpha[k][i];
            let pre = &cache.pre[k][i];
            let dmi = dm.row(i);
            let d_alpha: Vec<f64> = nb.iter().map(|&j| dmi.dot(&z.row(j))).collect();
            for (&j, &a) in nb.iter().zip(alpha) {
                dz.row_mut(j).scaled_add(a, &dmi);
            }
            let weighted: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
            for (idx, &j) in nb.iter().enumerate() {
                let de = alpha[idx] * (d_alpha[idx] - weighted);
                let slope = if pre[idx] > 0.0 { 1.0 } else { params.negative_slope };
                let dp = de * slope;
                d_dst[i] += dp;
                d_src[j] += dp;
            }
        }
        grads.a_src.row_mut(k).assign(&z.t().dot(&d_src));
        grads.a_dst.row_mut(k).assign(&z.t().dot(&d_dst));
        for i in 0..n {
            dz.row_mut(i).scaled_add(d_src[i], &a_src);
            dz.row_mut(i).scaled_add(d_dst[i], &a_dst);
        }
        let w = params.w.index_axis(Axis(0), k);
        grads.w.index_axis_mut(Axis(0), k).assign(&dz.t().dot(&cache.input));
        d_input += &dz.dot(&w);
    }
    (grads, d_input)
}
