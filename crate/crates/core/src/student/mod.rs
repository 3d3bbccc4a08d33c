//! The two-stage student network.
//!
//! Stage A (`Iseor`): a bidirectional LSTM runs over the block embeddings in
//! block-index order and is projected to per-node sequence features.
//! Stage B (`Gfeor`): one multi-head GAT layer, mean pooling and an MLP head.
//!
//! Every kernel has an explicit backward pass; there is no autodiff tape.

pub mod gat;
pub mod lstm;
pub mod mlp;

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{named, named_mut, uniform, ParamSet};
use crate::{Error, Result};

pub use gat::{gat_backward, gat_forward, GatCache, GatParams};
pub use lstm::{lstm_backward, lstm_forward, LstmCache, LstmParams};
pub use mlp::{mlp_backward, mlp_forward, mlp_predict, MlpCache, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub lstm_hidden: usize,
    /// Width of the per-node sequence features; must match the score features.
    pub feature_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub negative_slope: f64,
    pub mlp_hidden: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 64,
            feature_dim: 64,
            heads: 4,
            head_dim: 16,
            negative_slope: 0.2,
            mlp_hidden: 32,
        }
    }
}

impl StudentConfig {
    pub fn graph_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lstm_hidden", self.lstm_hidden),
            ("feature_dim", self.feature_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("student.{name} must be positive")));
            }
        }
        if !(self.negative_slope.is_finite() && self.negative_slope >= 0.0) {
            return Err(Error::Config("student.negative_slope must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IseorParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    /// `D x 2H`
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
}

impl IseorParams {
    pub fn init(rng: &mut impl Rng, input_dim: usize, cfg: &StudentConfig) -> Self {
        let h = cfg.lstm_hidden;
        Self {
            fwd: LstmParams::init(rng, input_dim, h, "iseor.fwd."),
            bwd: LstmParams::init(rng, input_dim, h, "iseor.bwd."),
            proj_w: uniform(rng, (cfg.feature_dim, 2 * h), 2 * h),
            proj_b: uniform(rng, cfg.feature_dim, 2 * h),
        }
    }

    pub fn zeros(input_dim: usize, cfg: &StudentConfig) -> Self {
        let h = cfg.lstm_hidden;
        Self {
            fwd: LstmParams::zeros(input_dim, h, "iseor.fwd."),
            bwd: LstmParams::zeros(input_dim, h, "iseor.bwd."),
            proj_w: Array2::zeros((cfg.feature_dim, 2 * h)),
            proj_b: Array1::zeros(cfg.feature_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.proj_w.nrows()
    }
}

impl ParamSet for IseorParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut v = self.fwd.tensors();
        v.extend(self.bwd.tensors());
        v.push(named("iseor.", "proj_w", &self.proj_w));
        v.push(named("iseor.", "proj_b", &self.proj_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut v = self.fwd.tensors_mut();
        v.extend(self.bwd.tensors_mut());
        v.push(named_mut("iseor.", "proj_w", &mut self.proj_w));
        v.push(named_mut("iseor.", "proj_b", &mut self.proj_b));
        v
    }
}

#[derive(Debug, Clone)]
pub struct IseorCache {
    fwd: LstmCache,
    bwd: LstmCache,
    concat: Array2<f64>,
}

/// `n x D_e` block embeddings to `n x D` sequence features.
pub fn iseor_forward(params: &IseorParams, emb: &Array2<f64>) -> (Array2<f64>, IseorCache) {
    let (hf, fwd) = lstm_forward(&params.fwd, emb, false);
    let (hb, bwd) = lstm_forward(&params.bwd, emb, true);
    let concat = concatenate![Axis(1), hf, hb];
    let out = concat.dot(&params.proj_w.t()) + &params.proj_b;
    (out, IseorCache { fwd, bwd, concat })
}

pub fn iseor_backward(
    params: &IseorParams,
    cache: &IseorCache,
    d_out: &Array2<f64>,
) -> (IseorParams, Array2<f64>) {
    let h = params.fwd.hidden();
    let d_concat = d_out.dot(&params.proj_w);
    let (gf, dxf) = lstm_backward(&params.fwd, &cache.fwd, &d_concat.slice(s![.., ..h]).to_owned());
    let (gb, dxb) = lstm_backward(&params.bwd, &cache.bwd, &d_concat.slice(s![.., h..]).to_owned());
    let grads = IseorParams {
        fwd: gf,
        bwd: gb,
        proj_w: d_out.t().dot(&cache.concat),
        proj_b: d_out.sum_axis(Axis(0)),
    };
    (grads, dxf + dxb)
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `(1/n) Σ_i ‖h_p[i] - h_s[i]‖²`. Zero for an empty graph.
pub fn noise_loss(h_p: &Array2<f64>, h_s: &Array2<f64>) -> Result<f64> {
    Ok(noise_loss_grad(h_p, h_s)?.0)
}

/// Loss and its gradient with respect to `h_s`.
pub fn noise_loss_grad(h_p: &Array2<f64>, h_s: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    check_same_shape(h_p, h_s, "noise loss")?;
    let n = h_s.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros(h_s.raw_dim())));
    }
    let diff = h_s - h_p;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    Ok((loss, diff * (2.0 / n as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GfeorParams {
    pub gat: GatParams,
    pub mlp: MlpParams,
}

impl GfeorParams {
    pub fn init(rng: &mut impl Rng, cfg: &StudentConfig) -> Self {
        let gat = GatParams::init(rng, cfg.feature_dim, cfg.heads, cfg.head_dim, cfg.negative_slope);
        let mlp = MlpParams::init(rng, cfg.graph_dim(), cfg.mlp_hidden);
        Self { gat, mlp }
    }

    pub fn graph_dim(&self) -> usize {
        self.gat.output_dim()
    }
}

impl ParamSet for GfeorParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut v = self.gat.tensors();
        v.extend(self.mlp.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut v = self.gat.tensors_mut();
        v.extend(self.mlp.tensors_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct GfeorCache {
    pub gat: GatCache,
    nodes: usize,
}

/// GAT layer then mean pooling over nodes: the graph feature `h_g`.
pub fn gfeor_forward(
    params: &GatParams,
    h_s: &Array2<f64>,
    edges: &BTreeSet<(usize, usize)>,
) -> Result<(Array1<f64>, GfeorCache)> {
    let n = h_s.nrows();
    if n == 0 {
        return Err(Error::EmptyGraph("graph has no nodes to pool".into()));
    }
    if h_s.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "sequence features have width {}, GAT expects {}",
            h_s.ncols(),
            params.input_dim()
        )));
    }
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(Error::Shape(format!("edge ({a}, {b}) out of range for {n} nodes")));
    }
    let (out, gat) = gat_forward(params, h_s, edges);
    let pooled = out.mean_axis(Axis(0)).expect("n > 0");
    Ok((pooled, GfeorCache { gat, nodes: n }))
}

/// Gradient of the pooled graph feature back through the GAT layer.
pub fn gfeor_backward(params: &GatParams, cache: &GfeorCache, d_hg: &Array1<f64>) -> (GatParams, Array2<f64>) {
    let n = cache.nodes;
    let d_rows = (d_hg / n as f64)
        .insert_axis(Axis(0))
        .broadcast((n, d_hg.len()))
        .expect("broadcast rows")
        .to_owned();
    gat_backward(params, &cache.gat, &d_rows)
}
