//! Single-direction LSTM over a sequence of row vectors.
//!
//! Gate layout in the stacked `4H` pre-activation: input, forget, output, cell.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::params::{named, named_mut, sigmoid, uniform, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4H x D_in`
    pub wx: Array2<f64>,
    /// `4H x H`
    pub wh: Array2<f64>,
    /// `4H`
    pub b: Array1<f64>,
    prefix: String,
}

impl LstmParams {
    pub fn init(rng: &mut impl Rng, input_dim: usize, hidden: usize, prefix: &str) -> Self {
        Self {
            wx: uniform(rng, (4 * hidden, input_dim), input_dim),
            wh: uniform(rng, (4 * hidden, hidden), hidden),
            b: uniform(rng, 4 * hidden, hidden),
            prefix: prefix.to_string(),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, prefix: &str) -> Self {
        Self {
            wx: Array2::zeros((4 * hidden, input_dim)),
            wh: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
            prefix: prefix.to_string(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.wx.ncols()
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            named(&self.prefix, "wx", &self.wx),
            named(&self.prefix, "wh", &self.wh),
            named(&self.prefix, "b", &self.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let p = self.prefix.clone();
        vec![
            named_mut(&p, "wx", &mut self.wx),
            named_mut(&p, "wh", &mut self.wh),
            named_mut(&p, "b", &mut self.b),
        ]
    }
}

/// Per-step activations kept for the backward pass, in processing order.
#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Array2<f64>,
    /// Row `t` holds the activated gates of step `t`.
    gates: Array2<f64>,
    cells: Array2<f64>,
    hiddens: Array2<f64>,
    reverse: bool,
}

/// Runs the cell over the rows of `x` (last to first when `reverse`).
/// Returns hidden states aligned with the rows of `x`.
pub fn lstm_forward(params: &LstmParams, x: &Array2<f64>, reverse: bool) -> (Array2<f64>, LstmCache) {
    let n = x.nrows();
    let h_dim = params.hidden();
    let mut out = Array2::zeros((n, h_dim));
    // Input contributions for every step at once.
    let xw = x.dot(&params.wx.t()) + &params.b;
    let mut gates = Array2::zeros((n, 4 * h_dim));
    let mut cells = Array2::zeros((n, h_dim));
    let mut hiddens = Array2::zeros((n, h_dim));
    let mut h = Array1::zeros(h_dim);
    let mut c = Array1::zeros(h_dim);
    for step in 0..n {
        let row = if reverse { n - 1 - step } else { step };
        let mut z = params.wh.dot(&h) + xw.row(row);
        activate_gates(&mut z, h_dim);
        let (i, f, o, g) = split4(z.view(), h_dim);
        c = &f * &c + &i * &g;
        h = &o * &c.mapv(f64::tanh);
        out.row_mut(row).assign(&h);
        gates.row_mut(step).assign(&z);
        cells.row_mut(step).assign(&c);
        hiddens.row_mut(step).assign(&h);
    }
    let cache = LstmCache {
        input: x.clone(),
        gates,
        cells,
        hiddens,
        reverse,
    };
    (out, cache)
}

fn activate_gates(z: &mut Array1<f64>, h: usize) {
    z.slice_mut(s![..3 * h]).mapv_inplace(sigmoid);
    z.slice_mut(s![3 * h..]).mapv_inplace(f64::tanh);
}

fn split4(
    z: ArrayView1<'_, f64>,
    h: usize,
) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>, ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
    (
        z.slice_move(s![..h]),
        z.slice_move(s![h..2 * h]),
        z.slice_move(s![2 * h..3 * h]),
        z.slice_move(s![3 * h..]),
    )
}

/// Backpropagation through time. `d_out` is aligned with the rows of the
/// forward input; returns parameter gradients and the input gradient.
pub fn lstm_backward(
    params: &LstmParams,
    cache: &LstmCache,
    d_out: &Array2<f64>,
) -> (LstmParams, Array2<f64>) {
    let n = cache.gates.nrows();
    let h_dim = params.hidden();
    // Pre-activation gradients, rows aligned with the input rows.
    let mut dz_all = Array2::<f64>::zeros((n, 4 * h_dim));
    // Previous hidden state of each input row's step.
    let mut h_prev_all = Array2::<f64>::zeros((n, h_dim));
    let mut dh_next = Array1::<f64>::zeros(h_dim);
    let mut dc_next = Array1::<f64>::zeros(h_dim);
    let zeros = Array1::<f64>::zeros(h_dim);
    let wh_t = params.wh.t().as_standard_layout().into_owned();
    for step in (0..n).rev() {
        let row = if cache.reverse { n - 1 - step } else { step };
        let (i, f, o, g) = split4(cache.gates.row(step), h_dim);
        let c = cache.cells.row(step);
        let c_prev = if step > 0 { cache.cells.row(step - 1) } else { zeros.view() };
        if step > 0 {
            h_prev_all.row_mut(row).assign(&cache.hiddens.row(step - 1));
        }
        let tanh_c = c.mapv(f64::tanh);

        let dh = &d_out.row(row) + &dh_next;
        let d_o = &dh * &tanh_c;
        let dc = &dh * &o * &tanh_c.mapv(|t| 1.0 - t * t) + &dc_next;
        let d_i = &dc * &g;
        let d_g = &dc * &i;
        let d_f = &dc * &c_prev;
        dc_next = &dc * &f;

        let mut dz = dz_all.row_mut(row);
        dz.slice_mut(s![..h_dim])
            .assign(&(&d_i * &i.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![h_dim..2 * h_dim])
            .assign(&(&d_f * &f.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![2 * h_dim..3 * h_dim])
            .assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![3 * h_dim..])
            .assign(&(&d_g * &g.mapv(|v| 1.0 - v * v)));
        dh_next = wh_t.dot(&dz);
    }
    let grads = LstmParams {
        wx: dz_all.t().dot(&cache.input),
        wh: dz_all.t().dot(&h_prev_all),
        b: dz_all.sum_axis(Axis(0)),
        prefix: params.prefix.clone(),
    };
    let dx = dz_all.dot(&params.wx);
    (grads, dx)
}
