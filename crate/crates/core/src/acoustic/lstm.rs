//! One direction of an LSTM layer with full backpropagation through time.
//!
//! Gate pre-activations are laid out as `[input, forget, cell, output]`
//! blocks of `hidden` rows each.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmDirection {
    /// 4H x input
    pub input_weights: Tensor,
    /// 4H x H
    pub recurrent_weights: Tensor,
    /// 4H x 1
    pub bias: Tensor,
}

impl LstmDirection {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(4 * hidden, 1);
        // forget gate starts open
        bias.data[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        Self {
            input_weights: Tensor::glorot(4 * hidden, input, rng),
            recurrent_weights: Tensor::glorot(4 * hidden, hidden, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weights.cols
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights.cols
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_weights: self.input_weights.zeros_like(),
            recurrent_weights: self.recurrent_weights.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept for the backward pass.
pub(crate) struct LstmTrace {
    /// T x 4H activated gates.
    gates: Tensor,
    cells: Tensor,
    tanh_cells: Tensor,
    /// T x H outputs, indexed by time regardless of direction.
    pub(crate) hidden: Tensor,
}

fn time_order(t_len: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    }
}

pub(crate) fn forward(p: &LstmDirection, x: &Tensor, reverse: bool) -> LstmTrace {
    let t_len = x.rows;
    let h = p.hidden();
    let mut gates = Tensor::zeros(t_len, 4 * h);
    let mut cells = Tensor::zeros(t_len, h);
    let mut tanh_cells = Tensor::zeros(t_len, h);
    let mut hidden = Tensor::zeros(t_len, h);
    let mut prev: Option<usize> = None;
    let mut z = vec![0.0; 4 * h];
    for t in time_order(t_len, reverse) {
        z.copy_from_slice(&p.bias.data);
        p.input_weights.matvec_add(x.row(t), &mut z);
        if let Some(tp) = prev {
            p.recurrent_weights.matvec_add(hidden.row(tp), &mut z);
        }
        let g = gates.row_mut(t);
        for k in 0..h {
            g[k] = sigmoid(z[k]);
            g[h + k] = sigmoid(z[h + k]);
            g[2 * h + k] = z[2 * h + k].tanh();
            g[3 * h + k] = sigmoid(z[3 * h + k]);
        }
        for k in 0..h {
            let c_prev = prev.map_or(0.0, |tp| cells.data[tp * h + k]);
            let g = gates.row(t);
            let c = g[h + k] * c_prev + g[k] * g[2 * h + k];
            cells.data[t * h + k] = c;
            let tc = c.tanh();
            tanh_cells.data[t * h + k] = tc;
            hidden.data[t * h + k] = g[3 * h + k] * tc;
        }
        prev = Some(t);
    }
    LstmTrace {
        gates,
        cells,
        tanh_cells,
        hidden,
    }
}

/// Backpropagates `d_hidden` (T x H); adds input gradients into `d_input`
/// and, when `grads` is given, parameter gradients into it.
pub(crate) fn backward(
    p: &LstmDirection,
    x: &Tensor,
    trace: &LstmTrace,
    d_hidden: &Tensor,
    reverse: bool,
    mut grads: Option<&mut LstmDirection>,
    d_input: &mut Tensor,
) {
    let t_len = x.rows;
    let h = p.hidden();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    // walk time opposite to the forward recursion
    let order: Vec<usize> = time_order(t_len, !reverse).collect();
    for (step, &t) in order.iter().enumerate() {
        let prev = if step + 1 < order.len() { Some(order[step + 1]) } else { None };
        let g = trace.gates.row(t);
        for k in 0..h {
            let dh = d_hidden.data[t * h + k] + dh_next[k];
            let (i, f, c_hat, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tc = trace.tanh_cells.data[t * h + k];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
            let c_prev = prev.map_or(0.0, |tp| trace.cells.data[tp * h + k]);
            dz[k] = dc * c_hat * i * (1.0 - i);
            dz[h + k] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + k] = dc * i * (1.0 - c_hat * c_hat);
            dz[3 * h + k] = dh * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        p.input_weights.matvec_t_add(&dz, d_input.row_mut(t));
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if let Some(tp) = prev {
            p.recurrent_weights.matvec_t_add(&dz, &mut dh_next);
            if let Some(gr) = grads.as_deref_mut() {
                gr.recurrent_weights.outer_add(&dz, trace.hidden.row(tp));
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            gr.input_weights.outer_add(&dz, x.row(t));
            for (b, d) in gr.bias.data.iter_mut().zip(&dz) {
                *b += d;
            }
        }
    }
}
