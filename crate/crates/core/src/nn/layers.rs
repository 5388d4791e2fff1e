use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::store::{glorot_init, ParamId, ParameterStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// LSTM weights with gate blocks stacked in the order (i, f, g, o).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmCellParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCellParams {
    /// Registers `{prefix}/w_ih`, `{prefix}/w_hh` and `{prefix}/bias`.
    /// Weights are Glorot-uniform, biases zero.
    pub fn register(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Domain(format!("{prefix}: LSTM sizes must be positive")));
        }
        let w_ih = store.add(format!("{prefix}/w_ih"), glorot_init(4 * hidden, input, derive_seed(seed, &format!("{prefix}/w_ih")))?)?;
        let w_hh = store.add(format!("{prefix}/w_hh"), glorot_init(4 * hidden, hidden, derive_seed(seed, &format!("{prefix}/w_hh")))?)?;
        let bias = store.add(format!("{prefix}/bias"), Mat::zeros(1, 4 * hidden))?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn n_params(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl DenseParams {
    /// Registers `{prefix}/kernel` (output × input) and `{prefix}/bias`.
    pub fn register(store: &mut ParameterStore, prefix: &str, input: usize, output: usize, seed: u64) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::Domain(format!("{prefix}: dense sizes must be positive")));
        }
        let kernel = store.add(format!("{prefix}/kernel"), glorot_init(output, input, derive_seed(seed, &format!("{prefix}/kernel")))?)?;
        let bias = store.add(format!("{prefix}/bias"), Mat::zeros(1, output))?;
        Ok(Self {
            kernel,
            bias,
            input,
            output,
        })
    }

    pub fn n_params(&self) -> usize {
        self.output * (self.input + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

/// Names covered by the dense/recurrent regularization: dense kernels and
/// biases plus LSTM recurrent weights.
pub fn regularized(name: &str) -> bool {
    name.ends_with("/kernel") || name.ends_with("/w_hh") || (name.ends_with("/bias") && !is_lstm_bias(name))
}

fn is_lstm_bias(name: &str) -> bool {
    name.contains("lstm")
}

/// One LSTM step on a batch of rows: x (n×input), h_prev and c_prev (n×hidden).
/// c = f⊙c_prev + i⊙g, h = o⊙tanh(c).
pub fn lstm_cell_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    params: &LstmCellParams,
) -> Result<(Var, Var)> {
    let hd = params.hidden;
    if tape.value(h_prev).cols != hd || tape.value(c_prev).cols != hd {
        return Err(Error::dim("LSTM state width", hd, tape.value(h_prev).cols.max(tape.value(c_prev).cols)));
    }
    if tape.value(x).cols != params.input {
        return Err(Error::dim("LSTM input width", params.input, tape.value(x).cols));
    }
    let w_ih = tape.param(store, params.w_ih);
    let w_hh = tape.param(store, params.w_hh);
    let b = tape.param(store, params.bias);
    let from_x = tape.linear(x, w_ih, Some(b))?;
    let from_h = tape.linear(h_prev, w_hh, None)?;
    let z = tape.add(from_x, from_h)?;
    let zi = tape.slice_cols(z, 0, hd)?;
    let zf = tape.slice_cols(z, hd, hd)?;
    let zg = tape.slice_cols(z, 2 * hd, hd)?;
    let zo = tape.slice_cols(z, 3 * hd, hd)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// y = x·Wᵀ + b followed by the activation.
pub fn dense_forward(tape: &mut Tape, store: &ParameterStore, x: Var, params: &DenseParams, activation: Activation) -> Result<Var> {
    if tape.value(x).cols != params.input {
        return Err(Error::dim("dense input width", params.input, tape.value(x).cols));
    }
    let w = tape.param(store, params.kernel);
    let b = tape.param(store, params.bias);
    let y = tape.linear(x, w, Some(b))?;
    Ok(match activation {
        Activation::Linear => y,
        Activation::Relu => tape.relu(y),
    })
}
