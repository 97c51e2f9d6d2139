//! Convolutional LSTM along image rows and columns.
//!
//! A rank-4 feature map `[B,H,W,C]` is expanded to `[B,H,W,C,1]` and read as
//! a sequence over rows: each step sees a `[W,C]` slice with one channel and
//! convolves it with 3x3 same-padded gate kernels. The column pass is the
//! same after swapping the row and column axes.

use crate::error::{Error, Result};
use crate::layers::config::{LSTM_GATES, LSTM_KERNEL};
use crate::layers::params::BoundParams;
use crate::layers::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

/// Bound gate parameters of one LSTM direction.
///
/// `kernel` is `[3,3,2,4]` over the concatenation `[input, hidden]`; gate
/// channels are ordered input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmCell {
    pub kernel: Var,
    pub bias: Var,
}

impl ConvLstmCell {
    pub fn from_params(params: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            kernel: params.get(&format!("{prefix}.kernel"))?,
            bias: params.get(&format!("{prefix}.bias"))?,
        })
    }

    /// Glorot-initialised kernel, zero biases except +1 on the forget gate.
    pub fn init(store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        let k = LSTM_KERNEL;
        store.glorot(
            format!("{prefix}.kernel"),
            &[k, k, 2, LSTM_GATES],
            k * k * 2,
            k * k * LSTM_GATES,
            rng,
        );
        let mut bias = Tensor::zeros(&[LSTM_GATES]);
        bias.data_mut()[1] = 1.0;
        store.insert(format!("{prefix}.bias"), bias);
    }
}

/// Hidden and cell state, each `[B,S,C,1]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl ConvLstmState {
    pub fn zeros(tape: &mut Tape, shape: &[usize]) -> Result<Self> {
        let z = tape.constant(Tensor::zeros(shape))?;
        Ok(Self { hidden: z, cell: z })
    }
}

/// One time step. Returns the output (the new hidden state) and the state.
pub fn conv_lstm_step(
    tape: &mut Tape,
    cell: &ConvLstmCell,
    slice: Var,
    state: ConvLstmState,
) -> Result<(Var, ConvLstmState)> {
    let s = tape.shape(slice).to_vec();
    if s.len() != 4 || s[3] != 1 {
        return Err(Error::invalid("conv_lstm_step", format!("slice must be [B,S,C,1], got {s:?}")));
    }
    for v in [state.hidden, state.cell] {
        if tape.shape(v) != &s[..] {
            return Err(Error::shape("conv_lstm_step", &s, tape.shape(v)));
        }
    }
    let joined = tape.concat_channels(&[slice, state.hidden])?;
    let z = tape.conv2d(joined, cell.kernel, Some(cell.bias), 1)?;
    let zi = tape.slice_channels(z, 0, 1)?;
    let zf = tape.slice_channels(z, 1, 1)?;
    let zg = tape.slice_channels(z, 2, 1)?;
    let zo = tape.slice_channels(z, 3, 1)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let kept = tape.mul(f, state.cell)?;
    let written = tape.mul(i, g)?;
    let c = tape.add(kept, written)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, ConvLstmState { hidden: h, cell: c }))
}

/// Runs `cell` over axis 1 of `[B,T,S,C,1]` from zero state, in the given order.
fn run_direction(tape: &mut Tape, cell: &ConvLstmCell, x5: Var, reverse: bool) -> Result<Vec<Var>> {
    let s = tape.shape(x5).to_vec();
    let steps = s[1];
    let mut state = ConvLstmState::zeros(tape, &[s[0], s[2], s[3], 1])?;
    let mut outs = vec![None; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let slice = tape.select(x5, 1, t)?;
        let (h, next) = conv_lstm_step(tape, cell, slice, state)?;
        outs[t] = Some(h);
        state = next;
    }
    Ok(outs.into_iter().map(|o| o.expect("every step visited")).collect())
}

/// Bidirectional pass over axis 1 of `[B,T,S,C,1]`, returning `[B,T,S,C,2]`
/// with the forward direction in channel 0 and the backward in channel 1.
pub fn bidirectional_conv_lstm(
    tape: &mut Tape,
    x5: Var,
    forward: &ConvLstmCell,
    backward: &ConvLstmCell,
) -> Result<Var> {
    let s = tape.shape(x5).to_vec();
    if s.len() != 5 || s[4] != 1 {
        return Err(Error::invalid(
            "bidirectional_conv_lstm",
            format!("expects [B,T,S,C,1], got {s:?}"),
        ));
    }
    let fwd = run_direction(tape, forward, x5, false)?;
    let bwd = run_direction(tape, backward, x5, true)?;
    let fwd = tape.stack(&fwd, 1)?;
    let bwd = tape.stack(&bwd, 1)?;
    tape.concat_channels(&[fwd, bwd])
}

/// Residual block whose residual path is the sum of a row-wise and a
/// column-wise bidirectional convolutional LSTM.
#[derive(Clone, Debug)]
pub struct LstmResBlock {
    prefix: String,
}

impl LstmResBlock {
    pub fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_string(),
        }
    }

    fn cell_prefix(&self, pass: &str, dir: &str) -> String {
        format!("{}.{pass}.{dir}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for pass in ["row", "col"] {
            for dir in ["fwd", "bwd"] {
                ConvLstmCell::init(store, &self.cell_prefix(pass, dir), rng);
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        ["row", "col"]
            .into_iter()
            .flat_map(|p| ["fwd", "bwd"].into_iter().map(move |d| (p, d)))
            .flat_map(|(p, d)| {
                let c = self.cell_prefix(p, d);
                [format!("{c}.kernel"), format!("{c}.bias")]
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let residual = self.residual(tape, params, x)?;
        tape.add(x, residual)
    }

    /// The residual path alone, `[B,H,W,C]`.
    pub fn residual(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 4 {
            return Err(Error::invalid(
                "lstm_res_block",
                format!("expects rank-4 [B,H,W,C], got {:?}", tape.shape(x)),
            ));
        }
        let cell = |pass: &str, dir: &str| ConvLstmCell::from_params(params, &self.cell_prefix(pass, dir));
        let (row_f, row_b) = (cell("row", "fwd")?, cell("row", "bwd")?);
        let (col_f, col_b) = (cell("col", "fwd")?, cell("col", "bwd")?);

        let x5 = tape.expand_last_dim(x)?;
        tape.trace("lstm.expand", x5);
        let rows = bidirectional_conv_lstm(tape, x5, &row_f, &row_b)?;
        tape.trace("lstm.row_pass", rows);

        let xt = tape.swap_axes(x5, 1, 2)?;
        tape.trace("lstm.transpose", xt);
        let cols = bidirectional_conv_lstm(tape, xt, &col_f, &col_b)?;
        tape.trace("lstm.col_pass", cols);
        let cols = tape.swap_axes(cols, 1, 2)?;
        tape.trace("lstm.transpose_back", cols);

        let both = tape.add(rows, cols)?;
        let r = tape.sum_last_dim(both)?;
        tape.trace("lstm.collapse", r);
        Ok(r)
    }
}
