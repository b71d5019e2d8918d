//! Single LSTM cell step composed from primitive tape ops, so its reverse
//! rules come from the tape itself.

use super::{Result, Tape, Var};
use crate::scalar::Scalar;

/// Weights of one LSTM cell over `[D,1]` columns.
///
/// `w_ih` and `w_hh` are `[4D, D]`, `bias` is `[4D, 1]`; gate rows are laid
/// out as input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One recurrence step: `(h, c) -> (h', c')` for input column `x`.
///
/// `h' = o * tanh(c')` keeps every component strictly inside `(-1, 1)`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    state: (Var, Var),
    weights: LstmVars,
) -> Result<(Var, Var)> {
    let (h, c) = state;
    let d = tape.value(h).rows();
    let from_x = tape.matmul(weights.w_ih, x)?;
    let from_h = tape.matmul(weights.w_hh, h)?;
    let pre = tape.add(from_x, from_h)?;
    let gates = tape.add(pre, weights.bias)?;
    let i_gate = tape.slice_rows(gates, 0, d)?;
    let f_gate = tape.slice_rows(gates, d, d)?;
    let g_gate = tape.slice_rows(gates, 2 * d, d)?;
    let o_gate = tape.slice_rows(gates, 3 * d, d)?;
    let i_act = tape.sigmoid(i_gate);
    let f_act = tape.sigmoid(f_gate);
    let g_act = tape.tanh(g_gate);
    let o_act = tape.sigmoid(o_gate);
    let keep = tape.mul(f_act, c)?;
    let write = tape.mul(i_act, g_act)?;
    let c_next = tape.add(keep, write)?;
    let c_squashed = tape.tanh(c_next);
    let h_next = tape.mul(o_act, c_squashed)?;
    Ok((h_next, c_next))
}

/// Decoder variant driven by an all-zero input column: the `w_ih . x` term
/// vanishes, so it is skipped (its gradient is exactly zero).
pub fn lstm_step_zero_input<T: Scalar>(
    tape: &mut Tape<T>,
    state: (Var, Var),
    weights: LstmVars,
) -> Result<(Var, Var)> {
    let (h, c) = state;
    let d = tape.value(h).rows();
    let from_h = tape.matmul(weights.w_hh, h)?;
    let gates = tape.add(from_h, weights.bias)?;
    let i_gate = tape.slice_rows(gates, 0, d)?;
    let f_gate = tape.slice_rows(gates, d, d)?;
    let g_gate = tape.slice_rows(gates, 2 * d, d)?;
    let o_gate = tape.slice_rows(gates, 3 * d, d)?;
    let i_act = tape.sigmoid(i_gate);
    let f_act = tape.sigmoid(f_gate);
    let g_act = tape.tanh(g_gate);
    let o_act = tape.sigmoid(o_gate);
    let keep = tape.mul(f_act, c)?;
    let write = tape.mul(i_act, g_act)?;
    let c_next = tape.add(keep, write)?;
    let c_squashed = tape.tanh(c_next);
    let h_next = tape.mul(o_act, c_squashed)?;
    Ok((h_next, c_next))
}
