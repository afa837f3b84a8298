//! Single LSTM step on the tape, shared by generator and encoder.

use autodiff::{Result, Tape, Var};

/// Tape handles for one LSTM's parameters.
#[derive(Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

/// One step. `x` is (B, d_in), `h` and `c` are (B, H). Gates live in
/// [i, f, g, o] order along the 4H axis. Returns the next (h, c).
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmVars,
    x: Var,
    h: Var,
    c: Var,
    d_hid: usize,
) -> Result<(Var, Var)> {
    let xs = tape.matmul(x, p.w_x)?;
    let hs = tape.matmul(h, p.w_h)?;
    let pre = tape.add(xs, hs)?;
    let gates = tape.add(pre, p.b)?;
    let i = {
        let s = tape.slice(gates, 1, 0, d_hid)?;
        tape.sigmoid(s)
    };
    let f = {
        let s = tape.slice(gates, 1, d_hid, d_hid)?;
        tape.sigmoid(s)
    };
    let g = {
        let s = tape.slice(gates, 1, 2 * d_hid, d_hid)?;
        tape.tanh(s)
    };
    let o = {
        let s = tape.slice(gates, 1, 3 * d_hid, d_hid)?;
        tape.sigmoid(s)
    };
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}
