//! Tape-free generator rollouts for sampling and greedy decoding. Every
//! arithmetic step mirrors the tape ops (same matmul kernel, same operation
//! order), so greedy logits equal what a tape forward pass would produce.

use super::Model;
use crate::data::{BOS, EOS};
use crate::rng::categorical;
use autodiff::mm;
use rand_chacha::ChaCha8Rng;

pub struct RawState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// First index of the row maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// softmax(x / tau) into a fresh vector, max-subtracted like the tape op.
pub fn softmax_tau(row: &[f64], tau: f64) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&x| ((x - mx) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

pub fn raw_init_state(model: &Model, z: &[f64], c: &[f64]) -> RawState {
    let h = model.cfg.d_hid;
    assert_eq!(z.len(), model.cfg.d_z);
    assert_eq!(c.len(), model.cfg.d_c());
    let mut zc = Vec::with_capacity(z.len() + c.len());
    zc.extend_from_slice(z);
    zc.extend_from_slice(c);
    let w = model.store.get(model.gen.init_w);
    let b = model.store.get(model.gen.init_b);
    let mut proj = vec![0.0; 2 * h];
    mm(&zc, w.data(), &mut proj, 1, zc.len(), 2 * h);
    for (p, bv) in proj.iter_mut().zip(b.data()) {
        *p += bv;
    }
    RawState { h: proj[..h].to_vec(), c: proj[h..].to_vec() }
}

/// Advance the state with input embedding `x` and return the vocabulary
/// logits. Gate math matches the tape step exactly: (x·Wx + h·Wh) + b, gate
/// order [i, f, g, o].
pub fn raw_step_logits(model: &Model, state: &mut RawState, x: &[f64]) -> Vec<f64> {
    let h = model.cfg.d_hid;
    let wx = model.store.get(model.gen.lstm.w_x);
    let wh = model.store.get(model.gen.lstm.w_h);
    let b = model.store.get(model.gen.lstm.b);
    let mut xs = vec![0.0; 4 * h];
    mm(x, wx.data(), &mut xs, 1, x.len(), 4 * h);
    let mut hs = vec![0.0; 4 * h];
    mm(&state.h, wh.data(), &mut hs, 1, h, 4 * h);
    let mut gates = vec![0.0; 4 * h];
    for j in 0..4 * h {
        gates[j] = (xs[j] + hs[j]) + b.data()[j];
    }
    for j in 0..h {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h + j]);
        let g = gates[2 * h + j].tanh();
        let o = sigmoid(gates[3 * h + j]);
        state.c[j] = f * state.c[j] + i * g;
        state.h[j] = o * state.c[j].tanh();
    }
    let ow = model.store.get(model.gen.out_w);
    let ob = model.store.get(model.gen.out_b);
    let v = model.cfg.vocab_size;
    let mut logits = vec![0.0; v];
    mm(&state.h, ow.data(), &mut logits, 1, h, v);
    for (l, bv) in logits.iter_mut().zip(ob.data()) {
        *l += bv;
    }
    logits
}

fn emb_row(model: &Model, tok: usize) -> Vec<f64> {
    let e = model.cfg.d_emb;
    model.store.get(model.gen.emb).data()[tok * e..(tok + 1) * e].to_vec()
}

/// Token embedding, extended with (z, c) when the model feeds its codes at
/// every step. Layout matches the tape-side concat exactly.
fn step_input(model: &Model, tok: usize, z: &[f64], c: &[f64]) -> Vec<f64> {
    let mut x = emb_row(model, tok);
    if model.cfg.per_step_code {
        x.extend_from_slice(z);
        x.extend_from_slice(c);
    }
    x
}

/// Argmax rollout for exactly `steps` steps; no early stop, so each step
/// lines up with the same step of a soft decode. Trim at EOS to get text.
pub fn decode_greedy(model: &Model, z: &[f64], c: &[f64], steps: usize) -> Vec<usize> {
    let mut state = raw_init_state(model, z, c);
    let mut x = step_input(model, BOS, z, c);
    let mut toks = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = raw_step_logits(model, &mut state, &x);
        let tok = argmax(&logits);
        toks.push(tok);
        x = step_input(model, tok, z, c);
    }
    toks
}

/// Ancestral sampling at temperature `tau`. Stops before emitting EOS;
/// the result is content tokens only and may be empty.
pub fn decode_sample(
    model: &Model,
    z: &[f64],
    c: &[f64],
    tau: f64,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut state = raw_init_state(model, z, c);
    let mut x = step_input(model, BOS, z, c);
    let mut toks = Vec::new();
    for _ in 0..max_steps {
        let logits = raw_step_logits(model, &mut state, &x);
        let probs = softmax_tau(&logits, tau);
        let tok = categorical(rng, &probs);
        if tok == EOS {
            break;
        }
        toks.push(tok);
        x = step_input(model, tok, z, c);
    }
    toks
}

/// Everything before the first EOS.
pub fn trim_at_eos(seq: &[usize]) -> Vec<usize> {
    seq.iter().take_while(|&&t| t != EOS).copied().collect()
}
