//! Convolutional attribute discriminator. Windows of consecutive token
//! embeddings go through one filter bank each, tanh, max-over-positions,
//! and a shared affine head over the concatenated pooled features.

use super::{Model, ParamMode};
use crate::data::{Batch, PAD};
use autodiff::{Result, Tape, Var};

/// Positions a window of width `w` may occupy over `len` valid rows. Inputs
/// shorter than the window are padded up to it, admitting position 0 only.
pub fn n_valid_positions(window: usize, len: usize) -> usize {
    len.max(window) - window + 1
}

const INVALID: f64 = -1e30;

/// What the discriminator reads: real token rows (content plus EOS, BOS
/// excluded) or per-step soft distributions over the vocabulary.
pub enum DiscInput<'a> {
    Tokens(&'a Batch),
    Soft(&'a [Var]),
}

/// Class logits (B, K) for one attribute. The PAD embedding row is pinned to
/// zero and invalid window positions are pushed below any reachable value
/// before pooling, so padding cannot influence the output.
pub fn discriminate(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    attr: usize,
    input: &DiscInput,
) -> Result<Var> {
    let p = &model.discs[attr];
    let emb = model.pvar(tape, p.emb, mode);
    let w_max = model.cfg.disc_windows.iter().copied().max().unwrap();

    // Embedded steps plus each sentence's count of valid rows.
    let (mut steps, valid): (Vec<Var>, Vec<usize>) = match input {
        DiscInput::Tokens(batch) => {
            let t_in = batch.lengths.iter().copied().max().unwrap_or(0).saturating_sub(1);
            let mut xs = Vec::with_capacity(t_in);
            for t in 1..1 + t_in {
                xs.push(tape.row_gather(emb, &batch.column(t))?);
            }
            (xs, batch.lengths.iter().map(|&l| l - 1).collect())
        }
        DiscInput::Soft(rows) => {
            assert!(!rows.is_empty(), "soft input needs at least one row");
            let b = tape.shape(rows[0])[0];
            let mut xs = Vec::with_capacity(rows.len());
            for &r in *rows {
                xs.push(tape.matmul(r, emb)?);
            }
            (xs, vec![rows.len(); b])
        }
    };
    let b = valid.len();
    while steps.len() < w_max {
        let mut pad_row = vec![0.0; model.cfg.vocab_size];
        pad_row[PAD] = 1.0;
        let onehot = tape.constant(vec![1, model.cfg.vocab_size], pad_row);
        let stacked: Vec<Var> = (0..b).map(|_| onehot).collect();
        let full = tape.concat(&stacked, 0)?;
        steps.push(tape.matmul(full, emb)?);
    }

    let mut pooled = Vec::with_capacity(p.convs.len());
    for conv in &p.convs {
        let w = conv.window;
        let cw = model.pvar(tape, conv.w, mode);
        let cb = model.pvar(tape, conv.b, mode);
        let positions = steps.len() - w + 1;
        let mut acts = Vec::with_capacity(positions);
        for pos in 0..positions {
            let window = tape.concat(&steps[pos..pos + w], 1)?;
            let pre = {
                let x = tape.matmul(window, cw)?;
                tape.add(x, cb)?
            };
            let act = tape.tanh(pre);
            let gate: Vec<f64> = valid
                .iter()
                .map(|&l| if pos < n_valid_positions(w, l) { 0.0 } else { INVALID })
                .collect();
            let gate_var = tape.constant(vec![b, 1], gate);
            acts.push(tape.add(act, gate_var)?);
        }
        pooled.push(tape.max_n(&acts)?);
    }

    let feats = tape.concat(&pooled, 1)?;
    let head_w = model.pvar(tape, p.head_w, mode);
    let head_b = model.pvar(tape, p.head_b, mode);
    let proj = tape.matmul(feats, head_w)?;
    tape.add(proj, head_b)
}

/// softmax of the class logits.
pub fn discriminate_probs(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    attr: usize,
    input: &DiscInput,
) -> Result<Var> {
    let logits = discriminate(model, tape, mode, attr, input)?;
    tape.softmax_t(logits, 1.0)
}
