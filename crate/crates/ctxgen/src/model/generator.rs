//! Tape-side generator passes: teacher forcing for reconstruction and
//! temperature-weighted soft decoding for losses that need a differentiable
//! path through generated text.

use super::{lstm_step, Model, ParamMode};
use crate::data::{Batch, BOS};
use autodiff::{Result, Tape, Var};

/// Initial (h, c) from the latent code: an affine map of [z ; c] split in two.
pub fn generator_init_state(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    z: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let h = model.cfg.d_hid;
    let w = model.pvar(tape, model.gen.init_w, mode);
    let b = model.pvar(tape, model.gen.init_b, mode);
    let zc = tape.concat(&[z, c], 1)?;
    let proj = tape.matmul(zc, w)?;
    let proj = tape.add(proj, b)?;
    let h0 = tape.slice(proj, 1, 0, h)?;
    let c0 = tape.slice(proj, 1, h, h)?;
    Ok((h0, c0))
}

pub struct TeacherForced {
    /// Mean over the batch of each sentence's summed token negative
    /// log-likelihood, in nats. PAD targets are masked out.
    pub nll: Var,
    /// Greedy-argmax hits on unmasked target positions.
    pub correct: usize,
    pub total: usize,
}

/// Reconstruction pass: feed the true previous token, score the next one.
/// Input column t predicts target column t+1; targets at PAD contribute
/// nothing (their masked summand is exactly zero).
pub fn decode_teacher_forced(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    batch: &Batch,
    z: Var,
    c: Var,
) -> Result<TeacherForced> {
    let b = batch.size();
    let hdim = model.cfg.d_hid;
    let emb = model.pvar(tape, model.gen.emb, mode);
    let lstm = model.lstm_vars(tape, model.gen.lstm, mode);
    let out_w = model.pvar(tape, model.gen.out_w, mode);
    let out_b = model.pvar(tape, model.gen.out_b, mode);
    let (mut h, mut cell) = generator_init_state(model, tape, mode, z, c)?;

    let steps = batch.lengths.iter().copied().max().unwrap_or(0).saturating_sub(1);
    let mut masked_terms = Vec::with_capacity(steps);
    let mut correct = 0usize;
    let mut total = 0usize;
    for t in 0..steps {
        let mut x = tape.row_gather(emb, &batch.column(t))?;
        if model.cfg.per_step_code {
            x = tape.concat(&[x, z, c], 1)?;
        }
        let (h2, c2) = lstm_step(tape, &lstm, x, h, cell, hdim)?;
        h = h2;
        cell = c2;
        let logits = {
            let proj = tape.matmul(h, out_w)?;
            tape.add(proj, out_b)?
        };
        let logp = tape.log_softmax(logits);
        let targets = batch.column(t + 1);
        let picked = tape.pick(logp, &targets)?;
        let mask = batch.mask_column(t + 1);
        let mask_var = tape.constant(vec![b, 1], mask.clone());
        masked_terms.push(tape.mul(picked, mask_var)?);

        let vals = tape.value(logits);
        let v = model.cfg.vocab_size;
        for (row, (&tgt, &m)) in targets.iter().zip(mask.iter()).enumerate() {
            if m == 0.0 {
                continue;
            }
            total += 1;
            let row_vals = &vals[row * v..(row + 1) * v];
            let argmax = row_vals
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if argmax == tgt {
                correct += 1;
            }
        }
    }
    let stacked = tape.concat(&masked_terms, 1)?;
    let summed = tape.sum(stacked);
    let nll = tape.scale(summed, -1.0 / b as f64);
    Ok(TeacherForced { nll, correct, total })
}

/// Soft decoding: each step emits softmax(logits / τ) and feeds the
/// probability-weighted embedding average back as the next input. Returns
/// the per-step (B, V) distribution rows.
pub fn decode_soft(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    z: Var,
    c: Var,
    tau: f64,
    steps: usize,
) -> Result<Vec<Var>> {
    assert!(steps > 0, "soft decode needs at least one step");
    let b = tape.shape(z)[0];
    let hdim = model.cfg.d_hid;
    let emb = model.pvar(tape, model.gen.emb, mode);
    let lstm = model.lstm_vars(tape, model.gen.lstm, mode);
    let out_w = model.pvar(tape, model.gen.out_w, mode);
    let out_b = model.pvar(tape, model.gen.out_b, mode);
    let (mut h, mut cell) = generator_init_state(model, tape, mode, z, c)?;

    let mut x = tape.row_gather(emb, &vec![BOS; b])?;
    if model.cfg.per_step_code {
        x = tape.concat(&[x, z, c], 1)?;
    }
    let mut rows = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (h2, c2) = lstm_step(tape, &lstm, x, h, cell, hdim)?;
        h = h2;
        cell = c2;
        let logits = {
            let proj = tape.matmul(h, out_w)?;
            tape.add(proj, out_b)?
        };
        let p = tape.softmax_t(logits, tau)?;
        rows.push(p);
        x = tape.matmul(p, emb)?;
        if model.cfg.per_step_code {
            x = tape.concat(&[x, z, c], 1)?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Batch;
    use crate::model::micro_config;

    fn micro_model() -> Model {
        Model::new(micro_config(vec![("a".into(), 2)]), 7)
    }

    fn zc(model: &Model, tape: &mut Tape, b: usize) -> (Var, Var) {
        let z = tape.constant(vec![b, model.cfg.d_z], vec![0.3; b * model.cfg.d_z]);
        let mut cdat = Vec::new();
        for _ in 0..b {
            cdat.extend(model.one_hot_c(&[1]));
        }
        let c = tape.constant(vec![b, model.cfg.d_c()], cdat);
        (z, c)
    }

    #[test]
    fn soft_rows_are_distributions() {
        let m = micro_model();
        let mut tape = Tape::new();
        let (z, c) = zc(&m, &mut tape, 3);
        let rows = decode_soft(&m, &mut tape, ParamMode::Frozen, z, c, 0.7, 5).unwrap();
        assert_eq!(rows.len(), 5);
        for r in rows {
            assert_eq!(tape.shape(r), &[3, 12]);
            for row in tape.value(r).chunks(12) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn low_temperature_saturates_rows() {
        // Widen the logit gaps so the temperature, not near-ties, decides.
        let mut m = micro_model();
        for v in m.store.get_mut(m.gen.out_w).data_mut() {
            *v *= 100.0;
        }
        let mut tape = Tape::new();
        let (z, c) = zc(&m, &mut tape, 2);
        let rows = decode_soft(&m, &mut tape, ParamMode::Frozen, z, c, 0.001, 4).unwrap();
        for r in rows {
            for row in tape.value(r).chunks(12) {
                let mx = row.iter().cloned().fold(f64::MIN, f64::max);
                assert!(mx > 0.999, "temperature 0.001 should one-hot the row, max {mx}");
            }
        }
    }

    #[test]
    fn teacher_forcing_masks_padding() {
        // Identical sentences padded to different widths must give the same
        // loss: [PAD] targets are masked and [PAD] inputs only affect steps
        // whose targets are all masked.
        let m = micro_model();
        let sents: Vec<Vec<usize>> = vec![vec![4, 5, 6], vec![7, 8, 9, 10, 11]];
        let short = Batch::from_token_rows(&sents[..1], 5).unwrap();
        let both = Batch::from_token_rows(&sents, 5).unwrap();

        let mut t1 = Tape::new();
        let (z1, c1) = zc(&m, &mut t1, 1);
        let r1 = decode_teacher_forced(&m, &mut t1, ParamMode::Frozen, &short, z1, c1).unwrap();
        let solo = t1.scalar_value(r1.nll);

        let mut t2 = Tape::new();
        let (z2, c2) = zc(&m, &mut t2, 2);
        let r2 = decode_teacher_forced(&m, &mut t2, ParamMode::Frozen, &both, z2, c2).unwrap();
        let mut t3 = Tape::new();
        let (z3, c3) = zc(&m, &mut t3, 1);
        let long = Batch::from_token_rows(&sents[1..], 5).unwrap();
        let r3 = decode_teacher_forced(&m, &mut t3, ParamMode::Frozen, &long, z3, c3).unwrap();
        let solo_long = t3.scalar_value(r3.nll);

        let mean = t2.scalar_value(r2.nll);
        assert!((mean - (solo + solo_long) / 2.0).abs() < 1e-12);
        assert!(r2.total >= r2.correct);
        assert_eq!(r2.total, 4 + 6);
    }

    #[test]
    fn teacher_forcing_gradients_reach_generator() {
        let m = micro_model();
        let batch = Batch::from_token_rows(&[vec![4, 5, 6]], 5).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(vec![1, m.cfg.d_z], vec![0.1; m.cfg.d_z]);
        let cdat = m.one_hot_c(&[0]);
        let c = tape.constant(vec![1, m.cfg.d_c()], cdat);
        let r = decode_teacher_forced(&m, &mut tape, ParamMode::Live, &batch, z, c).unwrap();
        tape.backward(r.nll).unwrap();
        let mut store = m.store;
        tape.apply_param_grads(&mut store);
        for id in [m.gen.out_w, m.gen.lstm.w_x, m.gen.init_w, m.gen.emb] {
            let g = store.get(id).grad().expect("gradient present");
            assert!(g.iter().any(|&x| x != 0.0), "{} has all-zero gradient", store.name(id));
        }
    }
}
