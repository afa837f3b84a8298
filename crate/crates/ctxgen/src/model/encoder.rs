//! Recognition network: an LSTM over the token rows (content plus EOS,
//! BOS excluded) with affine heads for the posterior mean and log-variance.

use super::{lstm_step, Model, ParamMode};
use autodiff::{Result, Tape, Var};

const LOG_2PI: f64 = 1.8378770664093453;

/// Encode a padded batch. The hidden state is only advanced where the mask
/// is 1, so padding cannot change the result in any bit.
pub fn encode(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    batch: &crate::data::Batch,
) -> Result<(Var, Var)> {
    let b = batch.size();
    let emb = model.pvar(tape, model.enc.emb, mode);
    let steps = batch.lengths.iter().copied().max().unwrap_or(0).saturating_sub(1);
    let mut xs = Vec::with_capacity(steps);
    let mut masks = Vec::with_capacity(steps);
    for t in 1..1 + steps {
        xs.push(tape.row_gather(emb, &batch.column(t))?);
        masks.push(batch.mask_column(t));
    }
    run_encoder(model, tape, mode, b, &xs, Some(&masks))
}

/// Encode soft rows: each step's (B, V) distribution is averaged through the
/// encoder embedding. All steps count as valid.
pub fn encode_soft(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    rows: &[Var],
) -> Result<(Var, Var)> {
    assert!(!rows.is_empty(), "soft encode needs at least one step");
    let b = tape.shape(rows[0])[0];
    let emb = model.pvar(tape, model.enc.emb, mode);
    let mut xs = Vec::with_capacity(rows.len());
    for &r in rows {
        xs.push(tape.matmul(r, emb)?);
    }
    run_encoder(model, tape, mode, b, &xs, None)
}

fn run_encoder(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    b: usize,
    xs: &[Var],
    masks: Option<&[Vec<f64>]>,
) -> Result<(Var, Var)> {
    let hdim = model.cfg.d_hid;
    let lstm = model.lstm_vars(tape, model.enc.lstm, mode);
    let mut h = tape.constant(vec![b, hdim], vec![0.0; b * hdim]);
    let mut cell = tape.constant(vec![b, hdim], vec![0.0; b * hdim]);
    for (t, &x) in xs.iter().enumerate() {
        let (h2, c2) = lstm_step(tape, &lstm, x, h, cell, hdim)?;
        match masks {
            None => {
                h = h2;
                cell = c2;
            }
            Some(ms) => {
                // h <- m*h' + (1-m)*h, applied per row.
                let m = tape.constant(vec![b, 1], ms[t].clone());
                let inv: Vec<f64> = ms[t].iter().map(|&v| 1.0 - v).collect();
                let im = tape.constant(vec![b, 1], inv);
                let keep_h = tape.mul(h, im)?;
                let new_h = tape.mul(h2, m)?;
                h = tape.add(new_h, keep_h)?;
                let keep_c = tape.mul(cell, im)?;
                let new_c = tape.mul(c2, m)?;
                cell = tape.add(new_c, keep_c)?;
            }
        }
    }
    let mu_w = model.pvar(tape, model.enc.mu_w, mode);
    let mu_b = model.pvar(tape, model.enc.mu_b, mode);
    let lv_w = model.pvar(tape, model.enc.lv_w, mode);
    let lv_b = model.pvar(tape, model.enc.lv_b, mode);
    let mu = {
        let p = tape.matmul(h, mu_w)?;
        tape.add(p, mu_b)?
    };
    let lv = {
        let p = tape.matmul(h, lv_w)?;
        tape.add(p, lv_b)?
    };
    Ok((mu, lv))
}

/// z = mu + sigma * eps with eps supplied as a constant, so the sample is
/// differentiable in mu and logvar.
pub fn reparameterize(tape: &mut Tape, mu: Var, lv: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(lv, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Mean over the batch of log N(z; mu, diag(exp(lv))), in nats:
/// -d/2 log 2pi - 1/2 sum_i [ lv_i + (z_i - mu_i)^2 * exp(-lv_i) ].
pub fn gaussian_logdensity(tape: &mut Tape, z: Var, mu: Var, lv: Var) -> Result<Var> {
    let shape = tape.shape(z);
    let (b, d) = (shape[0], shape[1]);
    let diff = tape.sub(z, mu)?;
    let sq = tape.mul(diff, diff)?;
    let neg_lv = tape.scale(lv, -1.0);
    let prec = tape.exp(neg_lv);
    let quad = tape.mul(sq, prec)?;
    let inner = tape.add(quad, lv)?;
    let total = tape.sum(inner);
    let scaled = tape.scale(total, -0.5 / b as f64);
    Ok(tape.add_scalar(scaled, -(d as f64) * 0.5 * LOG_2PI))
}

/// log q_E(z | soft rows): encode the rows, then score the fixed z under the
/// resulting Gaussian. With `mode` frozen this is a pure function of the
/// rows, which is how the generator's latent-consistency loss uses it.
pub fn encoder_logdensity(
    model: &Model,
    tape: &mut Tape,
    mode: ParamMode,
    z: Var,
    rows: &[Var],
) -> Result<Var> {
    let (mu, lv) = encode_soft(model, tape, mode, rows)?;
    gaussian_logdensity(tape, z, mu, lv)
}
