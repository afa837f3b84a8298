//! Training objectives: the VAE bound, the attribute and latent consistency
//! losses on soft-decoded samples, the discriminator losses, and the two
//! annealing schedules. All losses are batch means of per-sentence sums,
//! in nats.

use crate::data::Batch;
use crate::model::{
    decode_soft, decode_teacher_forced, discriminate, encode, encoder_logdensity, reparameterize,
    DiscInput, Model, ParamMode,
};
use crate::{Error, Result};
use autodiff::{Tape, Var};

/// Balancing weights. A weight of exactly zero elides the matching loss
/// term from the graph entirely, so ablations are bit-identical to models
/// that never had the term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_z: f64,
    pub lambda_u: f64,
    pub beta: f64,
    /// Keep the printed sign of the sleep-phase entropy term (rewarding
    /// entropy) instead of the minimum-entropy reading. Off by default.
    pub eq10_literal_sign: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 0.1,
            lambda_z: 0.1,
            lambda_u: 0.1,
            beta: 1.0,
            eq10_literal_sign: false,
        }
    }
}

/// Where the code c attached to an unlabeled wake-phase sentence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeSource {
    Prior,
    Discriminator,
}

/// KL(N(mu, diag e^lv) || N(0, I)) = -1/2 sum(1 + lv - mu^2 - e^lv),
/// averaged over the batch.
pub fn kl_gaussian(tape: &mut Tape, mu: Var, lv: Var) -> Result<Var> {
    let b = tape.shape(mu)[0];
    let one_lv = tape.add_scalar(lv, 1.0);
    let musq = tape.mul(mu, mu)?;
    let ex = tape.exp(lv);
    let t = tape.sub(one_lv, musq)?;
    let t = tape.sub(t, ex)?;
    let s = tape.sum(t);
    Ok(tape.scale(s, -0.5 / b as f64))
}

pub struct VaeLoss {
    /// recon + kl_weight * kl.
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    /// Greedy token hits under teacher forcing, for progress metrics.
    pub correct: usize,
    pub tokens: usize,
}

/// Reconstruction plus weighted KL. The code rows `c_rows` (B x d_c) and the
/// noise `eps` (B x d_z) enter as constants: the caller fixes both, which
/// keeps every stochastic choice outside the graph.
#[allow(clippy::too_many_arguments)]
pub fn loss_vae(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    c_rows: &[f64],
    eps: &[f64],
    kl_weight: f64,
    enc_mode: ParamMode,
    gen_mode: ParamMode,
) -> Result<VaeLoss> {
    if !(0.0..=1.0).contains(&kl_weight) {
        return Err(Error::BadValue {
            key: "kl_weight".into(),
            msg: format!("must lie in [0, 1], got {kl_weight}"),
        });
    }
    let b = batch.size();
    let (dz, dc) = (model.cfg.d_z, model.cfg.d_c());
    assert_eq!(c_rows.len(), b * dc, "code rows must be B x d_c");
    assert_eq!(eps.len(), b * dz, "noise must be B x d_z");

    let (mu, lv) = encode(model, tape, enc_mode, batch)?;
    let eps_var = tape.constant(vec![b, dz], eps.to_vec());
    let z = reparameterize(tape, mu, lv, eps_var)?;
    let c = tape.constant(vec![b, dc], c_rows.to_vec());
    let tf = decode_teacher_forced(model, tape, gen_mode, batch, z, c)?;
    let kl = kl_gaussian(tape, mu, lv)?;
    let weighted = tape.scale(kl, kl_weight);
    let total = tape.add(tf.nll, weighted)?;
    Ok(VaeLoss { total, recon: tf.nll, kl, correct: tf.correct, tokens: tf.total })
}

/// Sum over attributes of -mean log q_D(c_target | soft rows), with every
/// discriminator frozen. Gradients flow only through the rows.
pub fn loss_attr_c(
    model: &Model,
    tape: &mut Tape,
    rows: &[Var],
    cats: &[Vec<usize>],
) -> Result<Var> {
    let b = cats.len();
    let mut total: Option<Var> = None;
    for attr in 0..model.cfg.attrs.len() {
        let logits = discriminate(model, tape, ParamMode::Frozen, attr, &DiscInput::Soft(rows))?;
        let lp = tape.log_softmax(logits);
        let targets: Vec<usize> = cats.iter().map(|c| c[attr]).collect();
        let picked = tape.pick(lp, &targets)?;
        let s = tape.sum(picked);
        let part = tape.scale(s, -1.0 / b as f64);
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    Ok(total.expect("at least one attribute"))
}

/// -mean log q_E(z | soft rows) with the encoder frozen: how well the fixed
/// z that produced the rows can be recovered from them.
pub fn loss_attr_z(model: &Model, tape: &mut Tape, z: Var, rows: &[Var]) -> Result<Var> {
    let ld = encoder_logdensity(model, tape, ParamMode::Frozen, z, rows)?;
    Ok(tape.scale(ld, -1.0))
}

/// Prior draws feeding the soft-decoded sample losses.
pub struct SleepDraw<'a> {
    /// B x d_z prior noise, row-major.
    pub z: &'a [f64],
    /// Per-example attribute categories.
    pub cats: &'a [Vec<usize>],
    pub tau: f64,
}

pub struct GenLoss {
    pub total: Var,
    pub vae: VaeLoss,
    pub attr_c: Option<Var>,
    pub attr_z: Option<Var>,
}

/// Full generator objective: VAE bound plus weighted attribute and latent
/// consistency losses on one soft-decoded batch. The soft rows are built
/// once and shared by both sample losses.
#[allow(clippy::too_many_arguments)]
pub fn loss_generator(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    c_rows: &[f64],
    eps: &[f64],
    kl_weight: f64,
    sleep: &SleepDraw,
    w: &LossWeights,
) -> Result<GenLoss> {
    let vae = loss_vae(model, tape, batch, c_rows, eps, kl_weight, ParamMode::Live, ParamMode::Live)?;
    let mut total = vae.total;
    let mut attr_c = None;
    let mut attr_z = None;
    if w.lambda_c != 0.0 || w.lambda_z != 0.0 {
        let bs = sleep.cats.len();
        let dz = model.cfg.d_z;
        assert_eq!(sleep.z.len(), bs * dz, "sleep noise must be B x d_z");
        let z = tape.constant(vec![bs, dz], sleep.z.to_vec());
        let mut c_dat = Vec::with_capacity(bs * model.cfg.d_c());
        for cats in sleep.cats {
            c_dat.extend(model.one_hot_c(cats));
        }
        let c = tape.constant(vec![bs, model.cfg.d_c()], c_dat);
        let rows = decode_soft(
            model,
            tape,
            ParamMode::Live,
            z,
            c,
            sleep.tau,
            model.cfg.soft_steps(),
        )?;
        if w.lambda_c != 0.0 {
            let lc = loss_attr_c(model, tape, &rows, sleep.cats)?;
            let scaled = tape.scale(lc, w.lambda_c);
            total = tape.add(total, scaled)?;
            attr_c = Some(lc);
        }
        if w.lambda_z != 0.0 {
            let lz = loss_attr_z(model, tape, z, &rows)?;
            let scaled = tape.scale(lz, w.lambda_z);
            total = tape.add(total, scaled)?;
            attr_z = Some(lz);
        }
    }
    Ok(GenLoss { total, vae, attr_c, attr_z })
}

/// Cross-entropy of one discriminator on labeled sentences.
pub fn loss_disc_supervised(
    model: &Model,
    tape: &mut Tape,
    attr: usize,
    batch: &Batch,
    labels: &[usize],
) -> Result<Var> {
    assert_eq!(labels.len(), batch.size());
    let logits = discriminate(model, tape, ParamMode::Live, attr, &DiscInput::Tokens(batch))?;
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, labels)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / batch.size() as f64))
}

pub struct UnsupLoss {
    pub loss: Var,
    /// Mean predictive entropy, in nats, read off the forward pass.
    pub entropy: f64,
}

/// Sleep-phase loss on generated sentences: cross-entropy against the code
/// that generated each sentence plus beta times the predictive entropy.
/// The literal-sign variant subtracts the entropy term instead.
pub fn loss_disc_unsupervised(
    model: &Model,
    tape: &mut Tape,
    attr: usize,
    gen_batch: &Batch,
    gen_cats: &[usize],
    beta: f64,
    literal_sign: bool,
) -> Result<UnsupLoss> {
    assert_eq!(gen_cats.len(), gen_batch.size());
    let b = gen_batch.size();
    let logits = discriminate(model, tape, ParamMode::Live, attr, &DiscInput::Tokens(gen_batch))?;
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, gen_cats)?;
    let s = tape.sum(picked);
    let ce = tape.scale(s, -1.0 / b as f64);
    let p = tape.exp(lp);
    let plp = tape.mul(p, lp)?;
    let hsum = tape.sum(plp);
    let h = tape.scale(hsum, -1.0 / b as f64);
    let bh = tape.scale(h, beta);
    let loss = if literal_sign { tape.sub(ce, bh)? } else { tape.add(ce, bh)? };
    Ok(UnsupLoss { loss, entropy: tape.scalar_value(h) })
}

pub struct DiscLoss {
    pub total: Var,
    pub sup: Var,
    pub unsup: Option<Var>,
    pub entropy: Option<f64>,
}

/// Joint discriminator objective: supervised cross-entropy, plus the
/// weighted sleep-phase term when lambda_u is nonzero and generated data is
/// supplied. With lambda_u = 0 the returned total IS the supervised node.
#[allow(clippy::too_many_arguments)]
pub fn loss_discriminator(
    model: &Model,
    tape: &mut Tape,
    attr: usize,
    labeled: &Batch,
    labels: &[usize],
    generated: Option<(&Batch, &[usize])>,
    w: &LossWeights,
) -> Result<DiscLoss> {
    let sup = loss_disc_supervised(model, tape, attr, labeled, labels)?;
    match generated {
        Some((gb, gc)) if w.lambda_u != 0.0 => {
            let u = loss_disc_unsupervised(model, tape, attr, gb, gc, w.beta, w.eq10_literal_sign)?;
            let scaled = tape.scale(u.loss, w.lambda_u);
            let total = tape.add(sup, scaled)?;
            Ok(DiscLoss { total, sup, unsup: Some(u.loss), entropy: Some(u.entropy) })
        }
        _ => Ok(DiscLoss { total: sup, sup, unsup: None, entropy: None }),
    }
}

/// KL weight ramp: step/anneal_steps, capped at 1. Reaches exactly 1.0 at
/// step = anneal_steps and stays there.
pub fn anneal_kl_weight(step: u64, anneal_steps: u64) -> f64 {
    if anneal_steps == 0 || step >= anneal_steps {
        1.0
    } else {
        step as f64 / anneal_steps as f64
    }
}

/// Linear temperature decay from start to end over decay_steps; the branch
/// guarantees the endpoint is hit exactly rather than approached in floats.
pub fn anneal_temperature(step: u64, start: f64, end: f64, decay_steps: u64) -> f64 {
    if decay_steps == 0 || step >= decay_steps {
        end
    } else {
        start + (end - start) * (step as f64 / decay_steps as f64)
    }
}

/// One metrics row. Fields are None where a phase has nothing to report;
/// the CSV writes them as empty cells. disc_entropy is reported here but
/// has no CSV column.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub step: u64,
    pub phase: String,
    pub recon_nll: Option<f64>,
    pub kl: Option<f64>,
    pub vae: Option<f64>,
    pub attr_c: Option<f64>,
    pub attr_z: Option<f64>,
    pub gen_total: Option<f64>,
    pub disc_sup: Option<f64>,
    pub disc_unsup: Option<f64>,
    pub disc_entropy: Option<f64>,
    pub disc_total: Option<f64>,
    pub kl_weight: Option<f64>,
    pub tau: Option<f64>,
}

pub const CSV_HEADER: &str =
    "step,phase,recon_nll,kl,vae,attr_c,attr_z,gen_total,disc_sup,disc_unsup,disc_total,kl_weight,tau";

fn cell(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            cell(&self.recon_nll),
            cell(&self.kl),
            cell(&self.vae),
            cell(&self.attr_c),
            cell(&self.attr_z),
            cell(&self.gen_total),
            cell(&self.disc_sup),
            cell(&self.disc_unsup),
            cell(&self.disc_total),
            cell(&self.kl_weight),
            cell(&self.tau),
        )
    }

    /// All finite or absent; a NaN or infinity anywhere means training blew up.
    pub fn is_finite(&self) -> bool {
        [
            self.recon_nll,
            self.kl,
            self.vae,
            self.attr_c,
            self.attr_z,
            self.gen_total,
            self.disc_sup,
            self.disc_unsup,
            self.disc_entropy,
            self.disc_total,
        ]
        .iter()
        .all(|v| v.is_none_or(f64::is_finite))
    }
}
