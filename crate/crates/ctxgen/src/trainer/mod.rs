//! Alternating wake-sleep training: VAE initialization, then cycles of
//! discriminator steps and generator/encoder steps, with deterministic
//! seeding, per-step metrics, and binary checkpoints.
//!
//! Every random draw comes from a stream derived from the one master seed:
//!
//!   "init", 0                   parameter initialization
//!   "shuffle", epoch            unlabeled corpus order (pretrain and joint)
//!   "wake", step                reconstruction noise, then code draws
//!   "sleep", step               prior draws for the generator's sample losses
//!   "disc:<attr>:order", epoch  labeled batch order for one attribute
//!   "disc:<attr>:sleep", k      prior draws then token sampling for one
//!                               attribute's sleep term
//!
//! Purposes are disjoint, so a phase may consume any amount of randomness
//! without disturbing another: ablating a loss term, adding an attribute, or
//! swapping one attribute's labeled set leaves every other stream intact.
//!
//! `global_step` counts generator/encoder updates only (pretraining included);
//! both data schedules and both annealing ramps are pure functions of it, so
//! a resumed run replays exactly the trajectory of an uninterrupted one.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointData};
pub use config::{parse_config, TrainConfig};

use crate::data::{
    batch_order, build_vocabulary, load_labeled, load_unlabeled, Batch, GrammarSpec, Vocabulary,
};
use crate::model::{decode_sample, discriminate_probs, DiscInput, Model, ModelConfig, ParamMode};
use crate::objectives::{
    anneal_kl_weight, anneal_temperature, loss_discriminator, loss_generator, loss_vae,
    CodeSource, LossReport, SleepDraw, CSV_HEADER,
};
use crate::rng::{categorical, normal_matrix, stream};
use crate::{io_err, Error, Result};
use autodiff::{adam_step, AdamConfig, OptimizerState, Tape};
use rand::Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};

fn adam(lr: f64) -> AdamConfig {
    AdamConfig { lr, ..AdamConfig::default() }
}

fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

struct LabeledSet {
    sentences: Vec<String>,
    labels: Vec<usize>,
}

/// Append-only metrics sink. A fresh file starts with the pinned header;
/// reopening appends, so a resumed run continues the same CSV.
pub struct Metrics {
    path: PathBuf,
    file: std::fs::File,
}

impl Metrics {
    pub fn open(dir: &Path) -> Result<Metrics> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("metrics.csv");
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if fresh {
            writeln!(file, "{CSV_HEADER}").map_err(io_err(&path))?;
        }
        Ok(Metrics { path, file })
    }

    pub fn write(&mut self, r: &LossReport) -> Result<()> {
        writeln!(self.file, "{}", r.csv_row()).map_err(io_err(&self.path))
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    pub opt_gen: OptimizerState,
    pub opt_enc: OptimizerState,
    pub opt_disc: Vec<OptimizerState>,
    /// Generator/encoder updates taken so far, pretraining included.
    pub global_step: u64,
    unlabeled: Vec<String>,
    labeled: Vec<LabeledSet>,
}

impl Trainer {
    /// Fresh state: corpora loaded, vocabulary built from the unlabeled
    /// corpus, parameters initialized from the seed.
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        Trainer::build(cfg, None)
    }

    fn build(cfg: TrainConfig, vocab_override: Option<Vocabulary>) -> Result<Trainer> {
        cfg.require_training_paths()?;
        let grammar = GrammarSpec::load(Path::new(&cfg.grammar))?;
        let unlabeled = load_unlabeled(Path::new(&cfg.unlabeled))?;
        if unlabeled.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut attrs = Vec::with_capacity(cfg.labeled.len());
        let mut labeled = Vec::with_capacity(cfg.labeled.len());
        for (name, path) in &cfg.labeled {
            let key = format!("labeled_{name}");
            let (_, attr) = grammar.attribute(name).ok_or_else(|| Error::BadValue {
                key: key.clone(),
                msg: "attribute not declared in the grammar".into(),
            })?;
            let set = load_labeled(Path::new(path), attr)?;
            if set.is_empty() {
                return Err(Error::BadValue { key, msg: "labeled set is empty".into() });
            }
            attrs.push((name.clone(), attr.num_categories()));
            labeled.push(LabeledSet {
                sentences: set.iter().map(|e| e.sentence.clone()).collect(),
                labels: set.iter().map(|e| e.category).collect(),
            });
        }
        // the vocabulary depends on the unlabeled corpus alone; labeled words
        // it misses become <unk>. Swapping one attribute's labeled set must
        // not move any other attribute's parameters, and a shared vocabulary
        // derived from labeled data would couple them through initialization.
        let vocab = match vocab_override {
            Some(v) => v,
            None => build_vocabulary(&unlabeled, cfg.min_freq)?,
        };
        // over-length sentences must fail at startup, not mid-run
        for s in unlabeled.iter().chain(labeled.iter().flat_map(|l| l.sentences.iter())) {
            vocab.encode(s, cfg.max_len)?;
        }
        let model_cfg = ModelConfig {
            vocab_size: vocab.size(),
            d_emb: cfg.d_emb,
            d_hid: cfg.d_hid,
            d_z: cfg.d_z,
            max_len: cfg.max_len,
            per_step_code: cfg.per_step_code,
            attrs,
            disc_windows: cfg.disc_windows.clone(),
            disc_feature_maps: cfg.disc_feature_maps,
        };
        let model = Model::new(model_cfg, cfg.seed);
        let opt_gen = OptimizerState::new(&model.store, &model.gen_ids());
        let opt_enc = OptimizerState::new(&model.store, &model.enc_ids());
        let opt_disc = (0..model.cfg.attrs.len())
            .map(|i| OptimizerState::new(&model.store, &model.disc_ids(i)))
            .collect();
        Ok(Trainer { cfg, vocab, model, opt_gen, opt_enc, opt_disc, global_step: 0, unlabeled, labeled })
    }

    /// Restore a run from a checkpoint and continue it under `cfg`. Keys
    /// that define the model shape or the random streams must match the
    /// originating config; budgets and loss weights may differ.
    pub fn resume_from(cfg: TrainConfig, path: &Path) -> Result<Trainer> {
        let data = read_checkpoint(path)?;
        let old = parse_config(&data.config_text)?;
        let mismatch: Vec<&str> = [
            ("seed", cfg.seed == old.seed),
            ("d_emb", cfg.d_emb == old.d_emb),
            ("d_hid", cfg.d_hid == old.d_hid),
            ("d_z", cfg.d_z == old.d_z),
            ("max_len", cfg.max_len == old.max_len),
            ("disc_windows", cfg.disc_windows == old.disc_windows),
            ("disc_feature_maps", cfg.disc_feature_maps == old.disc_feature_maps),
            (
                "labeled attributes",
                cfg.labeled.iter().map(|(a, _)| a).eq(old.labeled.iter().map(|(a, _)| a)),
            ),
        ]
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(k, _)| *k)
        .collect();
        if !mismatch.is_empty() {
            return Err(Error::Checkpoint(format!(
                "resume config disagrees with the checkpoint on: {}",
                mismatch.join(", ")
            )));
        }
        let vocab = Vocabulary::from_token_lines(&data.vocab_text);
        let mut t = Trainer::build(cfg, Some(vocab))?;
        restore_params(&mut t.model, &data.params)?;
        let mut expected: Vec<(String, Vec<autodiff::ParamId>)> =
            vec![("opt.gen".into(), t.model.gen_ids()), ("opt.enc".into(), t.model.enc_ids())];
        for (i, (name, _)) in t.model.cfg.attrs.iter().enumerate() {
            expected.push((format!("opt.disc.{name}"), t.model.disc_ids(i)));
        }
        if data.opts.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} optimizer groups, expected {}",
                data.opts.len(),
                expected.len()
            )));
        }
        let mut restored = Vec::with_capacity(expected.len());
        for (entry, (name, ids)) in data.opts.iter().zip(&expected) {
            if &entry.name != name || entry.params.len() != ids.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer group '{}' does not match expected group '{name}'",
                    entry.name
                )));
            }
            let mut m = Vec::with_capacity(ids.len());
            let mut v = Vec::with_capacity(ids.len());
            for ((idx, em, ev), id) in entry.params.iter().zip(ids) {
                if *idx != id.index() || em.len() != t.model.store.get(*id).len() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer group '{name}' is misaligned at parameter index {idx}"
                    )));
                }
                m.push(em.clone());
                v.push(ev.clone());
            }
            restored.push(OptimizerState::from_raw(ids.clone(), m, v, entry.step));
        }
        t.opt_enc = restored.remove(1);
        t.opt_gen = restored.remove(0);
        t.opt_disc = restored;
        t.global_step = data.global_step;
        Ok(t)
    }

    fn checkpoint_path(&self) -> PathBuf {
        Path::new(&self.cfg.out_dir).join(format!("ckpt-{}.ctxg", self.global_step))
    }

    pub fn save(&self) -> Result<PathBuf> {
        let names: Vec<String> =
            self.model.cfg.attrs.iter().map(|(n, _)| format!("opt.disc.{n}")).collect();
        let mut opts: Vec<(&str, &OptimizerState)> =
            vec![("opt.gen", &self.opt_gen), ("opt.enc", &self.opt_enc)];
        for (name, state) in names.iter().zip(&self.opt_disc) {
            opts.push((name, state));
        }
        let data = CheckpointData::from_state(
            &self.model.store,
            &opts,
            self.global_step,
            &self.cfg.to_text(),
            &self.vocab.to_token_lines(),
        );
        let path = self.checkpoint_path();
        write_checkpoint(&path, &data)?;
        Ok(path)
    }

    /// The wake batch for generator step `s`: a pure function of the seed,
    /// so a resumed run sees the same data order.
    fn wake_batch(&self, s: u64) -> Result<Batch> {
        let n = self.unlabeled.len();
        let bpe = batches_per_epoch(n, self.cfg.batch_size);
        let mut rng = stream(self.cfg.seed, "shuffle", s / bpe);
        let order = batch_order(n, self.cfg.batch_size, &mut rng);
        let sel: Vec<&str> =
            order[(s % bpe) as usize].iter().map(|&i| self.unlabeled[i].as_str()).collect();
        Batch::from_sentences(&sel, None, &self.vocab, self.cfg.max_len)
    }

    /// Wake-stream draws for step `s`: reconstruction noise first, then one
    /// code per sentence — from the prior, or by sampling each (frozen)
    /// discriminator's posterior over the sentence.
    fn wake_draws(&self, s: u64, batch: &Batch, source: CodeSource) -> Result<(Vec<f64>, Vec<f64>)> {
        let b = batch.size();
        let cfg = &self.model.cfg;
        let mut rng = stream(self.cfg.seed, "wake", s);
        let eps = normal_matrix(&mut rng, b, cfg.d_z);
        let mut c_rows = vec![0.0; b * cfg.d_c()];
        match source {
            CodeSource::Prior => {
                for bi in 0..b {
                    for ai in 0..cfg.attrs.len() {
                        let cat = rng.gen_range(0..cfg.attrs[ai].1);
                        c_rows[bi * cfg.d_c() + cfg.c_offset(ai) + cat] = 1.0;
                    }
                }
            }
            CodeSource::Discriminator => {
                let mut tape = Tape::new();
                let probs: Vec<Vec<f64>> = (0..cfg.attrs.len())
                    .map(|ai| {
                        let p = discriminate_probs(
                            &self.model,
                            &mut tape,
                            ParamMode::Frozen,
                            ai,
                            &DiscInput::Tokens(batch),
                        )?;
                        Ok(tape.value(p).to_vec())
                    })
                    .collect::<Result<_>>()?;
                for (ai, p) in probs.iter().enumerate() {
                    let k = cfg.attrs[ai].1;
                    for bi in 0..b {
                        let cat = categorical(&mut rng, &p[bi * k..(bi + 1) * k]);
                        c_rows[bi * cfg.d_c() + cfg.c_offset(ai) + cat] = 1.0;
                    }
                }
            }
        }
        Ok((eps, c_rows))
    }

    /// One VAE initialization step: reconstruction with codes from the prior.
    pub fn pretrain_step(&mut self) -> Result<LossReport> {
        let s = self.global_step;
        let kl_w = anneal_kl_weight(s, self.cfg.kl_anneal_steps);
        let batch = self.wake_batch(s)?;
        let (eps, c_rows) = self.wake_draws(s, &batch, CodeSource::Prior)?;
        let mut tape = Tape::new();
        let vae = loss_vae(
            &self.model,
            &mut tape,
            &batch,
            &c_rows,
            &eps,
            kl_w,
            ParamMode::Live,
            ParamMode::Live,
        )?;
        let report = LossReport {
            step: s,
            phase: "pretrain".into(),
            recon_nll: Some(tape.scalar_value(vae.recon)),
            kl: Some(tape.scalar_value(vae.kl)),
            vae: Some(tape.scalar_value(vae.total)),
            kl_weight: Some(kl_w),
            ..LossReport::default()
        };
        if !report.is_finite() {
            return Err(Error::NonFinite { context: format!("pretrain step {s}") });
        }
        tape.backward(vae.total)?;
        tape.apply_param_grads(&mut self.model.store);
        adam_step(&mut self.model.store, &mut self.opt_gen, &adam(self.cfg.lr_gen))?;
        adam_step(&mut self.model.store, &mut self.opt_enc, &adam(self.cfg.lr_gen))?;
        self.global_step += 1;
        Ok(report)
    }

    /// One joint step on the generator and encoder: the VAE bound on a real
    /// batch plus the attribute and latent-recovery losses on a soft-decoded
    /// sample. Discriminators stay frozen.
    pub fn train_step_generator(&mut self) -> Result<LossReport> {
        let s = self.global_step;
        let kl_w = anneal_kl_weight(s, self.cfg.kl_anneal_steps);
        // temperature anneals over joint-phase steps; pretraining never
        // builds soft sequences
        let joint_pos = s.saturating_sub(self.cfg.vae_pretrain_steps);
        let tau =
            anneal_temperature(joint_pos, self.cfg.tau_start, self.cfg.tau_end, self.cfg.tau_decay_steps);
        let batch = self.wake_batch(s)?;
        let (eps, c_rows) = self.wake_draws(s, &batch, self.cfg.wake_c_source)?;
        let mut w = self.cfg.weights;
        if self.model.cfg.attrs.is_empty() {
            w.lambda_c = 0.0; // no attributes, no attribute loss
        }
        let (z, cats) = if w.lambda_c != 0.0 || w.lambda_z != 0.0 {
            let mut rng = stream(self.cfg.seed, "sleep", s);
            let (z, _, cats) = self.model.sample_prior(&mut rng, self.cfg.batch_size);
            (z, cats)
        } else {
            (Vec::new(), Vec::new())
        };
        let sleep = SleepDraw { z: &z, cats: &cats, tau };
        let mut tape = Tape::new();
        let gen = loss_generator(&self.model, &mut tape, &batch, &c_rows, &eps, kl_w, &sleep, &w)?;
        let report = LossReport {
            step: s,
            phase: "gen".into(),
            recon_nll: Some(tape.scalar_value(gen.vae.recon)),
            kl: Some(tape.scalar_value(gen.vae.kl)),
            vae: Some(tape.scalar_value(gen.vae.total)),
            attr_c: gen.attr_c.map(|v| tape.scalar_value(v)),
            attr_z: gen.attr_z.map(|v| tape.scalar_value(v)),
            gen_total: Some(tape.scalar_value(gen.total)),
            kl_weight: Some(kl_w),
            tau: Some(tau),
            ..LossReport::default()
        };
        if !report.is_finite() {
            return Err(Error::NonFinite { context: format!("generator step {s}") });
        }
        tape.backward(gen.total)?;
        tape.apply_param_grads(&mut self.model.store);
        adam_step(&mut self.model.store, &mut self.opt_gen, &adam(self.cfg.lr_gen))?;
        adam_step(&mut self.model.store, &mut self.opt_enc, &adam(self.cfg.lr_gen))?;
        self.global_step += 1;
        Ok(report)
    }

    /// The `k`-th update of attribute `ai`'s discriminator: supervised
    /// cross-entropy on its labeled set, plus the sleep term on freshly
    /// sampled sentences when lambda_u is nonzero. The generator is read,
    /// never written; its parameters are bit-identical afterwards.
    pub fn train_step_discriminator(&mut self, ai: usize, k: u64) -> Result<LossReport> {
        let name = self.model.cfg.attrs[ai].0.clone();
        let set = &self.labeled[ai];
        let n = set.sentences.len();
        let bpe = batches_per_epoch(n, self.cfg.batch_size);
        let mut rng = stream(self.cfg.seed, &format!("disc:{name}:order"), k / bpe);
        let order = batch_order(n, self.cfg.batch_size, &mut rng);
        let idx = &order[(k % bpe) as usize];
        let sentences: Vec<&str> = idx.iter().map(|&i| set.sentences[i].as_str()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let batch = Batch::from_sentences(&sentences, Some(labels.clone()), &self.vocab, self.cfg.max_len)?;

        let generated = if self.cfg.weights.lambda_u != 0.0 {
            let mut rng = stream(self.cfg.seed, &format!("disc:{name}:sleep"), k);
            let b = self.cfg.batch_size;
            let (z, c_rows, cats) = self.model.sample_prior(&mut rng, b);
            let (dz, dc) = (self.model.cfg.d_z, self.model.cfg.d_c());
            let rows: Vec<Vec<usize>> = (0..b)
                .map(|bi| {
                    decode_sample(
                        &self.model,
                        &z[bi * dz..(bi + 1) * dz],
                        &c_rows[bi * dc..(bi + 1) * dc],
                        1.0,
                        self.cfg.max_len,
                        &mut rng,
                    )
                })
                .collect();
            let gb = Batch::from_token_rows(&rows, self.cfg.max_len)?;
            let gcats: Vec<usize> = cats.iter().map(|row| row[ai]).collect();
            Some((gb, gcats))
        } else {
            None
        };

        let mut tape = Tape::new();
        let dl = loss_discriminator(
            &self.model,
            &mut tape,
            ai,
            &batch,
            &labels,
            generated.as_ref().map(|(gb, gc)| (gb, gc.as_slice())),
            &self.cfg.weights,
        )?;
        let report = LossReport {
            step: self.global_step,
            phase: format!("disc:{name}"),
            disc_sup: Some(tape.scalar_value(dl.sup)),
            disc_unsup: dl.unsup.map(|v| tape.scalar_value(v)),
            disc_entropy: dl.entropy,
            disc_total: Some(tape.scalar_value(dl.total)),
            ..LossReport::default()
        };
        if !report.is_finite() {
            return Err(Error::NonFinite {
                context: format!("discriminator '{name}' update {k}"),
            });
        }
        tape.backward(dl.total)?;
        tape.apply_param_grads(&mut self.model.store);
        adam_step(&mut self.model.store, &mut self.opt_disc[ai], &adam(self.cfg.lr_disc))?;
        // the update moves the padding embedding; restore the invariant
        self.model.pin_disc_pad_row(ai);
        Ok(report)
    }

    /// Run any VAE initialization steps not yet taken.
    pub fn run_pretrain(&mut self, metrics: &mut Metrics) -> Result<()> {
        while self.global_step < self.cfg.vae_pretrain_steps {
            let r = self.pretrain_step()?;
            metrics.write(&r)?;
            if self.global_step.is_multiple_of(self.cfg.checkpoint_interval) {
                self.save()?;
            }
        }
        Ok(())
    }

    /// Alternate discriminator and generator updates for the configured
    /// number of cycles, resuming mid-schedule when the step counter says
    /// part of the budget is already spent.
    pub fn run_joint(&mut self, metrics: &mut Metrics) -> Result<()> {
        let joint_done = self.global_step.saturating_sub(self.cfg.vae_pretrain_steps);
        let start = if self.cfg.gen_steps_per_cycle == 0 {
            // no generator steps means no progress marker; such runs restart
            // their discriminator schedule on resume
            0
        } else {
            if !joint_done.is_multiple_of(self.cfg.gen_steps_per_cycle) {
                return Err(Error::Checkpoint(format!(
                    "step {} is not at a cycle boundary",
                    self.global_step
                )));
            }
            joint_done / self.cfg.gen_steps_per_cycle
        };
        for cycle in start..self.cfg.joint_steps {
            for d in 0..self.cfg.disc_steps_per_cycle {
                let k = cycle * self.cfg.disc_steps_per_cycle + d;
                for ai in 0..self.model.cfg.attrs.len() {
                    let r = self.train_step_discriminator(ai, k)?;
                    metrics.write(&r)?;
                }
            }
            for _ in 0..self.cfg.gen_steps_per_cycle {
                let r = self.train_step_generator()?;
                metrics.write(&r)?;
            }
            if (cycle + 1).is_multiple_of(self.cfg.checkpoint_interval) {
                self.save()?;
            }
        }
        Ok(())
    }
}

/// VAE initialization only: returns the path of the resulting checkpoint.
pub fn pretrain(cfg: TrainConfig) -> Result<PathBuf> {
    let mut t = Trainer::new(cfg)?;
    let mut metrics = Metrics::open(Path::new(&t.cfg.out_dir))?;
    t.run_pretrain(&mut metrics)?;
    t.save()
}

/// The full loop: initialization, then alternating joint training. With
/// `resume`, state comes from the checkpoint and the run continues from its
/// recorded step. On a non-finite loss the run aborts with an error; the
/// last checkpoint written is retained on disk.
pub fn train(cfg: TrainConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let mut t = match resume {
        Some(path) => Trainer::resume_from(cfg, path)?,
        None => Trainer::new(cfg)?,
    };
    let mut metrics = Metrics::open(Path::new(&t.cfg.out_dir))?;
    t.run_pretrain(&mut metrics)?;
    t.save()?;
    t.run_joint(&mut metrics)?;
    t.save()
}

/// Copy every checkpoint parameter into the model by name, insisting the
/// checkpoint covers the store exactly and every shape agrees.
fn restore_params(model: &mut Model, params: &[checkpoint::ParamEntry]) -> Result<()> {
    if params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            model.store.len()
        )));
    }
    for p in params {
        let id = model.store.lookup(&p.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter '{}' is not in the model", p.name))
        })?;
        let tensor = model.store.get_mut(id);
        if tensor.shape() != &p.shape[..] {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' has shape {:?} in the checkpoint but {:?} in the model",
                p.name,
                p.shape,
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(&p.values);
    }
    Ok(())
}

/// Rebuild a trained model from a checkpoint alone: dimensions from the
/// embedded config, per-attribute category counts from the stored classifier
/// head shapes, the vocabulary from the stored token table. No corpus files
/// are read, so a checkpoint is self-contained for sampling and evaluation.
pub fn load_model(path: &Path) -> Result<(Model, Vocabulary, TrainConfig, u64)> {
    let data = read_checkpoint(path)?;
    let cfg = parse_config(&data.config_text)?;
    let vocab = Vocabulary::from_token_lines(&data.vocab_text);
    let mut attrs = Vec::with_capacity(cfg.labeled.len());
    for (name, _) in &cfg.labeled {
        let head = format!("disc.{name}.head.b");
        let entry = data
            .params
            .iter()
            .find(|p| p.name == head)
            .ok_or_else(|| Error::Checkpoint(format!("no classifier head for attribute '{name}'")))?;
        attrs.push((name.clone(), entry.shape[1]));
    }
    let mut model = Model::new(
        ModelConfig {
            vocab_size: vocab.size(),
            d_emb: cfg.d_emb,
            d_hid: cfg.d_hid,
            d_z: cfg.d_z,
            max_len: cfg.max_len,
            per_step_code: cfg.per_step_code,
            attrs,
            disc_windows: cfg.disc_windows.clone(),
            disc_feature_maps: cfg.disc_feature_maps,
        },
        cfg.seed,
    );
    restore_params(&mut model, &data.params)?;
    Ok((model, vocab, cfg, data.global_step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_grammar, generate_synthetic_corpus, save_labeled, save_unlabeled};

    /// Write a small synthetic dataset and return a fast config over it.
    fn fixture(tag: &str) -> TrainConfig {
        let dir = std::env::temp_dir().join(format!("ctxg-trainer-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let spec = default_grammar();
        let corpus = generate_synthetic_corpus(&spec, 48, 12, 5);
        spec.save(&dir.join("grammar.txt")).unwrap();
        save_unlabeled(&corpus.unlabeled, &dir.join("unlabeled.txt")).unwrap();
        for (name, set) in &corpus.labeled {
            let (_, attr) = spec.attribute(name).unwrap();
            save_labeled(set, attr, &dir.join(format!("{name}.tsv"))).unwrap();
        }
        let mut cfg = TrainConfig::default();
        cfg.seed = 11;
        cfg.d_emb = 8;
        cfg.d_hid = 8;
        cfg.d_z = 4;
        cfg.max_len = 10;
        cfg.disc_feature_maps = 4;
        cfg.batch_size = 8;
        cfg.kl_anneal_steps = 10;
        cfg.tau_decay_steps = 10;
        cfg.vae_pretrain_steps = 3;
        cfg.joint_steps = 2;
        cfg.checkpoint_interval = 100;
        cfg.grammar = dir.join("grammar.txt").to_string_lossy().into_owned();
        cfg.unlabeled = dir.join("unlabeled.txt").to_string_lossy().into_owned();
        cfg.labeled = vec![(
            "sentiment".into(),
            dir.join("sentiment.tsv").to_string_lossy().into_owned(),
        )];
        cfg.out_dir = dir.join("out").to_string_lossy().into_owned();
        cfg
    }

    fn store_bits(model: &Model, ids: &[autodiff::ParamId]) -> Vec<Vec<u64>> {
        ids.iter().map(|&id| model.store.get(id).data().iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn pretraining_emits_one_metrics_row_per_step() {
        let mut cfg = fixture("rows");
        cfg.joint_steps = 0;
        cfg.vae_pretrain_steps = 5;
        let ckpt = train(cfg.clone(), None).unwrap();
        assert!(ckpt.ends_with("ckpt-5.ctxg"));
        let csv = std::fs::read_to_string(Path::new(&cfg.out_dir).join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6, "header plus one row per step");
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("0,pretrain,"));
        assert!(lines[5].starts_with("4,pretrain,"));
    }

    #[test]
    fn discriminator_steps_never_touch_generator_or_encoder() {
        let mut t = Trainer::new(fixture("isolation-d")).unwrap();
        let gen_before = store_bits(&t.model, &t.model.gen_ids());
        let enc_before = store_bits(&t.model, &t.model.enc_ids());
        for k in 0..3 {
            t.train_step_discriminator(0, k).unwrap();
        }
        assert_eq!(store_bits(&t.model, &t.model.gen_ids()), gen_before);
        assert_eq!(store_bits(&t.model, &t.model.enc_ids()), enc_before);
    }

    #[test]
    fn generator_steps_never_touch_discriminators() {
        let mut t = Trainer::new(fixture("isolation-g")).unwrap();
        let disc_before = store_bits(&t.model, &t.model.disc_ids(0));
        t.pretrain_step().unwrap();
        t.train_step_generator().unwrap();
        assert_eq!(store_bits(&t.model, &t.model.disc_ids(0)), disc_before);
    }

    #[test]
    fn supervised_discriminator_loss_decreases_under_repetition() {
        let mut cfg = fixture("overfit-d");
        cfg.weights.lambda_u = 0.0;
        cfg.batch_size = 16; // larger than the 12-example set: every batch is the whole set
        let mut t = Trainer::new(cfg).unwrap();
        let first = t.train_step_discriminator(0, 0).unwrap().disc_sup.unwrap();
        let mut last = first;
        for k in 1..50 {
            last = t.train_step_discriminator(0, k).unwrap().disc_sup.unwrap();
        }
        assert!(last < first, "supervised loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn generator_objective_decreases_under_repetition() {
        let mut cfg = fixture("overfit-g");
        cfg.vae_pretrain_steps = 0;
        cfg.kl_anneal_steps = 0; // fixed objective from the first step
        cfg.tau_decay_steps = 0;
        let mut t = Trainer::new(cfg).unwrap();
        let first = t.train_step_generator().unwrap().gen_total.unwrap();
        let mut last = first;
        for _ in 1..50 {
            last = t.train_step_generator().unwrap().gen_total.unwrap();
        }
        assert!(last < first, "generator objective did not decrease: {first} -> {last}");
    }

    #[test]
    fn same_config_same_seed_runs_are_byte_identical() {
        let cfg_a = fixture("det-a");
        let mut cfg_b = cfg_a.clone();
        cfg_b.out_dir = format!("{}-b", cfg_a.out_dir);
        let ckpt_a = train(cfg_a.clone(), None).unwrap();
        let ckpt_b = train(cfg_b.clone(), None).unwrap();
        let csv_a = std::fs::read(Path::new(&cfg_a.out_dir).join("metrics.csv")).unwrap();
        let csv_b = std::fs::read(Path::new(&cfg_b.out_dir).join("metrics.csv")).unwrap();
        assert_eq!(csv_a, csv_b, "metrics CSVs differ");
        // checkpoints differ only in the embedded out_dir; compare states
        let a = read_checkpoint(&ckpt_a).unwrap();
        let b = read_checkpoint(&ckpt_b).unwrap();
        assert_eq!(a.global_step, b.global_step);
        assert_eq!(a.params, b.params);
        assert_eq!(a.opts, b.opts);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
        let mut cfg_full = fixture("resume-full");
        cfg_full.vae_pretrain_steps = 3;
        cfg_full.joint_steps = 5;
        let final_full = train(cfg_full.clone(), None).unwrap();

        let mut cfg_short = fixture("resume-legs");
        cfg_short.seed = cfg_full.seed;
        cfg_short.vae_pretrain_steps = 3;
        cfg_short.joint_steps = 2;
        let leg1 = train(cfg_short.clone(), None).unwrap();
        let mut cfg_cont = cfg_short.clone();
        cfg_cont.joint_steps = 5;
        let final_cont = train(cfg_cont.clone(), Some(&leg1)).unwrap();

        // identical final state
        let a = read_checkpoint(&final_full).unwrap();
        let b = read_checkpoint(&final_cont).unwrap();
        assert_eq!(a.global_step, b.global_step);
        assert_eq!(a.params, b.params);
        assert_eq!(a.opts, b.opts);
        // identical metrics, including the rows written before the break
        let csv_a = std::fs::read(Path::new(&cfg_full.out_dir).join("metrics.csv")).unwrap();
        let csv_b = std::fs::read(Path::new(&cfg_cont.out_dir).join("metrics.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let cfg = fixture("roundtrip");
        let ckpt = train(cfg.clone(), None).unwrap();
        let bytes = std::fs::read(&ckpt).unwrap();
        let resumed = Trainer::resume_from(cfg, &ckpt).unwrap();
        // a finished run resumes as a no-op; saving again must reproduce
        // the file exactly
        let again = resumed.save().unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn zero_weight_joint_training_is_bitwise_pure_vae() {
        // run A: VAE only, 7 generator steps
        let mut cfg_a = fixture("purevae-a");
        cfg_a.vae_pretrain_steps = 7;
        cfg_a.joint_steps = 0;
        // run B: 3 pretrain steps, then 4 joint cycles with both sample
        // losses ablated and wake codes from the prior; interleaved
        // discriminator training must not perturb the generator trajectory
        let mut cfg_b = fixture("purevae-b");
        cfg_b.seed = cfg_a.seed;
        cfg_b.vae_pretrain_steps = 3;
        cfg_b.joint_steps = 4;
        cfg_b.weights.lambda_c = 0.0;
        cfg_b.weights.lambda_z = 0.0;
        cfg_b.wake_c_source = CodeSource::Prior;
        let ckpt_a = train(cfg_a, None).unwrap();
        let ckpt_b = train(cfg_b, None).unwrap();
        let a = read_checkpoint(&ckpt_a).unwrap();
        let b = read_checkpoint(&ckpt_b).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.name, pb.name);
            if pa.name.starts_with("gen.") || pa.name.starts_with("enc.") {
                let same = pa.values.iter().zip(&pb.values).all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(same, "parameter {} diverged", pa.name);
            }
        }
    }

    #[test]
    fn swapping_one_attributes_data_leaves_the_others_updates_unchanged() {
        // two attributes, frozen generator; regenerate tense's labeled set
        // from a different seed and check sentiment's discriminator lands on
        // bit-identical parameters
        let run = |tag: &str, tense_seed: u64| {
            let mut cfg = fixture(tag);
            let dir = Path::new(&cfg.grammar).parent().unwrap().to_path_buf();
            let spec = default_grammar();
            let alt = generate_synthetic_corpus(&spec, 0, 12, tense_seed);
            let (_, attr) = spec.attribute("tense").unwrap();
            let path = dir.join(format!("tense-{tense_seed}.tsv"));
            save_labeled(&alt.labeled[1].1, attr, &path).unwrap();
            cfg.labeled.push(("tense".into(), path.to_string_lossy().into_owned()));
            cfg.vae_pretrain_steps = 0;
            cfg.joint_steps = 3;
            cfg.gen_steps_per_cycle = 0;
            let mut t = Trainer::new(cfg).unwrap();
            let mut metrics = Metrics::open(Path::new(&t.cfg.out_dir)).unwrap();
            t.run_joint(&mut metrics).unwrap();
            store_bits(&t.model, &t.model.disc_ids(0))
        };
        assert_eq!(run("swap-a", 101), run("swap-b", 202));
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let mut t = Trainer::new(fixture("nan")).unwrap();
        let id = t.model.store.lookup("gen.out.w").unwrap();
        for v in t.model.store.get_mut(id).data_mut() {
            *v = f64::NAN;
        }
        match t.pretrain_step() {
            Err(Error::NonFinite { context }) => assert!(context.contains("pretrain")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn resume_rejects_a_conflicting_config() {
        let cfg = fixture("resume-conflict");
        let ckpt = train(cfg.clone(), None).unwrap();
        let mut bad = cfg;
        bad.d_hid = 16;
        match Trainer::resume_from(bad, &ckpt) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("d_hid"), "{msg}"),
            Err(other) => panic!("expected Checkpoint error, got {other:?}"),
            Ok(_) => panic!("resume with a conflicting config succeeded"),
        }
    }

    #[test]
    fn load_model_restores_state_without_corpus_files() {
        let cfg = fixture("selfload");
        let ckpt = train(cfg.clone(), None).unwrap();
        // the checkpoint must suffice on its own
        let dir = Path::new(&cfg.grammar).parent().unwrap();
        std::fs::remove_file(dir.join("unlabeled.txt")).unwrap();
        std::fs::remove_file(dir.join("sentiment.tsv")).unwrap();
        let (model, vocab, loaded_cfg, step) = load_model(&ckpt).unwrap();
        assert_eq!(step, cfg.vae_pretrain_steps + cfg.joint_steps);
        assert_eq!(loaded_cfg.seed, cfg.seed);
        assert_eq!(model.cfg.attrs, vec![("sentiment".to_string(), 2)]);
        assert_eq!(model.cfg.vocab_size, vocab.size());
        let data = read_checkpoint(&ckpt).unwrap();
        for p in &data.params {
            let id = model.store.lookup(&p.name).unwrap();
            let live = model.store.get(id).data();
            assert!(p.values.iter().zip(live).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // the loaded model decodes like any live one
        let toks = crate::model::decode_greedy(&model, &vec![0.0; model.cfg.d_z], &model.one_hot_c(&[0]), 4);
        assert_eq!(toks.len(), 4);
    }
}
