//! Evaluation protocols over frozen models: reconstruction fidelity,
//! attribute-control accuracy against the exact rule oracle, content
//! preservation across code flips, conditional sample grids, and the
//! classifier-augmentation comparison. Every routine is a pure function of
//! (model, inputs, seed): rerunning one reproduces its numbers exactly.

use crate::data::{
    batch_order, sample_sentence, Batch, GrammarSpec, LabeledExample, OracleVerdict, Vocabulary,
};
use crate::model::{
    argmax, decode_greedy, decode_sample, decode_soft, discriminate, trim_at_eos, DiscInput,
    Model, ModelConfig, ParamMode,
};
use crate::objectives::{
    loss_attr_c, loss_attr_z, loss_disc_supervised, loss_disc_unsupervised, loss_discriminator,
    loss_generator, loss_vae, LossWeights, SleepDraw,
};
use crate::rng::stream;
use crate::{Error, Result};
use autodiff::{adam_step, gradient_check, AdamConfig, OptimizerState, ParamId, Tape, Var};
use rand::Rng;
use std::fmt;

/// Sentences per forward pass during batched evaluation.
const EVAL_CHUNK: usize = 64;

fn eval_err(msg: impl Into<String>) -> Error {
    Error::Eval(msg.into())
}

/// Look up an attribute in both the model and the grammar and insist they
/// agree on the category count. Returns (model index, grammar index, K).
fn resolve_attr(model: &Model, grammar: &GrammarSpec, name: &str) -> Result<(usize, usize, usize)> {
    let ai_model = model
        .cfg
        .attr_index(name)
        .ok_or_else(|| eval_err(format!("model has no attribute '{name}'")))?;
    let (ai_oracle, attr) = grammar
        .attribute(name)
        .ok_or_else(|| eval_err(format!("no oracle for attribute '{name}'")))?;
    let k = model.cfg.attrs[ai_model].1;
    if k != attr.num_categories() {
        return Err(eval_err(format!(
            "attribute '{name}': model has {k} categories, grammar has {}",
            attr.num_categories()
        )));
    }
    Ok((ai_model, ai_oracle, k))
}

fn normal_row(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

#[derive(Debug)]
pub struct ReconEval {
    /// Greedy token hits under teacher forcing, over all non-PAD targets.
    pub accuracy: f64,
    pub nll_per_token: f64,
    pub sentences: usize,
    pub tokens: usize,
}

/// Teacher-forced reconstruction fidelity with deterministic codes: z sits
/// at the posterior mean (zero noise) and each sentence's c is the frozen
/// discriminators' own argmax, so the whole pass is RNG-free.
pub fn eval_reconstruction(
    model: &Model,
    vocab: &Vocabulary,
    sentences: &[String],
) -> Result<ReconEval> {
    if sentences.is_empty() {
        return Err(eval_err("no sentences to reconstruct"));
    }
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut nats = 0.0f64;
    for chunk in sentences.chunks(EVAL_CHUNK) {
        let batch = Batch::from_sentences(chunk, None, vocab, model.cfg.max_len)?;
        let b = batch.size();
        let mut tape = Tape::new();
        let mut cats = vec![vec![0usize; model.cfg.attrs.len()]; b];
        for (ai, (_, k)) in model.cfg.attrs.iter().enumerate() {
            let logits =
                discriminate(model, &mut tape, ParamMode::Frozen, ai, &DiscInput::Tokens(&batch))?;
            let vals = tape.value(logits);
            for (row, rc) in cats.iter_mut().enumerate() {
                rc[ai] = argmax(&vals[row * k..(row + 1) * k]);
            }
        }
        let c_rows: Vec<f64> = cats.iter().flat_map(|c| model.one_hot_c(c)).collect();
        let eps = vec![0.0; b * model.cfg.d_z];
        let l = loss_vae(
            model,
            &mut tape,
            &batch,
            &c_rows,
            &eps,
            1.0,
            ParamMode::Frozen,
            ParamMode::Frozen,
        )?;
        correct += l.correct;
        tokens += l.tokens;
        // recon is a batch mean of per-sentence sums; undo the mean.
        nats += tape.scalar_value(l.recon) * b as f64;
    }
    Ok(ReconEval {
        accuracy: correct as f64 / tokens as f64,
        nll_per_token: nats / tokens as f64,
        sentences: sentences.len(),
        tokens,
    })
}

#[derive(Debug)]
pub struct CategoryCount {
    pub asked: usize,
    pub correct: usize,
}

#[derive(Debug)]
pub struct AttrEval {
    pub accuracy: f64,
    /// Fraction of samples the oracle could not grade (counted incorrect).
    pub undecidable: f64,
    pub per_category: Vec<CategoryCount>,
    pub n: usize,
}

/// Conditional-generation accuracy: sample n sentences with the target
/// category cycling over its values (each category is requested within
/// ±1 of n/K times), z from the prior, ancestral decoding at τ = 1, and
/// grade each sample with the rule oracle.
pub fn eval_attribute_accuracy(
    model: &Model,
    vocab: &Vocabulary,
    grammar: &GrammarSpec,
    attr: &str,
    n: usize,
    seed: u64,
) -> Result<AttrEval> {
    if n == 0 {
        return Err(eval_err("sample count must be positive"));
    }
    let (ai_model, ai_oracle, k) = resolve_attr(model, grammar, attr)?;
    let mut rng = stream(seed, &format!("eval:attr:{attr}"), 0);
    let mut per: Vec<CategoryCount> =
        (0..k).map(|_| CategoryCount { asked: 0, correct: 0 }).collect();
    let mut undecided = 0usize;
    for i in 0..n {
        let target = i % k;
        let z = normal_row(&mut rng, model.cfg.d_z);
        let cats: Vec<usize> = model
            .cfg
            .attrs
            .iter()
            .enumerate()
            .map(|(ai, (_, kk))| if ai == ai_model { target } else { rng.gen_range(0..*kk) })
            .collect();
        let c = model.one_hot_c(&cats);
        let toks = decode_sample(model, &z, &c, 1.0, model.cfg.max_len, &mut rng);
        let words: Vec<&str> = toks.iter().map(|&t| vocab.token(t)).collect();
        per[target].asked += 1;
        match grammar.oracle_classify(&words, ai_oracle) {
            OracleVerdict::Category(c) if c == target => per[target].correct += 1,
            OracleVerdict::Category(_) => {}
            OracleVerdict::Undecidable => undecided += 1,
        }
    }
    let correct: usize = per.iter().map(|c| c.correct).sum();
    Ok(AttrEval {
        accuracy: correct as f64 / n as f64,
        undecidable: undecided as f64 / n as f64,
        per_category: per,
        n,
    })
}

#[derive(Debug)]
pub struct DisentangleEval {
    pub preservation: f64,
    pub pairs_used: usize,
    pub pairs_requested: usize,
}

/// Content preservation across a code flip: decode greedily with (z, c)
/// and (z, c′), where c′ differs only in the target attribute, and measure
/// the fraction of the reference decode's role-word positions that carry
/// the identical token in the flipped decode. Pairs whose reference decode
/// contains no role word are excluded.
pub fn eval_disentanglement(
    model: &Model,
    vocab: &Vocabulary,
    grammar: &GrammarSpec,
    attr: &str,
    n_pairs: usize,
    seed: u64,
) -> Result<DisentangleEval> {
    if n_pairs == 0 {
        return Err(eval_err("pair count must be positive"));
    }
    if grammar.roles.is_empty() {
        return Err(eval_err("grammar declares no role words; content preservation is undefined"));
    }
    let (ai_model, _, k) = resolve_attr(model, grammar, attr)?;
    let mut rng = stream(seed, &format!("eval:disentangle:{attr}"), 0);
    let steps = model.cfg.max_len + 1;
    let mut sum = 0.0f64;
    let mut used = 0usize;
    for _ in 0..n_pairs {
        let z = normal_row(&mut rng, model.cfg.d_z);
        let mut cats: Vec<usize> =
            model.cfg.attrs.iter().map(|(_, kk)| rng.gen_range(0..*kk)).collect();
        let flip = {
            let r = rng.gen_range(0..k - 1);
            if r >= cats[ai_model] {
                r + 1
            } else {
                r
            }
        };
        let a = trim_at_eos(&decode_greedy(model, &z, &model.one_hot_c(&cats), steps));
        cats[ai_model] = flip;
        let b = trim_at_eos(&decode_greedy(model, &z, &model.one_hot_c(&cats), steps));
        let role_pos: Vec<usize> = a
            .iter()
            .enumerate()
            .filter(|(_, &t)| grammar.is_role_word(vocab.token(t)))
            .map(|(p, _)| p)
            .collect();
        if role_pos.is_empty() {
            continue;
        }
        let hits = role_pos.iter().filter(|&&p| b.get(p) == Some(&a[p])).count();
        sum += hits as f64 / role_pos.len() as f64;
        used += 1;
    }
    if used == 0 {
        return Err(eval_err("no reference decode contained a role word"));
    }
    Ok(DisentangleEval { preservation: sum / used as f64, pairs_used: used, pairs_requested: n_pairs })
}

#[derive(Debug)]
pub struct GridSpec {
    /// Attribute stepped through its categories; None decodes one row per z.
    pub vary: Option<String>,
    /// Categories pinned for the other attributes (default 0).
    pub fixed: Vec<(String, usize)>,
    pub n_z: usize,
    pub seed: u64,
}

/// Greedy conditional decodes arranged as a text grid: one block per z
/// draw; within a block the varied attribute steps through its categories
/// while everything else stays fixed.
pub fn sample_grid(model: &Model, vocab: &Vocabulary, grid: &GridSpec) -> Result<String> {
    if grid.n_z == 0 {
        return Err(eval_err("need at least one z draw"));
    }
    let vary = match &grid.vary {
        Some(name) => Some(
            model
                .cfg
                .attr_index(name)
                .ok_or_else(|| eval_err(format!("model has no attribute '{name}'")))?,
        ),
        None => None,
    };
    let mut base = vec![0usize; model.cfg.attrs.len()];
    for (name, cat) in &grid.fixed {
        let ai = model
            .cfg
            .attr_index(name)
            .ok_or_else(|| eval_err(format!("model has no attribute '{name}'")))?;
        if Some(ai) == vary {
            return Err(eval_err(format!("attribute '{name}' is both varied and fixed")));
        }
        let k = model.cfg.attrs[ai].1;
        if *cat >= k {
            return Err(eval_err(format!("category {cat} out of range for '{name}' (K = {k})")));
        }
        base[ai] = *cat;
    }
    let steps = model.cfg.max_len + 1;
    let mut out = String::new();
    for zi in 0..grid.n_z {
        let mut rng = stream(grid.seed, "eval:grid", zi as u64);
        let z = normal_row(&mut rng, model.cfg.d_z);
        match vary {
            Some(ai) => {
                for v in 0..model.cfg.attrs[ai].1 {
                    let mut cats = base.clone();
                    cats[ai] = v;
                    let toks = trim_at_eos(&decode_greedy(model, &z, &model.one_hot_c(&cats), steps));
                    let name = &model.cfg.attrs[ai].0;
                    out.push_str(&format!("z{zi} {name}={v}: {}\n", vocab.decode(&toks)));
                }
            }
            None => {
                let toks = trim_at_eos(&decode_greedy(model, &z, &model.one_hot_c(&base), steps));
                out.push_str(&format!("z{zi}: {}\n", vocab.decode(&toks)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentVariant {
    /// Labeled data only.
    Std,
    /// Labeled data plus entropy regularization on generated sentences.
    HReg,
    /// Labeled data plus generated (sentence, category) pairs with the
    /// entropy term.
    Ours,
}

impl AugmentVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(AugmentVariant::Std),
            "h-reg" => Ok(AugmentVariant::HReg),
            "ours" => Ok(AugmentVariant::Ours),
            _ => Err(eval_err(format!("unknown variant '{s}' (expected std, h-reg, or ours)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentVariant::Std => "std",
            AugmentVariant::HReg => "h-reg",
            AugmentVariant::Ours => "ours",
        }
    }
}

pub struct AugmentSpec<'a> {
    pub attr: &'a str,
    pub labeled: &'a [LabeledExample],
    pub variant: AugmentVariant,
    pub n_generated: usize,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the generated-data term (h-reg and ours).
    pub lambda_u: f64,
    /// Entropy weight inside that term.
    pub beta: f64,
    pub n_test: usize,
}

impl<'a> AugmentSpec<'a> {
    pub fn new(
        attr: &'a str,
        labeled: &'a [LabeledExample],
        variant: AugmentVariant,
        n_generated: usize,
        seed: u64,
    ) -> Self {
        AugmentSpec {
            attr,
            labeled,
            variant,
            n_generated,
            seed,
            steps: 400,
            batch_size: 32,
            lr: 1e-3,
            lambda_u: 0.1,
            beta: 1.0,
            n_test: 500,
        }
    }
}

#[derive(Debug)]
pub struct AugmentEval {
    pub test_accuracy: f64,
    pub n_test: usize,
}

/// Train a fresh conv classifier on the labeled set, augmented per the
/// variant with sentences sampled from the frozen generator, then score it
/// on a held-out grammar-sampled test set. Classifier initialization, data
/// order, and the test set are functions of the seed alone, so variants
/// sharing one seed differ only in their objective.
pub fn augment_and_train_classifier(
    model: &Model,
    vocab: &Vocabulary,
    grammar: &GrammarSpec,
    spec: &AugmentSpec,
) -> Result<AugmentEval> {
    if spec.labeled.is_empty() {
        return Err(eval_err("labeled set is empty"));
    }
    if spec.batch_size == 0 {
        return Err(eval_err("batch size must be positive"));
    }
    if spec.n_test == 0 {
        return Err(eval_err("test set size must be positive"));
    }
    let (ai_model, ai_oracle, k) = resolve_attr(model, grammar, spec.attr)?;
    let needs_generated = spec.variant != AugmentVariant::Std;
    if needs_generated && spec.n_generated == 0 {
        return Err(eval_err(format!(
            "variant '{}' needs generated sentences",
            spec.variant.name()
        )));
    }
    for ex in spec.labeled {
        if ex.category >= k {
            return Err(eval_err(format!("label {} out of range (K = {k})", ex.category)));
        }
        vocab.encode(&ex.sentence, model.cfg.max_len)?;
    }

    // Fresh classifier with the discriminator architecture; its
    // initialization depends only on (architecture, seed), never on the
    // variant.
    let mut cls = Model::new(
        ModelConfig {
            vocab_size: vocab.size(),
            d_emb: model.cfg.d_emb,
            d_hid: model.cfg.d_hid,
            d_z: model.cfg.d_z,
            max_len: model.cfg.max_len,
            per_step_code: false,
            attrs: vec![(spec.attr.to_string(), k)],
            disc_windows: model.cfg.disc_windows.clone(),
            disc_feature_maps: model.cfg.disc_feature_maps,
        },
        spec.seed,
    );
    let ids = cls.disc_ids(0);
    let mut opt = OptimizerState::new(&cls.store, &ids);
    let adam = AdamConfig { lr: spec.lr, ..AdamConfig::default() };

    // (sentence, category) pairs sampled once from the frozen generator.
    let (gen_rows, gen_cats): (Vec<Vec<usize>>, Vec<usize>) = if needs_generated {
        let mut rng = stream(spec.seed, "eval:aug:gen", 0);
        let (z, c, cats) = model.sample_prior(&mut rng, spec.n_generated);
        let (dz, dc) = (model.cfg.d_z, model.cfg.d_c());
        let rows = (0..spec.n_generated)
            .map(|row| {
                decode_sample(
                    model,
                    &z[row * dz..(row + 1) * dz],
                    &c[row * dc..(row + 1) * dc],
                    1.0,
                    model.cfg.max_len,
                    &mut rng,
                )
            })
            .collect();
        (rows, cats.iter().map(|c| c[ai_model]).collect())
    } else {
        (Vec::new(), Vec::new())
    };

    let sentences: Vec<&str> = spec.labeled.iter().map(|e| e.sentence.as_str()).collect();
    let labels: Vec<usize> = spec.labeled.iter().map(|e| e.category).collect();
    let bpe = (sentences.len() as u64).div_ceil(spec.batch_size as u64);

    for step in 0..spec.steps as u64 {
        let order = batch_order(
            sentences.len(),
            spec.batch_size,
            &mut stream(spec.seed, "eval:aug:order", step / bpe),
        );
        let idx = &order[(step % bpe) as usize];
        let lsent: Vec<&str> = idx.iter().map(|&i| sentences[i]).collect();
        let llab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let lbatch = Batch::from_sentences(&lsent, None, vocab, model.cfg.max_len)?;

        let mut tape = Tape::new();
        let sup = loss_disc_supervised(&cls, &mut tape, 0, &lbatch, &llab)?;
        let total = if spec.variant == AugmentVariant::Std {
            sup
        } else {
            // Cycle through the generated pool in fixed slices.
            let gidx: Vec<usize> = (0..spec.batch_size)
                .map(|j| (step as usize * spec.batch_size + j) % gen_rows.len())
                .collect();
            let grows: Vec<Vec<usize>> = gidx.iter().map(|&i| gen_rows[i].clone()).collect();
            let gcats: Vec<usize> = gidx.iter().map(|&i| gen_cats[i]).collect();
            let gbatch = Batch::from_token_rows(&grows, model.cfg.max_len)?;
            let term = match spec.variant {
                AugmentVariant::HReg => {
                    // Entropy regularization alone: the generated labels
                    // stay unused.
                    let logits = discriminate(
                        &cls,
                        &mut tape,
                        ParamMode::Live,
                        0,
                        &DiscInput::Tokens(&gbatch),
                    )?;
                    let lp = tape.log_softmax(logits);
                    let p = tape.exp(lp);
                    let plp = tape.mul(p, lp)?;
                    let s = tape.sum(plp);
                    let h = tape.scale(s, -1.0 / gbatch.size() as f64);
                    tape.scale(h, spec.lambda_u * spec.beta)
                }
                AugmentVariant::Ours => {
                    let u =
                        loss_disc_unsupervised(&cls, &mut tape, 0, &gbatch, &gcats, spec.beta, false)?;
                    tape.scale(u.loss, spec.lambda_u)
                }
                AugmentVariant::Std => unreachable!(),
            };
            tape.add(sup, term)?
        };
        if !tape.scalar_value(total).is_finite() {
            return Err(Error::NonFinite { context: format!("classifier step {step}") });
        }
        tape.backward(total)?;
        tape.apply_param_grads(&mut cls.store);
        adam_step(&mut cls.store, &mut opt, &adam)?;
        // The update moves the padding embedding; restore the invariant.
        cls.pin_disc_pad_row(0);
    }

    // Held-out grammar-sampled test set, shared by all variants of a seed.
    let mut rng = stream(spec.seed, "eval:aug:test", 0);
    let mut forced: Vec<Option<usize>> = vec![None; grammar.attributes.len()];
    let mut test: Vec<(String, usize)> = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_test {
        forced[ai_oracle] = Some(i % k);
        let (sentence, cats) = sample_sentence(grammar, &mut rng, &forced);
        test.push((sentence, cats[ai_oracle]));
    }
    let mut correct = 0usize;
    for chunk in test.chunks(EVAL_CHUNK) {
        let sents: Vec<&str> = chunk.iter().map(|(s, _)| s.as_str()).collect();
        let batch = Batch::from_sentences(&sents, None, vocab, model.cfg.max_len)?;
        let mut tape = Tape::new();
        let logits =
            discriminate(&cls, &mut tape, ParamMode::Frozen, 0, &DiscInput::Tokens(&batch))?;
        let vals = tape.value(logits);
        for (row, (_, label)) in chunk.iter().enumerate() {
            if argmax(&vals[row * k..(row + 1) * k]) == *label {
                correct += 1;
            }
        }
    }
    Ok(AugmentEval { test_accuracy: correct as f64 / spec.n_test as f64, n_test: spec.n_test })
}

/// One objective's agreement between analytic and finite-difference
/// gradients.
#[derive(Debug)]
pub struct GradOutcome {
    pub objective: &'static str,
    pub max_rel_error: f64,
    pub components: usize,
}

/// Check the analytic gradient of every objective against central finite
/// differences on a small fixed model, over every parameter the objective
/// trains. Inputs, codes, and noise are pinned, so the suite is exactly
/// repeatable; a relative error beyond 1e-4 anywhere is an error.
pub fn objective_gradient_checks() -> Result<Vec<GradOutcome>> {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_emb: 8,
        d_hid: 8,
        d_z: 4,
        max_len: 5,
        per_step_code: false,
        attrs: vec![("a".into(), 2), ("b".into(), 3)],
        disc_windows: vec![3, 4, 5],
        disc_feature_maps: 4,
    };
    let fresh = || Model::new(cfg.clone(), 17);

    // pinned inputs shared by every check
    let batch = Batch::from_token_rows(&[vec![4, 5, 6], vec![7, 8], vec![9, 10, 11, 5]], 5)?;
    let wake_cats = [vec![0usize, 1], vec![1, 2], vec![0, 0]];
    let c_rows: Vec<f64> = {
        let m = fresh();
        wake_cats.iter().flat_map(|c| m.one_hot_c(c)).collect()
    };
    let mut rng = stream(17, "gradcheck", 0);
    let eps_noise: Vec<f64> = normal_row(&mut rng, batch.size() * cfg.d_z);
    let sleep_cats = vec![vec![0usize, 0], vec![1, 2]];
    let sleep_z: Vec<f64> = normal_row(&mut rng, sleep_cats.len() * cfg.d_z);
    let labels = [0usize, 1, 0];
    let gen_batch = Batch::from_token_rows(&[vec![5, 6], vec![9, 10, 11]], 5)?;
    let gen_cats = [1usize, 0];
    let weights = LossWeights::default();

    fn run<F>(
        out: &mut Vec<GradOutcome>,
        name: &'static str,
        m: Model,
        ids: Vec<ParamId>,
        f: F,
    ) -> Result<()>
    where
        F: Fn(&Model, &mut Tape) -> Result<Var>,
    {
        let Model { cfg, mut store, gen, enc, discs } = m;
        let report = gradient_check(&mut store, &ids, 1e-4, 1e-5, |tape, s| {
            let probe =
                Model { cfg: cfg.clone(), store: s.clone(), gen, enc, discs: discs.clone() };
            f(&probe, tape).map_err(|e| match e {
                Error::Autodiff(ae) => ae,
                other => autodiff::Error::StateMismatch { detail: other.to_string() },
            })
        })
        .map_err(|e| eval_err(format!("objective '{name}': {e}")))?;
        out.push(GradOutcome {
            objective: name,
            max_rel_error: report.max_rel_error,
            components: report.components_checked,
        });
        Ok(())
    }

    let soft_sample = |probe: &Model, tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
        let bs = sleep_cats.len();
        let z = tape.constant(vec![bs, probe.cfg.d_z], sleep_z.clone());
        let mut c_dat = Vec::with_capacity(bs * probe.cfg.d_c());
        for cats in &sleep_cats {
            c_dat.extend(probe.one_hot_c(cats));
        }
        let c = tape.constant(vec![bs, probe.cfg.d_c()], c_dat);
        let rows =
            decode_soft(probe, tape, ParamMode::Live, z, c, 0.66, probe.cfg.soft_steps())?;
        Ok((z, rows))
    };

    let mut out = Vec::new();
    {
        let m = fresh();
        let ids: Vec<ParamId> = m.gen_ids().into_iter().chain(m.enc_ids()).collect();
        run(&mut out, "vae", m, ids, |probe, tape| {
            let v = loss_vae(
                probe, tape, &batch, &c_rows, &eps_noise, 0.7, ParamMode::Live, ParamMode::Live,
            )?;
            Ok(v.total)
        })?;
    }
    {
        let m = fresh();
        let ids = m.gen_ids();
        run(&mut out, "attr_c", m, ids, |probe, tape| {
            let (_, rows) = soft_sample(probe, tape)?;
            loss_attr_c(probe, tape, &rows, &sleep_cats)
        })?;
    }
    {
        let m = fresh();
        let ids = m.gen_ids();
        run(&mut out, "attr_z", m, ids, |probe, tape| {
            let (z, rows) = soft_sample(probe, tape)?;
            loss_attr_z(probe, tape, z, &rows)
        })?;
    }
    {
        // generator parameters only: the full objective deliberately stops
        // the encoder's gradient in its latent-recovery term, and finite
        // differences cannot see a stop-gradient. The encoder's own path is
        // checked through the reconstruction bound above.
        let m = fresh();
        let ids = m.gen_ids();
        run(&mut out, "gen_total", m, ids, |probe, tape| {
            let sleep = SleepDraw { z: &sleep_z, cats: &sleep_cats, tau: 0.66 };
            let g =
                loss_generator(probe, tape, &batch, &c_rows, &eps_noise, 0.7, &sleep, &weights)?;
            Ok(g.total)
        })?;
    }
    {
        let m = fresh();
        let ids = m.disc_ids(0);
        run(&mut out, "disc_sup", m, ids, |probe, tape| {
            loss_disc_supervised(probe, tape, 0, &batch, &labels)
        })?;
    }
    {
        let m = fresh();
        let ids = m.disc_ids(0);
        run(&mut out, "disc_unsup", m, ids, |probe, tape| {
            let u = loss_disc_unsupervised(probe, tape, 0, &gen_batch, &gen_cats, 1.0, false)?;
            Ok(u.loss)
        })?;
    }
    {
        let m = fresh();
        let ids = m.disc_ids(0);
        run(&mut out, "disc_total", m, ids, |probe, tape| {
            let d = loss_discriminator(
                probe,
                tape,
                0,
                &batch,
                &labels,
                Some((&gen_batch, &gen_cats)),
                &weights,
            )?;
            Ok(d.total)
        })?;
    }
    Ok(out)
}

/// Ordered `key = value` lines; every evaluation command prints one block.
#[derive(Debug, Default)]
pub struct EvalReport {
    lines: Vec<(String, String)>,
}

impl EvalReport {
    pub fn new() -> Self {
        EvalReport::default()
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.lines {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        build_vocabulary, default_grammar, generate_synthetic_corpus, parse_grammar,
    };

    /// A model with every parameter zeroed: a blank slate for hand-built
    /// generators whose behavior is exact by construction.
    fn blank_model(attr: &str, k: usize, vocab_size: usize, max_len: usize) -> Model {
        let cfg = ModelConfig {
            vocab_size,
            d_emb: 4,
            d_hid: 6,
            d_z: 2,
            max_len,
            attrs: vec![(attr.into(), k)],
            disc_windows: vec![1, 2],
            disc_feature_maps: 8,
        };
        let mut m = Model::new(cfg, 7);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        m
    }

    /// Category router: decoding with category j emits toks[j] at every
    /// step. The category drives the initial cell state hard enough to
    /// saturate tanh for the whole rollout, and the output row turns that
    /// saturated unit into a dominant logit.
    fn router_model(attr: &str, toks: &[usize], vocab_size: usize, max_len: usize) -> Model {
        let mut m = blank_model(attr, toks.len(), vocab_size, max_len);
        let (h, dz, v) = (m.cfg.d_hid, m.cfg.d_z, m.cfg.vocab_size);
        {
            let t = m.store.get_mut(m.gen.init_w);
            for j in 0..toks.len() {
                t.data_mut()[(dz + j) * 2 * h + (h + j)] = 1000.0;
            }
        }
        {
            let t = m.store.get_mut(m.gen.out_w);
            for (j, &tok) in toks.iter().enumerate() {
                t.data_mut()[j * v + tok] = 60.0;
            }
        }
        m
    }

    /// Emits one fixed token at every step, whatever (z, c) say.
    fn constant_model(attr: &str, k: usize, tok: usize, vocab_size: usize, max_len: usize) -> Model {
        let mut m = blank_model(attr, k, vocab_size, max_len);
        m.store.get_mut(m.gen.out_b).data_mut()[tok] = 30.0;
        m
    }

    fn tiny_vocab() -> Vocabulary {
        build_vocabulary(&["cat dog good bad"], 1).unwrap()
    }

    /// Vocabulary covering the full default grammar, built from a corpus
    /// large enough that every terminal appears.
    fn full_vocab() -> Vocabulary {
        let g = default_grammar();
        let c = generate_synthetic_corpus(&g, 400, 0, 31);
        let v = build_vocabulary(&c.unlabeled, 1).unwrap();
        assert_eq!(v.size(), 64, "corpus must cover all 60 terminals");
        v
    }

    #[test]
    fn report_renders_in_insertion_order() {
        let mut r = EvalReport::new();
        r.push("accuracy", 0.95);
        r.push("n", 300);
        r.push("seed", 7);
        assert_eq!(r.to_string(), "accuracy = 0.95\nn = 300\nseed = 7\n");
    }

    #[test]
    fn reconstruction_is_deterministic_and_bounded() {
        let g = default_grammar();
        let vocab = full_vocab();
        let corpus = generate_synthetic_corpus(&g, 20, 0, 8).unlabeled;
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            d_emb: 8,
            d_hid: 8,
            d_z: 4,
            max_len: 8,
            per_step_code: false,
            attrs: vec![("sentiment".into(), 2), ("tense".into(), 3)],
            disc_windows: vec![2],
            disc_feature_maps: 4,
        };
        let m = Model::new(cfg, 19);
        let a = eval_reconstruction(&m, &vocab, &corpus).unwrap();
        assert!(a.accuracy >= 0.0 && a.accuracy <= 1.0);
        assert!(a.nll_per_token.is_finite() && a.nll_per_token > 0.0);
        assert_eq!(a.sentences, 20);
        assert!(a.tokens > 0);
        let b = eval_reconstruction(&m, &vocab, &corpus).unwrap();
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert_eq!(a.nll_per_token.to_bits(), b.nll_per_token.to_bits());
    }

    #[test]
    fn reconstruction_rejects_empty_input() {
        let vocab = tiny_vocab();
        let m = blank_model("sentiment", 2, vocab.size(), 6);
        assert!(matches!(eval_reconstruction(&m, &vocab, &[]), Err(Error::Eval(_))));
    }

    #[test]
    fn attribute_accuracy_is_perfect_for_a_category_router() {
        let g = default_grammar();
        let vocab = tiny_vocab();
        let toks = [vocab.lookup("good"), vocab.lookup("bad")];
        let m = router_model("sentiment", &toks, vocab.size(), 6);
        let e = eval_attribute_accuracy(&m, &vocab, &g, "sentiment", 200, 3).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.undecidable, 0.0);
        assert_eq!(e.per_category.len(), 2);
        for c in &e.per_category {
            assert_eq!(c.asked, 100);
            assert_eq!(c.correct, 100);
        }
    }

    #[test]
    fn attribute_accuracy_is_near_chance_for_an_untrained_model() {
        let g = default_grammar();
        let vocab = full_vocab();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            d_emb: 8,
            d_hid: 8,
            d_z: 4,
            max_len: 8,
            per_step_code: false,
            attrs: vec![("sentiment".into(), 2), ("tense".into(), 3)],
            disc_windows: vec![2],
            disc_feature_maps: 4,
        };
        let m = Model::new(cfg, 23);
        let e = eval_attribute_accuracy(&m, &vocab, &g, "sentiment", 401, 5).unwrap();
        // Chance is 1/2 before undecidable samples drag it lower.
        assert!(e.accuracy < 0.65, "untrained accuracy {}", e.accuracy);
        assert!(e.accuracy + e.undecidable <= 1.0 + 1e-12);
        // The target category cycles, so requests split within one.
        let asked: Vec<usize> = e.per_category.iter().map(|c| c.asked).collect();
        assert_eq!(asked.iter().sum::<usize>(), 401);
        assert!(asked.iter().max().unwrap() - asked.iter().min().unwrap() <= 1, "{asked:?}");
    }

    #[test]
    fn attribute_accuracy_rejects_bad_requests() {
        let g = default_grammar();
        let vocab = tiny_vocab();
        let m = router_model("sentiment", &[4, 5], vocab.size(), 6);
        assert!(matches!(
            eval_attribute_accuracy(&m, &vocab, &g, "sentiment", 0, 1),
            Err(Error::Eval(_))
        ));
        match eval_attribute_accuracy(&m, &vocab, &g, "nope", 10, 1) {
            Err(Error::Eval(msg)) => assert!(msg.contains("nope"), "{msg}"),
            other => panic!("expected Eval error, got {other:?}"),
        }
        // A grammar disagreeing on the category count is rejected.
        let g3 = parse_grammar(
            "templates = subj sentiment\nrole.subj = cat\n\
             attr.sentiment.positive = good\nattr.sentiment.negative = bad\n\
             attr.sentiment.neutral = flat\n",
        )
        .unwrap();
        match eval_attribute_accuracy(&m, &vocab, &g3, "sentiment", 10, 1) {
            Err(Error::Eval(msg)) => assert!(msg.contains("categories"), "{msg}"),
            other => panic!("expected Eval error, got {other:?}"),
        }
    }

    #[test]
    fn disentanglement_is_one_for_a_constant_role_emitter() {
        let g = default_grammar();
        let vocab = tiny_vocab();
        let m = constant_model("sentiment", 2, vocab.lookup("cat"), vocab.size(), 6);
        let e = eval_disentanglement(&m, &vocab, &g, "sentiment", 40, 11).unwrap();
        assert_eq!(e.preservation, 1.0);
        assert_eq!(e.pairs_used, 40);
        assert_eq!(e.pairs_requested, 40);
    }

    #[test]
    fn disentanglement_is_zero_when_the_flip_rewrites_everything() {
        let g = default_grammar();
        let vocab = tiny_vocab();
        // Both emitted tokens are role words, so every position counts and
        // every position changes with the category.
        let toks = [vocab.lookup("cat"), vocab.lookup("dog")];
        let m = router_model("sentiment", &toks, vocab.size(), 6);
        let e = eval_disentanglement(&m, &vocab, &g, "sentiment", 40, 11).unwrap();
        assert_eq!(e.preservation, 0.0);
        assert_eq!(e.pairs_used, 40);
    }

    #[test]
    fn disentanglement_rejects_probes_it_cannot_measure() {
        let g = default_grammar();
        let vocab = tiny_vocab();
        let m = constant_model("sentiment", 2, vocab.lookup("cat"), vocab.size(), 6);
        assert!(matches!(
            eval_disentanglement(&m, &vocab, &g, "sentiment", 0, 1),
            Err(Error::Eval(_))
        ));
        // No role declared anywhere: preservation is undefined.
        let roleless = parse_grammar(
            "templates = sentiment\nattr.sentiment.positive = good\n\
             attr.sentiment.negative = bad\n",
        )
        .unwrap();
        assert!(matches!(
            eval_disentanglement(&m, &vocab, &roleless, "sentiment", 10, 1),
            Err(Error::Eval(_))
        ));
        // Decodes that never contain a role word leave nothing to measure.
        let attr_only = constant_model("sentiment", 2, vocab.lookup("good"), vocab.size(), 6);
        match eval_disentanglement(&attr_only, &vocab, &g, "sentiment", 10, 1) {
            Err(Error::Eval(msg)) => assert!(msg.contains("role"), "{msg}"),
            other => panic!("expected Eval error, got {other:?}"),
        }
    }

    #[test]
    fn grid_emits_one_row_per_category_per_z() {
        let vocab = tiny_vocab();
        let toks = [vocab.lookup("cat"), vocab.lookup("dog"), vocab.lookup("good")];
        let m = router_model("t", &toks, vocab.size(), 6);
        let grid = GridSpec { vary: Some("t".into()), fixed: vec![], n_z: 2, seed: 9 };
        let text = sample_grid(&m, &vocab, &grid).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("z0 t=0:"));
        assert!(lines[5].starts_with("z1 t=2:"));
        // The router makes the varied category visible in every row.
        assert!(lines[0].contains("cat") && lines[1].contains("dog") && lines[2].contains("good"));
        assert_eq!(text, sample_grid(&m, &vocab, &grid).unwrap());
    }

    #[test]
    fn grid_with_nothing_varied_ignores_z_in_a_constant_model() {
        let vocab = tiny_vocab();
        let m = constant_model("sentiment", 2, vocab.lookup("cat"), vocab.size(), 6);
        let grid = GridSpec { vary: None, fixed: vec![], n_z: 3, seed: 2 };
        let text = sample_grid(&m, &vocab, &grid).unwrap();
        let bodies: Vec<&str> = text.lines().map(|l| l.split_once(": ").unwrap().1).collect();
        assert_eq!(bodies.len(), 3);
        assert!(bodies.iter().all(|b| *b == bodies[0]));
    }

    #[test]
    fn grid_rejects_bad_specs() {
        let vocab = tiny_vocab();
        let m = router_model("sentiment", &[4, 5], vocab.size(), 6);
        let bad = [
            GridSpec { vary: Some("nope".into()), fixed: vec![], n_z: 1, seed: 1 },
            GridSpec { vary: None, fixed: vec![("nope".into(), 0)], n_z: 1, seed: 1 },
            GridSpec { vary: None, fixed: vec![("sentiment".into(), 2)], n_z: 1, seed: 1 },
            GridSpec {
                vary: Some("sentiment".into()),
                fixed: vec![("sentiment".into(), 0)],
                n_z: 1,
                seed: 1,
            },
            GridSpec { vary: None, fixed: vec![], n_z: 0, seed: 1 },
        ];
        for g in &bad {
            assert!(matches!(sample_grid(&m, &vocab, g), Err(Error::Eval(_))), "{:?}", g.vary);
        }
    }

    #[test]
    fn augment_std_learns_the_word_level_set() {
        let g = default_grammar();
        let vocab = full_vocab();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            d_emb: 8,
            d_hid: 8,
            d_z: 4,
            max_len: 8,
            per_step_code: false,
            attrs: vec![("sentiment".into(), 2)],
            disc_windows: vec![1, 2],
            disc_feature_maps: 8,
        };
        let m = Model::new(cfg, 29);
        let corpus = generate_synthetic_corpus(&g, 0, 0, 1);
        let words = &corpus.word_level[0].1;
        let mut spec = AugmentSpec::new("sentiment", words, AugmentVariant::Std, 0, 5);
        spec.steps = 300;
        spec.batch_size = 16;
        spec.lr = 0.01;
        spec.n_test = 200;
        let e = augment_and_train_classifier(&m, &vocab, &g, &spec).unwrap();
        assert!(e.test_accuracy >= 0.9, "accuracy {}", e.test_accuracy);
        assert_eq!(e.n_test, 200);
    }

    #[test]
    fn augment_variants_share_everything_but_the_objective() {
        let g = default_grammar();
        let vocab = full_vocab();
        // The generator deterministically emits the right attribute word
        // for its category, so its samples are perfectly labeled data.
        let toks = [vocab.lookup("good"), vocab.lookup("bad")];
        let m = router_model("sentiment", &toks, vocab.size(), 8);
        let words = generate_synthetic_corpus(&g, 0, 0, 1).word_level[0].1.clone();
        let run = |variant| {
            let mut spec = AugmentSpec::new("sentiment", &words, variant, 64, 5);
            spec.steps = 300;
            spec.batch_size = 16;
            spec.lr = 0.01;
            spec.n_test = 200;
            augment_and_train_classifier(&m, &vocab, &g, &spec).unwrap().test_accuracy
        };
        let std1 = run(AugmentVariant::Std);
        let std2 = run(AugmentVariant::Std);
        assert_eq!(std1.to_bits(), std2.to_bits(), "same seed, same number");
        let ours = run(AugmentVariant::Ours);
        let hreg = run(AugmentVariant::HReg);
        assert!(ours >= std1 - 0.02, "ours {ours} vs std {std1}");
        assert!((0.0..=1.0).contains(&hreg));
    }

    #[test]
    fn augment_rejects_bad_inputs() {
        let g = default_grammar();
        let vocab = tiny_vocab();
        let m = router_model("sentiment", &[4, 5], vocab.size(), 6);
        let words = vec![LabeledExample { sentence: "good".into(), category: 0 }];
        let cases: Vec<AugmentSpec> = vec![
            AugmentSpec::new("sentiment", &[], AugmentVariant::Std, 0, 1),
            AugmentSpec::new("sentiment", &words, AugmentVariant::Ours, 0, 1),
            AugmentSpec::new("nope", &words, AugmentVariant::Std, 0, 1),
            AugmentSpec { n_test: 0, ..AugmentSpec::new("sentiment", &words, AugmentVariant::Std, 0, 1) },
            AugmentSpec {
                batch_size: 0,
                ..AugmentSpec::new("sentiment", &words, AugmentVariant::Std, 0, 1)
            },
        ];
        for spec in &cases {
            assert!(matches!(
                augment_and_train_classifier(&m, &vocab, &g, spec),
                Err(Error::Eval(_))
            ));
        }
        let bad_label = vec![LabeledExample { sentence: "good".into(), category: 2 }];
        assert!(matches!(
            augment_and_train_classifier(
                &m,
                &vocab,
                &g,
                &AugmentSpec::new("sentiment", &bad_label, AugmentVariant::Std, 0, 1)
            ),
            Err(Error::Eval(_))
        ));
        assert!(AugmentVariant::parse("h-reg").is_ok());
        assert!(AugmentVariant::parse("hreg").is_err());
    }

    #[test]
    fn every_objective_passes_its_gradient_check() {
        let outcomes = objective_gradient_checks().unwrap();
        let names: Vec<&str> = outcomes.iter().map(|o| o.objective).collect();
        assert_eq!(
            names,
            ["vae", "attr_c", "attr_z", "gen_total", "disc_sup", "disc_unsup", "disc_total"]
        );
        for o in &outcomes {
            assert!(o.components > 0, "{} checked nothing", o.objective);
            assert!(o.max_rel_error < 1e-4, "{}: {}", o.objective, o.max_rel_error);
        }
    }
}
