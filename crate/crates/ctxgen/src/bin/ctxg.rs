//! Command-line entry point: corpus synthesis, training, conditional
//! sampling, and the evaluation protocols. Checkpoints are self-contained,
//! so every post-training command needs only the checkpoint file plus a
//! grammar file when the rule oracle is involved.

use clap::{Parser, Subcommand};
use ctxgen::data::{
    default_grammar, load_labeled, save_labeled, save_unlabeled, GrammarSpec, Vocabulary,
};
use ctxgen::eval::{
    augment_and_train_classifier, eval_attribute_accuracy, eval_disentanglement,
    objective_gradient_checks, AugmentSpec, AugmentVariant, EvalReport,
};
use ctxgen::model::{decode_greedy, decode_sample, trim_at_eos, Model};
use ctxgen::rng::{fnv1a64, stream};
use ctxgen::trainer::{load_model, TrainConfig};
use ctxgen::{data::generate_synthetic_corpus, Error, Result};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ctxg",
    about = "Attribute-controlled sentence generation: synthesize corpora, train, sample, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus and save it with its grammar
    Synth {
        /// Grammar file; the built-in grammar when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Directory receiving grammar.txt, unlabeled.txt, and the labeled sets
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_unlabeled: usize,
        /// Labeled examples per attribute
        #[arg(long, default_value_t = 200)]
        n_labeled: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the reconstruction-only initialization phase
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the full alternating schedule (initialization included)
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode sentences conditioned on chosen attribute values
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Conditioned value, `name=category` (name or index); repeatable.
        /// Unmentioned attributes are drawn from the prior per sentence.
        #[arg(long = "attr")]
        attrs: Vec<String>,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Deterministic argmax decoding instead of sampling
        #[arg(long)]
        greedy: bool,
        /// Grammar file for category names; defaults to the checkpoint's
        /// recorded grammar path
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Grade conditional samples against the rule oracle
    EvalAttr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long, default_value_t = 3000)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Grammar file; defaults to the checkpoint's recorded grammar path
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Measure content preservation across attribute flips
    EvalDisentangle {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Grammar file; defaults to the checkpoint's recorded grammar path
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Train a fresh classifier on labeled data plus generated sentences
    AugmentEval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Labeled TSV (sentence <tab> category name)
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        attr: String,
        /// std (labeled only), h-reg (adds entropy on generated), or ours
        /// (adds generated pairs with the entropy term)
        #[arg(long)]
        variant: String,
        #[arg(long = "n-gen", default_value_t = 500)]
        n_gen: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        /// Grammar file; defaults to the checkpoint's recorded grammar path
        #[arg(long)]
        grammar: Option<PathBuf>,
    },
    /// Check every objective's gradients against finite differences
    Gradcheck {
        /// Model scale to check at; only `micro` exists
        #[arg(long, default_value = "micro")]
        scale: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cli_err(msg: impl Into<String>) -> Error {
    Error::Eval(msg.into())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Load the model a command evaluates, plus the digest that ties every
/// reported number back to the exact checkpoint bytes.
fn load_for_eval(ckpt: &Path) -> Result<(Model, Vocabulary, TrainConfig, u64, u64)> {
    let digest = fnv1a64(&read_bytes(ckpt)?);
    let (model, vocab, cfg, step) = load_model(ckpt)?;
    Ok((model, vocab, cfg, step, digest))
}

/// The grammar for oracle-based commands: an explicit file wins, otherwise
/// the path recorded in the checkpoint's config.
fn resolve_grammar(explicit: Option<&Path>, cfg: &TrainConfig) -> Result<GrammarSpec> {
    match explicit {
        Some(p) => GrammarSpec::load(p),
        None if !cfg.grammar.is_empty() => GrammarSpec::load(Path::new(&cfg.grammar)),
        None => Err(cli_err("the checkpoint records no grammar path; pass --grammar")),
    }
}

fn provenance(r: &mut EvalReport, ckpt: &Path, digest: u64, step: u64, seed: u64) {
    r.push("checkpoint", ckpt.display());
    r.push("checkpoint_digest", format!("{digest:016x}"));
    r.push("global_step", step);
    r.push("seed", seed);
}

/// Parse repeated `name=value` assignments against the model's attributes.
/// Values may be category names (grammar required) or zero-based indices.
fn parse_assignments(
    model: &Model,
    grammar: Option<&GrammarSpec>,
    specs: &[String],
) -> Result<Vec<(usize, usize)>> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(specs.len());
    for s in specs {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| cli_err(format!("bad --attr '{s}': expected name=value")))?;
        let ai = model
            .cfg
            .attr_index(name)
            .ok_or_else(|| cli_err(format!("model has no attribute '{name}'")))?;
        if out.iter().any(|(i, _)| *i == ai) {
            return Err(cli_err(format!("attribute '{name}' conditioned twice")));
        }
        let k = model.cfg.attrs[ai].1;
        let cat = match value.parse::<usize>() {
            Ok(i) => i,
            Err(_) => {
                let g = grammar.ok_or_else(|| {
                    cli_err(format!(
                        "category '{value}' is not an index and no grammar is available; \
                         pass --grammar or use an index"
                    ))
                })?;
                let (_, attr) = g
                    .attribute(name)
                    .ok_or_else(|| cli_err(format!("grammar has no attribute '{name}'")))?;
                attr.category_index(value)
                    .ok_or_else(|| cli_err(format!("'{name}' has no category '{value}'")))?
            }
        };
        if cat >= k {
            return Err(cli_err(format!("category {cat} out of range for '{name}' (K = {k})")));
        }
        out.push((ai, cat));
    }
    Ok(out)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { spec, out, n_unlabeled, n_labeled, seed } => {
            let grammar = match &spec {
                Some(p) => GrammarSpec::load(p)?,
                None => default_grammar(),
            };
            std::fs::create_dir_all(&out)
                .map_err(|source| Error::Io { path: out.clone(), source })?;
            let corpus = generate_synthetic_corpus(&grammar, n_unlabeled, n_labeled, seed);
            grammar.save(&out.join("grammar.txt"))?;
            save_unlabeled(&corpus.unlabeled, &out.join("unlabeled.txt"))?;
            let mut r = EvalReport::new();
            r.push("out_dir", out.display());
            r.push("seed", seed);
            r.push("unlabeled", corpus.unlabeled.len());
            for (name, set) in &corpus.labeled {
                let (_, attr) = grammar.attribute(name).expect("generated from this grammar");
                save_labeled(set, attr, &out.join(format!("labeled_{name}.tsv")))?;
                r.push(&format!("labeled_{name}"), set.len());
            }
            for (name, set) in &corpus.word_level {
                let (_, attr) = grammar.attribute(name).expect("generated from this grammar");
                save_labeled(set, attr, &out.join(format!("words_{name}.tsv")))?;
                r.push(&format!("words_{name}"), set.len());
            }
            print!("{r}");
            Ok(())
        }

        Cmd::Pretrain { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let out_dir = cfg.out_dir.clone();
            let ckpt = ctxgen::trainer::pretrain(cfg)?;
            let mut r = EvalReport::new();
            r.push("checkpoint", ckpt.display());
            r.push("metrics", Path::new(&out_dir).join("metrics.csv").display());
            print!("{r}");
            Ok(())
        }

        Cmd::Train { config, resume } => {
            let cfg = TrainConfig::from_file(&config)?;
            let out_dir = cfg.out_dir.clone();
            let ckpt = ctxgen::trainer::train(cfg, resume.as_deref())?;
            let mut r = EvalReport::new();
            r.push("checkpoint", ckpt.display());
            r.push("metrics", Path::new(&out_dir).join("metrics.csv").display());
            print!("{r}");
            Ok(())
        }

        Cmd::Sample { ckpt, attrs, n, seed, greedy, grammar } => {
            if n == 0 {
                return Err(cli_err("sample count must be positive"));
            }
            let (model, vocab, cfg, step, digest) = load_for_eval(&ckpt)?;
            // names are a convenience; indices work without any grammar
            let g = match (&grammar, cfg.grammar.is_empty()) {
                (Some(p), _) => Some(GrammarSpec::load(p)?),
                (None, false) if Path::new(&cfg.grammar).exists() => {
                    Some(GrammarSpec::load(Path::new(&cfg.grammar))?)
                }
                _ => None,
            };
            let pinned = parse_assignments(&model, g.as_ref(), &attrs)?;
            let mut rng = stream(seed, "sample", 0);
            for _ in 0..n {
                let z: Vec<f64> = (0..model.cfg.d_z)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let cats: Vec<usize> = model
                    .cfg
                    .attrs
                    .iter()
                    .enumerate()
                    .map(|(ai, (_, k))| {
                        pinned
                            .iter()
                            .find(|(i, _)| *i == ai)
                            .map(|(_, c)| *c)
                            .unwrap_or_else(|| rng.gen_range(0..*k))
                    })
                    .collect();
                let c = model.one_hot_c(&cats);
                let toks = if greedy {
                    trim_at_eos(&decode_greedy(&model, &z, &c, model.cfg.max_len + 1))
                } else {
                    decode_sample(&model, &z, &c, 1.0, model.cfg.max_len, &mut rng)
                };
                println!("{}", vocab.decode(&toks));
            }
            let mut r = EvalReport::new();
            provenance(&mut r, &ckpt, digest, step, seed);
            r.push("n", n);
            r.push("decoding", if greedy { "greedy" } else { "sampled" });
            for s in &attrs {
                r.push("conditioned", s);
            }
            print!("{r}");
            Ok(())
        }

        Cmd::EvalAttr { ckpt, attr, n, seed, grammar } => {
            let (model, vocab, cfg, step, digest) = load_for_eval(&ckpt)?;
            let g = resolve_grammar(grammar.as_deref(), &cfg)?;
            let e = eval_attribute_accuracy(&model, &vocab, &g, &attr, n, seed)?;
            let mut r = EvalReport::new();
            provenance(&mut r, &ckpt, digest, step, seed);
            r.push("attribute", &attr);
            r.push("n", e.n);
            r.push("accuracy", e.accuracy);
            // binomial normal-approximation half-width at 95%
            let half = 1.96 * (e.accuracy * (1.0 - e.accuracy) / e.n as f64).sqrt();
            r.push("accuracy_ci95", format!("{:.4}", half));
            r.push("undecidable", e.undecidable);
            for (i, c) in e.per_category.iter().enumerate() {
                r.push(&format!("category_{i}"), format!("{}/{}", c.correct, c.asked));
            }
            print!("{r}");
            Ok(())
        }

        Cmd::EvalDisentangle { ckpt, attr, pairs, seed, grammar } => {
            let (model, vocab, cfg, step, digest) = load_for_eval(&ckpt)?;
            let g = resolve_grammar(grammar.as_deref(), &cfg)?;
            let e = eval_disentanglement(&model, &vocab, &g, &attr, pairs, seed)?;
            let mut r = EvalReport::new();
            provenance(&mut r, &ckpt, digest, step, seed);
            r.push("attribute", &attr);
            r.push("preservation", e.preservation);
            r.push("pairs_used", e.pairs_used);
            r.push("pairs_requested", e.pairs_requested);
            print!("{r}");
            Ok(())
        }

        Cmd::AugmentEval { ckpt, labeled, attr, variant, n_gen, seed, steps, n_test, grammar } => {
            let (model, vocab, cfg, step, digest) = load_for_eval(&ckpt)?;
            let g = resolve_grammar(grammar.as_deref(), &cfg)?;
            let variant = AugmentVariant::parse(&variant)?;
            let (_, gattr) = g
                .attribute(&attr)
                .ok_or_else(|| cli_err(format!("grammar has no attribute '{attr}'")))?;
            let examples = load_labeled(&labeled, gattr)?;
            let mut spec = AugmentSpec::new(&attr, &examples, variant, n_gen, seed);
            spec.steps = steps;
            spec.n_test = n_test;
            let e = augment_and_train_classifier(&model, &vocab, &g, &spec)?;
            let mut r = EvalReport::new();
            provenance(&mut r, &ckpt, digest, step, seed);
            r.push("attribute", &attr);
            r.push("variant", variant.name());
            r.push("n_labeled", examples.len());
            r.push("n_generated", if variant == AugmentVariant::Std { 0 } else { n_gen });
            r.push("classifier_steps", steps);
            r.push("test_accuracy", e.test_accuracy);
            r.push("n_test", e.n_test);
            print!("{r}");
            Ok(())
        }

        Cmd::Gradcheck { scale } => {
            if scale != "micro" {
                return Err(cli_err(format!("unknown scale '{scale}' (only micro exists)")));
            }
            let started = std::time::Instant::now();
            let outcomes = objective_gradient_checks()?;
            let elapsed = started.elapsed().as_secs_f64();
            let mut r = EvalReport::new();
            r.push("scale", &scale);
            r.push("tolerance", 1e-4);
            let mut worst = 0.0f64;
            for o in &outcomes {
                r.push(
                    &format!("{}_max_rel_error", o.objective),
                    format!("{:.3e}", o.max_rel_error),
                );
                r.push(&format!("{}_components", o.objective), o.components);
                worst = worst.max(o.max_rel_error);
            }
            r.push("max_rel_error", format!("{worst:.3e}"));
            r.push("elapsed_seconds", format!("{elapsed:.2}"));
            print!("{r}");
            Ok(())
        }
    }
}
