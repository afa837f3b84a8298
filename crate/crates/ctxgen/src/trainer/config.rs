//! Flat `key = value` training configuration.
//!
//! Unknown and duplicate keys are rejected so a typo cannot silently fall
//! back to a default. `to_text` emits every key in a fixed order with
//! round-trip float formatting, which makes the serialized form canonical:
//! parse(to_text(c)) == c, and to_text(parse(t)) == t for any t produced by
//! to_text. Checkpoints embed exactly this text.

use crate::objectives::{CodeSource, LossWeights};
use crate::{io_err, Error, Result};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_z: usize,
    pub max_len: usize,
    pub per_step_code: bool,
    pub disc_windows: Vec<usize>,
    pub disc_feature_maps: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub weights: LossWeights,
    pub kl_anneal_steps: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_decay_steps: u64,
    pub vae_pretrain_steps: u64,
    pub joint_steps: u64,
    pub disc_steps_per_cycle: u64,
    pub gen_steps_per_cycle: u64,
    pub checkpoint_interval: u64,
    /// Where the wake-phase code for an unlabeled sentence comes from during
    /// joint training. Pretraining always draws from the prior.
    pub wake_c_source: CodeSource,
    pub min_freq: usize,
    pub grammar: String,
    pub unlabeled: String,
    /// (attribute name, labeled-set path) in file order; the order fixes the
    /// layout of the structured code.
    pub labeled: Vec<(String, String)>,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            d_emb: 64,
            d_hid: 64,
            d_z: 16,
            max_len: 16,
            per_step_code: false,
            disc_windows: vec![3, 4, 5],
            disc_feature_maps: 100,
            batch_size: 32,
            lr_gen: 1e-3,
            lr_disc: 1e-3,
            weights: LossWeights::default(),
            kl_anneal_steps: 1000,
            tau_start: 1.0,
            tau_end: 0.01,
            tau_decay_steps: 1000,
            vae_pretrain_steps: 2000,
            joint_steps: 1000,
            disc_steps_per_cycle: 1,
            gen_steps_per_cycle: 1,
            checkpoint_interval: 500,
            wake_c_source: CodeSource::Discriminator,
            min_freq: 1,
            grammar: String::new(),
            unlabeled: String::new(),
            labeled: Vec::new(),
            out_dir: String::new(),
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::BadValue { key: key.to_string(), msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, format!("cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got '{value}'"))),
    }
}

fn parse_windows(key: &str, value: &str) -> Result<Vec<usize>> {
    let ws: Vec<usize> = value
        .split(',')
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    if ws.is_empty() || ws.contains(&0) {
        return Err(bad(key, "need at least one window, all nonzero"));
    }
    Ok(ws)
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "config".into(),
            line: ln + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse {
                what: "config".into(),
                line: ln + 1,
                msg: format!("duplicate key '{key}'"),
            });
        }
        match key {
            "seed" => cfg.seed = parse_num(key, value)?,
            "d_emb" => cfg.d_emb = parse_num(key, value)?,
            "d_hid" => cfg.d_hid = parse_num(key, value)?,
            "d_z" => cfg.d_z = parse_num(key, value)?,
            "max_len" => cfg.max_len = parse_num(key, value)?,
            "per_step_code" => cfg.per_step_code = parse_bool(key, value)?,
            "disc_windows" => cfg.disc_windows = parse_windows(key, value)?,
            "disc_feature_maps" => cfg.disc_feature_maps = parse_num(key, value)?,
            "batch_size" => cfg.batch_size = parse_num(key, value)?,
            "lr_gen" => cfg.lr_gen = parse_num(key, value)?,
            "lr_disc" => cfg.lr_disc = parse_num(key, value)?,
            "lambda_c" => cfg.weights.lambda_c = parse_num(key, value)?,
            "lambda_z" => cfg.weights.lambda_z = parse_num(key, value)?,
            "lambda_u" => cfg.weights.lambda_u = parse_num(key, value)?,
            "beta" => cfg.weights.beta = parse_num(key, value)?,
            "eq10_literal_sign" => cfg.weights.eq10_literal_sign = parse_bool(key, value)?,
            "kl_anneal_steps" => cfg.kl_anneal_steps = parse_num(key, value)?,
            "tau_start" => cfg.tau_start = parse_num(key, value)?,
            "tau_end" => cfg.tau_end = parse_num(key, value)?,
            "tau_decay_steps" => cfg.tau_decay_steps = parse_num(key, value)?,
            "vae_pretrain_steps" => cfg.vae_pretrain_steps = parse_num(key, value)?,
            "joint_steps" => cfg.joint_steps = parse_num(key, value)?,
            "disc_steps_per_cycle" => cfg.disc_steps_per_cycle = parse_num(key, value)?,
            "gen_steps_per_cycle" => cfg.gen_steps_per_cycle = parse_num(key, value)?,
            "checkpoint_interval" => cfg.checkpoint_interval = parse_num(key, value)?,
            "wake_c_source" => {
                cfg.wake_c_source = match value {
                    "prior" => CodeSource::Prior,
                    "discriminator" => CodeSource::Discriminator,
                    _ => return Err(bad(key, format!("expected prior or discriminator, got '{value}'"))),
                }
            }
            "min_freq" => cfg.min_freq = parse_num(key, value)?,
            "grammar" => cfg.grammar = value.to_string(),
            "unlabeled" => cfg.unlabeled = value.to_string(),
            "out_dir" => cfg.out_dir = value.to_string(),
            _ => {
                if let Some(attr) = key.strip_prefix("labeled_") {
                    if attr.is_empty() {
                        return Err(bad(key, "empty attribute name"));
                    }
                    cfg.labeled.push((attr.to_string(), value.to_string()));
                } else {
                    return Err(Error::UnknownKey { key: key.to_string() });
                }
            }
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

/// Numeric invariants that hold for any use of the config. Step budgets may
/// be zero (ablations freeze whole phases); sizes and rates may not.
fn validate(cfg: &TrainConfig) -> Result<()> {
    let pos =
        [("d_emb", cfg.d_emb), ("d_hid", cfg.d_hid), ("d_z", cfg.d_z), ("max_len", cfg.max_len)];
    for (k, v) in pos {
        if v == 0 {
            return Err(bad(k, "must be at least 1"));
        }
    }
    if cfg.disc_feature_maps == 0 {
        return Err(bad("disc_feature_maps", "must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(bad("batch_size", "must be at least 1"));
    }
    if cfg.checkpoint_interval == 0 {
        return Err(bad("checkpoint_interval", "must be at least 1"));
    }
    if cfg.min_freq == 0 {
        return Err(bad("min_freq", "must be at least 1"));
    }
    for (k, v) in [("lr_gen", cfg.lr_gen), ("lr_disc", cfg.lr_disc)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(bad(k, format!("must be positive and finite, got {v}")));
        }
    }
    let w = &cfg.weights;
    for (k, v) in [
        ("lambda_c", w.lambda_c),
        ("lambda_z", w.lambda_z),
        ("lambda_u", w.lambda_u),
        ("beta", w.beta),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(bad(k, format!("must be nonnegative and finite, got {v}")));
        }
    }
    if !(cfg.tau_end > 0.0 && cfg.tau_end.is_finite()) {
        return Err(bad("tau_end", format!("must be positive and finite, got {}", cfg.tau_end)));
    }
    if !(cfg.tau_start >= cfg.tau_end && cfg.tau_start.is_finite()) {
        return Err(bad("tau_start", format!("must be finite and >= tau_end, got {}", cfg.tau_start)));
    }
    let mut names = HashSet::new();
    for (attr, _) in &cfg.labeled {
        if !names.insert(attr.as_str()) {
            return Err(bad(&format!("labeled_{attr}"), "duplicate attribute"));
        }
    }
    Ok(())
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        parse_config(&text)
    }

    /// Canonical serialized form: fixed key order, shortest round-trip float
    /// formatting, empty path keys omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("d_emb", self.d_emb.to_string());
        kv("d_hid", self.d_hid.to_string());
        kv("d_z", self.d_z.to_string());
        kv("max_len", self.max_len.to_string());
        kv("per_step_code", self.per_step_code.to_string());
        let ws: Vec<String> = self.disc_windows.iter().map(|w| w.to_string()).collect();
        kv("disc_windows", ws.join(","));
        kv("disc_feature_maps", self.disc_feature_maps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_gen", format!("{}", self.lr_gen));
        kv("lr_disc", format!("{}", self.lr_disc));
        kv("lambda_c", format!("{}", self.weights.lambda_c));
        kv("lambda_z", format!("{}", self.weights.lambda_z));
        kv("lambda_u", format!("{}", self.weights.lambda_u));
        kv("beta", format!("{}", self.weights.beta));
        kv("eq10_literal_sign", self.weights.eq10_literal_sign.to_string());
        kv("kl_anneal_steps", self.kl_anneal_steps.to_string());
        kv("tau_start", format!("{}", self.tau_start));
        kv("tau_end", format!("{}", self.tau_end));
        kv("tau_decay_steps", self.tau_decay_steps.to_string());
        kv("vae_pretrain_steps", self.vae_pretrain_steps.to_string());
        kv("joint_steps", self.joint_steps.to_string());
        kv("disc_steps_per_cycle", self.disc_steps_per_cycle.to_string());
        kv("gen_steps_per_cycle", self.gen_steps_per_cycle.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        let source = match self.wake_c_source {
            CodeSource::Prior => "prior",
            CodeSource::Discriminator => "discriminator",
        };
        kv("wake_c_source", source.to_string());
        kv("min_freq", self.min_freq.to_string());
        if !self.grammar.is_empty() {
            kv("grammar", self.grammar.clone());
        }
        if !self.unlabeled.is_empty() {
            kv("unlabeled", self.unlabeled.clone());
        }
        for (attr, path) in &self.labeled {
            kv(&format!("labeled_{attr}"), path.clone());
        }
        if !self.out_dir.is_empty() {
            kv("out_dir", self.out_dir.clone());
        }
        s
    }

    /// Paths every training entry point needs; evaluation-only loads skip this.
    pub fn require_training_paths(&self) -> Result<()> {
        for (k, v) in
            [("grammar", &self.grammar), ("unlabeled", &self.unlabeled), ("out_dir", &self.out_dir)]
        {
            if v.is_empty() {
                return Err(Error::MissingKey { key: k.to_string() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialized_form_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.grammar = "g.txt".into();
        cfg.unlabeled = "u.txt".into();
        cfg.labeled.push(("sentiment".into(), "s.tsv".into()));
        cfg.labeled.push(("tense".into(), "t.tsv".into()));
        cfg.out_dir = "out".into();
        cfg.lr_gen = 3e-4;
        cfg.weights.lambda_u = 0.0;
        let text = cfg.to_text();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_is_rejected() {
        match parse_config("learning_rate = 0.1") {
            Err(Error::UnknownKey { key }) => assert_eq!(key, "learning_rate"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = parse_config("seed = 1\nseed = 2").unwrap_err();
        assert!(err.to_string().contains("duplicate key 'seed'"), "{err}");
    }

    #[test]
    fn malformed_line_names_its_number() {
        match parse_config("seed = 1\nnot a pair") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn labeled_keys_keep_file_order() {
        let cfg = parse_config("labeled_tense = t.tsv\nlabeled_sentiment = s.tsv").unwrap();
        let names: Vec<&str> = cfg.labeled.iter().map(|(a, _)| a.as_str()).collect();
        assert_eq!(names, ["tense", "sentiment"]);
    }

    #[test]
    fn bad_value_reports_the_key() {
        match parse_config("batch_size = many") {
            Err(Error::BadValue { key, .. }) => assert_eq!(key, "batch_size"),
            other => panic!("expected BadValue, got {other:?}"),
        }
    }

    #[test]
    fn zero_step_budgets_are_allowed_but_zero_sizes_are_not() {
        assert!(parse_config("joint_steps = 0\nvae_pretrain_steps = 0\ngen_steps_per_cycle = 0")
            .is_ok());
        assert!(parse_config("batch_size = 0").is_err());
        assert!(parse_config("d_z = 0").is_err());
    }

    #[test]
    fn wake_c_source_accepts_exactly_two_values() {
        assert_eq!(
            parse_config("wake_c_source = prior").unwrap().wake_c_source,
            CodeSource::Prior
        );
        assert_eq!(
            parse_config("wake_c_source = discriminator").unwrap().wake_c_source,
            CodeSource::Discriminator
        );
        assert!(parse_config("wake_c_source = oracle").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = parse_config("# a comment\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(parse_config("lambda_c = -0.1").is_err());
        assert!(parse_config("tau_end = 0").is_err());
        assert!(parse_config("tau_start = 0.001").is_err()); // below tau_end default
    }
}
