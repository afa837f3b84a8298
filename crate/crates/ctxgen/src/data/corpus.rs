use crate::data::grammar::{Attribute, GrammarSpec, Slot};
use crate::rng::stream;
use crate::{io_err, Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One sentence annotated with a single attribute's category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub sentence: String,
    pub category: usize,
}

/// Everything `generate_synthetic_corpus` produces: an unlabeled corpus,
/// one sentence-level labeled set per attribute, and one word-level
/// (single-token) labeled set per attribute.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub unlabeled: Vec<String>,
    pub labeled: Vec<(String, Vec<LabeledExample>)>,
    pub word_level: Vec<(String, Vec<LabeledExample>)>,
}

/// Draw one sentence: uniform template, uniform slot fills; attribute
/// categories are forced where given, otherwise uniform.
pub fn sample_sentence(
    spec: &GrammarSpec,
    rng: &mut ChaCha8Rng,
    forced: &[Option<usize>],
) -> (String, Vec<usize>) {
    debug_assert_eq!(forced.len(), spec.attributes.len());
    let cats: Vec<usize> = spec
        .attributes
        .iter()
        .zip(forced)
        .map(|(attr, f)| match f {
            Some(c) => *c,
            None => rng.gen_range(0..attr.num_categories()),
        })
        .collect();
    let tpl = &spec.templates[rng.gen_range(0..spec.templates.len())];
    let words: Vec<&str> = tpl
        .iter()
        .map(|slot| match slot {
            Slot::Role(ri) => {
                let set = &spec.roles[*ri].1;
                set[rng.gen_range(0..set.len())].as_str()
            }
            Slot::Attr(ai) => {
                let set = &spec.attributes[*ai].categories[cats[*ai]].1;
                set[rng.gen_range(0..set.len())].as_str()
            }
        })
        .collect();
    (words.join(" "), cats)
}

/// Generate the synthetic corpus. Pure in (spec, counts, seed).
///
/// Labeled sets are stratified: example `i` of an attribute with K
/// categories carries category `i mod K`, so a count of 100 over 2
/// categories splits exactly 50/50. The word-level sets enumerate every
/// realization word once, in declaration order.
pub fn generate_synthetic_corpus(
    spec: &GrammarSpec,
    n_unlabeled: usize,
    n_labeled_per_attribute: usize,
    seed: u64,
) -> SyntheticCorpus {
    let no_force: Vec<Option<usize>> = vec![None; spec.attributes.len()];

    let mut rng = stream(seed, "corpus:unlabeled", 0);
    let unlabeled: Vec<String> =
        (0..n_unlabeled).map(|_| sample_sentence(spec, &mut rng, &no_force).0).collect();

    let mut labeled = Vec::with_capacity(spec.attributes.len());
    for (ai, attr) in spec.attributes.iter().enumerate() {
        let mut rng = stream(seed, &format!("corpus:labeled:{}", attr.name), 0);
        let k = attr.num_categories();
        let mut set = Vec::with_capacity(n_labeled_per_attribute);
        for i in 0..n_labeled_per_attribute {
            let mut forced = no_force.clone();
            forced[ai] = Some(i % k);
            let (sentence, cats) = sample_sentence(spec, &mut rng, &forced);
            set.push(LabeledExample { sentence, category: cats[ai] });
        }
        labeled.push((attr.name.clone(), set));
    }

    let word_level = spec
        .attributes
        .iter()
        .map(|attr| {
            let set = attr
                .categories
                .iter()
                .enumerate()
                .flat_map(|(ci, (_, words))| {
                    words.iter().map(move |w| LabeledExample { sentence: w.clone(), category: ci })
                })
                .collect();
            (attr.name.clone(), set)
        })
        .collect();

    SyntheticCorpus { unlabeled, labeled, word_level }
}

/// UTF-8 text, one whitespace-tokenized sentence per line.
pub fn save_unlabeled(lines: &[String], path: &Path) -> Result<()> {
    let mut body = String::new();
    for l in lines {
        body.push_str(l);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(io_err(path))
}

pub fn load_unlabeled(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(|l| l.to_string()).filter(|l| !l.trim().is_empty()).collect())
}

/// UTF-8 TSV, `label<TAB>sentence` per line; the label is the category name.
pub fn save_labeled(set: &[LabeledExample], attr: &Attribute, path: &Path) -> Result<()> {
    let mut body = String::new();
    for ex in set {
        body.push_str(&attr.categories[ex.category].0);
        body.push('\t');
        body.push_str(&ex.sentence);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(io_err(path))
}

pub fn load_labeled(path: &Path, attr: &Attribute) -> Result<Vec<LabeledExample>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, sentence) = line.split_once('\t').ok_or_else(|| Error::Parse {
            what: format!("labeled set {}", path.display()),
            line: ln + 1,
            msg: "expected 'label<TAB>sentence'".into(),
        })?;
        let category = attr.category_index(label.trim()).ok_or_else(|| Error::Parse {
            what: format!("labeled set {}", path.display()),
            line: ln + 1,
            msg: format!("'{}' is not a category of attribute '{}'", label.trim(), attr.name),
        })?;
        out.push(LabeledExample { sentence: sentence.to_string(), category });
    }
    Ok(out)
}
