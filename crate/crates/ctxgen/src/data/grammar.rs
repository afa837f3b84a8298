use crate::{io_err, Error, Result};
use std::collections::HashMap;
use std::path::Path;

/// One categorical sentence attribute: its name and, per category, the
/// disjoint set of words that realize it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    pub categories: Vec<(String, Vec<String>)>,
}

impl Attribute {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|(n, _)| n == name)
    }
}

/// A template slot: either a content role (subject, object, ...) or the
/// realization point of one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Role(usize),
    Attr(usize),
}

/// What a single word means to the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordKind {
    /// Content word: role index, word index within the role set.
    Role(usize),
    /// Attribute word: attribute index, category index.
    Attr(usize, usize),
}

/// The verdict of the exact rule oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleVerdict {
    Category(usize),
    /// Zero or several distinct categories matched.
    Undecidable,
}

/// Synthetic attribute-tagged language: sentence templates over role and
/// attribute slots, with globally unique terminals so the rule oracle and
/// role tagging are exact on every grammar-generated sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarSpec {
    pub roles: Vec<(String, Vec<String>)>,
    pub attributes: Vec<Attribute>,
    pub templates: Vec<Vec<Slot>>,
    word_kinds: HashMap<String, WordKind>,
}

impl GrammarSpec {
    pub fn new(
        roles: Vec<(String, Vec<String>)>,
        attributes: Vec<Attribute>,
        template_slots: Vec<Vec<Slot>>,
    ) -> Result<Self> {
        let mut g = GrammarSpec { roles, attributes, templates: template_slots, word_kinds: HashMap::new() };
        g.index_words()?;
        g.validate()?;
        Ok(g)
    }

    fn index_words(&mut self) -> Result<()> {
        let mut kinds: HashMap<String, WordKind> = HashMap::new();
        let mut claim = |word: &str, kind: WordKind| -> Result<()> {
            if kinds.insert(word.to_string(), kind).is_some() {
                return Err(Error::Grammar(format!(
                    "terminal '{word}' appears in more than one word set"
                )));
            }
            Ok(())
        };
        for (ri, (_, words)) in self.roles.iter().enumerate() {
            for w in words {
                claim(w, WordKind::Role(ri))?;
            }
        }
        for (ai, attr) in self.attributes.iter().enumerate() {
            for (ci, (_, words)) in attr.categories.iter().enumerate() {
                for w in words {
                    claim(w, WordKind::Attr(ai, ci))?;
                }
            }
        }
        self.word_kinds = kinds;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Grammar("no templates".into()));
        }
        if self.attributes.is_empty() {
            return Err(Error::Grammar("no attributes".into()));
        }
        for (name, words) in &self.roles {
            if words.is_empty() {
                return Err(Error::Grammar(format!("role '{name}' has no words")));
            }
        }
        for attr in &self.attributes {
            if attr.categories.len() < 2 {
                return Err(Error::Grammar(format!(
                    "attribute '{}' needs at least two categories",
                    attr.name
                )));
            }
            for (cat, words) in &attr.categories {
                if words.is_empty() {
                    return Err(Error::Grammar(format!(
                        "category '{}.{cat}' has no words",
                        attr.name
                    )));
                }
            }
        }
        for (ti, tpl) in self.templates.iter().enumerate() {
            for (ai, attr) in self.attributes.iter().enumerate() {
                let n = tpl.iter().filter(|s| **s == Slot::Attr(ai)).count();
                if n != 1 {
                    return Err(Error::Grammar(format!(
                        "template {ti} contains attribute '{}' {n} times, expected exactly once",
                        attr.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_terminals(&self) -> usize {
        self.word_kinds.len()
    }

    pub fn attribute(&self, name: &str) -> Option<(usize, &Attribute)> {
        self.attributes.iter().enumerate().find(|(_, a)| a.name == name)
    }

    pub fn word_kind(&self, word: &str) -> Option<WordKind> {
        self.word_kinds.get(word).copied()
    }

    /// All terminals in a deterministic order (roles first, then attribute
    /// categories, all in declaration order).
    pub fn terminals(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.word_kinds.len());
        for (_, words) in &self.roles {
            out.extend(words.iter().map(|s| s.as_str()));
        }
        for attr in &self.attributes {
            for (_, words) in &attr.categories {
                out.extend(words.iter().map(|s| s.as_str()));
            }
        }
        out
    }

    /// Exact rule oracle: the category of `attribute` whose realization set
    /// intersects the sentence, if exactly one distinct category matches.
    pub fn oracle_classify(&self, tokens: &[&str], attribute: usize) -> OracleVerdict {
        let mut seen: Option<usize> = None;
        for tok in tokens {
            if let Some(WordKind::Attr(ai, ci)) = self.word_kind(tok) {
                if ai == attribute {
                    match seen {
                        None => seen = Some(ci),
                        Some(prev) if prev != ci => return OracleVerdict::Undecidable,
                        Some(_) => {}
                    }
                }
            }
        }
        match seen {
            Some(ci) => OracleVerdict::Category(ci),
            None => OracleVerdict::Undecidable,
        }
    }

    /// True for content (role) words: the positions whose stability the
    /// disentanglement probe measures.
    pub fn is_role_word(&self, word: &str) -> bool {
        matches!(self.word_kind(word), Some(WordKind::Role(_)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        parse_grammar(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let tpl_strs: Vec<String> = self
            .templates
            .iter()
            .map(|tpl| {
                tpl.iter()
                    .map(|s| match s {
                        Slot::Role(ri) => self.roles[*ri].0.clone(),
                        Slot::Attr(ai) => self.attributes[*ai].name.clone(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        out.push_str(&format!("templates = {}\n", tpl_strs.join(", ")));
        for (name, words) in &self.roles {
            out.push_str(&format!("role.{name} = {}\n", words.join(", ")));
        }
        for attr in &self.attributes {
            for (cat, words) in &attr.categories {
                out.push_str(&format!("attr.{}.{cat} = {}\n", attr.name, words.join(", ")));
            }
        }
        out
    }
}

/// Parse the flat `key = value` grammar format. Recognized keys:
/// `templates` (comma-separated lists of space-separated slot names),
/// `role.<name>` and `attr.<attribute>.<category>` (comma-separated words).
/// Declaration order defines role, attribute, and category indices.
pub fn parse_grammar(text: &str) -> Result<GrammarSpec> {
    let mut roles: Vec<(String, Vec<String>)> = Vec::new();
    let mut attributes: Vec<Attribute> = Vec::new();
    let mut template_lines: Option<Vec<Vec<String>>> = None;

    let perr = |line: usize, msg: String| Error::Parse { what: "grammar".into(), line, msg };

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| perr(line_no, "expected 'key = value'".into()))?;
        let key = key.trim();
        let items: Vec<String> = value
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if key == "templates" {
            if template_lines.is_some() {
                return Err(perr(line_no, "duplicate 'templates' key".into()));
            }
            template_lines = Some(
                items
                    .iter()
                    .map(|t| t.split_whitespace().map(|s| s.to_string()).collect())
                    .collect(),
            );
        } else if let Some(name) = key.strip_prefix("role.") {
            if name.is_empty() || name.contains('.') {
                return Err(perr(line_no, format!("bad role name '{name}'")));
            }
            if roles.iter().any(|(n, _)| n == name) {
                return Err(perr(line_no, format!("duplicate role '{name}'")));
            }
            roles.push((name.to_string(), items));
        } else if let Some(rest) = key.strip_prefix("attr.") {
            let (attr_name, cat_name) = rest
                .split_once('.')
                .ok_or_else(|| perr(line_no, format!("expected attr.<name>.<category>, got '{key}'")))?;
            if attr_name.is_empty() || cat_name.is_empty() || cat_name.contains('.') {
                return Err(perr(line_no, format!("bad attribute key '{key}'")));
            }
            let attr = match attributes.iter_mut().find(|a| a.name == attr_name) {
                Some(a) => a,
                None => {
                    attributes.push(Attribute { name: attr_name.to_string(), categories: Vec::new() });
                    attributes.last_mut().expect("just pushed")
                }
            };
            if attr.categories.iter().any(|(c, _)| c == cat_name) {
                return Err(perr(line_no, format!("duplicate category '{attr_name}.{cat_name}'")));
            }
            attr.categories.push((cat_name.to_string(), items));
        } else {
            return Err(perr(line_no, format!("unknown grammar key '{key}'")));
        }
    }

    let template_lines =
        template_lines.ok_or_else(|| perr(0, "missing 'templates' key".into()))?;
    let mut templates = Vec::with_capacity(template_lines.len());
    for (ti, tpl) in template_lines.iter().enumerate() {
        let mut slots = Vec::with_capacity(tpl.len());
        for slot_name in tpl {
            if let Some(ri) = roles.iter().position(|(n, _)| n == slot_name) {
                slots.push(Slot::Role(ri));
            } else if let Some(ai) = attributes.iter().position(|a| &a.name == slot_name) {
                slots.push(Slot::Attr(ai));
            } else {
                return Err(Error::Grammar(format!(
                    "template {ti} references unknown slot '{slot_name}'"
                )));
            }
        }
        templates.push(slots);
    }
    GrammarSpec::new(roles, attributes, templates)
}

/// The built-in grammar: 60 terminals, templates of length 4-7, a 2-way
/// sentiment-like attribute and a 3-way tense-like attribute.
pub fn default_grammar() -> GrammarSpec {
    parse_grammar(DEFAULT_GRAMMAR_TEXT).expect("built-in grammar is valid")
}

pub const DEFAULT_GRAMMAR_TEXT: &str = "\
# Built-in synthetic grammar: every terminal appears in exactly one set,
# so attribute classification and role tagging are exact by construction.
templates = subj tense obj sentiment, subj tense sentiment obj, sentiment subj tense obj, subj tense obj conn sentiment, subj conn obj tense sentiment, subj tense obj sentiment conn obj, subj conn subj tense obj sentiment, subj conn obj tense sentiment conn obj
role.subj = cat, dog, bird, man, girl, boy, fox, wolf, king, queen, child, friend
role.obj = ball, book, tree, song, road, house, door, star, fish, moon, cake, stone
role.conn = and, then
attr.sentiment.positive = good, fine, sweet, bright, brave, kind, happy, calm
attr.sentiment.negative = bad, grim, sour, dark, cruel, mean, angry, sad
attr.tense.past = saw, held, took, made, found, kept
attr.tense.present = sees, holds, takes, makes, finds, keeps
attr.tense.future = will_see, will_hold, will_take, will_make, will_find, will_keep
";
