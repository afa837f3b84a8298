use crate::{io_err, Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token-to-id bijection with four reserved ids. Non-reserved ids are
/// assigned in order of first appearance in the corpus, which keeps
/// vocabulary construction deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { id_to_token, token_to_id }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    /// True if the token maps to a non-reserved id.
    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.get(token).is_some_and(|&id| id >= RESERVED.len())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    /// Encode one whitespace-tokenized sentence. Unknown tokens become UNK;
    /// sentences longer than `max_len` tokens are rejected, not truncated.
    pub fn encode(&self, sentence: &str, max_len: usize) -> Result<Vec<usize>> {
        assert!(max_len >= 1, "max_len must be at least 1");
        let ids: Vec<usize> = sentence.split_whitespace().map(|t| self.lookup(t)).collect();
        if ids.len() > max_len {
            return Err(Error::OverLength { len: ids.len(), max_len });
        }
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode) for content ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One non-reserved token per line; line number = id - 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String =
            self.id_to_token[RESERVED.len()..].iter().map(|t| format!("{t}\n")).collect();
        std::fs::write(path, body).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(Self::from_token_lines(&text))
    }

    pub fn from_token_lines(text: &str) -> Self {
        Self::from_tokens(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
    }

    pub fn to_token_lines(&self) -> String {
        self.id_to_token[RESERVED.len()..].iter().map(|t| format!("{t}\n")).collect()
    }
}

/// Build a vocabulary from whitespace-tokenized sentences. Tokens seen
/// fewer than `min_freq` times are dropped (they will encode as UNK).
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut first_seen: Vec<&str> = Vec::new();
    for line in corpus {
        for tok in line.as_ref().split_whitespace() {
            let c = counts.entry(tok).or_insert(0);
            if *c == 0 {
                first_seen.push(tok);
            }
            *c += 1;
        }
    }
    let kept: Vec<String> = first_seen
        .into_iter()
        .filter(|t| counts[t] >= min_freq)
        .map(|t| t.to_string())
        .collect();
    Ok(Vocabulary::from_tokens(kept))
}
