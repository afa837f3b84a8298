//! Vocabulary, batching, and the synthetic attribute-tagged language with
//! its exact rule oracle.

mod batch;
mod corpus;
mod grammar;
mod vocab;

pub use batch::{batch_order, Batch};
pub use corpus::{
    generate_synthetic_corpus, load_labeled, load_unlabeled, sample_sentence, save_labeled,
    save_unlabeled, LabeledExample, SyntheticCorpus,
};
pub use grammar::{
    default_grammar, parse_grammar, Attribute, GrammarSpec, OracleVerdict, Slot, WordKind,
    DEFAULT_GRAMMAR_TEXT,
};
pub use vocab::{build_vocabulary, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
