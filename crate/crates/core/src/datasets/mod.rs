//! On-disk corpora, validated examples, vocabularies and padded batches.

mod batch;
mod snips;
mod squad;
mod tokenizer;
mod vocab;

pub use batch::{
    batch_order, collate_mrc, collate_slu, make_mrc_batches, make_slu_batches, LabelMap,
    MrcBatch, PaddedSeqs, SluBatch,
};
pub use snips::{parse_snips, write_snips_split, SnipsSplit};
pub use squad::{parse_squad, parse_squad_questions, SquadParseStats};
pub use batch::pad_sequences;
pub use tokenizer::{tokenize, tokenize_with_offsets, Token};
pub use vocab::{build_char_vocab, build_vocab, Vocabulary};

use thiserror::Error;

/// One SQuAD 2.0 question/answer pair, token-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcExample {
    pub qid: String,
    pub passage_tokens: Vec<String>,
    pub question_tokens: Vec<String>,
    /// Inclusive token span; both `None` iff the question is unanswerable.
    pub answer_start_token: Option<usize>,
    pub answer_end_token: Option<usize>,
    pub is_impossible: bool,
    pub raw_context: String,
    /// First gold answer, the training target. Empty when unanswerable.
    pub raw_answer_text: String,
    /// Every gold answer string, kept for evaluation.
    pub gold_answer_texts: Vec<String>,
}

impl MrcExample {
    /// Checks the type invariants; parsers only emit examples passing this.
    pub fn validate(&self) -> Result<(), DataError> {
        let spans = (self.answer_start_token, self.answer_end_token);
        match (self.is_impossible, spans) {
            (true, (None, None)) => {}
            (false, (Some(s), Some(e))) => {
                if !(s <= e && e < self.passage_tokens.len()) {
                    return Err(DataError::Invalid(format!(
                        "qid {}: span {s}..={e} out of range for {} passage tokens",
                        self.qid,
                        self.passage_tokens.len()
                    )));
                }
            }
            _ => {
                return Err(DataError::Invalid(format!(
                    "qid {}: is_impossible={} inconsistent with span {spans:?}",
                    self.qid, self.is_impossible
                )))
            }
        }
        if self.passage_tokens.is_empty() || self.question_tokens.is_empty() {
            return Err(DataError::Invalid(format!("qid {}: empty token sequence", self.qid)));
        }
        Ok(())
    }

    /// Answer string rendered from the token span (empty when unanswerable).
    pub fn span_text(&self) -> String {
        match (self.answer_start_token, self.answer_end_token) {
            (Some(s), Some(e)) => self.passage_tokens[s..=e].join(" "),
            _ => String::new(),
        }
    }
}

/// One SNIPS line triple: utterance tokens, intent, aligned BIO slot tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SluExample {
    pub tokens: Vec<String>,
    pub intent: String,
    pub slots: Vec<String>,
}

impl SluExample {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.slots.len() != self.tokens.len() {
            return Err(DataError::Invalid(format!(
                "{} tokens but {} slot tags",
                self.tokens.len(),
                self.slots.len()
            )));
        }
        validate_bio(&self.slots).map_err(|pos| {
            DataError::Invalid(format!(
                "malformed BIO tag {:?} at position {}",
                self.slots[pos],
                pos + 1
            ))
        })
    }
}

/// Returns the 0-based position of the first BIO violation, if any.
/// Every `I-X` must be preceded by `B-X` or `I-X` with the same type `X`.
pub fn validate_bio(tags: &[String]) -> Result<(), usize> {
    for (i, tag) in tags.iter().enumerate() {
        if let Some(ty) = tag.strip_prefix("I-") {
            let ok = i > 0
                && (tags[i - 1].strip_prefix("B-") == Some(ty)
                    || tags[i - 1].strip_prefix("I-") == Some(ty));
            if !ok {
                return Err(i);
            }
        } else if tag != "O" && !tag.starts_with("B-") {
            return Err(i);
        }
    }
    Ok(())
}

/// Errors raised by corpus parsing and batching.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path} at byte offset {offset} (line {line}, column {column})")]
    JsonSyntax { path: String, offset: usize, line: usize, column: usize },
    #[error("schema error at {at}: {message}")]
    Schema { at: String, message: String },
    #[error("line count mismatch: {0}")]
    LineCount(String),
    #[error("{file} line {line}: {message}")]
    Line { file: String, line: usize, message: String },
    #[error("invalid example: {0}")]
    Invalid(String),
    #[error("empty corpora")]
    EmptyCorpora,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bio_validation_catches_orphan_inside() {
        assert_eq!(validate_bio(&tags(&["O", "I-genre"])), Err(1));
        assert_eq!(validate_bio(&tags(&["B-genre", "I-genre", "O"])), Ok(()));
        assert_eq!(validate_bio(&tags(&["B-a", "I-b"])), Err(1));
        assert_eq!(validate_bio(&tags(&["garbage"])), Err(0));
    }

    #[test]
    fn mrc_invariants_enforced() {
        let mut ex = MrcExample {
            qid: "q1".into(),
            passage_tokens: tags(&["a", "b", "c"]),
            question_tokens: tags(&["what"]),
            answer_start_token: Some(1),
            answer_end_token: Some(2),
            is_impossible: false,
            raw_context: "a b c".into(),
            raw_answer_text: "b c".into(),
            gold_answer_texts: vec!["b c".into()],
        };
        assert!(ex.validate().is_ok());
        assert_eq!(ex.span_text(), "b c");
        ex.answer_end_token = Some(3);
        assert!(ex.validate().is_err());
        ex.answer_end_token = None;
        assert!(ex.validate().is_err());
        ex.answer_start_token = None;
        ex.is_impossible = true;
        assert!(ex.validate().is_ok());
        assert_eq!(ex.span_text(), "");
    }
}
