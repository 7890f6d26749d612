//! Frequency-thresholded vocabulary with PAD and UNK sentinels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Bijective token/id mapping. `pad_id` and `unk_id` are always present and
/// distinct; unknown lookups resolve to `unk_id`. Serializes as the ordered
/// token list so encoded bytes are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabularySerde", into = "VocabularySerde")]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    pub pad_id: usize,
    pub unk_id: usize,
}

#[derive(Serialize, Deserialize, Clone)]
struct VocabularySerde {
    tokens: Vec<String>,
    pad_id: usize,
    unk_id: usize,
}

impl From<VocabularySerde> for Vocabulary {
    fn from(s: VocabularySerde) -> Self {
        let token_to_id = s.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { token_to_id, id_to_token: s.tokens, pad_id: s.pad_id, unk_id: s.unk_id }
    }
}

impl From<Vocabulary> for VocabularySerde {
    fn from(v: Vocabulary) -> Self {
        VocabularySerde { tokens: v.id_to_token, pad_id: v.pad_id, unk_id: v.unk_id }
    }
}

impl Vocabulary {
    /// Builds from explicit entries (PAD/UNK are prepended automatically).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for t in tokens {
            if t != PAD_TOKEN && t != UNK_TOKEN {
                id_to_token.push(t);
            }
        }
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { token_to_id, id_to_token, pad_id: 0, unk_id: 1 }
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(self.unk_id)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Builds a vocabulary over every token with frequency >= `min_count`,
/// ordered by descending frequency then lexicographically.
pub fn build_vocab(corpora: &[Vec<String>], min_count: usize) -> Result<Vocabulary, DataError> {
    assert!(min_count >= 1, "build_vocab: min_count must be >= 1");
    if corpora.is_empty() || corpora.iter().all(|c| c.is_empty()) {
        return Err(DataError::EmptyCorpora);
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for corpus in corpora {
        for tok in corpus {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> =
        freq.into_iter().filter(|&(_, n)| n >= min_count).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t.to_string())))
}

/// Character vocabulary over every character of every token.
pub fn build_char_vocab(corpora: &[Vec<String>]) -> Result<Vocabulary, DataError> {
    let chars: Vec<Vec<String>> = corpora
        .iter()
        .map(|c| c.iter().flat_map(|t| t.chars().map(|ch| ch.to_string())).collect())
        .collect();
    build_vocab(&chars, 1)
}
