//! Deterministic synthetic corpora for smoke tests and overfit checks.
//!
//! The generated tasks are rule-based so a small model can drive training
//! metrics to the ceiling: answers sit immediately after a marker token
//! (absent in unanswerable passages), intents follow the leading verb, and
//! slot chunks are token-group keyed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{MrcExample, SluExample};

const MARKERS: [&str; 4] = ["m0", "m1", "m2", "m3"];
const VERBS: [&str; 4] = ["play", "book", "find", "show"];
const INTENTS: [&str; 4] = ["Play", "Book", "Find", "Show"];

fn filler(rng: &mut ChaCha8Rng) -> String {
    format!("w{:02}", rng.random_range(0..60))
}

/// `n` reading-comprehension examples over a <=100-token vocabulary with
/// passages of at most 30 tokens; every fourth example is unanswerable.
pub fn synthetic_mrc(n: usize, seed: u64) -> Vec<MrcExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let unanswerable = i % 4 == 3;
        let t_p = rng.random_range(8..=28usize);
        let mut tokens: Vec<String> = (0..t_p).map(|_| filler(&mut rng)).collect();
        let marker = MARKERS[rng.random_range(0..MARKERS.len())];
        let question_tokens = vec!["find".to_string(), marker.to_string()];
        let (start, end) = if unanswerable {
            (None, None)
        } else {
            let p = rng.random_range(0..t_p - 2);
            tokens[p] = marker.to_string();
            (Some(p + 1), Some(p + 2))
        };
        let raw_context = tokens.join(" ");
        let raw_answer_text = match (start, end) {
            (Some(s), Some(e)) => tokens[s..=e].join(" "),
            _ => String::new(),
        };
        let gold = if raw_answer_text.is_empty() { vec![] } else { vec![raw_answer_text.clone()] };
        let ex = MrcExample {
            qid: format!("syn{i}"),
            passage_tokens: tokens,
            question_tokens,
            answer_start_token: start,
            answer_end_token: end,
            is_impossible: unanswerable,
            raw_context,
            raw_answer_text,
            gold_answer_texts: gold,
        };
        debug_assert!(ex.validate().is_ok());
        out.push(ex);
    }
    out
}

/// `n` utterances: intent named by the leading verb; slot chunks are runs
/// of group-keyed tokens (`a*` -> art, `c*` -> city), everything else O.
pub fn synthetic_slu(n: usize, seed: u64) -> Vec<SluExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = rng.random_range(0..VERBS.len());
        let mut tokens = vec![VERBS[v].to_string()];
        let mut slots = vec!["O".to_string()];
        let body = rng.random_range(3..=8usize);
        let mut emitted = 0;
        while emitted < body {
            if rng.random_range(0..10) < 6 || body - emitted < 1 {
                tokens.push(filler(&mut rng));
                slots.push("O".into());
                emitted += 1;
            } else {
                let (prefix, ty) = if rng.random_bool(0.5) { ("a", "art") } else { ("c", "city") };
                let len = rng.random_range(1..=2usize).min(body - emitted);
                for j in 0..len {
                    tokens.push(format!("{prefix}{}", rng.random_range(0..8)));
                    slots.push(format!("{}-{ty}", if j == 0 { "B" } else { "I" }));
                }
                emitted += len;
            }
        }
        let ex = SluExample { tokens, intent: INTENTS[v].to_string(), slots };
        debug_assert!(ex.validate().is_ok());
        out.push(ex);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn mrc_corpus_respects_bounds() {
        let exs = synthetic_mrc(32, 9);
        assert_eq!(exs.len(), 32);
        let unanswerable = exs.iter().filter(|e| e.is_impossible).count();
        assert_eq!(unanswerable, 8); // 25%
        let mut vocab: HashSet<&str> = HashSet::new();
        for e in &exs {
            assert!(e.passage_tokens.len() <= 30);
            assert!(e.validate().is_ok());
            vocab.extend(e.passage_tokens.iter().map(|s| s.as_str()));
            vocab.extend(e.question_tokens.iter().map(|s| s.as_str()));
        }
        assert!(vocab.len() <= 100, "vocab size {}", vocab.len());
    }

    #[test]
    fn mrc_answer_follows_marker() {
        for e in synthetic_mrc(32, 4) {
            if e.is_impossible {
                assert!(!e.passage_tokens.iter().any(|t| MARKERS.contains(&t.as_str())));
            } else {
                let s = e.answer_start_token.unwrap();
                assert!(MARKERS.contains(&e.passage_tokens[s - 1].as_str()));
            }
        }
    }

    #[test]
    fn corpora_deterministic() {
        assert_eq!(synthetic_mrc(8, 3), synthetic_mrc(8, 3));
        assert_eq!(synthetic_slu(8, 3), synthetic_slu(8, 3));
        assert_ne!(synthetic_mrc(8, 3), synthetic_mrc(8, 4));
    }

    #[test]
    fn slu_corpus_valid_and_keyed() {
        for e in synthetic_slu(32, 11) {
            assert!(e.validate().is_ok());
            let verb_idx = VERBS.iter().position(|v| *v == e.tokens[0]).unwrap();
            assert_eq!(e.intent, INTENTS[verb_idx]);
            for (tok, slot) in e.tokens.iter().zip(&e.slots).skip(1) {
                if slot.ends_with("art") {
                    assert!(tok.starts_with('a'));
                } else if slot.ends_with("city") {
                    assert!(tok.starts_with('c'));
                }
            }
        }
    }
}
