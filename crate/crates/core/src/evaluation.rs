//! Answer-string scoring (EM / token-overlap F1 with no-answer semantics),
//! chunk-level slot F1 and intent accuracy.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::datasets::MrcExample;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions missing {missing} qid(s), e.g. {examples:?}")]
    MissingQids { missing: usize, examples: Vec<String> },
    #[error("sequence {index}: prediction has {pred} tags but gold has {gold}")]
    LengthMismatch { index: usize, pred: usize, gold: usize },
}

/// Aggregate metrics, all percentages in [0, 100] rounded to 2 decimals.
#[derive(Debug, Clone, Serialize, Default)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub has_ans_em: f64,
    pub has_ans_f1: f64,
    pub no_ans_em: f64,
    pub no_ans_f1: f64,
    pub total: usize,
    pub has_ans_count: usize,
    pub no_ans_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intent_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utterance_count: Option<usize>,
}

fn is_punct(c: char) -> bool {
    use regex::Regex;
    use std::sync::OnceLock;
    static PUNCT: OnceLock<Regex> = OnceLock::new();
    let re = PUNCT.get_or_init(|| Regex::new(r"\p{P}").unwrap());
    let mut buf = [0u8; 4];
    re.is_match(c.encode_utf8(&mut buf))
}

/// Lowercase, strip punctuation, drop the articles a/an/the as whole words,
/// collapse whitespace. Idempotent.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|&c| !is_punct(c)).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match and token-overlap F1 of one prediction against the gold set.
/// An empty gold set encodes an unanswerable gold; the correct prediction is
/// then the (normalized-)empty string.
pub fn em_f1(prediction: &str, golds: &[String]) -> (u8, f64) {
    let pred_norm = normalize_answer(prediction);
    if golds.is_empty() {
        let hit = pred_norm.is_empty();
        return (hit as u8, if hit { 1.0 } else { 0.0 });
    }
    let mut best_em = 0u8;
    let mut best_f1 = 0.0f64;
    for gold in golds {
        let gold_norm = normalize_answer(gold);
        if pred_norm == gold_norm {
            best_em = 1;
        }
        best_f1 = best_f1.max(token_f1(&pred_norm, &gold_norm));
    }
    (best_em, best_f1)
}

fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        // empty vs empty is a match; empty vs non-empty is not
        return (p.is_empty() && g.is_empty()) as u8 as f64;
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *gold_counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(n) = gold_counts.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn pct(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

/// Scores a qid -> answer-string map against parsed examples. Unanswerable
/// examples expect the empty string.
pub fn evaluate_squad(
    predictions: &HashMap<String, String>,
    examples: &[MrcExample],
) -> Result<EvalReport, EvalError> {
    let missing: Vec<String> = examples
        .iter()
        .filter(|e| !predictions.contains_key(&e.qid))
        .map(|e| e.qid.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingQids {
            missing: missing.len(),
            examples: missing.into_iter().take(10).collect(),
        });
    }
    let mut sums = [0.0f64; 6]; // em, f1, has_em, has_f1, no_em, no_f1
    let mut has_n = 0usize;
    let mut no_n = 0usize;
    for ex in examples {
        let pred = &predictions[&ex.qid];
        let golds: &[String] = if ex.is_impossible { &[] } else { &ex.gold_answer_texts };
        let (em, f1) = em_f1(pred, golds);
        sums[0] += em as f64;
        sums[1] += f1;
        if ex.is_impossible {
            no_n += 1;
            sums[4] += em as f64;
            sums[5] += f1;
        } else {
            has_n += 1;
            sums[2] += em as f64;
            sums[3] += f1;
        }
    }
    let total = examples.len();
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(EvalReport {
        em: pct(mean(sums[0], total)),
        f1: pct(mean(sums[1], total)),
        has_ans_em: pct(mean(sums[2], has_n)),
        has_ans_f1: pct(mean(sums[3], has_n)),
        no_ans_em: pct(mean(sums[4], no_n)),
        no_ans_f1: pct(mean(sums[5], no_n)),
        total,
        has_ans_count: has_n,
        no_ans_count: no_n,
        intent_acc: None,
        slot_f1: None,
        utterance_count: None,
    })
}

/// Chunks of a BIO sequence as (type, start, end-inclusive) triples.
/// An `I-X` with no open chunk of type `X` starts a new chunk, matching the
/// repair rule applied to predictions.
pub fn bio_chunks(tags: &[String]) -> Vec<(String, usize, usize)> {
    let mut chunks = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (starts_new, ty) = if let Some(t) = tag.strip_prefix("B-") {
            (true, Some(t))
        } else if let Some(t) = tag.strip_prefix("I-") {
            let continues = matches!(&open, Some((oty, _)) if oty == t);
            (!continues, Some(t))
        } else {
            (false, None)
        };
        match ty {
            Some(t) => {
                if starts_new {
                    if let Some((oty, s)) = open.take() {
                        chunks.push((oty, s, i - 1));
                    }
                    open = Some((t.to_string(), i));
                }
            }
            None => {
                if let Some((oty, s)) = open.take() {
                    chunks.push((oty, s, i - 1));
                }
            }
        }
    }
    if let Some((oty, s)) = open {
        chunks.push((oty, s, tags.len() - 1));
    }
    chunks
}

/// Chunk-level micro F1 over exact (type, start, end) matches.
pub fn slot_f1(
    pred_tags: &[Vec<String>],
    gold_tags: &[Vec<String>],
) -> Result<f64, EvalError> {
    assert_eq!(pred_tags.len(), gold_tags.len(), "sequence count mismatch");
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    for (i, (p, g)) in pred_tags.iter().zip(gold_tags).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::LengthMismatch { index: i, pred: p.len(), gold: g.len() });
        }
        let pc = bio_chunks(p);
        let gc = bio_chunks(g);
        n_pred += pc.len();
        n_gold += gc.len();
        for c in &pc {
            if gc.contains(c) {
                tp += 1;
            }
        }
    }
    if n_pred == 0 && n_gold == 0 {
        return Ok(1.0);
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gold as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Fraction of exact intent matches.
pub fn intent_accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "intent count mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_answer("cat"), "cat");
        assert_eq!(normalize_answer("The Cat!"), "cat");
        assert_eq!(normalize_answer("a  an the"), "");
        assert_eq!(normalize_answer("The  Denver\tBroncos."), "denver broncos");
    }

    #[test]
    fn normalize_idempotent() {
        for s in ["The Cat!", "a  an the", "¿Qué—pasa?", "it's  fine"] {
            let once = normalize_answer(s);
            assert_eq!(normalize_answer(&once), once);
        }
    }

    #[test]
    fn em_f1_examples() {
        let (em, f1) = em_f1("Denver Broncos", &["Denver Broncos".to_string()]);
        assert_eq!((em, f1), (1, 1.0));
        let (em, f1) = em_f1("the Broncos", &["Denver Broncos".to_string()]);
        assert_eq!(em, 0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        let (em, f1) = em_f1("", &[]);
        assert_eq!((em, f1), (1, 1.0));
        let (em, f1) = em_f1("something", &[]);
        assert_eq!((em, f1), (0, 0.0));
    }

    #[test]
    fn em_implies_f1() {
        let cases = [
            ("the cat", vec!["cat".to_string()]),
            ("", vec![]),
            ("a b", vec!["b a".to_string(), "a b!".to_string()]),
        ];
        for (pred, golds) in cases {
            let (em, f1) = em_f1(pred, &golds);
            if em == 1 {
                assert!((f1 - 1.0).abs() < 1e-12);
            }
        }
    }

    fn ex(qid: &str, gold: &[&str], impossible: bool) -> MrcExample {
        MrcExample {
            qid: qid.into(),
            passage_tokens: vec!["x".into()],
            question_tokens: vec!["q".into()],
            answer_start_token: if impossible { None } else { Some(0) },
            answer_end_token: if impossible { None } else { Some(0) },
            is_impossible: impossible,
            raw_context: "x".into(),
            raw_answer_text: gold.first().map(|s| s.to_string()).unwrap_or_default(),
            gold_answer_texts: gold.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn evaluate_squad_perfect_and_empty_predictor() {
        let examples =
            vec![ex("a", &["foo"], false), ex("b", &[], true), ex("c", &["bar baz"], false), ex("d", &[], true)];
        let mut perfect = HashMap::new();
        perfect.insert("a".to_string(), "foo".to_string());
        perfect.insert("b".to_string(), "".to_string());
        perfect.insert("c".to_string(), "bar baz".to_string());
        perfect.insert("d".to_string(), "".to_string());
        let r = evaluate_squad(&perfect, &examples).unwrap();
        assert_eq!(r.em, 100.00);
        assert_eq!(r.f1, 100.00);

        // always-empty on 50% unanswerable
        let empty: HashMap<String, String> =
            examples.iter().map(|e| (e.qid.clone(), String::new())).collect();
        let r = evaluate_squad(&empty, &examples).unwrap();
        assert_eq!(r.em, 50.00);
        assert_eq!(r.no_ans_em, 100.00);
        assert_eq!(r.has_ans_em, 0.00);
    }

    #[test]
    fn evaluate_squad_mean_of_hand_values() {
        // F1 values {1, 2/3, 0} -> mean 5/9 -> 55.56%
        let examples = vec![
            ex("a", &["denver broncos"], false),
            ex("b", &["Denver Broncos"], false),
            ex("c", &["Denver Broncos"], false),
        ];
        let mut preds = HashMap::new();
        preds.insert("a".to_string(), "Denver Broncos".to_string());
        preds.insert("b".to_string(), "the Broncos".to_string());
        preds.insert("c".to_string(), "carolina".to_string());
        let r = evaluate_squad(&preds, &examples).unwrap();
        assert_eq!(r.f1, 55.56);
    }

    #[test]
    fn evaluate_squad_missing_qid() {
        let examples = vec![ex("a", &["foo"], false)];
        let preds = HashMap::new();
        let err = evaluate_squad(&preds, &examples).unwrap_err();
        assert!(matches!(err, EvalError::MissingQids { missing: 1, .. }));
    }

    #[test]
    fn slot_f1_examples() {
        // identical sequences
        let g = vec![tags(&["O", "B-genre", "I-genre"])];
        assert_eq!(slot_f1(&g, &g).unwrap(), 1.0);
        // boundary mismatch: gold (genre,2,3), pred (genre,2,2)
        let gold = vec![tags(&["O", "O", "B-genre", "I-genre"])];
        let pred = vec![tags(&["O", "O", "B-genre", "O"])];
        assert_eq!(slot_f1(&pred, &gold).unwrap(), 0.0);
        // one correct + one spurious, gold has one chunk: P=1/2, R=1, F1=2/3
        let gold = vec![tags(&["B-x", "O", "O"])];
        let pred = vec![tags(&["B-x", "O", "B-y"])];
        let f = slot_f1(&pred, &gold).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn slot_f1_swap_symmetric() {
        let a = vec![tags(&["B-x", "I-x", "O", "B-y"])];
        let b = vec![tags(&["B-x", "O", "O", "B-y"])];
        let f_ab = slot_f1(&a, &b).unwrap();
        let f_ba = slot_f1(&b, &a).unwrap();
        assert!((f_ab - f_ba).abs() < 1e-12);
    }

    #[test]
    fn slot_f1_length_mismatch_names_index() {
        let a = vec![tags(&["O"]), tags(&["O", "O"])];
        let b = vec![tags(&["O"]), tags(&["O"])];
        let err = slot_f1(&a, &b).unwrap_err();
        assert!(matches!(err, EvalError::LengthMismatch { index: 1, .. }));
    }

    #[test]
    fn chunks_extracted_maximally() {
        let c = bio_chunks(&tags(&["B-a", "I-a", "B-a", "O", "I-b"]));
        assert_eq!(
            c,
            vec![
                ("a".to_string(), 0, 1),
                ("a".to_string(), 2, 2),
                ("b".to_string(), 4, 4)
            ]
        );
    }
}
