//! SQuAD 2.0 JSON parsing with character-to-token span alignment.

use std::path::Path;

use serde_json::Value;

use super::tokenizer::tokenize_with_offsets;
use super::{DataError, MrcExample};

/// Alignment bookkeeping produced alongside the examples.
#[derive(Debug, Default, Clone, Copy)]
pub struct SquadParseStats {
    pub total_qas: usize,
    /// Answer spans that do not land on token boundaries; dropped.
    pub dropped_unalignable: usize,
    /// Spans pushed past the passage cap; converted to unanswerable.
    pub truncated_to_impossible: usize,
}

/// Parses a SQuAD 2.0 file. Passages longer than `max_passage_len` tokens
/// are truncated; gold spans beyond the cap mark the example impossible.
pub fn parse_squad(
    path: &Path,
    max_passage_len: usize,
) -> Result<(Vec<MrcExample>, SquadParseStats), DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let root: Value = serde_json::from_str(&text).map_err(|e| DataError::JsonSyntax {
        path: path.display().to_string(),
        offset: byte_offset(&text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
    })?;

    let mut examples = Vec::new();
    let mut stats = SquadParseStats::default();
    let data = field(&root, "data", "$")?
        .as_array()
        .ok_or_else(|| schema("$.data", "expected array"))?;
    for (ai, article) in data.iter().enumerate() {
        let apath = format!("$.data[{ai}]");
        let paragraphs = field(article, "paragraphs", &apath)?
            .as_array()
            .ok_or_else(|| schema(&format!("{apath}.paragraphs"), "expected array"))?;
        for (pi, para) in paragraphs.iter().enumerate() {
            let ppath = format!("{apath}.paragraphs[{pi}]");
            let context = field(para, "context", &ppath)?
                .as_str()
                .ok_or_else(|| schema(&format!("{ppath}.context"), "expected string"))?;
            let tokens = tokenize_with_offsets(context);
            let qas = field(para, "qas", &ppath)?
                .as_array()
                .ok_or_else(|| schema(&format!("{ppath}.qas"), "expected array"))?;
            for (qi, qa) in qas.iter().enumerate() {
                let qpath = format!("{ppath}.qas[{qi}]");
                stats.total_qas += 1;
                if let Some(ex) = parse_qa(qa, &qpath, context, &tokens, max_passage_len, &mut stats)? {
                    ex.validate()?;
                    examples.push(ex);
                }
            }
        }
    }
    Ok((examples, stats))
}

fn parse_qa(
    qa: &Value,
    qpath: &str,
    context: &str,
    tokens: &[super::tokenizer::Token],
    max_passage_len: usize,
    stats: &mut SquadParseStats,
) -> Result<Option<MrcExample>, DataError> {
    let qid = field(qa, "id", qpath)?
        .as_str()
        .ok_or_else(|| schema(&format!("{qpath}.id"), "expected string"))?
        .to_string();
    let question = field(qa, "question", &qid)?
        .as_str()
        .ok_or_else(|| schema(&qid, "question: expected string"))?;
    let is_impossible = field(qa, "is_impossible", &qid)?
        .as_bool()
        .ok_or_else(|| schema(&qid, "is_impossible: expected boolean"))?;
    let answers = field(qa, "answers", &qid)?
        .as_array()
        .ok_or_else(|| schema(&qid, "answers: expected array"))?;

    let question_tokens: Vec<String> =
        tokenize_with_offsets(question).into_iter().map(|t| t.text).collect();
    if question_tokens.is_empty() || tokens.is_empty() {
        return Err(schema(&qid, "empty question or context after tokenization"));
    }

    let cap = max_passage_len.min(tokens.len());
    let passage_tokens: Vec<String> = tokens[..cap].iter().map(|t| t.text.clone()).collect();

    let mut gold_answer_texts = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        let text = field(a, "text", &format!("{qid}.answers[{i}]"))?
            .as_str()
            .ok_or_else(|| schema(&qid, "answers[].text: expected string"))?;
        gold_answer_texts.push(text.to_string());
    }

    if is_impossible {
        return Ok(Some(MrcExample {
            qid,
            passage_tokens,
            question_tokens,
            answer_start_token: None,
            answer_end_token: None,
            is_impossible: true,
            raw_context: context.to_string(),
            raw_answer_text: String::new(),
            gold_answer_texts,
        }));
    }

    // First answer entry supplies the training target.
    let first = answers
        .first()
        .ok_or_else(|| schema(&qid, "answerable qa with empty answers array"))?;
    let answer_text = field(first, "text", &qid)?
        .as_str()
        .ok_or_else(|| schema(&qid, "answers[0].text: expected string"))?;
    let answer_start = field(first, "answer_start", &qid)?
        .as_u64()
        .ok_or_else(|| schema(&qid, "answers[0].answer_start: expected integer"))?
        as usize;
    let answer_end = answer_start + answer_text.chars().count();

    let start_tok = tokens.iter().position(|t| t.char_start == answer_start);
    let end_tok = tokens.iter().position(|t| t.char_end == answer_end);
    let (Some(s), Some(e)) = (start_tok, end_tok) else {
        stats.dropped_unalignable += 1;
        return Ok(None);
    };
    if s > e {
        stats.dropped_unalignable += 1;
        return Ok(None);
    }

    if e >= cap {
        // Span truncated away; keep the passage, mark unanswerable.
        stats.truncated_to_impossible += 1;
        return Ok(Some(MrcExample {
            qid,
            passage_tokens,
            question_tokens,
            answer_start_token: None,
            answer_end_token: None,
            is_impossible: true,
            raw_context: context.to_string(),
            raw_answer_text: String::new(),
            gold_answer_texts,
        }));
    }

    Ok(Some(MrcExample {
        qid,
        passage_tokens,
        question_tokens,
        answer_start_token: Some(s),
        answer_end_token: Some(e),
        is_impossible: false,
        raw_context: context.to_string(),
        raw_answer_text: answer_text.to_string(),
        gold_answer_texts,
    }))
}

/// Question-coverage view for prediction: every qa in the file becomes one
/// example regardless of answer alignment. Target fields are left unset
/// (no span, marked impossible); only the token inputs and gold strings are
/// meaningful. Use [`parse_squad`] for training and evaluation views.
pub fn parse_squad_questions(
    path: &Path,
    max_passage_len: usize,
) -> Result<Vec<MrcExample>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let root: Value = serde_json::from_str(&text).map_err(|e| DataError::JsonSyntax {
        path: path.display().to_string(),
        offset: byte_offset(&text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
    })?;
    let mut out = Vec::new();
    let data = field(&root, "data", "$")?
        .as_array()
        .ok_or_else(|| schema("$.data", "expected array"))?;
    for (ai, article) in data.iter().enumerate() {
        let apath = format!("$.data[{ai}]");
        let paragraphs = field(article, "paragraphs", &apath)?
            .as_array()
            .ok_or_else(|| schema(&format!("{apath}.paragraphs"), "expected array"))?;
        for (pi, para) in paragraphs.iter().enumerate() {
            let ppath = format!("{apath}.paragraphs[{pi}]");
            let context = field(para, "context", &ppath)?
                .as_str()
                .ok_or_else(|| schema(&format!("{ppath}.context"), "expected string"))?;
            let tokens = tokenize_with_offsets(context);
            let cap = max_passage_len.min(tokens.len());
            let passage_tokens: Vec<String> = tokens[..cap].iter().map(|t| t.text.clone()).collect();
            let qas = field(para, "qas", &ppath)?
                .as_array()
                .ok_or_else(|| schema(&format!("{ppath}.qas"), "expected array"))?;
            for (qi, qa) in qas.iter().enumerate() {
                let qpath = format!("{ppath}.qas[{qi}]");
                let qid = field(qa, "id", &qpath)?
                    .as_str()
                    .ok_or_else(|| schema(&format!("{qpath}.id"), "expected string"))?
                    .to_string();
                let question = field(qa, "question", &qid)?
                    .as_str()
                    .ok_or_else(|| schema(&qid, "question: expected string"))?;
                let question_tokens: Vec<String> =
                    tokenize_with_offsets(question).into_iter().map(|t| t.text).collect();
                out.push(MrcExample {
                    qid,
                    passage_tokens: passage_tokens.clone(),
                    question_tokens,
                    answer_start_token: None,
                    answer_end_token: None,
                    is_impossible: true,
                    raw_context: context.to_string(),
                    raw_answer_text: String::new(),
                    gold_answer_texts: vec![],
                });
            }
        }
    }
    Ok(out)
}

fn field<'v>(v: &'v Value, name: &str, at: &str) -> Result<&'v Value, DataError> {
    v.get(name).ok_or_else(|| schema(at, &format!("missing required field \"{name}\"")))
}

fn schema(at: &str, message: &str) -> DataError {
    DataError::Schema { at: at.to_string(), message: message.to_string() }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    offset
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_squad(json: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(json.as_bytes()).unwrap();
        f
    }

    fn squad_json(qas: &str, context: &str) -> String {
        format!(
            r#"{{"version":"v2.0","data":[{{"title":"t","paragraphs":[{{"context":"{context}","qas":[{qas}]}}]}}]}}"#
        )
    }

    #[test]
    fn aligns_char_span_to_tokens() {
        let json = squad_json(
            r#"{"id":"q1","question":"Which game?","is_impossible":false,"answers":[{"text":"Super Bowl 50","answer_start":0}]}"#,
            "Super Bowl 50 was a game",
        );
        let f = write_squad(&json);
        let (exs, stats) = parse_squad(f.path(), 400).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].answer_start_token, Some(0));
        assert_eq!(exs[0].answer_end_token, Some(2));
        assert_eq!(stats.dropped_unalignable, 0);
        assert_eq!(exs[0].span_text(), "Super Bowl 50");
    }

    #[test]
    fn impossible_qa_has_no_span() {
        let json = squad_json(
            r#"{"id":"q2","question":"Nothing?","is_impossible":true,"answers":[]}"#,
            "Some context here",
        );
        let f = write_squad(&json);
        let (exs, _) = parse_squad(f.path(), 400).unwrap();
        assert!(exs[0].is_impossible);
        assert_eq!(exs[0].answer_start_token, None);
        assert_eq!(exs[0].answer_end_token, None);
    }

    #[test]
    fn unalignable_answer_dropped_and_counted() {
        // answer_start=2 points inside "Super" with no token boundary there
        let json = squad_json(
            r#"{"id":"q3","question":"Which?","is_impossible":false,"answers":[{"text":"per","answer_start":2}]}"#,
            "Super Bowl 50",
        );
        let f = write_squad(&json);
        let (exs, stats) = parse_squad(f.path(), 400).unwrap();
        assert!(exs.is_empty());
        assert_eq!(stats.dropped_unalignable, 1);
        assert_eq!(stats.total_qas, 1);
    }

    #[test]
    fn malformed_json_reports_offset() {
        let f = write_squad("{\"data\": [");
        let err = parse_squad(f.path(), 400).unwrap_err();
        match err {
            DataError::JsonSyntax { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_field_names_path() {
        let json = squad_json(r#"{"id":"q4","is_impossible":false,"answers":[]}"#, "ctx words");
        let f = write_squad(&json);
        let err = parse_squad(f.path(), 400).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("question"), "got: {msg}");
        assert!(msg.contains("q4"), "got: {msg}");
    }

    #[test]
    fn long_passage_truncated_span_becomes_impossible() {
        let context = (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let start = context.find("w25").unwrap(); // char == byte here (ascii)
        let json = squad_json(
            &format!(
                r#"{{"id":"q5","question":"Where?","is_impossible":false,"answers":[{{"text":"w25","answer_start":{start}}}]}}"#
            ),
            &context,
        );
        let f = write_squad(&json);
        let (exs, stats) = parse_squad(f.path(), 10).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].passage_tokens.len(), 10);
        assert!(exs[0].is_impossible);
        assert_eq!(stats.truncated_to_impossible, 1);
    }

    #[test]
    fn gold_answers_all_kept_first_is_target() {
        let json = squad_json(
            r#"{"id":"q6","question":"Who won?","is_impossible":false,"answers":[{"text":"Denver Broncos","answer_start":0},{"text":"Broncos","answer_start":7}]}"#,
            "Denver Broncos won",
        );
        let f = write_squad(&json);
        let (exs, _) = parse_squad(f.path(), 400).unwrap();
        assert_eq!(exs[0].raw_answer_text, "Denver Broncos");
        assert_eq!(exs[0].gold_answer_texts, vec!["Denver Broncos", "Broncos"]);
        assert_eq!(exs[0].answer_start_token, Some(0));
        assert_eq!(exs[0].answer_end_token, Some(1));
    }
}
