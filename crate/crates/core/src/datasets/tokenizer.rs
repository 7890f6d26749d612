//! Whitespace-plus-punctuation tokenizer with recorded character offsets.
//!
//! Offsets are Unicode scalar positions (not bytes), matching the
//! `answer_start` convention of the SQuAD JSON files.

/// A token plus its half-open character span in the source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

fn is_punct(c: char) -> bool {
    // Unicode general categories P*. ASCII fast path, then the common
    // non-ASCII punctuation blocks that occur in SQuAD contexts.
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    matches!(c,
        '\u{00A1}'..='\u{00BF}' if "¡§«¶·»¿".contains(c))
        || matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}')
        || matches!(c, '「' | '」' | '『' | '』' | '、' | '。' | '！' | '？' | '（' | '）'
            | '：' | '；' | '，' | '·' | '–' | '—' | '‘' | '’' | '“' | '”' | '…')
}

/// Splits on whitespace and breaks punctuation characters into their own
/// single-character tokens.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_start = 0usize;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(Token { text: std::mem::take(&mut cur), char_start: cur_start, char_end: i });
            }
        } else if is_punct(c) {
            if !cur.is_empty() {
                out.push(Token { text: std::mem::take(&mut cur), char_start: cur_start, char_end: i });
            }
            out.push(Token { text: c.to_string(), char_start: i, char_end: i + 1 });
        } else {
            if cur.is_empty() {
                cur_start = i;
            }
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        let end = text.chars().count();
        out.push(Token { text: cur, char_start: cur_start, char_end: end });
    }
    out
}

/// Token strings only.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_whitespace_and_punctuation() {
        let toks = tokenize("Super Bowl 50 was a game, right?");
        assert_eq!(
            toks,
            vec!["Super", "Bowl", "50", "was", "a", "game", ",", "right", "?"]
        );
    }

    #[test]
    fn offsets_cover_source_spans() {
        let text = "It cost $400, total.";
        for t in tokenize_with_offsets(text) {
            let chars: Vec<char> = text.chars().collect();
            let span: String = chars[t.char_start..t.char_end].iter().collect();
            assert_eq!(span, t.text);
        }
    }

    #[test]
    fn unicode_offsets_are_char_based() {
        let toks = tokenize_with_offsets("héllo wörld");
        assert_eq!(toks[1].char_start, 6);
        assert_eq!(toks[1].text, "wörld");
    }

    #[test]
    fn empty_and_space_only() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t\n").is_empty());
    }
}
