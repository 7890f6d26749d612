//! SNIPS three-file split parsing (seq.in / seq.out / label).

use std::fmt;
use std::path::Path;

use super::{DataError, SluExample};

/// Dataset partition names used by the on-disk layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnipsSplit {
    Train,
    Valid,
    Test,
}

impl SnipsSplit {
    pub fn dir_name(&self) -> &'static str {
        match self {
            SnipsSplit::Train => "train",
            SnipsSplit::Valid => "valid",
            SnipsSplit::Test => "test",
        }
    }
}

impl fmt::Display for SnipsSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    // Tolerate CRLF and a trailing newline.
    Ok(text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .skip_while(|l| l.is_empty())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect())
}

/// Parses one split directory containing parallel `seq.in`, `seq.out` and
/// `label` files into validated examples.
pub fn parse_snips(dir: &Path, split: SnipsSplit) -> Result<Vec<SluExample>, DataError> {
    let split_dir = dir.join(split.dir_name());
    let seq_in_path = split_dir.join("seq.in");
    let seq_out_path = split_dir.join("seq.out");
    let label_path = split_dir.join("label");

    let seq_in = read_lines(&seq_in_path)?;
    let seq_out = read_lines(&seq_out_path)?;
    let labels = read_lines(&label_path)?;

    if seq_in.len() != seq_out.len() || seq_in.len() != labels.len() {
        return Err(DataError::LineCount(format!(
            "{} has {} lines, {} has {}, {} has {}",
            seq_in_path.display(),
            seq_in.len(),
            seq_out_path.display(),
            seq_out.len(),
            label_path.display(),
            labels.len()
        )));
    }

    let mut examples = Vec::with_capacity(seq_in.len());
    for (i, ((utt, tags), label)) in seq_in.iter().zip(&seq_out).zip(&labels).enumerate() {
        let line = i + 1;
        let tokens: Vec<String> = utt.split_whitespace().map(|s| s.to_string()).collect();
        let slots: Vec<String> = tags.split_whitespace().map(|s| s.to_string()).collect();
        if tokens.is_empty() {
            return Err(DataError::Line {
                file: seq_in_path.display().to_string(),
                line,
                message: "empty utterance".into(),
            });
        }
        if tokens.len() != slots.len() {
            return Err(DataError::Line {
                file: seq_out_path.display().to_string(),
                line,
                message: format!("{} tokens but {} tags", tokens.len(), slots.len()),
            });
        }
        if let Err(pos) = super::validate_bio(&slots) {
            return Err(DataError::Line {
                file: seq_out_path.display().to_string(),
                line,
                message: format!("malformed BIO tag {:?} at position {}", slots[pos], pos + 1),
            });
        }
        examples.push(SluExample { tokens, intent: label.trim().to_string(), slots });
    }
    Ok(examples)
}

/// Serializes examples back to the three-file layout under `dir/<split>/`.
pub fn write_snips_split(
    dir: &Path,
    split: SnipsSplit,
    examples: &[SluExample],
) -> Result<(), DataError> {
    let split_dir = dir.join(split.dir_name());
    std::fs::create_dir_all(&split_dir).map_err(|source| DataError::Io {
        path: split_dir.display().to_string(),
        source,
    })?;
    let mut seq_in = String::new();
    let mut seq_out = String::new();
    let mut labels = String::new();
    for ex in examples {
        seq_in.push_str(&ex.tokens.join(" "));
        seq_in.push('\n');
        seq_out.push_str(&ex.slots.join(" "));
        seq_out.push('\n');
        labels.push_str(&ex.intent);
        labels.push('\n');
    }
    for (name, content) in [("seq.in", seq_in), ("seq.out", seq_out), ("label", labels)] {
        let p = split_dir.join(name);
        std::fs::write(&p, content).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_split(dir: &Path, seq_in: &str, seq_out: &str, label: &str) {
        let d = dir.join("train");
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join("seq.in"), seq_in).unwrap();
        std::fs::write(d.join("seq.out"), seq_out).unwrap();
        std::fs::write(d.join("label"), label).unwrap();
    }

    #[test]
    fn parses_aligned_triples() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "play some jazz\n", "O O B-genre\n", "PlayMusic\n");
        let exs = parse_snips(tmp.path(), SnipsSplit::Train).unwrap();
        assert_eq!(exs.len(), 1);
        assert_eq!(exs[0].tokens, vec!["play", "some", "jazz"]);
        assert_eq!(exs[0].intent, "PlayMusic");
        assert_eq!(exs[0].slots, vec!["O", "O", "B-genre"]);
    }

    #[test]
    fn bio_violation_names_line_and_position() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "a b\nplay rock\n", "O O\nO I-genre\n", "X\nY\n");
        let err = parse_snips(tmp.path(), SnipsSplit::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "got {msg}");
        assert!(msg.contains("position 2"), "got {msg}");
    }

    #[test]
    fn line_count_mismatch_names_files() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "a b\nc d\n", "O O\n", "X\nY\n");
        let err = parse_snips(tmp.path(), SnipsSplit::Train).unwrap_err();
        assert!(matches!(err, DataError::LineCount(_)));
        assert!(err.to_string().contains("seq.out"));
    }

    #[test]
    fn token_tag_mismatch_names_line() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "a b c\n", "O O\n", "X\n");
        let err = parse_snips(tmp.path(), SnipsSplit::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "got {msg}");
    }

    #[test]
    fn crlf_tolerated() {
        let tmp = tempfile::tempdir().unwrap();
        write_split(tmp.path(), "hi there\r\n", "O O\r\n", "Greet\r\n");
        let exs = parse_snips(tmp.path(), SnipsSplit::Train).unwrap();
        assert_eq!(exs[0].tokens, vec!["hi", "there"]);
        assert_eq!(exs[0].intent, "Greet");
    }

    #[test]
    fn roundtrip_write_then_parse() {
        let tmp = tempfile::tempdir().unwrap();
        let exs = vec![
            SluExample {
                tokens: vec!["book".into(), "a".into(), "table".into()],
                intent: "BookRestaurant".into(),
                slots: vec!["O".into(), "O".into(), "B-object".into()],
            },
            SluExample {
                tokens: vec!["weather".into()],
                intent: "GetWeather".into(),
                slots: vec!["O".into()],
            },
        ];
        write_snips_split(tmp.path(), SnipsSplit::Valid, &exs).unwrap();
        let back = parse_snips(tmp.path(), SnipsSplit::Valid).unwrap();
        assert_eq!(back, exs);
    }

    #[test]
    fn line_counts_scale() {
        // the standard-split line count used as a sanity fixture
        let n = 13084;
        let tmp = tempfile::tempdir().unwrap();
        let seq_in: String = (0..n).map(|i| format!("tok{} b\n", i % 97)).collect();
        let seq_out: String = (0..n).map(|_| "O B-x\n".to_string()).collect();
        let label: String = (0..n).map(|i| format!("intent{}\n", i % 7)).collect();
        write_split(tmp.path(), &seq_in, &seq_out, &label);
        let exs = parse_snips(tmp.path(), SnipsSplit::Train).unwrap();
        assert_eq!(exs.len(), 13084);
    }
}
