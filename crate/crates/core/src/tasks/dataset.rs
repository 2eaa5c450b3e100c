use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sequence::{Sequence, Vocabulary};

/// Clean sequences of a common length.
///
/// On disk: UTF-8 text, one sequence per line as space-separated token ids;
/// lines starting with `#` and blank lines are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    vocab: Vocabulary,
    seqs: Vec<Sequence>,
    source: Option<PathBuf>,
}

impl TokenDataset {
    pub fn new(seqs: Vec<Sequence>, vocab: Vocabulary) -> Result<Self> {
        if let Some(first) = seqs.first() {
            for s in &seqs {
                if s.len() != first.len() {
                    return Err(Error::InvalidInput(format!(
                        "dataset mixes lengths {} and {}",
                        first.len(),
                        s.len()
                    )));
                }
                s.ensure_clean(vocab)?;
            }
        }
        Ok(Self { vocab, seqs, source: None })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.seqs
    }

    pub fn into_sequences(self) -> Vec<Sequence> {
        self.seqs
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Sequence length, `None` when empty.
    pub fn seq_len(&self) -> Option<usize> {
        self.seqs.first().map(Sequence::len)
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Parses the text format. Line numbers in errors are 1-based.
    pub fn parse(text: &str, vocab: Vocabulary) -> Result<Self> {
        let mut seqs: Vec<Sequence> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let tokens = body
                .split_whitespace()
                .map(|w| {
                    let id: u32 = w.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("{w:?} is not a token id"),
                    })?;
                    if id as usize >= vocab.size() {
                        return Err(Error::Parse {
                            line,
                            msg: format!("token {id} out of range for vocabulary size {}", vocab.size()),
                        });
                    }
                    if vocab.is_mask(id) {
                        return Err(Error::Parse {
                            line,
                            msg: format!("token {id} is the mask id; datasets hold clean sequences"),
                        });
                    }
                    Ok(id)
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = seqs.first() {
                if tokens.len() != first.len() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("expected {} tokens, found {}", first.len(), tokens.len()),
                    });
                }
            }
            seqs.push(Sequence::from_raw(tokens));
        }
        Ok(Self { vocab, seqs, source: None })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# {} sequences, length {}, vocabulary {}\n",
            self.len(),
            self.seq_len().unwrap_or(0),
            self.vocab.size()
        );
        for s in &self.seqs {
            let line: Vec<String> = s.tokens().iter().map(u32::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: Vocabulary) -> Result<TokenDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = TokenDataset::parse(&text, vocab)?;
    ds.source = Some(path.to_path_buf());
    Ok(ds)
}

pub fn save_dataset(ds: &TokenDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ds.to_text()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v129() -> Vocabulary {
        Vocabulary::new(129).unwrap()
    }

    #[test]
    fn parses_the_format() {
        let ds = TokenDataset::parse("# header\n5 0 127\n\n  1 2 3  \n", v129()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sequences()[0].tokens(), &[5, 0, 127]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = |text: &str| match TokenDataset::parse(text, v129()) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err("5 129"), 1);
        assert_eq!(err("# c\n1 2\n1 2 3\n"), 3);
        assert_eq!(err("1 x\n"), 1);
        assert_eq!(err("0 128\n"), 1);
    }

    #[test]
    fn round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        let v = Vocabulary::new(5).unwrap();
        let ds = TokenDataset::new(vec![Sequence::clean(vec![0, 3], v).unwrap(), Sequence::clean(vec![2, 1], v).unwrap()], v).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path, v).unwrap();
        assert_eq!(back.sequences(), ds.sequences());
        assert_eq!(back.source(), Some(path.as_path()));
        assert!(matches!(load_dataset(dir.path().join("missing"), v), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn text_round_trip(rows in prop::collection::vec(prop::collection::vec(0u32..128, 3), 0..20)) {
            let v = v129();
            let seqs: Vec<Sequence> = rows.into_iter().map(|r| Sequence::clean(r, v).unwrap()).collect();
            let ds = TokenDataset::new(seqs, v).unwrap();
            let back = TokenDataset::parse(&ds.to_text(), v).unwrap();
            prop_assert_eq!(back.sequences(), ds.sequences());
        }
    }
}
