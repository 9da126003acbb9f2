//! Whitespace tokenizer with per-character fallback, behind the interface a
//! BPE tokenizer would also satisfy. Lowercases everything; vocabulary
//! learning stays orthogonal to the model under test.

use crate::docdata::SegmentBox;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;
pub const UNK: usize = 5;

const SPECIALS: [&str; 6] = ["<pad>", "<cls>", "<sos>", "<eos>", "<mask>", "<unk>"];

/// Maximum token sequence position; positions are 1-based and capped here.
pub const MAX_SEQID: usize = 512;

/// One token ready for embedding: vocab id, the enclosing line's box, and
/// the 1-based position within its line (0 reserved for query tokens).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenInstance {
    pub id: usize,
    pub rect: SegmentBox,
    pub seqid: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a deterministic vocabulary: specials first, then corpus word
    /// tokens ordered by (frequency desc, lexicographic), then any leftover
    /// single characters (lexicographic) so character fallback stays total.
    pub fn build(corpus: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut chars: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for text in corpus {
            for word in text.as_ref().to_lowercase().split_whitespace() {
                *freq.entry(word.to_string()).or_default() += 1;
                for ch in word.chars() {
                    chars.insert(ch.to_string());
                }
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut vocab = Vocab::default();
        for s in SPECIALS {
            vocab.push(s.to_string());
        }
        for (w, _) in words {
            vocab.push(w);
        }
        for c in chars {
            if !vocab.token_to_id.contains_key(&c) {
                vocab.push(c);
            }
        }
        vocab
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Index(format!("token id {id} out of range 0..{}", self.len())))
    }

    /// Lowercase + whitespace split; out-of-vocab words fall back to
    /// per-character tokens; unknown characters become UNK. `seqid` is the
    /// 1-based position in the resulting token list, capped at 512. All
    /// tokens share the line's box.
    pub fn tokenize_line(&self, text: &str, rect: SegmentBox) -> Vec<TokenInstance> {
        let mut ids = Vec::new();
        for word in text.to_lowercase().split_whitespace() {
            if let Some(id) = self.id(word) {
                ids.push(id);
            } else {
                for ch in word.chars() {
                    ids.push(self.id(&ch.to_string()).unwrap_or(UNK));
                }
            }
        }
        ids.into_iter()
            .enumerate()
            .map(|(i, id)| TokenInstance {
                id,
                rect,
                seqid: (i + 1).min(MAX_SEQID),
            })
            .collect()
    }

    /// Joins tokens back into text. EOS and PAD are stripped. Maximal runs
    /// of two or more single-character tokens are joined without spaces,
    /// undoing character fallback.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut tokens = Vec::new();
        for &id in ids {
            if id == EOS || id == PAD {
                continue;
            }
            tokens.push(self.token(id)?.to_string());
        }
        let mut out = String::new();
        let mut i = 0;
        while i < tokens.len() {
            let mut j = i;
            while j < tokens.len() && tokens[j].chars().count() == 1 {
                j += 1;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            if j - i >= 2 {
                for t in &tokens[i..j] {
                    out.push_str(t);
                }
                i = j;
            } else {
                out.push_str(&tokens[i]);
                i += 1;
            }
        }
        Ok(out)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.id_to_token.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        let mut vocab = Vocab::default();
        for line in content.lines() {
            vocab.push(line.to_string());
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if vocab.token(i)? != *s {
                return Err(Error::Validation(format!(
                    "vocab file {}: id {i} must be {s}",
                    path.display()
                )));
            }
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb() -> SegmentBox {
        SegmentBox::new(10, 10, 20, 20).unwrap()
    }

    #[test]
    fn build_orders_by_frequency_then_lex() {
        let v = Vocab::build(["a b", "a"]);
        assert_eq!(v.id("a"), Some(6));
        assert_eq!(v.id("b"), Some(7));
    }

    #[test]
    fn empty_strings_contribute_nothing() {
        let v = Vocab::build(["", "  "]);
        assert_eq!(v.len(), SPECIALS.len());
    }

    #[test]
    fn rebuild_is_identical() {
        let corpus = ["total 12", "amount 99", "total due"];
        let a = Vocab::build(corpus);
        let b = Vocab::build(corpus);
        assert_eq!(a.id_to_token, b.id_to_token);
    }

    #[test]
    fn tokenize_basic() {
        let v = Vocab::build(["total 12"]);
        let toks = v.tokenize_line("Total 12", nb());
        assert_eq!(toks.len(), 2);
        assert_eq!(toks[0].seqid, 1);
        assert_eq!(toks[1].seqid, 2);
        assert!(toks.iter().all(|t| t.rect == nb()));
        assert_eq!(v.token(toks[0].id).unwrap(), "total");
    }

    #[test]
    fn char_fallback() {
        // "xy" absent as a word; chars x and y present via other words
        let v = Vocab::build(["x1 y2"]);
        let toks = v.tokenize_line("xy", nb());
        assert_eq!(toks.len(), 2);
        assert_eq!(v.token(toks[0].id).unwrap(), "x");
        assert_eq!(v.token(toks[1].id).unwrap(), "y");
        assert_eq!(toks[0].seqid, 1);
        assert_eq!(toks[1].seqid, 2);
    }

    #[test]
    fn unknown_char_becomes_unk() {
        let v = Vocab::build(["abc"]);
        let toks = v.tokenize_line("zzz", nb());
        assert!(toks.iter().all(|t| t.id == UNK));
    }

    #[test]
    fn detokenize_round_trip() {
        let v = Vocab::build(["total 12 due"]);
        let toks = v.tokenize_line("Total  12", nb());
        let ids: Vec<usize> = toks.iter().map(|t| t.id).collect();
        assert_eq!(v.detokenize(&ids).unwrap(), "total 12");
    }

    #[test]
    fn detokenize_edge_cases() {
        let v = Vocab::build(["total"]);
        assert_eq!(v.detokenize(&[]).unwrap(), "");
        assert_eq!(v.detokenize(&[EOS]).unwrap(), "");
        assert!(v.detokenize(&[9999]).is_err());
    }

    #[test]
    fn detokenize_rejoins_char_runs() {
        let v = Vocab::build(["x1 y2"]);
        let ids: Vec<usize> = v.tokenize_line("xy", nb()).iter().map(|t| t.id).collect();
        assert_eq!(v.detokenize(&ids).unwrap(), "xy");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["total 12 due"]);
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v.id_to_token, loaded.id_to_token);
    }
}
