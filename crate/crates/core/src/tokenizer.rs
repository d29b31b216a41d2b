//! Word-level tokenizer with a small reserved prefix.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Padding, also the decoder start token.
pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const COMMA_ID: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "</s>", "<unk>", ","];

/// Maps whitespace-separated words to ids. Commas are always split off as
/// their own token.
///
/// Ids below [`Tokenizer::base_size`] are natural words (plus the reserved
/// prefix); ids at or above it are special tokens appended later, such as
/// pseudo label descriptors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    base_size: usize,
}

impl Tokenizer {
    /// Builds a vocabulary from natural words followed by special tokens.
    /// Duplicates are ignored; words may not contain whitespace or commas.
    pub fn new<W, S>(words: W, specials: S) -> Result<Self>
    where
        W: IntoIterator,
        W::Item: AsRef<str>,
        S: IntoIterator,
        S::Item: AsRef<str>,
    {
        let mut tok = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            base_size: 0,
        };
        for r in RESERVED {
            tok.insert(r);
        }
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.contains(char::is_whitespace) || w.contains(',') {
                return Err(Error::Data(format!("invalid vocabulary word {w:?}")));
            }
            tok.insert(w);
        }
        tok.base_size = tok.tokens.len();
        for s in specials {
            let s = s.as_ref();
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains(',') {
                return Err(Error::Data(format!("invalid special token {s:?}")));
            }
            if tok.index.contains_key(s) {
                return Err(Error::Data(format!("special token {s:?} collides with a word")));
            }
            tok.insert(s);
        }
        Ok(tok)
    }

    /// Vocabulary collected from raw texts, in first-seen order.
    pub fn fit<'a, I: IntoIterator<Item = &'a str>>(texts: I, specials: &[String]) -> Result<Self> {
        let mut words = Vec::new();
        for text in texts {
            words.extend(split_words(text).into_iter().filter(|w| *w != ","));
        }
        Self::new(words, specials)
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len() as u32);
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode): stops at the first end token,
    /// skips padding and glues commas to the preceding word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS_ID => break,
                PAD_ID => continue,
                COMMA_ID => out.push(','),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(self.token(id).unwrap_or("<unk>"));
                }
            }
        }
        out
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "#base_size\t{}", self.base_size)?;
        for t in &self.tokens[RESERVED.len()..] {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let base_size: usize = header
            .strip_prefix("#base_size\t")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "expected #base_size header".into(),
            })?;
        let rest: Vec<String> = lines.collect::<std::io::Result<_>>()?;
        let split = base_size.checked_sub(RESERVED.len()).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("base size {base_size} below reserved prefix"),
        })?;
        if split > rest.len() {
            return Err(Error::Parse {
                line: 1,
                message: format!("base size {base_size} exceeds token count"),
            });
        }
        Self::new(&rest[..split], &rest[split..])
    }
}

fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while let Some(pos) = rest.find(',') {
            if pos > 0 {
                out.push(&rest[..pos]);
            }
            out.push(",");
            rest = &rest[pos + 1..];
        }
        if !rest.is_empty() {
            out.push(rest);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(["EU", "finance", "domestic", "violence"], ["<label_1>"]).unwrap()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let t = tok();
        assert_eq!(t.id("<pad>"), Some(PAD_ID));
        assert_eq!(t.id("</s>"), Some(EOS_ID));
        assert_eq!(t.id("<unk>"), Some(UNK_ID));
        assert_eq!(t.id(","), Some(COMMA_ID));
        assert_eq!(t.base_size(), 8);
        assert_eq!(t.id("<label_1>"), Some(8));
    }

    #[test]
    fn commas_split_and_rejoin() {
        let t = tok();
        let ids = t.encode("EU, finance,domestic violence");
        assert_eq!(ids, vec![4, COMMA_ID, 5, COMMA_ID, 6, 7]);
        assert_eq!(t.decode(&ids), "EU, finance, domestic violence");
        assert_eq!(t.encode("accommodation"), vec![UNK_ID]);
        assert_eq!(t.decode(&[4, EOS_ID, 5]), "EU");
    }

    #[test]
    fn special_collision_rejected() {
        assert!(Tokenizer::new(["a"], ["a"]).is_err());
        assert!(Tokenizer::new(["a b"], Vec::<String>::new()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let t = tok();
        t.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), t);
    }
}
