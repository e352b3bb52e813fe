//! Whitespace tokenizer and vocabulary with the reserved special tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const ENT: &str = "[ENT]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const ENT_ID: usize = 4;

const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, ENT];
const HEADER_PREFIX: &str = "#vocab lowercase=";

/// Token → id map. Reserved tokens occupy ids `0..5`; corpus tokens follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    lowercase: bool,
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn empty(lowercase: bool) -> Self {
        let mut ids = HashMap::new();
        for (i, t) in RESERVED.iter().enumerate() {
            ids.insert((*t).to_owned(), i);
        }
        Self {
            tokens: Vec::new(),
            ids,
            lowercase,
        }
    }

    pub fn len(&self) -> usize {
        RESERVED.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    fn normalize<'a>(&self, token: &'a str) -> std::borrow::Cow<'a, str> {
        if self.lowercase && !RESERVED.contains(&token) {
            token.to_lowercase().into()
        } else {
            token.into()
        }
    }

    fn push(&mut self, token: String) {
        if !self.ids.contains_key(&token) {
            self.ids.insert(token.clone(), self.len());
            self.tokens.push(token);
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(self.normalize(token).as_ref()).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED.len() {
            Some(RESERVED[id])
        } else {
            self.tokens.get(id - RESERVED.len()).map(String::as_str)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("{HEADER_PREFIX}{}\n", self.lowercase);
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let lowercase = match header.strip_prefix(HEADER_PREFIX) {
            Some("true") => true,
            Some("false") => false,
            _ => {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    message: format!("expected `{HEADER_PREFIX}<bool>` header"),
                })
            }
        };
        let mut vocab = Self::empty(lowercase);
        for (i, line) in lines.enumerate() {
            if line.is_empty() || vocab.ids.contains_key(line) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 2,
                    message: format!("empty or duplicate token {line:?}"),
                });
            }
            vocab.push(line.to_owned());
        }
        Ok(vocab)
    }
}

/// Builds a vocabulary from whitespace tokens with frequency ≥ `min_count`,
/// ordered by descending frequency and then lexicographically.
pub fn build_vocab<'a, I>(corpus: I, min_count: usize, lowercase: bool) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if min_count == 0 {
        return Err(Error::Contract("min_count must be at least 1".into()));
    }
    let mut vocab = Vocab::empty(lowercase);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text) {
            let tok = vocab.normalize(&tok).into_owned();
            if !RESERVED.contains(&tok.as_str()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (tok, _) in ranked {
        vocab.push(tok);
    }
    Ok(vocab)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id(t.as_ref())).collect()
}

/// Joins `tokens[start..=end]` with single spaces.
pub fn decode_span<S: AsRef<str>>(tokens: &[S], start: usize, end: usize) -> Result<String> {
    if start > end || end >= tokens.len() {
        return Err(Error::Index(format!(
            "span ({start}, {end}) over {} tokens",
            tokens.len()
        )));
    }
    Ok(tokens[start..=end]
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn min_count_controls_membership() {
        let v = build_vocab(["a a b"], 1, false).unwrap();
        assert_ne!(v.id("a"), UNK_ID);
        assert_ne!(v.id("b"), UNK_ID);
        assert_eq!(v.id("a"), 5, "most frequent first");

        let v = build_vocab(["a a b"], 2, false).unwrap();
        assert_eq!(encode(&["b"], &v), vec![UNK_ID]);
        assert!(build_vocab(["a"], 0, false).is_err());
    }

    #[test]
    fn lowercase_merges_case_variants() {
        let v = build_vocab(["Red red"], 1, true).unwrap();
        assert_eq!(v.id("Red"), v.id("red"));
        assert_eq!(v.len(), 6);
        let cased = build_vocab(["Red red"], 1, false).unwrap();
        assert_ne!(cased.id("Red"), cased.id("red"));
    }

    #[test]
    fn empty_corpus_has_reserved_only() {
        let v = build_vocab(std::iter::empty(), 1, false).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id(ENT), ENT_ID);
        assert_eq!(v.token(ENT_ID), Some(ENT));
    }

    #[test]
    fn tokenize_and_decode() {
        let toks = tokenize("red  cotton\tshirt");
        assert_eq!(toks, ["red", "cotton", "shirt"]);
        assert_eq!(decode_span(&toks, 1, 2).unwrap(), "cotton shirt");
        assert!(matches!(decode_span(&toks, 1, 3), Err(Error::Index(_))));
        assert!(decode_span(&toks, 2, 1).is_err());
    }

    #[test]
    fn unseen_token_is_unk() {
        let v = build_vocab(["a"], 1, false).unwrap();
        assert_eq!(encode(&["zzz-unseen"], &v), vec![1]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(["b a c a b"], 1, false).unwrap();
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.token(6), Some("b"));
        assert_eq!(v.token(7), Some("c"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(["the Red shirt for men"], 1, true).unwrap();
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#vocab lowercase=true\n"));
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_single_token(words in proptest::collection::vec("[a-z]{1,6}", 1..10)) {
            let text = words.join(" ");
            let toks = tokenize(&text);
            for i in 0..toks.len() {
                prop_assert_eq!(decode_span(&toks, i, i).unwrap(), toks[i].clone());
            }
            let v = build_vocab([text.as_str()], 1, false).unwrap();
            prop_assert_eq!(encode(&toks, &v), encode(&tokenize(&text), &v));
        }
    }
}
