use std::collections::HashMap;

use crate::corpus::StyleSpec;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PLACEHOLDER: &str = "*";
pub const MAX_VOCAB: usize = 64;
pub const DEFAULT_VOCAB_SIZE: usize = 32;

const BASE_WORDS: [&str; 8] = ["a", "melody", "music", "sound", "of", "the", "with", "and"];
const FILLER_WORDS: [&str; 20] = [
    "piano", "guitar", "flute", "drum", "violin", "synth", "wind", "water", "bird", "voice", "choir", "brass",
    "string", "harp", "marimba", "cello", "horn", "bass", "wave", "noise",
];

/// Token list with reserved special and placeholder entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, limit is {MAX_VOCAB}",
                tokens.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t}")));
            }
        }
        for special in [PAD, BOS, EOS, PLACEHOLDER] {
            if !index.contains_key(special) {
                return Err(Error::Config(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials, template words, every style name, then filler words up to
    /// 32 entries.
    pub fn for_styles(styles: &[StyleSpec]) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, PLACEHOLDER]
            .iter()
            .chain(BASE_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        for s in styles {
            if !tokens.contains(&s.name) {
                tokens.push(s.name.clone());
            }
        }
        for w in FILLER_WORDS {
            if tokens.len() >= DEFAULT_VOCAB_SIZE {
                break;
            }
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn placeholder(&self) -> usize {
        self.index[PLACEHOLDER]
    }

    /// `BOS words... EOS PAD...`, exactly `max_len` ids.
    pub fn tokenize(&self, caption: &str, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = vec![self.index[BOS]];
        for w in caption.split_whitespace() {
            let id = self
                .id(w)
                .ok_or_else(|| Error::Tokenize(format!("unknown token {w:?} in caption {caption:?}")))?;
            ids.push(id);
        }
        ids.push(self.index[EOS]);
        if ids.len() > max_len {
            return Err(Error::Tokenize(format!(
                "caption {caption:?} needs {} tokens, limit is {max_len}",
                ids.len()
            )));
        }
        ids.resize(max_len, self.pad());
        Ok(ids)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_styles;

    #[test]
    fn default_vocabulary_layout() {
        let v = Vocabulary::for_styles(&default_styles()).unwrap();
        assert_eq!(v.len(), 32);
        assert_eq!(v.token(v.placeholder()), Some("*"));
        for s in default_styles() {
            assert!(v.id(&s.name).is_some());
        }
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn tokenization() {
        let v = Vocabulary::for_styles(&default_styles()).unwrap();
        let ids = v.tokenize("a bell melody", 8).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(v.token(ids[0]), Some(BOS));
        assert_eq!(v.token(ids[4]), Some(EOS));
        assert_eq!(v.token(ids[7]), Some(PAD));
        let empty = v.tokenize("", 8).unwrap();
        assert_eq!(v.token(empty[1]), Some(EOS));
        assert!(matches!(v.tokenize("a kazoo melody", 8), Err(Error::Tokenize(_))));
        assert!(v.tokenize("a a a a a a a", 8).is_err());
    }

    #[test]
    fn rejects_malformed_vocabularies() {
        let base: Vec<String> = [PAD, BOS, EOS].iter().map(|s| s.to_string()).collect();
        assert!(Vocabulary::from_tokens(base.clone()).is_err());
        let mut dup = base.clone();
        dup.push("*".into());
        dup.push("*".into());
        assert!(Vocabulary::from_tokens(dup).is_err());
        let mut big = base;
        big.push("*".into());
        big.extend((0..61).map(|i| format!("w{i}")));
        assert!(Vocabulary::from_tokens(big).is_err());
    }
}
