use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";

/// Closed word list; the line number in the vocabulary file is the id and
/// id 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from words (deduplicated, sorted, pad first).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut w: Vec<String> = words.into_iter().map(Into::into).filter(|w| w != PAD).collect();
        w.sort();
        w.dedup();
        let mut list = vec![PAD.to_string()];
        list.extend(w);
        Self::from_list(list).expect("constructed vocabulary is well formed")
    }

    fn from_list(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD) {
            return Err(Error::Vocab(format!("line 0 must be {PAD:?}")));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("line {i}: invalid token {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("line {i}: duplicate token {w:?}")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenisation padded with id 0 to `max_len`.
    pub fn encode(&self, caption: &str, max_len: usize) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(max_len);
        for w in caption.split_whitespace() {
            let id = self
                .id(w)
                .ok_or_else(|| Error::Vocab(format!("word {w:?} is not in the vocabulary")))?;
            ids.push(id);
        }
        if ids.is_empty() {
            return Err(Error::Vocab("empty caption".into()));
        }
        if ids.len() > max_len {
            return Err(Error::Vocab(format!(
                "caption has {} tokens, max_len is {max_len}: {caption:?}",
                ids.len()
            )));
        }
        ids.resize(max_len, 0);
        Ok(ids)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_list(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
