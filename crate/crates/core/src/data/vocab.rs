use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::ops::Deref;

use crate::error::{Error, Result};

const CONTENT_WORDS: [&str; 24] = [
    "apple", "river", "stone", "cloud", "green", "music", "table", "light", "north", "paper", "horse", "glass",
    "bread", "tiger", "smile", "train", "ocean", "house", "field", "chair", "dream", "flame", "honey", "storm",
];

const LOREM_WORDS: [&str; 16] = [
    "lorem",
    "ipsum",
    "dolor",
    "sit",
    "amet",
    "consectetur",
    "adipiscing",
    "elit",
    "sed",
    "do",
    "eiusmod",
    "tempor",
    "incididunt",
    "ut",
    "labore",
    "magna",
];

/// Word inventory shared by every head.
///
/// Token ids `0..content_len()` are content words and `content_len()..n_words()`
/// are lorem words. Test transcripts use content words only; adversarial
/// targets use lorem words only. Each
/// head reserves one extra index at `n_words()` for its own special symbol:
/// blank for CTC, eos for the decoder output and sos for the decoder input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    lorem_words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            words: CONTENT_WORDS.iter().map(|s| s.to_string()).collect(),
            lorem_words: LOREM_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Vocab {
    pub fn new(words: Vec<String>, lorem_words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::InvalidConfig("content vocabulary is empty".into()));
        }
        let mut all: Vec<&String> = words.iter().chain(&lorem_words).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(
                "vocabulary words must be unique and content/lorem lists disjoint".into(),
            ));
        }
        if all.iter().any(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(Error::InvalidConfig(
                "words must be non-empty and contain no whitespace".into(),
            ));
        }
        Ok(Vocab { words, lorem_words })
    }

    pub fn content_len(&self) -> usize {
        self.words.len()
    }

    pub fn lorem_len(&self) -> usize {
        self.lorem_words.len()
    }

    pub fn n_words(&self) -> usize {
        self.words.len() + self.lorem_words.len()
    }

    pub fn blank(&self) -> usize {
        self.n_words()
    }

    pub fn eos(&self) -> usize {
        self.n_words()
    }

    pub fn sos(&self) -> usize {
        self.n_words()
    }

    pub fn content_ids(&self) -> std::ops::Range<usize> {
        0..self.words.len()
    }

    pub fn lorem_ids(&self) -> std::ops::Range<usize> {
        self.words.len()..self.n_words()
    }

    pub fn is_content(&self, id: usize) -> bool {
        id < self.words.len()
    }

    pub fn is_lorem(&self, id: usize) -> bool {
        self.lorem_ids().contains(&id)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        if id < self.words.len() {
            Some(&self.words[id])
        } else {
            self.lorem_words.get(id - self.words.len()).map(String::as_str)
        }
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().chain(&self.lorem_words).position(|w| w == word)
    }

    /// Stable short digest of both word lists, used to tag persisted files.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        h.update(b"--\n");
        for w in &self.lorem_words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn render(&self, t: &Transcript) -> String {
        t.iter()
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(&self, text: &str) -> Result<Transcript> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Transcript)
    }
}

/// Sequence of word-token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transcript(pub Vec<usize>);

impl Deref for Transcript {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for Transcript {
    fn from(v: Vec<usize>) -> Self {
        Transcript(v)
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}
