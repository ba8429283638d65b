use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
/// Ends an assistant turn.
pub const EOS: u32 = 1;
/// Dedicated silence label supervised on frame positions.
pub const STREAM_EOS: u32 = 2;
pub const USER: u32 = 3;
pub const ASSISTANT: u32 = 4;
/// Placeholder id reported for frame slots; never embedded.
pub const FRAME: u32 = 5;

const SPECIALS: [&str; 6] = ["<pad>", "<eos>", "<stream_eos>", "<user>", "<assistant>", "<frame>"];

/// Word-level vocabulary: the six special ids above, then words in sorted
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    words: Vec<String>,
    shared_stream_eos: bool,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    #[serde(default)]
    shared_stream_eos: bool,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::with_options(f.words, f.shared_stream_eos)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { words: v.words, shared_stream_eos: v.shared_stream_eos }
    }
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_options(words, false)
    }

    /// With `shared_stream_eos`, silence is supervised on the turn-ending EOS
    /// id instead of the dedicated one.
    pub fn with_options<I, S>(words: I, shared_stream_eos: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = words.into_iter().map(Into::into).collect();
        words.sort();
        words.dedup();
        words.retain(|w| !SPECIALS.contains(&w.as_str()));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), (i + SPECIALS.len()) as u32)).collect();
        Self { words, shared_stream_eos, index }
    }

    pub fn len(&self) -> usize {
        SPECIALS.len() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn stream_eos(&self) -> u32 {
        if self.shared_stream_eos {
            EOS
        } else {
            STREAM_EOS
        }
    }

    pub fn shared_stream_eos(&self) -> bool {
        self.shared_stream_eos
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let i = id as usize;
        if i < SPECIALS.len() {
            Some(SPECIALS[i])
        } else {
            self.words.get(i - SPECIALS.len()).map(String::as_str)
        }
    }

    /// Joins word tokens with spaces; special tokens are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= SPECIALS.len())
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
