//! Closed whole-word vocabulary of the synthetic caption language.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const DIRECTIONS: [&str; 4] = ["left", "right", "up", "down"];
pub const MOTION_WORDS: [&str; 7] = ["moving", "standing", "still", "left", "right", "up", "down"];

/// Off-topic speech used to simulate weak ASR captions.
pub const CHATTER: [&str; 40] = [
    "hey", "guys", "welcome", "back", "to", "my", "channel", "today", "we", "are", "going", "make", "this", "so",
    "okay", "just", "little", "bit", "more", "now", "it", "is", "really", "good", "you", "can", "see", "here",
    "thanks", "for", "watching", "subscribe", "and", "the", "oven", "pink", "that", "if", "cooking", "video",
];

const CAPTION_WORDS: [&str; 6] = ["a", "an", "object", "moving", "standing", "still"];

/// Token ids of one caption, framed by begin and end markers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionTokens {
    ids: Vec<usize>,
}

impl CaptionTokens {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Inputs `w_1..w_{N-1}` for teacher forcing.
    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Next-token targets `w_2..w_N`.
    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }
}

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    size: usize,
}

impl Vocab {
    /// The standard vocabulary padded with reserved ids up to `size`.
    pub fn standard(size: usize) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let all = [BOS, EOS, UNK]
            .into_iter()
            .chain(CAPTION_WORDS)
            .chain(COLORS)
            .chain(SHAPES)
            .chain(DIRECTIONS)
            .chain(CHATTER);
        for w in all {
            if !index.contains_key(w) {
                index.insert(w.to_string(), words.len());
                words.push(w.to_string());
            }
        }
        if words.len() > size {
            return Err(Error::Config(format!(
                "vocabulary needs {} ids but vocab_size is {size}",
                words.len()
            )));
        }
        Ok(Self { words, index, size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<reserved>", String::as_str)
    }

    pub fn is_motion(&self, id: usize) -> bool {
        MOTION_WORDS.contains(&self.word(id))
    }

    /// Lowercased whitespace tokenization; unknown words map to `<unk>`.
    /// Fails if the framed caption would exceed `max_len` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<CaptionTokens> {
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if words.is_empty() {
            return Err(Error::Data("empty caption".into()));
        }
        if words.len() + 2 > max_len {
            return Err(Error::Data(format!(
                "caption has {} words, limit is {}",
                words.len(),
                max_len.saturating_sub(2)
            )));
        }
        let unk = self.index[UNK];
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(self.bos());
        ids.extend(words.iter().map(|w| self.index.get(w.as_str()).copied().unwrap_or(unk)));
        ids.push(self.eos());
        Ok(CaptionTokens { ids })
    }

    /// Validates raw ids against the framing and range invariants.
    pub fn tokens(&self, ids: Vec<usize>) -> Result<CaptionTokens> {
        let ok = ids.len() >= 2
            && ids[0] == self.bos()
            && ids.last() == Some(&self.eos())
            && ids.iter().filter(|&&i| i == self.eos()).count() == 1
            && ids.iter().all(|&i| i < self.size);
        if !ok {
            return Err(Error::Data(format!("malformed caption token ids {ids:?}")));
        }
        Ok(CaptionTokens { ids })
    }

    /// Caption text without the markers.
    pub fn decode(&self, tokens: &CaptionTokens) -> String {
        tokens
            .ids
            .iter()
            .filter(|&&i| i != self.bos() && i != self.eos())
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
