//! Character alphabet, text/token conversion and target padding.
//!
//! Token ids are laid out as `0..n_chars` for ordinary characters, then the
//! end-of-transcription token, then the start-of-transcription token. Only the
//! first `n_chars + 1` ids are predictable; the start token lives in the
//! embedding table alone.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Sequence of token ids (targets, predictions, decoder inputs).
pub type TokenSeq = Vec<TokenId>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    id_of_char: HashMap<char, TokenId>,
}

impl Vocab {
    /// Sorted set of every character in the corpus.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        let set: BTreeSet<char> = corpus.iter().flat_map(|t| t.as_ref().chars()).collect();
        Self::from_chars(set.into_iter().collect())
    }

    /// Builds a vocabulary from an already ordered list of distinct characters.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::EmptyAlphabet);
        }
        let mut id_of_char = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if id_of_char.insert(c, i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate character {c:?} in alphabet"
                )));
            }
        }
        Ok(Self { chars, id_of_char })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of predictable classes: characters plus `<e>`.
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    /// Rows of the embedding table: predictable classes plus `<s>`.
    pub fn embedding_rows(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn eos(&self) -> TokenId {
        self.chars.len() as TokenId
    }

    pub fn sos(&self) -> TokenId {
        self.chars.len() as TokenId + 1
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.id_of_char.get(&c).copied()
    }

    pub fn contains(&self, c: char) -> bool {
        self.id_of_char.contains_key(&c)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| self.id_of(ch).ok_or(Error::UnknownChar { ch, offset }))
            .collect()
    }

    /// Converts ids back to text. Leading `<s>` tokens are skipped and the
    /// output stops at the first `<e>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id == self.sos() {
                continue;
            }
            if id == self.eos() {
                break;
            }
            match self.chars.get(id as usize) {
                Some(&c) => out.push(c),
                None => {
                    return Err(Error::InvalidToken {
                        id,
                        rows: self.embedding_rows(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Every character of `text` that is missing from this alphabet.
    pub fn missing_chars(&self, text: &str) -> BTreeSet<char> {
        text.chars().filter(|c| !self.contains(*c)).collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let points: Vec<u32> = self.chars.iter().map(|&c| c as u32).collect();
        points.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let points = Vec::<u32>::deserialize(deserializer)?;
        let chars = points
            .into_iter()
            .map(|p| {
                char::from_u32(p).ok_or_else(|| D::Error::custom(format!("bad code point {p}")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Vocab::from_chars(chars).map_err(D::Error::custom)
    }
}

/// Ground truth padded for a window of `w` queries and `m` projection heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedTargets {
    /// `y ++ [<e>] ++ [<e>] * n_e`
    pub main: TokenSeq,
    pub n_e: usize,
    pub window: usize,
    pub heads: usize,
    sos: TokenId,
    eos: TokenId,
}

impl PaddedTargets {
    pub fn new(vocab: &Vocab, y: &[TokenId], window: usize, heads: usize) -> Result<Self> {
        Self::with_ids(vocab.sos(), vocab.eos(), y, window, heads)
    }

    /// Same as [`Self::new`] with explicit `<s>` and `<e>` ids.
    pub fn with_ids(
        sos: TokenId,
        eos: TokenId,
        y: &[TokenId],
        window: usize,
        heads: usize,
    ) -> Result<Self> {
        if window < 1 || heads < 1 {
            return Err(Error::InvalidArgument(format!(
                "window ({window}) and head count ({heads}) must be at least 1"
            )));
        }
        if let Some(pos) = y.iter().position(|&t| t == eos) {
            return Err(Error::InvalidArgument(format!(
                "target already contains <e> at index {pos}"
            )));
        }
        let n_e = (window - (y.len() + 1) % window) % window;
        let mut main = Vec::with_capacity(y.len() + 1 + n_e);
        main.extend_from_slice(y);
        main.extend(std::iter::repeat_n(eos, 1 + n_e));
        Ok(Self {
            main,
            n_e,
            window,
            heads,
            sos,
            eos,
        })
    }

    /// Total sequence `[<s>] * w ++ main`.
    pub fn sequence(&self) -> TokenSeq {
        let mut s = vec![self.sos; self.window];
        s.extend_from_slice(&self.main);
        s
    }

    /// Decoder input for teacher forcing: the first `|main|` tokens of [`Self::sequence`].
    pub fn decoder_input(&self) -> TokenSeq {
        let mut s = self.sequence();
        s.truncate(self.main.len());
        s
    }

    /// Target of the total sequence at `index`, `<e>` past its end.
    pub fn target_at(&self, index: usize) -> TokenId {
        if index < self.window {
            self.sos
        } else {
            self.main
                .get(index - self.window)
                .copied()
                .unwrap_or(self.eos)
        }
    }
}
