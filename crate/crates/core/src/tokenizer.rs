//! Byte-level tokenizer with side-specific start/end delimiters.
//!
//! Content bytes map to ids `0..256`; five reserved ids follow. Queries (the
//! `x` side) and documents (the `y` side) get distinct delimiter pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

/// Which half of a training pair a sequence belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    X,
    Y,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Side::X),
            "y" | "Y" => Ok(Side::Y),
            other => Err(Error::invalid(format!("unknown side {other:?} (expected x or y)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub kind: String,
    pub size: u32,
    pub sos_x: TokenId,
    pub eos_x: TokenId,
    pub sos_y: TokenId,
    pub eos_y: TokenId,
    pub pad: TokenId,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::byte_level()
    }
}

impl Vocabulary {
    /// 256 byte ids followed by `SOS_X, EOS_X, SOS_Y, EOS_Y, PAD`.
    pub fn byte_level() -> Self {
        Vocabulary {
            kind: "byte".into(),
            size: 261,
            sos_x: 256,
            eos_x: 257,
            sos_y: 258,
            eos_y: 259,
            pad: 260,
        }
    }

    pub fn sos(&self, side: Side) -> TokenId {
        match side {
            Side::X => self.sos_x,
            Side::Y => self.sos_y,
        }
    }

    pub fn eos(&self, side: Side) -> TokenId {
        match side {
            Side::X => self.eos_x,
            Side::Y => self.eos_y,
        }
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        [self.sos_x, self.eos_x, self.sos_y, self.eos_y, self.pad].contains(&id)
    }

    /// Checks the reserved ids are distinct and sit above the byte range.
    pub fn validate(&self) -> Result<()> {
        if self.kind != "byte" {
            return Err(Error::Token(format!("unsupported vocabulary kind {:?}", self.kind)));
        }
        let reserved = [self.sos_x, self.eos_x, self.sos_y, self.eos_y, self.pad];
        for (i, a) in reserved.iter().enumerate() {
            if *a < 256 || *a >= self.size {
                return Err(Error::Token(format!("reserved id {a} collides with content ids")));
            }
            if reserved[i + 1..].contains(a) {
                return Err(Error::Token(format!("reserved id {a} used twice")));
            }
        }
        Ok(())
    }
}

/// Delimiter-wrapped token ids for one side of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub side: Side,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    max_seq_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, max_seq_len: usize) -> Result<Self> {
        vocab.validate()?;
        if max_seq_len < 3 {
            return Err(Error::Token(format!(
                "max_seq_len {max_seq_len} leaves no room for content"
            )));
        }
        Ok(Tokenizer { vocab, max_seq_len })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    /// `[SOS_side] ++ bytes ++ [EOS_side]`, keeping at most `max_seq_len - 2`
    /// leading content bytes.
    pub fn encode(&self, text: &[u8], side: Side) -> Result<TokenSequence> {
        if text.is_empty() {
            return Err(Error::Token("cannot encode empty text".into()));
        }
        let budget = self.max_seq_len - 2;
        let content = &text[..text.len().min(budget)];
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(self.vocab.sos(side));
        ids.extend(content.iter().map(|&b| b as TokenId));
        ids.push(self.vocab.eos(side));
        Ok(TokenSequence { ids, side })
    }

    pub fn encode_str(&self, text: &str, side: Side) -> Result<TokenSequence> {
        self.encode(text.as_bytes(), side)
    }

    /// Content bytes of a well-formed sequence.
    pub fn decode(&self, seq: &TokenSequence) -> Result<Vec<u8>> {
        let ids = &seq.ids;
        let (sos, eos) = (self.vocab.sos(seq.side), self.vocab.eos(seq.side));
        match (ids.first(), ids.last()) {
            (Some(&first), Some(&last)) if ids.len() >= 2 && first == sos && last == eos => {}
            _ => {
                return Err(Error::Token(format!(
                    "sequence must start with {sos} and end with {eos}"
                )))
            }
        }
        ids[1..ids.len() - 1]
            .iter()
            .map(|&id| {
                if id < 256 {
                    Ok(id as u8)
                } else {
                    Err(Error::Token(format!("reserved id {id} inside content")))
                }
            })
            .collect()
    }
}
