//! Word-level tokenizer over templated text.
//!
//! Text splits into runs of newlines, and words or punctuation runs that
//! carry at most one leading space (` person`, `.`, ` ###`). Decoding is plain
//! concatenation, so in-vocabulary text round-trips exactly.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Concept-token ids occupy `CONCEPT_BASE..CONCEPT_BASE + slots`.
pub const CONCEPT_BASE: u32 = 4;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Byte ranges of the pieces of `text`.
pub fn pieces(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |c| c.0);
    let class = |c: char| -> u8 {
        if c == '\n' {
            0
        } else if c.is_whitespace() {
            1
        } else if c.is_alphanumeric() {
            2
        } else {
            3
        }
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let c = chars[i].1;
        let mut j = i;
        if class(c) == 1 && c == ' ' && chars.get(i + 1).is_some_and(|n| class(n.1) >= 2) {
            j += 1;
        }
        let k = class(chars[j].1);
        if k == 1 {
            j += 1;
        } else {
            while j < chars.len() && class(chars[j].1) == k {
                j += 1;
            }
        }
        out.push(start..end_of(j));
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    concept_slots: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Build a vocabulary from every piece occurring in `corpus`, sorted.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, concept_slots: usize) -> Self {
        let mut words = BTreeSet::new();
        for text in corpus {
            for r in pieces(text) {
                words.insert(&text[r]);
            }
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend((0..concept_slots).map(|j| format!("<concept_{j}>")));
        vocab.extend(words.into_iter().map(str::to_string));
        Self::from_vocab(vocab, concept_slots)
    }

    pub fn from_vocab(vocab: Vec<String>, concept_slots: usize) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .skip(CONCEPT_BASE as usize + concept_slots)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self {
            vocab,
            concept_slots,
            index,
        }
    }

    /// Restore the lookup index after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_vocab(self.vocab, self.concept_slots)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn concept_slots(&self) -> usize {
        self.concept_slots
    }

    pub fn concept_id(&self, j: usize) -> u32 {
        assert!(j < self.concept_slots);
        CONCEPT_BASE + j as u32
    }

    pub fn is_concept(&self, id: u32) -> bool {
        (CONCEPT_BASE..CONCEPT_BASE + self.concept_slots as u32).contains(&id)
    }

    /// Ids of ordinary (non-special, non-concept) tokens.
    pub fn word_ids(&self) -> Range<u32> {
        CONCEPT_BASE + self.concept_slots as u32..self.vocab.len() as u32
    }

    pub fn encode_with_offsets(&self, text: &str) -> Vec<(u32, Range<usize>)> {
        pieces(text)
            .into_iter()
            .map(|r| (self.index.get(&text[r.clone()]).copied().unwrap_or(UNK), r))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_offsets(text).into_iter().map(|(t, _)| t).collect()
    }

    /// Encode and return the token range overlapping the byte range `span`.
    pub fn encode_span(&self, text: &str, span: Range<usize>) -> (Vec<u32>, Range<usize>) {
        let enc = self.encode_with_offsets(text);
        let first = enc.iter().position(|(_, r)| r.end > span.start);
        let last = enc.iter().rposition(|(_, r)| r.start < span.end);
        let tokens = enc.iter().map(|(t, _)| *t).collect();
        let range = match (first, last) {
            (Some(a), Some(b)) if a <= b && span.start < span.end => a..b + 1,
            _ => 0..0,
        };
        (tokens, range)
    }

    pub fn token(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}
