//! Closed word-level vocabulary over the synthetic world.
//!
//! The lexicon is fixed at compile time: instruction words, shape/color/size
//! attributes, spatial relations, and a handful of glue words. Out-of-vocab
//! words map to a reserved unknown id rather than erroring, so arbitrary text
//! can still flow through the tokenizer.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOT: usize = 2;
/// Anchor token appended after sentence conditions; its LM output row is the
/// sentence's condition embedding.
pub const REF: usize = 3;
pub const COMMA: usize = 4;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<eot>", "[REF]"];

const WORDS: &[&str] = &[
    // punctuation
    ",", ".", ":",
    // instruction templates
    "you", "need", "to", "segment", "all", "objects", "this", "is", "the",
    "candidate", "categories", "please", "according", "following",
    "instruction", "by", "given", "regions", "describe", "image",
    // colors
    "red", "green", "blue", "yellow", "purple",
    // shapes, singular and plural
    "triangle", "circle", "square", "star",
    "triangles", "circles", "squares", "stars",
    // sizes
    "small", "large",
    // spatial and superlative relations
    "left", "right", "above", "below", "leftmost", "rightmost",
    "topmost", "bottommost", "largest", "smallest", "of",
    // glue
    "a", "an", "and", "that", "thing", "things", "shape", "shapes",
    "background", "nothing", "there", "scene", "contains", "shows", "picture",
    "one", "two", "three", "four", "five",
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in WORDS {
            words.push(w.to_string());
        }
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            let prev = ids.insert(w.clone(), i);
            assert!(prev.is_none(), "duplicate vocabulary word {w}");
        }
        Vocabulary { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Lowercases, splits on whitespace, and peels `, . :` off word edges.
    /// Unknown words become [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut rest = lower.as_str();
            let mut tail = Vec::new();
            // Leading punctuation.
            while let Some(first) = rest.chars().next() {
                if matches!(first, ',' | '.' | ':') {
                    out.push(self.ids[&first.to_string()]);
                    rest = &rest[first.len_utf8()..];
                } else {
                    break;
                }
            }
            // Trailing punctuation (collected, emitted after the word).
            while let Some(last) = rest.chars().last() {
                if matches!(last, ',' | '.' | ':') {
                    tail.push(self.ids[&last.to_string()]);
                    rest = &rest[..rest.len() - last.len_utf8()];
                } else {
                    break;
                }
            }
            if !rest.is_empty() {
                out.push(self.id(rest).unwrap_or(UNK));
            }
            out.extend(tail.into_iter().rev());
        }
        out
    }

    /// Canonical text for an id sequence: words joined by single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}
