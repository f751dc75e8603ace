//! Closed synthetic vocabulary with whitespace-plus-punctuation
//! tokenization and a character fallback for out-of-list words.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const IMG_OPEN: u32 = 3;
pub const IMG_CLOSE: u32 = 4;

pub const SPECIALS: [&str; 5] = ["<PAD>", "<BOS>", "<EOS>", "<Img>", "</Img>"];

const PUNCT: &str = "(),.?:!;'\"-";

/// Words of the built-in synthetic vocabulary, after the five specials.
/// Line order is id order; the vocabulary file format is token-per-line with
/// id = line index.
const WORDS: &[&str] = &[
    // characters (char-level fallback needs every letter and digit)
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p", "q", "r",
    "s", "t", "u", "v", "w", "x", "y", "z", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    // punctuation
    "(", ")", ",", ".", "?", ":", "!", ";", "'", "\"", "-",
    // knowledge template
    "in", "addition", "to", "the", "image", "content", "it", "also", "provides", "possible",
    "objects", "contained", "and", "their", "coordinates", "there", "may", "be", "some", "ocr",
    "text", "information", "please", "combine", "all", "above", "when", "answering", "question",
    // questions and instructions
    "how", "many", "is", "are", "of", "what", "letter", "word", "written", "shown", "left",
    "right", "below", "tiny", "small", "color", "an", "this", "answer", "using", "single", "or",
    "phrase",
    // captions
    "with", "scene", "empty", "nothing",
    // answers
    "yes", "no",
    // shape categories
    "circle", "square", "triangle", "star", "cross", "dot",
    "circles", "squares", "triangles", "stars", "crosses", "dots",
    // colors
    "red", "green", "blue", "yellow", "white", "black",
    // document words
    "dog", "cat", "sun", "map", "key", "pen", "cup", "hat", "bus", "jar",
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Config("vocabulary smaller than the special set".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Config(format!(
                    "special token {s:?} must sit at reserved id {i}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// The built-in vocabulary used by the synthetic tasks.
    pub fn synthetic() -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .chain(WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Self::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Tokenize(format!("id {id} out of vocabulary")))
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Lowercases, splits on whitespace, breaks punctuation into standalone
    /// tokens, and falls back to characters for unknown words. A word whose
    /// characters are not all in the vocabulary is a tokenization error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let lower = text.to_lowercase();
        let mut out = Vec::new();
        for raw in lower.split_whitespace() {
            let mut word = String::new();
            for ch in raw.chars() {
                if PUNCT.contains(ch) {
                    if !word.is_empty() {
                        self.push_word(&word, &mut out)?;
                        word.clear();
                    }
                    self.push_word(&ch.to_string(), &mut out)?;
                } else {
                    word.push(ch);
                }
            }
            if !word.is_empty() {
                self.push_word(&word, &mut out)?;
            }
        }
        Ok(out)
    }

    fn push_word(&self, word: &str, out: &mut Vec<u32>) -> Result<()> {
        if let Some(id) = self.id(word) {
            out.push(id);
            return Ok(());
        }
        let mut char_ids = Vec::with_capacity(word.chars().count());
        for ch in word.chars() {
            match self.id(&ch.to_string()) {
                Some(id) => char_ids.push(id),
                None => {
                    return Err(Error::Tokenize(format!(
                        "word {word:?} is out of vocabulary and character {ch:?} has no token"
                    )))
                }
            }
        }
        out.extend(char_ids);
        Ok(())
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            parts.push(self.token(id)?.to_string());
        }
        Ok(parts.join(" "))
    }

    /// Token-per-line file, id = line index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Self::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_hold_reserved_ids() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.id("<PAD>"), Some(PAD));
        assert_eq!(v.id("<BOS>"), Some(BOS));
        assert_eq!(v.id("<EOS>"), Some(EOS));
        assert_eq!(v.id("<Img>"), Some(IMG_OPEN));
        assert_eq!(v.id("</Img>"), Some(IMG_CLOSE));
    }

    #[test]
    fn tokenize_splits_punctuation_and_lowercases() {
        let v = Vocabulary::synthetic();
        let ids = v.tokenize("How many circles?").unwrap();
        let back = v.detokenize(&ids).unwrap();
        assert_eq!(back, "how many circles ?");
    }

    #[test]
    fn unknown_words_fall_back_to_characters() {
        let v = Vocabulary::synthetic();
        let ids = v.tokenize("AB7").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "a b 7");
        // Multi-digit coordinates decompose into digit tokens.
        let ids = v.tokenize("(dog, 10, 20, 110, 220),").unwrap();
        assert!(ids.len() > 10);
    }

    #[test]
    fn unmappable_character_is_tokenize_error() {
        let v = Vocabulary::synthetic();
        let err = v.tokenize("naïve").unwrap_err();
        match err {
            Error::Tokenize(msg) => assert!(msg.contains('ï'), "{msg}"),
            other => panic!("expected tokenize error, got {other:?}"),
        }
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::synthetic();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.id("circle"), v.id("circle"));
    }

    #[test]
    fn template_text_is_fully_tokenizable() {
        use crate::knowledge::*;
        let v = Vocabulary::synthetic();
        let sk = StructuralKnowledge {
            instances: vec![DetectedInstance {
                category: "circle".into(),
                bbox: BoundingBox { x0: 3, y0: 4, x1: 17, y1: 29 },
            }],
            ocr: vec![OcrSegment { text: "KX7".into() }],
        };
        let text = serialize_template(&sk).unwrap();
        let ids = v.tokenize(&text).unwrap();
        assert!(!ids.is_empty());
    }
}
