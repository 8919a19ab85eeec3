//! Character-level tokenizer with atomic special tokens.
//!
//! The vocabulary is printable ASCII plus newline/tab and six special
//! tokens, so captions and exams stay fully in-vocabulary without any
//! external vocab file. Unknown characters all fall back to one token.

use std::collections::HashMap;

/// Literal strings for the special tokens.
pub const TS_OPEN: &str = "\u{27E8}ts\u{27E9}";
pub const TS_CLOSE: &str = "\u{27E8}ts/\u{27E9}";
pub const ANSWER_START: &str = "\u{27E8}ans\u{27E9}";
pub const END_OF_TEXT: &str = "\u{27E8}eot\u{27E9}";
pub const PAD: &str = "\u{27E8}pad\u{27E9}";
pub const UNKNOWN: &str = "\u{27E8}unk\u{27E9}";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
    specials: Vec<u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = vec![
            PAD.to_string(),
            TS_OPEN.to_string(),
            TS_CLOSE.to_string(),
            ANSWER_START.to_string(),
            END_OF_TEXT.to_string(),
            UNKNOWN.to_string(),
        ];
        let specials: Vec<u32> = (0..tokens.len() as u32).collect();
        tokens.push("\n".to_string());
        tokens.push("\t".to_string());
        for c in 0x20u8..=0x7e {
            tokens.push((c as char).to_string());
        }
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer {
            tokens,
            lookup,
            specials,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn ts_open_id(&self) -> u32 {
        1
    }
    pub fn ts_close_id(&self) -> u32 {
        2
    }
    pub fn answer_start_id(&self) -> u32 {
        3
    }
    pub fn end_of_text_id(&self) -> u32 {
        4
    }
    pub fn unknown_id(&self) -> u32 {
        5
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.specials.contains(&id)
    }

    /// Encode text; special-token literals match atomically, longest first.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            // specials all start with U+27E8, ordinary chars never do
            if rest.starts_with('\u{27E8}') {
                for special in [TS_CLOSE, TS_OPEN, ANSWER_START, END_OF_TEXT, PAD, UNKNOWN] {
                    if let Some(stripped) = rest.strip_prefix(special) {
                        ids.push(self.lookup[special]);
                        rest = stripped;
                        continue 'outer;
                    }
                }
            }
            let ch = rest.chars().next().expect("non-empty");
            let mut buf = [0u8; 4];
            let s: &str = ch.encode_utf8(&mut buf);
            ids.push(*self.lookup.get(s).unwrap_or(&self.unknown_id()));
            rest = &rest[ch.len_utf8()..];
        }
        ids
    }

    /// Decode ids back to text. Inverse of `encode` on in-vocabulary text.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNKNOWN))
            .collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let tok = Tokenizer::new();
        assert_eq!(tok.encode(""), Vec::<u32>::new());
        assert_eq!(tok.decode(&[]), "");
    }

    #[test]
    fn special_token_atomicity() {
        let tok = Tokenizer::new();
        let ids = tok.encode("\u{27E8}ts\u{27E9}\u{27E8}ts/\u{27E9}");
        assert_eq!(ids, vec![tok.ts_open_id(), tok.ts_close_id()]);
        assert!(ids.iter().all(|&id| tok.is_special(id)));
    }

    #[test]
    fn corpus_round_trip() {
        let tok = Tokenizer::new();
        let samples = [
            "The series shows a steady upward trend.",
            "Q: which option fits?\nA. first\tB. second",
            "noise level: low (z = -3.5, p < 0.01)",
            "\u{27E8}ts\u{27E9}\u{27E8}ts/\u{27E9} describe \u{27E8}ans\u{27E9}",
        ];
        for s in samples {
            assert_eq!(tok.decode(&tok.encode(s)), s);
        }
    }

    #[test]
    fn unknown_chars_fall_back() {
        let tok = Tokenizer::new();
        let ids = tok.encode("a\u{00e9}b");
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[1], tok.unknown_id());
    }

    #[test]
    fn vocab_is_a_bijection() {
        let tok = Tokenizer::new();
        for id in 0..tok.vocab_size() as u32 {
            let s = tok.token(id).unwrap().to_string();
            let back = tok.encode(&s);
            assert_eq!(back, vec![id], "token {id} `{s}` does not round-trip");
        }
    }
}
