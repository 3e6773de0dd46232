//! Word-level tokenizer with byte fallback over the pipeline's controlled
//! prompt vocabulary. Chat markers and the assistant role word get reserved
//! ids; words containing digits always take the byte path so numeric values
//! never bloat the vocabulary.

use std::collections::HashMap;

use crate::gateway::fnv1a64;

pub const TOK_PAD: u32 = 0;
pub const TOK_IM_START: u32 = 1;
pub const TOK_IM_END: u32 = 2;
pub const TOK_NEWLINE: u32 = 3;
pub const TOK_ASSISTANT: u32 = 4;
pub const BYTE_BASE: u32 = 5;
pub const FIRST_WORD_ID: u32 = BYTE_BASE + 256;

pub const IM_START_TEXT: &str = "<|im_start|>";
pub const IM_END_TEXT: &str = "<|im_end|>";
const ASSISTANT_TEXT: &str = "assistant";

/// True for words that must be byte-encoded rather than added to the
/// vocabulary.
fn byte_fallback_word(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    word_ids: HashMap<String, u32>,
}

enum Piece<'a> {
    Marker(u32),
    Text(&'a str),
}

/// Split out chat markers so glued forms like "<|im_start|>user" tokenize
/// into a marker plus a word.
fn split_markers(text: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = text;
    loop {
        let start = rest.find(IM_START_TEXT).map(|p| (p, TOK_IM_START, IM_START_TEXT.len()));
        let end = rest.find(IM_END_TEXT).map(|p| (p, TOK_IM_END, IM_END_TEXT.len()));
        let next = match (start, end) {
            (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
            (a, b) => a.or(b),
        };
        match next {
            Some((pos, id, len)) => {
                if pos > 0 {
                    pieces.push(Piece::Text(&rest[..pos]));
                }
                pieces.push(Piece::Marker(id));
                rest = &rest[pos + len..];
            }
            None => {
                if !rest.is_empty() {
                    pieces.push(Piece::Text(rest));
                }
                return pieces;
            }
        }
    }
}

fn for_each_word(segment: &str, mut f: impl FnMut(WordEvent<'_>)) {
    let mut start = None;
    for (i, c) in segment.char_indices() {
        if c == '\n' {
            if let Some(s) = start.take() {
                f(WordEvent::Word(&segment[s..i]));
            }
            f(WordEvent::Newline);
        } else if c.is_whitespace() {
            if let Some(s) = start.take() {
                f(WordEvent::Word(&segment[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        f(WordEvent::Word(&segment[s..]));
    }
}

enum WordEvent<'a> {
    Word(&'a str),
    Newline,
}

impl Tokenizer {
    /// Build the vocabulary from a text corpus. Word order is lexicographic
    /// so equal corpora produce identical tables regardless of input order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Tokenizer {
        let mut set = std::collections::BTreeSet::new();
        for text in corpus {
            for piece in split_markers(text) {
                if let Piece::Text(seg) = piece {
                    for_each_word(seg, |event| {
                        if let WordEvent::Word(w) = event {
                            if w != ASSISTANT_TEXT && !byte_fallback_word(w) {
                                set.insert(w.to_string());
                            }
                        }
                    });
                }
            }
        }
        Tokenizer::from_words(set.into_iter().collect())
    }

    /// Rebuild from a stored word list (checkpoint load path).
    pub fn from_words(words: Vec<String>) -> Tokenizer {
        let word_ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
        Tokenizer { words, word_ids }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_WORD_ID as usize + self.words.len()
    }

    /// Stable digest of the vocabulary table.
    pub fn vocab_hash(&self) -> u64 {
        let joined = self.words.join("\n");
        fnv1a64(joined.as_bytes())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut last_was_byte = false;
        for piece in split_markers(text) {
            match piece {
                Piece::Marker(id) => {
                    ids.push(id);
                    last_was_byte = false;
                }
                Piece::Text(seg) => {
                    for_each_word(seg, |event| match event {
                        WordEvent::Newline => {
                            ids.push(TOK_NEWLINE);
                            last_was_byte = false;
                        }
                        WordEvent::Word(w) => {
                            if w == ASSISTANT_TEXT {
                                ids.push(TOK_ASSISTANT);
                                last_was_byte = false;
                            } else if let Some(&id) = self.word_ids.get(w) {
                                ids.push(id);
                                last_was_byte = false;
                            } else {
                                // Adjacent byte words keep their separating
                                // space as an explicit byte.
                                if last_was_byte {
                                    ids.push(BYTE_BASE + b' ' as u32);
                                }
                                for &b in w.as_bytes() {
                                    ids.push(BYTE_BASE + b as u32);
                                }
                                last_was_byte = true;
                            }
                        }
                    });
                }
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut glue_next = true;
        let mut byte_run: Vec<u8> = Vec::new();
        let flush_bytes = |out: &mut String, glue_next: &mut bool, run: &mut Vec<u8>| {
            if run.is_empty() {
                return;
            }
            if !*glue_next {
                out.push(' ');
            }
            out.push_str(&String::from_utf8_lossy(run));
            run.clear();
            *glue_next = false;
        };
        for &id in ids {
            if (BYTE_BASE..FIRST_WORD_ID).contains(&id) {
                byte_run.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush_bytes(&mut out, &mut glue_next, &mut byte_run);
            match id {
                TOK_PAD => {}
                TOK_IM_START => {
                    out.push_str(IM_START_TEXT);
                    glue_next = true;
                }
                TOK_IM_END => {
                    out.push_str(IM_END_TEXT);
                    glue_next = false;
                }
                TOK_NEWLINE => {
                    out.push('\n');
                    glue_next = true;
                }
                TOK_ASSISTANT => {
                    if !glue_next {
                        out.push(' ');
                    }
                    out.push_str(ASSISTANT_TEXT);
                    glue_next = false;
                }
                word_id => {
                    let idx = (word_id - FIRST_WORD_ID) as usize;
                    if let Some(w) = self.words.get(idx) {
                        if !glue_next {
                            out.push(' ');
                        }
                        out.push_str(w);
                        glue_next = false;
                    }
                }
            }
        }
        flush_bytes(&mut out, &mut glue_next, &mut byte_run);
        out
    }
}
