use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const VIS: usize = 3;

const CHARS: &[char] = &['0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '.', 's', ',', '[', ']', ' '];
const FIRST_CHAR: usize = 4;

/// Fixed symbol table: specials, the characters needed to write
/// `[a.bs, c.ds]`, and a closed set of query words `q0..q{K-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    n_query_words: usize,
}

impl Vocab {
    pub fn new(n_query_words: usize) -> Self {
        Self { n_query_words }
    }

    pub fn size(&self) -> usize {
        FIRST_CHAR + CHARS.len() + self.n_query_words
    }

    pub fn n_query_words(&self) -> usize {
        self.n_query_words
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        CHARS.iter().position(|&x| x == c).map(|i| FIRST_CHAR + i)
    }

    pub fn query_id(&self, word: usize) -> Result<usize> {
        if word >= self.n_query_words {
            return Err(Error::Value(format!(
                "query word {word} outside vocabulary of {} words",
                self.n_query_words
            )));
        }
        Ok(FIRST_CHAR + CHARS.len() + word)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.char_id(c)
                    .ok_or_else(|| Error::Value(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Renders ids as text; specials and query words become `<...>` markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => out.push_str("<pad>"),
                BOS => out.push_str("<bos>"),
                EOS => out.push_str("<eos>"),
                VIS => out.push_str("<vis>"),
                i if i < FIRST_CHAR + CHARS.len() => out.push(CHARS[i - FIRST_CHAR]),
                i if i < self.size() => out.push_str(&format!("<q{}>", i - FIRST_CHAR - CHARS.len())),
                i => out.push_str(&format!("<unk{i}>")),
            }
        }
        out
    }
}

/// One-decimal rendering with a trailing `s`; ties round to even tenths.
pub fn format_timestamp(seconds: f64) -> Result<String> {
    if !seconds.is_finite() || seconds < 0.0 {
        return Err(Error::Value(format!("timestamp must be finite and >= 0, got {seconds}")));
    }
    let tenths = (seconds * 10.0).round_ties_even() as u64;
    Ok(format!("{}.{}s", tenths / 10, tenths % 10))
}

pub fn tokenize_timestamp(vocab: &Vocab, seconds: f64) -> Result<Vec<usize>> {
    vocab.encode(&format_timestamp(seconds)?)
}

pub fn render_window(start: f64, end: f64) -> Result<String> {
    let (a, b) = (format_timestamp(start)?, format_timestamp(end)?);
    Ok(format!("[{a}, {b}]"))
}
