//! Rule-based sentence splitting for short user-written texts.
//!
//! Two rules cooperate:
//!
//! * a delimiter pattern that matches a period followed by whitespace, or a
//!   run of `!`/`?` followed by whitespace;
//! * a look-behind guard that vetoes period delimiters which close a known
//!   abbreviation (`Dr.`, `etc.`, ...) or end a run of consecutive periods
//!   (`...`).
//!
//! Text after the last delimiter always forms a final sentence, so reviews
//! without terminal punctuation are not lost.
//!
//! ```
//! use ee2d::textseg::split_sentences;
//!
//! let s = split_sentences("Excellent product! It is great. I recommend Dr. Smith.").unwrap();
//! assert_eq!(s.sentences, ["Excellent product!", "It is great.", "I recommend Dr. Smith."]);
//! ```

use std::collections::HashSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

/// Abbreviations that never end a sentence unless overridden.
pub const DEFAULT_ABBREVIATIONS: &[&str] =
    &["Dr.", "Mr.", "Mrs.", "Ms.", "Prof.", "etc.", "e.g.", "i.e.", "vs.", "Inc.", "St."];

static DELIMITER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:\.|[!?]+)\s+").expect("static delimiter pattern"));

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("EmptyInput: text is empty or whitespace-only")]
    EmptyInput,
    #[error("failed to read abbreviation file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ordered sentences of one input text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SentenceList {
    pub sentences: Vec<String>,
    /// Input length in characters (not bytes).
    pub source_length: usize,
}

impl SentenceList {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Splitter configured with an abbreviation set.
///
/// Abbreviations are matched case-insensitively against the whitespace-delimited
/// token that ends at the candidate period, after stripping leading opening
/// punctuation such as `(` or `"`.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: HashSet<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self::with_abbreviations(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

impl SentenceSplitter {
    pub fn with_abbreviations<I, S>(abbrevs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let abbreviations = abbrevs
            .into_iter()
            .map(|a| a.as_ref().trim().to_ascii_lowercase())
            .filter(|a| !a.is_empty())
            .map(|a| if a.ends_with('.') { a } else { format!("{a}.") })
            .collect();
        Self { abbreviations }
    }

    /// Reads one abbreviation per line; blank lines and `#` comments are skipped.
    pub fn from_abbreviation_file(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| SplitError::Io { path: path.display().to_string(), source })?;
        Ok(Self::with_abbreviations(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))))
    }

    pub fn abbreviations(&self) -> impl Iterator<Item = &str> {
        self.abbreviations.iter().map(String::as_str)
    }

    pub fn split(&self, text: &str) -> Result<SentenceList, SplitError> {
        if text.trim().is_empty() {
            return Err(SplitError::EmptyInput);
        }
        let mut sentences = Vec::new();
        let mut start = 0;
        for m in DELIMITER.find_iter(text) {
            let delim = &text[m.start()..m.end()];
            if delim.starts_with('.') && self.guarded(&text[..m.start()]) {
                continue;
            }
            let end = m.start() + delim.trim_end().len();
            push_trimmed(&mut sentences, &text[start..end]);
            start = m.end();
        }
        push_trimmed(&mut sentences, &text[start..]);
        Ok(SentenceList { sentences, source_length: text.chars().count() })
    }

    /// Look-behind guard for a period at the end of `before + "."`.
    fn guarded(&self, before: &str) -> bool {
        if before.ends_with('.') {
            return true;
        }
        let token_start =
            before.rfind(char::is_whitespace).map_or(0, |i| i + before[i..].chars().next().map_or(1, char::len_utf8));
        let token = before[token_start..].trim_start_matches(['(', '[', '"', '\'']);
        if token.is_empty() {
            return false;
        }
        let candidate = format!("{}.", token.to_ascii_lowercase());
        self.abbreviations.contains(&candidate)
    }
}

fn push_trimmed(out: &mut Vec<String>, span: &str) {
    let s = span.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// Splits with the default abbreviation set.
pub fn split_sentences(text: &str) -> Result<SentenceList, SplitError> {
    SentenceSplitter::default().split(text)
}
