//! Tokens, sentences and line-oriented corpus files.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

/// A single whitespace-free, non-empty token.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(Error::InvalidToken(text));
        }
        Ok(Token(text))
    }

    /// Builds a token from text the caller has already validated.
    pub(crate) fn trusted(text: impl Into<String>) -> Self {
        let text = text.into();
        debug_assert!(!text.is_empty() && !text.chars().any(char::is_whitespace));
        Token(text)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_lowercase(&self) -> Token {
        Token(self.0.to_lowercase())
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl Deref for Token {
    type Target = str;

    fn deref(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl PartialEq<str> for Token {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for Token {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// An ordered token sequence. Corpus sentences are non-empty; intermediate
/// results (for instance a fully detagged hypothesis) may be empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Sentence(Vec<Token>);

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sentence(tokens)
    }

    /// Parses a corpus line. Empty lines are rejected.
    pub fn parse(line: &str) -> Result<Self> {
        let tokens: Vec<Token> = line.split_whitespace().map(Token::trusted).collect();
        if tokens.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        Ok(Sentence(tokens))
    }

    /// Like [`Sentence::parse`] but accepts empty lines, e.g. for hypotheses.
    pub fn parse_lenient(line: &str) -> Self {
        Sentence(line.split_whitespace().map(Token::trusted).collect())
    }

    /// Convenience constructor for literal, space-separated text.
    ///
    /// Panics if `text` is empty; intended for tests and fixed inputs.
    pub fn from_text(text: &str) -> Self {
        Sentence::parse(text).expect("non-empty sentence literal")
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.0.iter()
    }

    pub fn lowercased(&self) -> Vec<String> {
        self.0.iter().map(|t| t.as_str().to_lowercase()).collect()
    }

    pub fn to_lowercase(&self) -> Sentence {
        Sentence(self.0.iter().map(Token::to_lowercase).collect())
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, tok) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(tok)?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a Sentence {
    type Item = &'a Token;
    type IntoIter = std::slice::Iter<'a, Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl FromIterator<Token> for Sentence {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        Sentence(iter.into_iter().collect())
    }
}

/// Finds the first position `>= from` where `needle` occurs contiguously in
/// `haystack`.
pub fn find_subsequence<T: PartialEq>(haystack: &[T], needle: &[T], from: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

pub fn contains_subsequence<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    find_subsequence(haystack, needle, 0).is_some()
}

pub fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = open_reader(path)?;
    reader
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

pub fn count_lines(path: &Path) -> Result<usize> {
    let mut reader = open_reader(path)?;
    let mut buf = Vec::new();
    let mut n = 0;
    loop {
        buf.clear();
        let read = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::io(path, e))?;
        if read == 0 {
            return Ok(n);
        }
        n += 1;
    }
}

/// Reads a corpus file: one non-empty sentence per line.
pub fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            Sentence::parse(line).map_err(|_| Error::parse(i + 1, format!("{}: empty sentence", path.display())))
        })
        .collect()
}

/// Reads a hypothesis-style file where empty lines are allowed.
pub fn read_corpus_lenient(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| Sentence::parse_lenient(l))
        .collect())
}

pub fn write_corpus<'a, I>(path: &Path, sentences: I) -> Result<()>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut w = create_writer(path)?;
    for s in sentences {
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_rejects_whitespace_and_empty() {
        assert!(Token::new("").is_err());
        assert!(Token::new("a b").is_err());
        assert!(Token::new("a\tb").is_err());
        assert!(Token::new("香港").is_ok());
    }

    #[test]
    fn empty_sentence_rejected() {
        assert!(Sentence::parse("   ").is_err());
        assert_eq!(Sentence::parse("我 爱 香港").unwrap().len(), 3);
    }

    #[test]
    fn subsequence_search() {
        let hay = ["i", "love", "hong", "kong"];
        assert_eq!(find_subsequence(&hay, &["hong", "kong"], 0), Some(2));
        assert_eq!(find_subsequence(&hay, &["hong", "kong"], 3), None);
        assert!(!contains_subsequence(&hay, &["kong", "hong"]));
        assert!(!contains_subsequence(&hay, &[]));
    }
}
