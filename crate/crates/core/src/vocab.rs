//! Joint, target-first vocabulary.
//!
//! Indices are laid out as `specials ++ target words ++ source-only words`.
//! The decoder may only emit indices below [`JointVocab::target_size`].

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::annotator::TAGS;
use crate::error::{Error, Result};
use crate::text::{self, Sentence, Token};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const SPECIALS: [&str; 4] = [PAD, UNK, BOS, EOS];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

#[derive(Clone, Copy, Debug)]
pub struct VocabConfig {
    pub min_freq: usize,
    /// Caps on the number of words kept per side (after sorting).
    pub max_target_words: Option<usize>,
    pub max_source_words: Option<usize>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_freq: 1,
            max_target_words: None,
            max_source_words: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    target_size: usize,
}

fn ranked<'a, I>(corpus: I, min_freq: usize, cap: Option<usize>) -> Vec<String>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for t in s {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, f)| f >= min_freq).collect();
    words.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(cap) = cap {
        words.truncate(cap);
    }
    words.into_iter().map(|(w, _)| w.to_owned()).collect()
}

impl JointVocab {
    /// Builds the vocabulary from (annotated, segmented) corpora. Annotation
    /// tags are always part of the target section.
    pub fn build(src: &[Sentence], tgt: &[Sentence], cfg: &VocabConfig) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut tgt_words = ranked(tgt, cfg.min_freq, cfg.max_target_words);
        tgt_words.retain(|w| !SPECIALS.contains(&w.as_str()));
        let mut missing: Vec<&str> = TAGS.iter().copied().filter(|t| !tgt_words.iter().any(|w| w == t)).collect();
        missing.sort_unstable();
        tgt_words.extend(missing.into_iter().map(str::to_owned));
        tokens.extend(tgt_words);
        let target_size = tokens.len();
        let known: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let src_words: Vec<String> = ranked(src, cfg.min_freq, None)
            .into_iter()
            .filter(|w| !known.contains(w))
            .take(cfg.max_source_words.unwrap_or(usize::MAX))
            .collect();
        tokens.extend(src_words);
        Self::from_parts(tokens, target_size).expect("constructed vocabulary is valid")
    }

    fn from_parts(tokens: Vec<String>, target_size: usize) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Invalid("vocabulary must start with the special symbols".into()));
        }
        if target_size < SPECIALS.len() || target_size > tokens.len() {
            return Err(Error::Invalid(format!(
                "target size {target_size} outside {}..={}",
                SPECIALS.len(),
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(JointVocab {
            tokens,
            index,
            target_size,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of legal decoder outputs: specials plus target words.
    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn target_words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..self.target_size]
    }

    pub fn source_words(&self) -> &[String] {
        &self.tokens[self.target_size..]
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                index: id as usize,
                size: self.tokens.len(),
            })
    }

    pub fn encode(&self, sent: &Sentence) -> Vec<u32> {
        sent.iter().map(|t| self.id(t).unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Sentence> {
        ids.iter()
            .map(|&i| self.token(i).map(Token::trusted))
            .collect::<Result<Vec<_>>>()
            .map(Sentence::new)
    }

    /// `true` exactly for indices the decoder may emit.
    pub fn restriction_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.target_size).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "#target_size={}", self.target_size)?;
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "missing header"))??;
        let target_size: usize = header
            .strip_prefix("#target_size=")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::parse(1, format!("bad header {header:?}")))?;
        let tokens = lines
            .map(|l| l.map(|s| s.trim_end_matches('\r').to_owned()))
            .collect::<std::io::Result<Vec<_>>>()?;
        Self::from_parts(tokens, target_size)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(text::open_reader(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_first_layout() {
        let v = JointVocab::build(
            &[Sentence::from_text("我 爱")],
            &[Sentence::from_text("i love hong kong")],
            &VocabConfig::default(),
        );
        let expected: Vec<&str> = vec![
            "<pad>", "<unk>", "<s>", "</s>", "hong", "i", "kong", "love", "<end>", "<middle>", "<start>", "我", "爱",
        ];
        assert_eq!(v.tokens(), expected.as_slice());
        assert_eq!(v.target_size(), 4 + 7);
    }

    #[test]
    fn frequency_orders_before_lexicographic() {
        let v = JointVocab::build(&[], &[Sentence::from_text("b a b c c c")], &VocabConfig::default());
        assert_eq!(&v.target_words()[..3], &["c", "b", "a"]);
    }

    #[test]
    fn shared_tokens_live_in_target_part() {
        let v = JointVocab::build(
            &[Sentence::from_text("我 爱 hong kong")],
            &[Sentence::from_text("i love hong kong")],
            &VocabConfig::default(),
        );
        assert!(v.id("hong").unwrap() < v.target_size() as u32);
        assert_eq!(v.tokens().iter().filter(|t| *t == "hong").count(), 1);
        assert_eq!(v.source_words(), &["我", "爱"]);
    }

    #[test]
    fn min_freq_keeps_only_specials_and_tags() {
        let cfg = VocabConfig {
            min_freq: 2,
            ..VocabConfig::default()
        };
        let v = JointVocab::build(&[Sentence::from_text("x y")], &[Sentence::from_text("a b")], &cfg);
        assert_eq!(v.len(), 7);
        assert_eq!(v.target_size(), 7);
        assert!(v.restriction_mask().iter().all(|&b| b));
    }

    #[test]
    fn empty_corpora() {
        let v = JointVocab::build(&[], &[], &VocabConfig::default());
        assert_eq!(v.len(), SPECIALS.len() + TAGS.len());
    }

    #[test]
    fn encode_decode() {
        let v = JointVocab::build(&[Sentence::from_text("x")], &[Sentence::from_text("a b")], &VocabConfig::default());
        let s = Sentence::from_text("a x b");
        assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        assert_eq!(v.encode(&Sentence::from_text("zzz")), vec![UNK_ID]);
        assert!(matches!(v.decode(&[v.len() as u32]), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn mask_marks_target_prefix() {
        let v = JointVocab::build(
            &[Sentence::from_text("p q r s t")],
            &[Sentence::from_text("a b c")],
            &VocabConfig::default(),
        );
        let mask = v.restriction_mask();
        assert_eq!(mask.len(), 15);
        assert_eq!(v.target_size(), 10);
        assert!(mask[..10].iter().all(|&b| b));
        assert!(mask[10..].iter().all(|&b| !b));
    }

    #[test]
    fn file_round_trip() {
        let v = JointVocab::build(&[Sentence::from_text("x")], &[Sentence::from_text("a b")], &VocabConfig::default());
        let bytes = v.to_bytes();
        assert!(bytes.starts_with(b"#target_size=9\n<pad>\n"));
        let back = JointVocab::read(bytes.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.digest(), v.digest());
    }
}
