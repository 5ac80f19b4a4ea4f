//! Byte-pair encoding with protected tokens.
//!
//! Words are split into characters with an end-of-word sentinel attached to
//! the last character; the most frequent adjacent symbol pair is merged
//! repeatedly. Applied segmentations mark every non-final piece with `@@`.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::annotator::{TokenType, TAGS};
use crate::error::{Error, Result};
use crate::text::{self, Sentence, Token};

pub const CONTINUATION: &str = "@@";
pub const END_OF_WORD: &str = "</w>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    protected: BTreeSet<String>,
}

impl Default for BpeModel {
    fn default() -> Self {
        BpeModel::new(Vec::new(), std::iter::empty::<String>())
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn merge_pair(syms: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeModel {
    /// Builds a model from an ordered merge list. The annotation tags are
    /// always protected in addition to `extra_protected`. Duplicate merges
    /// keep their first position.
    pub fn new<I, S>(merges: Vec<(String, String)>, extra_protected: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ranks = HashMap::with_capacity(merges.len());
        let mut unique = Vec::with_capacity(merges.len());
        for m in merges {
            if !ranks.contains_key(&m) {
                ranks.insert(m.clone(), unique.len());
                unique.push(m);
            }
        }
        let mut protected: BTreeSet<String> = TAGS.iter().map(|t| t.to_string()).collect();
        protected.extend(extra_protected.into_iter().map(Into::into));
        BpeModel {
            merges: unique,
            ranks,
            protected,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn protected(&self) -> &BTreeSet<String> {
        &self.protected
    }

    pub fn is_protected(&self, tok: &str) -> bool {
        self.protected.contains(tok)
    }

    /// Learns up to `max_merges` merges from a corpus. Ties in pair frequency
    /// go to the lexicographically smallest pair.
    pub fn learn<'a, I>(corpus: I, max_merges: usize, extra_protected: &[String]) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let skeleton = BpeModel::new(Vec::new(), extra_protected.iter().cloned());
        let mut freq: HashMap<&str, i64> = HashMap::new();
        for sent in corpus {
            for tok in sent {
                if !skeleton.is_protected(tok) {
                    *freq.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
        let mut vocab: Vec<(&str, i64)> = freq.into_iter().collect();
        vocab.sort_unstable();
        let mut words: Vec<(Vec<String>, i64)> = vocab.iter().map(|(w, f)| (initial_symbols(w), *f)).collect();

        let mut learner = PairStats::default();
        for (idx, (syms, f)) in words.iter().enumerate() {
            for pair in syms.windows(2) {
                learner.adjust(&pair[0], &pair[1], *f);
                learner.add_word(&pair[0], &pair[1], idx);
            }
        }

        let mut merges = Vec::new();
        while merges.len() < max_merges {
            let Some((left, right)) = learner.best() else {
                break;
            };
            let mut affected: Vec<usize> = learner
                .where_
                .get(&(left.clone(), right.clone()))
                .map(|s| s.iter().copied().collect())
                .unwrap_or_default();
            affected.sort_unstable();
            for idx in affected {
                let (old, f) = &words[idx];
                let f = *f;
                let new = merge_pair(old, &left, &right);
                let old_pairs: HashSet<(String, String)> =
                    old.windows(2).map(|p| (p[0].clone(), p[1].clone())).collect();
                let new_pairs: HashSet<(String, String)> =
                    new.windows(2).map(|p| (p[0].clone(), p[1].clone())).collect();
                for p in old.windows(2) {
                    learner.adjust(&p[0], &p[1], -f);
                }
                for p in new.windows(2) {
                    learner.adjust(&p[0], &p[1], f);
                }
                for p in old_pairs.difference(&new_pairs) {
                    learner.remove_word(p, idx);
                }
                for p in new_pairs.difference(&old_pairs) {
                    learner.add_word(&p.0, &p.1, idx);
                }
                words[idx].0 = new;
            }
            merges.push((left, right));
        }
        BpeModel::new(merges, extra_protected.iter().cloned())
    }

    /// Segments one word into pieces, without continuation markers and with
    /// the end-of-word sentinel removed.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            match best {
                Some((l, r)) => syms = merge_pair(&syms, &l, &r),
                None => break,
            }
        }
        if let Some(last) = syms.last_mut() {
            let stripped = last.len() - END_OF_WORD.len();
            last.truncate(stripped);
        }
        syms
    }

    fn pieces(&self, tok: &Token, cache: &mut HashMap<String, Vec<Token>>) -> Vec<Token> {
        if self.is_protected(tok) {
            return vec![tok.clone()];
        }
        if let Some(p) = cache.get(tok.as_str()) {
            return p.clone();
        }
        let segs = self.segment_word(tok);
        let n = segs.len();
        let out: Vec<Token> = segs
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| {
                if i + 1 < n {
                    s.push_str(CONTINUATION);
                }
                Token::trusted(s)
            })
            .collect();
        cache.insert(tok.as_str().to_owned(), out.clone());
        out
    }

    pub fn apply(&self, sent: &Sentence) -> Sentence {
        let mut cache = HashMap::new();
        sent.iter().flat_map(|t| self.pieces(t, &mut cache)).collect()
    }

    /// Segments a sentence and repeats each token's type over its pieces.
    pub fn apply_with_types(&self, sent: &Sentence, types: &[TokenType]) -> Result<(Sentence, Vec<TokenType>)> {
        if types.len() != sent.len() {
            return Err(Error::Shape(format!(
                "{} token types for {} tokens",
                types.len(),
                sent.len()
            )));
        }
        let mut cache = HashMap::new();
        let mut toks = Vec::with_capacity(sent.len());
        let mut tys = Vec::with_capacity(sent.len());
        for (t, ty) in sent.iter().zip(types) {
            let p = self.pieces(t, &mut cache);
            tys.extend(std::iter::repeat(*ty).take(p.len()));
            toks.extend(p);
        }
        Ok((Sentence::new(toks), tys))
    }

    /// Applies the model to a whole corpus, caching word segmentations.
    pub fn apply_corpus(&self, corpus: &[Sentence]) -> Vec<Sentence> {
        let mut cache = HashMap::new();
        corpus
            .iter()
            .map(|s| s.iter().flat_map(|t| self.pieces(t, &mut cache)).collect())
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "#bpe v1 {}", self.merges.len())?;
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        writeln!(w, "#protected")?;
        for p in &self.protected {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = text::create_writer(path)?;
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l?,
            None => return Err(Error::parse(1, "missing #bpe header")),
        };
        let n: usize = header
            .strip_prefix("#bpe v1 ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::parse(1, format!("bad header {header:?}")))?;
        let mut merges = Vec::with_capacity(n);
        for _ in 0..n {
            let (i, l) = lines.next().ok_or_else(|| Error::parse(n + 1, "truncated merge list"))?;
            let l = l?;
            let mut parts = l.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()))
                }
                _ => return Err(Error::parse(i + 1, format!("bad merge line {l:?}"))),
            }
        }
        let mut protected = Vec::new();
        if let Some((i, l)) = lines.next() {
            let l = l?;
            if l != "#protected" {
                return Err(Error::parse(i + 1, "expected #protected"));
            }
            for (_, l) in lines {
                let l = l?;
                if !l.trim().is_empty() {
                    protected.push(l.trim().to_owned());
                }
            }
        }
        Ok(BpeModel::new(merges, protected))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(text::open_reader(path)?)
    }
}

#[derive(Default)]
struct PairStats {
    counts: HashMap<(String, String), i64>,
    where_: HashMap<(String, String), HashSet<usize>>,
    queue: BTreeSet<(Reverse<i64>, String, String)>,
}

impl PairStats {
    fn adjust(&mut self, l: &str, r: &str, delta: i64) {
        let key = (l.to_owned(), r.to_owned());
        let cur = self.counts.get(&key).copied().unwrap_or(0);
        if cur > 0 {
            self.queue.remove(&(Reverse(cur), key.0.clone(), key.1.clone()));
        }
        let new = cur + delta;
        if new > 0 {
            self.queue.insert((Reverse(new), key.0.clone(), key.1.clone()));
            self.counts.insert(key, new);
        } else {
            self.counts.remove(&key);
        }
    }

    fn add_word(&mut self, l: &str, r: &str, idx: usize) {
        self.where_
            .entry((l.to_owned(), r.to_owned()))
            .or_default()
            .insert(idx);
    }

    fn remove_word(&mut self, pair: &(String, String), idx: usize) {
        if let Some(s) = self.where_.get_mut(pair) {
            s.remove(&idx);
        }
    }

    fn best(&self) -> Option<(String, String)> {
        self.queue.first().map(|(_, l, r)| (l.clone(), r.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Undone {
    pub sentence: Sentence,
    /// Continuation markers found on the final token and dropped.
    pub dangling_markers: usize,
}

/// Joins `@@`-marked pieces back into words.
pub fn bpe_undo(sent: &Sentence) -> Undone {
    let mut out = Vec::with_capacity(sent.len());
    let mut buf = String::new();
    let mut dangling = 0;
    for tok in sent {
        match tok.strip_suffix(CONTINUATION) {
            Some(stem) => buf.push_str(stem),
            None => {
                buf.push_str(tok);
                out.push(Token::trusted(std::mem::take(&mut buf)));
            }
        }
    }
    if !buf.is_empty() || sent.iter().last().is_some_and(|t| t.ends_with(CONTINUATION)) {
        dangling += 1;
        if !buf.is_empty() {
            out.push(Token::trusted(buf));
        }
    }
    Undone {
        sentence: Sentence::new(out),
        dangling_markers: dangling,
    }
}
