//! Data annotation with pre-specified translations.
//!
//! Matched source phrases `p` with lexicon translation `q` are rewritten
//! according to an [`AnnotationScheme`]:
//!
//! | method | source                              | target              |
//! |--------|-------------------------------------|---------------------|
//! | BASE   | `p`                                 | unchanged           |
//! | T      | `<start> p <end>`                   | `<start> q <end>`   |
//! | R      | `q`                                 | unchanged           |
//! | M      | `p q`                               | unchanged           |
//! | T&R    | `<start> q <end>`                   | `<start> q <end>`   |
//! | T&M    | `<start> p <middle> q <end>`        | `<start> q <end>`   |
//!
//! With `extra` set, a token-type sequence is emitted alongside the source:
//! original `p` tokens are [`TokenType::Source`], inserted `q` tokens are
//! [`TokenType::Target`] and everything else, tags included, is
//! [`TokenType::Normal`].

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::miner::{join, Lexicon, TranslationPair, MAX_PHRASE_LEN};
use crate::text::{self, Sentence, Token};

pub const TAG_START: &str = "<start>";
pub const TAG_MIDDLE: &str = "<middle>";
pub const TAG_END: &str = "<end>";
pub const TAGS: [&str; 3] = [TAG_START, TAG_MIDDLE, TAG_END];

pub fn is_tag(tok: &str) -> bool {
    TAGS.contains(&tok)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Base,
    Tag,
    Replace,
    Mixed,
    TagReplace,
    TagMixed,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Base,
        Method::Tag,
        Method::Replace,
        Method::Mixed,
        Method::TagReplace,
        Method::TagMixed,
    ];

    pub fn tags_target(self) -> bool {
        matches!(self, Method::Tag | Method::TagReplace | Method::TagMixed)
    }

    pub fn keeps_source_phrase(self) -> bool {
        matches!(self, Method::Base | Method::Tag | Method::Mixed | Method::TagMixed)
    }

    pub fn inserts_target_phrase(self) -> bool {
        matches!(
            self,
            Method::Replace | Method::Mixed | Method::TagReplace | Method::TagMixed
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Tag => "t",
            Method::Replace => "r",
            Method::Mixed => "m",
            Method::TagReplace => "tr",
            Method::TagMixed => "tm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown scheme {s:?} (expected base, t, r, m, tr or tm)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnnotationScheme {
    pub method: Method,
    /// Emit token-type sequences for the extra embedding channel.
    pub extra: bool,
}

impl AnnotationScheme {
    pub fn new(method: Method, extra: bool) -> Self {
        AnnotationScheme { method, extra }
    }

    /// Display label in the `T&M&E` style.
    pub fn label(&self) -> String {
        let mut s = match self.method {
            Method::Base => "BASE".to_string(),
            Method::Tag => "T".into(),
            Method::Replace => "R".into(),
            Method::Mixed => "M".into(),
            Method::TagReplace => "T&R".into(),
            Method::TagMixed => "T&M".into(),
        };
        if self.extra {
            if self.method == Method::Base {
                s = "E".into();
            } else {
                s.push_str("&E");
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenType {
    Normal,
    Source,
    Target,
    Pad,
}

impl TokenType {
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            TokenType::Normal => 0,
            TokenType::Source => 1,
            TokenType::Target => 2,
            TokenType::Pad => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        [TokenType::Normal, TokenType::Source, TokenType::Target, TokenType::Pad]
            .get(i)
            .copied()
    }

    /// Serialized letter; `Pad` has none.
    pub fn letter(self) -> Option<char> {
        match self {
            TokenType::Normal => Some('n'),
            TokenType::Source => Some('s'),
            TokenType::Target => Some('t'),
            TokenType::Pad => None,
        }
    }

    pub fn from_letter(c: &str) -> Option<Self> {
        match c {
            "n" => Some(TokenType::Normal),
            "s" => Some(TokenType::Source),
            "t" => Some(TokenType::Target),
            _ => None,
        }
    }
}

pub fn format_types(types: &[TokenType]) -> Result<String> {
    let mut out = String::with_capacity(types.len() * 2);
    for (i, t) in types.iter().enumerate() {
        let c = t
            .letter()
            .ok_or_else(|| Error::Invalid("PAD token type cannot be serialized".into()))?;
        if i > 0 {
            out.push(' ');
        }
        out.push(c);
    }
    Ok(out)
}

pub fn parse_types(line: &str) -> Result<Vec<TokenType>> {
    line.split_whitespace()
        .map(|c| TokenType::from_letter(c).ok_or_else(|| Error::Invalid(format!("bad token type {c:?}"))))
        .collect()
}

pub fn read_types(path: &Path) -> Result<Vec<Vec<TokenType>>> {
    text::read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| parse_types(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

/// A matched pre-specified translation in a source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub pair: TranslationPair,
    /// The matched tokens as they appear in the original sentence.
    pub surface: Vec<Token>,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedExample {
    pub src: Sentence,
    pub tgt: Option<Sentence>,
    pub types: Option<Vec<TokenType>>,
    pub constraints: Vec<Constraint>,
}

/// Leftmost occurrence of `needle` in `hay` that does not overlap any
/// position already marked in `used`.
fn find_free<S: AsRef<str>>(hay: &[String], needle: &[S], used: &[bool]) -> Option<usize> {
    let n = needle.len();
    if n == 0 || n > hay.len() {
        return None;
    }
    (0..=hay.len() - n).find(|&i| {
        !used[i..i + n].iter().any(|&u| u)
            && hay[i..i + n].iter().zip(needle).all(|(h, q)| h == q.as_ref())
    })
}

/// Greedy longest-match-first, left-to-right lexicon matching over source
/// n-grams (n ≤ 5). When `tgt` is given (training mode) a match is accepted
/// only if its translation occurs in the target at a position not already
/// claimed by an earlier match.
pub fn match_phrases(src: &Sentence, tgt: Option<&Sentence>, lexicon: &Lexicon) -> Vec<Constraint> {
    let lower = src.lowercased();
    let tgt_lower = tgt.map(Sentence::lowercased);
    let mut used = vec![false; tgt_lower.as_ref().map_or(0, Vec::len)];
    let longest = lexicon.max_src_len().min(MAX_PHRASE_LEN);
    let mut out = Vec::new();
    let mut i = 0;
    while i < lower.len() {
        let max_n = longest.min(lower.len() - i);
        let mut advanced = false;
        for n in (1..=max_n).rev() {
            let Some(pair) = lexicon.get(&join(&lower[i..i + n])) else {
                continue;
            };
            if let Some(t) = &tgt_lower {
                let Some(pos) = find_free(t, &pair.tgt, &used) else {
                    continue;
                };
                used[pos..pos + pair.tgt.len()].iter_mut().for_each(|u| *u = true);
            }
            out.push(Constraint {
                pair: pair.clone(),
                surface: src.tokens()[i..i + n].to_vec(),
                start: i,
                end: i + n,
            });
            i += n;
            advanced = true;
            break;
        }
        if !advanced {
            i += 1;
        }
    }
    out
}

fn tag(t: &str) -> Token {
    Token::trusted(t)
}

struct TypedBuilder {
    tokens: Vec<Token>,
    types: Vec<TokenType>,
}

impl TypedBuilder {
    fn with_capacity(n: usize) -> Self {
        TypedBuilder {
            tokens: Vec::with_capacity(n),
            types: Vec::with_capacity(n),
        }
    }

    fn extend(&mut self, toks: &[Token], ty: TokenType) {
        self.tokens.extend_from_slice(toks);
        self.types.extend(std::iter::repeat(ty).take(toks.len()));
    }

    fn tag(&mut self, t: &str) {
        self.tokens.push(tag(t));
        self.types.push(TokenType::Normal);
    }
}

/// Applies `scheme` to one sentence pair. `constraints` must be sorted and
/// non-overlapping, as produced by [`match_phrases`].
pub fn annotate(
    src: &Sentence,
    tgt: Option<&Sentence>,
    constraints: &[Constraint],
    scheme: AnnotationScheme,
) -> Result<AnnotatedExample> {
    let method = scheme.method;
    let mut b = TypedBuilder::with_capacity(src.len() + 4 * constraints.len());
    let toks = src.tokens();
    let mut pos = 0;
    for c in constraints {
        if c.start < pos || c.end > toks.len() || c.start >= c.end {
            return Err(Error::Invalid(format!(
                "constraint span {}..{} is unsorted, overlapping or out of bounds",
                c.start, c.end
            )));
        }
        b.extend(&toks[pos..c.start], TokenType::Normal);
        let p = &toks[c.start..c.end];
        let q = &c.pair.tgt;
        match method {
            Method::Base => b.extend(p, TokenType::Normal),
            Method::Tag => {
                b.tag(TAG_START);
                b.extend(p, TokenType::Source);
                b.tag(TAG_END);
            }
            Method::Replace => b.extend(q, TokenType::Target),
            Method::Mixed => {
                b.extend(p, TokenType::Source);
                b.extend(q, TokenType::Target);
            }
            Method::TagReplace => {
                b.tag(TAG_START);
                b.extend(q, TokenType::Target);
                b.tag(TAG_END);
            }
            Method::TagMixed => {
                b.tag(TAG_START);
                b.extend(p, TokenType::Source);
                b.tag(TAG_MIDDLE);
                b.extend(q, TokenType::Target);
                b.tag(TAG_END);
            }
        }
        pos = c.end;
    }
    b.extend(&toks[pos..], TokenType::Normal);
    let TypedBuilder { tokens: out, types } = b;

    let tgt_out = match tgt {
        Some(t) if method.tags_target() => Some(tag_target(t, constraints)?),
        Some(t) => Some(t.clone()),
        None => None,
    };

    let types = if !scheme.extra {
        None
    } else if method == Method::Base {
        Some(vec![TokenType::Normal; out.len()])
    } else {
        Some(types)
    };

    Ok(AnnotatedExample {
        src: Sentence::new(out),
        tgt: tgt_out,
        types,
        constraints: constraints.to_vec(),
    })
}

/// Wraps the leftmost unclaimed occurrence of each constraint's `q` in the
/// target with `<start>`/`<end>`, processing constraints in order.
fn tag_target(tgt: &Sentence, constraints: &[Constraint]) -> Result<Sentence> {
    let lower = tgt.lowercased();
    let mut used = vec![false; lower.len()];
    let mut opens = vec![false; lower.len()];
    let mut closes = vec![false; lower.len()];
    for c in constraints {
        let q = &c.pair.tgt;
        let pos = find_free(&lower, q, &used).ok_or_else(|| Error::TargetPhraseMissing(c.pair.tgt_key()))?;
        used[pos..pos + q.len()].iter_mut().for_each(|u| *u = true);
        opens[pos] = true;
        closes[pos + q.len() - 1] = true;
    }
    let mut out = Vec::with_capacity(tgt.len() + 2 * constraints.len());
    for (i, t) in tgt.iter().enumerate() {
        if opens[i] {
            out.push(tag(TAG_START));
        }
        out.push(t.clone());
        if closes[i] {
            out.push(tag(TAG_END));
        }
    }
    Ok(Sentence::new(out))
}

/// Undoes [`annotate`] on the source side: removes tags, drops inserted
/// target phrases and puts the original surface form back where it was
/// replaced.
pub fn restore_source(annotated: &Sentence, constraints: &[Constraint], method: Method) -> Result<Sentence> {
    let toks = annotated.tokens();
    let mut out = Vec::with_capacity(toks.len());
    let mut k = 0;
    let mut orig = 0;
    let bad = |what: &str, at: usize| Error::Invalid(format!("annotation mismatch at token {at}: expected {what}"));
    let expect = |k: &mut usize, what: &str| -> Result<()> {
        if toks.get(*k).map(Token::as_str) == Some(what) {
            *k += 1;
            Ok(())
        } else {
            Err(bad(what, *k))
        }
    };
    for c in constraints {
        while orig < c.start {
            out.push(toks.get(k).ok_or_else(|| bad("token", k))?.clone());
            k += 1;
            orig += 1;
        }
        let plen = c.end - c.start;
        let qlen = c.pair.tgt.len();
        let take = |k: &mut usize, n: usize, out: &mut Vec<Token>| -> Result<()> {
            if *k + n > toks.len() {
                return Err(bad("phrase", *k));
            }
            out.extend_from_slice(&toks[*k..*k + n]);
            *k += n;
            Ok(())
        };
        let skip = |k: &mut usize, n: usize| -> Result<()> {
            if *k + n > toks.len() {
                return Err(bad("phrase", *k));
            }
            *k += n;
            Ok(())
        };
        match method {
            Method::Base => take(&mut k, plen, &mut out)?,
            Method::Tag => {
                expect(&mut k, TAG_START)?;
                take(&mut k, plen, &mut out)?;
                expect(&mut k, TAG_END)?;
            }
            Method::Replace => {
                skip(&mut k, qlen)?;
                out.extend_from_slice(&c.surface);
            }
            Method::Mixed => {
                take(&mut k, plen, &mut out)?;
                skip(&mut k, qlen)?;
            }
            Method::TagReplace => {
                expect(&mut k, TAG_START)?;
                skip(&mut k, qlen)?;
                expect(&mut k, TAG_END)?;
                out.extend_from_slice(&c.surface);
            }
            Method::TagMixed => {
                expect(&mut k, TAG_START)?;
                take(&mut k, plen, &mut out)?;
                expect(&mut k, TAG_MIDDLE)?;
                skip(&mut k, qlen)?;
                expect(&mut k, TAG_END)?;
            }
        }
        orig = c.end;
    }
    out.extend_from_slice(&toks[k..]);
    Ok(Sentence::new(out))
}

/// Whether the tags in a sentence form well-nested, non-nested groups with
/// at most one `<middle>` each.
pub fn tags_balanced<S: AsRef<str>>(tokens: &[S]) -> bool {
    let mut open = false;
    let mut middle = false;
    for t in tokens {
        match t.as_ref() {
            TAG_START if open => return false,
            TAG_START => {
                open = true;
                middle = false;
            }
            TAG_MIDDLE if !open || middle => return false,
            TAG_MIDDLE => middle = true,
            TAG_END if !open => return false,
            TAG_END => open = false,
            _ => {}
        }
    }
    !open
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detagged {
    pub sentence: Sentence,
    /// Set when tags were unbalanced and only tag tokens were removed.
    pub unbalanced: bool,
}

/// Removes annotation tags. For a `<start> a.. <middle> b.. <end>` group the
/// `a..` segment is dropped as well. Unbalanced input falls back to removing
/// only the tag tokens.
pub fn detag(sent: &Sentence) -> Detagged {
    let toks = sent.tokens();
    if !tags_balanced(toks) {
        return Detagged {
            sentence: toks.iter().filter(|t| !is_tag(t)).cloned().collect(),
            unbalanced: true,
        };
    }
    let mut out = Vec::with_capacity(toks.len());
    let mut group_start: Option<usize> = None;
    for t in toks {
        match t.as_str() {
            TAG_START => group_start = Some(out.len()),
            TAG_MIDDLE => {
                if let Some(g) = group_start {
                    out.truncate(g);
                }
            }
            TAG_END => group_start = None,
            _ => out.push(t.clone()),
        }
    }
    Detagged {
        sentence: Sentence::new(out),
        unbalanced: false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SidecarEntry {
    /// 0-based sentence index.
    pub line: usize,
    pub start: usize,
    pub end: usize,
    pub src: Vec<Token>,
    pub tgt: Vec<Token>,
}

/// Per-sentence constraint listing written next to an annotated corpus.
///
/// The `#lines=N` header records the corpus length so consumers can detect
/// misaligned inputs even though sentences without constraints have no rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sidecar {
    pub lines: usize,
    pub entries: Vec<SidecarEntry>,
}

impl Sidecar {
    pub fn push_constraints(&mut self, line: usize, constraints: &[Constraint]) {
        for c in constraints {
            self.entries.push(SidecarEntry {
                line,
                start: c.start,
                end: c.end,
                src: c.surface.clone(),
                tgt: c.pair.tgt.clone(),
            });
        }
    }

    /// Constraints grouped per sentence.
    pub fn by_line(&self) -> Vec<Vec<&SidecarEntry>> {
        let mut out = vec![Vec::new(); self.lines];
        for e in &self.entries {
            if e.line < self.lines {
                out[e.line].push(e);
            }
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "#lines={}", self.lines)?;
        for e in &self.entries {
            writeln!(w, "{}\t{}\t{}\t{}\t{}", e.line, e.start, e.end, join(&e.src), join(&e.tgt))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = text::create_writer(path)?;
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut sidecar = Sidecar::default();
        let mut header = false;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if let Some(n) = line.strip_prefix("#lines=") {
                sidecar.lines = n
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(i + 1, "bad #lines header"))?;
                header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::parse(i + 1, format!("expected 5 columns, found {}", cols.len())));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::parse(i + 1, format!("bad integer {s:?}")))
            };
            let phrase = |s: &str| -> Result<Vec<Token>> {
                let p: Vec<Token> = s.split_whitespace().map(Token::trusted).collect();
                if p.is_empty() {
                    Err(Error::parse(i + 1, "empty phrase"))
                } else {
                    Ok(p)
                }
            };
            sidecar.entries.push(SidecarEntry {
                line: num(cols[0])?,
                start: num(cols[1])?,
                end: num(cols[2])?,
                src: phrase(cols[3])?,
                tgt: phrase(cols[4])?,
            });
        }
        if !header {
            sidecar.lines = sidecar.entries.iter().map(|e| e.line + 1).max().unwrap_or(0);
        }
        if let Some(e) = sidecar.entries.iter().find(|e| e.line >= sidecar.lines) {
            return Err(Error::Invalid(format!(
                "sidecar entry for line {} beyond declared {} lines",
                e.line, sidecar.lines
            )));
        }
        Ok(sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(text::open_reader(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AnnotationStats {
    pub sentences: usize,
    /// Sentences bearing at least one constraint.
    pub annotated_sentences: usize,
    pub constraints: usize,
}

impl AnnotationStats {
    pub fn merge(&mut self, other: &AnnotationStats) {
        self.sentences += other.sentences;
        self.annotated_sentences += other.annotated_sentences;
        self.constraints += other.constraints;
    }

    pub fn to_kv(&self) -> String {
        format!(
            "sentences={}\nannotated_sentences={}\nconstraints={}\n",
            self.sentences, self.annotated_sentences, self.constraints
        )
    }
}

/// In-memory corpus annotation. `tgt` is `None` in test mode.
pub fn annotate_sentences(
    src: &[Sentence],
    tgt: Option<&[Sentence]>,
    lexicon: &Lexicon,
    scheme: AnnotationScheme,
) -> Result<(Vec<AnnotatedExample>, AnnotationStats)> {
    if let Some(t) = tgt {
        if t.len() != src.len() {
            return Err(Error::LineMismatch {
                left: "source".into(),
                left_lines: src.len(),
                right: "target".into(),
                right_lines: t.len(),
            });
        }
    }
    let mut stats = AnnotationStats::default();
    let mut out = Vec::with_capacity(src.len());
    for (i, s) in src.iter().enumerate() {
        let t = tgt.map(|t| &t[i]);
        let constraints = match_phrases(s, t, lexicon);
        stats.sentences += 1;
        if !constraints.is_empty() {
            stats.annotated_sentences += 1;
            stats.constraints += constraints.len();
        }
        out.push(annotate(s, t, &constraints, scheme)?);
    }
    Ok((out, stats))
}

/// Output locations for [`annotate_corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusOutputs {
    pub src: PathBuf,
    pub tgt: Option<PathBuf>,
    pub types: Option<PathBuf>,
    pub sidecar: PathBuf,
    pub stats: PathBuf,
}

impl CorpusOutputs {
    /// `<prefix>.src`, `<prefix>.tgt`, `<prefix>.types`,
    /// `<prefix>.constraints.tsv` and `<prefix>.stats`.
    pub fn with_prefix(prefix: &Path, with_target: bool, extra: bool) -> Self {
        let p = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        CorpusOutputs {
            src: p(".src"),
            tgt: with_target.then(|| p(".tgt")),
            types: extra.then(|| p(".types")),
            sidecar: p(".constraints.tsv"),
            stats: p(".stats"),
        }
    }
}

/// Streams a corpus through matching and annotation. With `tgt_path` absent
/// the corpus is annotated in test mode and no target output is written.
pub fn annotate_corpus(
    src_path: &Path,
    tgt_path: Option<&Path>,
    lexicon: &Lexicon,
    scheme: AnnotationScheme,
    outputs: &CorpusOutputs,
) -> Result<AnnotationStats> {
    let src_lines = text::count_lines(src_path)?;
    if let Some(tp) = tgt_path {
        let tgt_lines = text::count_lines(tp)?;
        if tgt_lines != src_lines {
            return Err(Error::LineMismatch {
                left: src_path.display().to_string(),
                left_lines: src_lines,
                right: tp.display().to_string(),
                right_lines: tgt_lines,
            });
        }
        if outputs.tgt.is_none() {
            return Err(Error::Invalid("target input given without a target output path".into()));
        }
    }
    if scheme.extra && outputs.types.is_none() {
        return Err(Error::Invalid("extra embeddings requested without a types output path".into()));
    }

    let src_reader = text::open_reader(src_path)?;
    let mut tgt_lines = match tgt_path {
        Some(p) => Some(text::open_reader(p)?.lines()),
        None => None,
    };
    let mut src_w = text::create_writer(&outputs.src)?;
    let mut tgt_w = match (&outputs.tgt, tgt_path) {
        (Some(p), Some(_)) => Some((text::create_writer(p)?, p)),
        _ => None,
    };
    let mut types_w = match (&outputs.types, scheme.extra) {
        (Some(p), true) => Some((text::create_writer(p)?, p)),
        _ => None,
    };

    let mut stats = AnnotationStats::default();
    let mut sidecar = Sidecar {
        lines: src_lines,
        entries: Vec::new(),
    };
    for (i, line) in src_reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(src_path, e))?;
        let src = Sentence::parse(&line)
            .map_err(|_| Error::parse(i + 1, format!("{}: empty sentence", src_path.display())))?;
        let tgt = match tgt_lines.as_mut() {
            Some(it) => {
                let tp = tgt_path.expect("target path present");
                let l = it
                    .next()
                    .ok_or_else(|| Error::parse(i + 1, "target ended early"))?
                    .map_err(|e| Error::io(tp, e))?;
                Some(
                    Sentence::parse(&l)
                        .map_err(|_| Error::parse(i + 1, format!("{}: empty sentence", tp.display())))?,
                )
            }
            None => None,
        };
        let constraints = match_phrases(&src, tgt.as_ref(), lexicon);
        stats.sentences += 1;
        if !constraints.is_empty() {
            stats.annotated_sentences += 1;
            stats.constraints += constraints.len();
        }
        let ex = annotate(&src, tgt.as_ref(), &constraints, scheme)?;
        writeln!(src_w, "{}", ex.src).map_err(|e| Error::io(&outputs.src, e))?;
        if let (Some((w, p)), Some(t)) = (tgt_w.as_mut(), ex.tgt.as_ref()) {
            writeln!(w, "{t}").map_err(|e| Error::io(*p, e))?;
        }
        if let (Some((w, p)), Some(ty)) = (types_w.as_mut(), ex.types.as_ref()) {
            writeln!(w, "{}", format_types(ty)?).map_err(|e| Error::io(*p, e))?;
        }
        sidecar.push_constraints(i, &constraints);
    }

    src_w.flush().map_err(|e| Error::io(&outputs.src, e))?;
    if let Some((mut w, p)) = tgt_w {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some((mut w, p)) = types_w {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    sidecar.save(&outputs.sidecar)?;
    std::fs::write(&outputs.stats, stats.to_kv()).map_err(|e| Error::io(&outputs.stats, e))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(|t| Token::new(t).unwrap()).collect()
    }

    fn lex(pairs: &[(&str, &str)]) -> Lexicon {
        pairs
            .iter()
            .map(|(p, q)| TranslationPair {
                src: toks(p),
                tgt: toks(q),
                score: 1.0,
            })
            .collect()
    }

    fn hk() -> (Sentence, Sentence, Lexicon) {
        (
            Sentence::from_text("我 爱 香港"),
            Sentence::from_text("i love hong kong"),
            lex(&[("香港", "hong kong")]),
        )
    }

    #[test]
    fn matches_with_target_verification() {
        let (src, tgt, lexicon) = hk();
        let cs = match_phrases(&src, Some(&tgt), &lexicon);
        assert_eq!(cs.len(), 1);
        assert_eq!((cs[0].start, cs[0].end), (2, 3));

        let other = Sentence::from_text("i love macau");
        assert!(match_phrases(&src, Some(&other), &lexicon).is_empty());
    }

    #[test]
    fn overlapping_matches_resolve_left_to_right() {
        let src = Sentence::from_text("a b c");
        let cs = match_phrases(&src, None, &lex(&[("a b", "x"), ("b c", "y")]));
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].pair.tgt, toks("x"));
        assert_eq!((cs[0].start, cs[0].end), (0, 2));
    }

    #[test]
    fn longer_match_wins_and_failed_verification_falls_back() {
        let lexicon = lex(&[("a b", "x y"), ("a", "x")]);
        let src = Sentence::from_text("a b c");
        let cs = match_phrases(&src, None, &lexicon);
        assert_eq!(cs[0].end, 2);
        // the bigram's translation is absent, the unigram's is present
        let cs = match_phrases(&src, Some(&Sentence::from_text("x z")), &lexicon);
        assert_eq!((cs[0].start, cs[0].end), (0, 1));
    }

    #[test]
    fn repeated_target_phrase_needs_distinct_occurrences() {
        let lexicon = lex(&[("p", "q")]);
        let src = Sentence::from_text("p a p");
        let cs = match_phrases(&src, Some(&Sentence::from_text("q b")), &lexicon);
        assert_eq!(cs.len(), 1);
        let cs = match_phrases(&src, Some(&Sentence::from_text("q b q")), &lexicon);
        assert_eq!(cs.len(), 2);
        let ex = annotate(&src, Some(&Sentence::from_text("q b q")), &cs, AnnotationScheme::new(Method::Tag, false))
            .unwrap();
        assert_eq!(ex.tgt.unwrap().to_string(), "<start> q <end> b <start> q <end>");
    }

    #[test]
    fn tagging_example() {
        let (src, tgt, lexicon) = hk();
        let cs = match_phrases(&src, Some(&tgt), &lexicon);
        let ex = annotate(&src, Some(&tgt), &cs, AnnotationScheme::new(Method::Tag, false)).unwrap();
        assert_eq!(ex.src.to_string(), "我 爱 <start> 香港 <end>");
        assert_eq!(ex.tgt.unwrap().to_string(), "i love <start> hong kong <end>");
        assert!(ex.types.is_none());
    }

    #[test]
    fn tag_mixed_extra_example() {
        let (src, tgt, lexicon) = hk();
        let cs = match_phrases(&src, Some(&tgt), &lexicon);
        let ex = annotate(&src, Some(&tgt), &cs, AnnotationScheme::new(Method::TagMixed, true)).unwrap();
        assert_eq!(ex.src.to_string(), "我 爱 <start> 香港 <middle> hong kong <end>");
        assert_eq!(ex.tgt.unwrap().to_string(), "i love <start> hong kong <end>");
        assert_eq!(format_types(&ex.types.unwrap()).unwrap(), "n n n s n t t n");
    }

    #[test]
    fn replacement_and_mixed_examples() {
        let (src, tgt, lexicon) = hk();
        let cs = match_phrases(&src, Some(&tgt), &lexicon);
        let r = annotate(&src, Some(&tgt), &cs, AnnotationScheme::new(Method::Replace, false)).unwrap();
        assert_eq!(r.src.to_string(), "我 爱 hong kong");
        assert_eq!(r.tgt.unwrap().to_string(), "i love hong kong");
        let m = annotate(&src, Some(&tgt), &cs, AnnotationScheme::new(Method::Mixed, false)).unwrap();
        assert_eq!(m.src.to_string(), "我 爱 香港 hong kong");
        let tr = annotate(&src, Some(&tgt), &cs, AnnotationScheme::new(Method::TagReplace, true)).unwrap();
        assert_eq!(tr.src.to_string(), "我 爱 <start> hong kong <end>");
        assert_eq!(format_types(&tr.types.unwrap()).unwrap(), "n n n t t n");
    }

    #[test]
    fn base_with_extra_is_all_normal() {
        let (src, tgt, lexicon) = hk();
        let cs = match_phrases(&src, Some(&tgt), &lexicon);
        let ex = annotate(&src, Some(&tgt), &cs, AnnotationScheme::new(Method::Base, true)).unwrap();
        assert_eq!(ex.src, src);
        assert_eq!(ex.types.unwrap(), vec![TokenType::Normal; 3]);
    }

    #[test]
    fn test_mode_leaves_target_absent() {
        let (src, _, lexicon) = hk();
        let cs = match_phrases(&src, None, &lexicon);
        let ex = annotate(&src, None, &cs, AnnotationScheme::new(Method::TagMixed, false)).unwrap();
        assert!(ex.tgt.is_none());
        assert_eq!(ex.src.to_string(), "我 爱 <start> 香港 <middle> hong kong <end>");
    }

    #[test]
    fn missing_target_phrase_is_an_error() {
        let (src, _, lexicon) = hk();
        let cs = match_phrases(&src, None, &lexicon);
        let other = Sentence::from_text("i love macau");
        let r = annotate(&src, Some(&other), &cs, AnnotationScheme::new(Method::Tag, false));
        assert!(matches!(r, Err(Error::TargetPhraseMissing(_))));
        // schemes that leave the target alone do not care
        assert!(annotate(&src, Some(&other), &cs, AnnotationScheme::new(Method::Replace, false)).is_ok());
    }

    #[test]
    fn restore_source_undoes_every_method() {
        let src = Sentence::from_text("Visit 香港 and 北京 today");
        let lexicon = lex(&[("香港", "hong kong"), ("北京", "beijing")]);
        let cs = match_phrases(&src, None, &lexicon);
        assert_eq!(cs.len(), 2);
        for m in Method::ALL {
            let ex = annotate(&src, None, &cs, AnnotationScheme::new(m, true)).unwrap();
            assert_eq!(restore_source(&ex.src, &cs, m).unwrap(), src, "{m}");
            assert_eq!(ex.types.unwrap().len(), ex.src.len());
        }
    }

    #[test]
    fn detag_examples() {
        let d = detag(&Sentence::from_text("i love <start> hong kong <end>"));
        assert_eq!(d.sentence.to_string(), "i love hong kong");
        assert!(!d.unbalanced);
        let d = detag(&Sentence::from_text("x <start> 香港 <middle> hong kong <end> y"));
        assert_eq!(d.sentence.to_string(), "x hong kong y");
        let d = detag(&Sentence::from_text("a b c"));
        assert_eq!(d.sentence.to_string(), "a b c");
    }

    #[test]
    fn detag_unbalanced_removes_tags_only() {
        for s in [
            "a <start> b <middle> c",
            "a <end> b",
            "<start> a <start> b <end>",
            "<start> a <middle> b <middle> c <end>",
        ] {
            let d = detag(&Sentence::from_text(s));
            assert!(d.unbalanced, "{s}");
            assert!(d.sentence.iter().all(|t| !is_tag(t)));
        }
        let d = detag(&Sentence::from_text("a <start> b <middle> c"));
        assert_eq!(d.sentence.to_string(), "a b c");
    }

    #[test]
    fn sidecar_round_trip_and_bounds() {
        let (src, tgt, lexicon) = hk();
        let cs = match_phrases(&src, Some(&tgt), &lexicon);
        let mut sc = Sidecar { lines: 2, entries: vec![] };
        sc.push_constraints(1, &cs);
        let mut buf = Vec::new();
        sc.write(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "#lines=2\n1\t2\t3\t香港\thong kong\n");
        assert_eq!(Sidecar::read(buf.as_slice()).unwrap(), sc);
        assert!(Sidecar::read("#lines=1\n1\t2\t3\ta\tb\n".as_bytes()).is_err());
    }

    #[test]
    fn scheme_parsing_and_labels() {
        assert_eq!("TM".parse::<Method>().unwrap(), Method::TagMixed);
        assert!("xyz".parse::<Method>().is_err());
        assert_eq!(AnnotationScheme::new(Method::TagMixed, true).label(), "T&M&E");
        assert_eq!(AnnotationScheme::new(Method::Base, false).label(), "BASE");
    }

    #[test]
    fn types_file_format() {
        assert_eq!(parse_types("n s t").unwrap(), vec![TokenType::Normal, TokenType::Source, TokenType::Target]);
        assert!(parse_types("n x").is_err());
        assert!(format_types(&[TokenType::Pad]).is_err());
    }
}
