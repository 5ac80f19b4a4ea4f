//! Building the bilingual lexicon of pre-specified translations.
//!
//! The lexicon is mined from three inputs: a sentence-aligned parallel
//! corpus, a phrase table in the Moses text format, and named-entity spans
//! over the source side. For every entity occurrence, the phrase-table
//! translations of its surface form that actually occur in the aligned target
//! sentence become candidates; each distinct source phrase keeps the single
//! highest-scoring candidate.
//!
//! All matching is done on lowercased tokens.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{self, contains_subsequence, Sentence, Token};

/// Longest source phrase the annotator will ever match.
pub const MAX_PHRASE_LEN: usize = 5;

/// Index of the phrase-table score used as "the probability" by default:
/// the direct phrase translation probability p(t|s) in Moses order.
pub const DEFAULT_SCORE_INDEX: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseTableEntry {
    pub src: Vec<Token>,
    pub tgt: Vec<Token>,
    pub scores: [f64; 4],
}

fn parse_phrase(field: &str, line: usize, side: &str) -> Result<Vec<Token>> {
    let toks: Vec<Token> = field.split_whitespace().map(Token::trusted).collect();
    if toks.is_empty() {
        return Err(Error::parse(line, format!("empty {side} phrase")));
    }
    Ok(toks)
}

/// Parses one phrase-table line. `line_no` is 1-based and only used for
/// error reporting.
///
/// Fields after the score field (Moses alignment and count columns) are
/// accepted and ignored.
pub fn parse_phrase_table_line(line: &str, line_no: usize) -> Result<PhraseTableEntry> {
    let fields: Vec<&str> = line.split("|||").collect();
    if fields.len() < 3 {
        return Err(Error::parse(
            line_no,
            format!("expected at least 3 '|||'-separated fields, found {}", fields.len()),
        ));
    }
    let src = parse_phrase(fields[0], line_no, "source")?;
    let tgt = parse_phrase(fields[1], line_no, "target")?;
    let raw: Vec<&str> = fields[2].split_whitespace().collect();
    if raw.len() != 4 {
        return Err(Error::parse(line_no, format!("expected 4 scores, found {}", raw.len())));
    }
    let mut scores = [0.0; 4];
    for (slot, s) in scores.iter_mut().zip(raw) {
        let v: f64 = s
            .parse()
            .map_err(|_| Error::parse(line_no, format!("non-numeric score {s:?}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::parse(line_no, format!("score {v} outside [0,1]")));
        }
        *slot = v;
    }
    Ok(PhraseTableEntry { src, tgt, scores })
}

/// Lazily parses a phrase table. Each item is either an entry or a parse
/// error carrying its line number; the caller decides whether to skip or
/// abort.
pub fn parse_phrase_table<R: BufRead>(reader: R) -> impl Iterator<Item = Result<PhraseTableEntry>> {
    reader
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| match line {
            Ok(l) => parse_phrase_table_line(&l, i + 1),
            Err(e) => Err(Error::Stream(e)),
        })
}

/// Reads a phrase table, skipping malformed lines. Returns the entries and
/// the errors that were skipped.
pub fn read_phrase_table_lenient(path: &Path) -> Result<(Vec<PhraseTableEntry>, Vec<Error>)> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for item in parse_phrase_table(text::open_reader(path)?) {
        match item {
            Ok(e) => entries.push(e),
            Err(Error::Stream(e)) => return Err(Error::io(path, e)),
            Err(e) => skipped.push(e),
        }
    }
    Ok((entries, skipped))
}

/// A named-entity occurrence: tokens `start..end` of sentence
/// `sentence_index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeSpan {
    pub sentence_index: usize,
    pub start: usize,
    pub end: usize,
}

impl NeSpan {
    pub fn new(sentence_index: usize, start: usize, end: usize) -> Self {
        NeSpan {
            sentence_index,
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

pub fn read_spans(path: &Path) -> Result<Vec<NeSpan>> {
    let mut spans = Vec::new();
    for (i, line) in text::read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(i + 1, format!("expected 3 columns, found {}", cols.len())));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(i + 1, format!("not a non-negative integer: {s:?}")))
        };
        spans.push(NeSpan::new(num(cols[0])?, num(cols[1])?, num(cols[2])?));
    }
    Ok(spans)
}

pub fn write_spans(path: &Path, spans: &[NeSpan]) -> Result<()> {
    let mut w = text::create_writer(path)?;
    for s in spans {
        writeln!(w, "{}\t{}\t{}", s.sentence_index, s.start, s.end).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A pre-specified translation pair (p, q) with its selection score.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationPair {
    pub src: Vec<Token>,
    pub tgt: Vec<Token>,
    pub score: f64,
}

impl TranslationPair {
    pub fn src_key(&self) -> String {
        join(&self.src)
    }

    pub fn tgt_key(&self) -> String {
        join(&self.tgt)
    }
}

pub(crate) fn join<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

fn lower_tokens(tokens: &[Token]) -> Vec<Token> {
    tokens.iter().map(Token::to_lowercase).collect()
}

/// The external database of pre-specified translations: exactly one target
/// phrase per (lowercased) source phrase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, TranslationPair>,
    max_src_len: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_src_len(&self) -> usize {
        self.max_src_len
    }

    /// Looks up a source phrase given as its space-joined lowercased form.
    pub fn get(&self, src_key: &str) -> Option<&TranslationPair> {
        self.entries.get(src_key)
    }

    /// Entries sorted by source phrase.
    pub fn iter(&self) -> impl Iterator<Item = &TranslationPair> {
        self.entries.values()
    }

    /// Offers a candidate. It replaces the current entry for its source
    /// phrase when its score is higher, or equal with a lexicographically
    /// smaller target phrase. Phrases are lowercased; candidates whose source
    /// is empty or longer than [`MAX_PHRASE_LEN`] are rejected.
    ///
    /// Returns whether the candidate is now the retained entry.
    pub fn offer(&mut self, pair: TranslationPair) -> bool {
        if pair.src.is_empty() || pair.src.len() > MAX_PHRASE_LEN || pair.tgt.is_empty() {
            return false;
        }
        let pair = TranslationPair {
            src: lower_tokens(&pair.src),
            tgt: lower_tokens(&pair.tgt),
            score: pair.score,
        };
        let key = pair.src_key();
        let len = pair.src.len();
        let better = match self.entries.get(&key) {
            None => true,
            Some(cur) => {
                pair.score > cur.score || (pair.score == cur.score && pair.tgt_key() < cur.tgt_key())
            }
        };
        if better {
            self.entries.insert(key, pair);
            self.max_src_len = self.max_src_len.max(len);
        }
        better
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in self.entries.values() {
            writeln!(w, "{}\t{}\t{}", p.src_key(), p.tgt_key(), p.score)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = text::create_writer(path)?;
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(i + 1, format!("expected 3 columns, found {}", cols.len())));
            }
            let src: Vec<Token> = cols[0].split_whitespace().map(Token::trusted).collect();
            let tgt: Vec<Token> = cols[1].split_whitespace().map(Token::trusted).collect();
            let score: f64 = cols[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad score {:?}", cols[2])))?;
            if src.is_empty() || tgt.is_empty() {
                return Err(Error::parse(i + 1, "empty phrase"));
            }
            if src.len() > MAX_PHRASE_LEN {
                return Err(Error::parse(
                    i + 1,
                    format!("source phrase longer than {MAX_PHRASE_LEN} tokens"),
                ));
            }
            lex.offer(TranslationPair { src, tgt, score });
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(text::open_reader(path)?)
    }
}

impl FromIterator<TranslationPair> for Lexicon {
    fn from_iter<I: IntoIterator<Item = TranslationPair>>(iter: I) -> Self {
        let mut lex = Lexicon::new();
        for p in iter {
            lex.offer(p);
        }
        lex
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MiningConfig {
    /// Which of the four phrase-table scores selects among candidates.
    pub score_index: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            score_index: DEFAULT_SCORE_INDEX,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MiningReport {
    pub occurrences: usize,
    /// Occurrences with at least one verified candidate.
    pub verified: usize,
    /// Occurrences with no phrase-table translation present in the target.
    pub unverified: usize,
    /// Occurrences dropped for exceeding [`MAX_PHRASE_LEN`] tokens.
    pub too_long: usize,
    pub candidates: usize,
}

/// Mines the lexicon. Spans that fall outside their sentence are a hard
/// error; entities with no verified translation are counted and skipped.
pub fn mine_lexicon(
    src_corpus: &[Sentence],
    tgt_corpus: &[Sentence],
    spans: &[NeSpan],
    table: &[PhraseTableEntry],
    cfg: &MiningConfig,
) -> Result<(Lexicon, MiningReport)> {
    if src_corpus.len() != tgt_corpus.len() {
        return Err(Error::LineMismatch {
            left: "source corpus".into(),
            left_lines: src_corpus.len(),
            right: "target corpus".into(),
            right_lines: tgt_corpus.len(),
        });
    }
    if cfg.score_index >= 4 {
        return Err(Error::Invalid(format!("score index {} not in 0..4", cfg.score_index)));
    }

    let mut by_src: HashMap<Vec<String>, Vec<&PhraseTableEntry>> = HashMap::new();
    for entry in table {
        let key: Vec<String> = entry.src.iter().map(|t| t.as_str().to_lowercase()).collect();
        by_src.entry(key).or_default().push(entry);
    }

    let mut report = MiningReport::default();
    let mut lexicon = Lexicon::new();
    for span in spans {
        let sent = src_corpus.get(span.sentence_index).ok_or_else(|| Error::SpanOutOfBounds {
            span: format!("{span:?}"),
            msg: format!("corpus has {} sentences", src_corpus.len()),
        })?;
        if span.start >= span.end || span.end > sent.len() {
            return Err(Error::SpanOutOfBounds {
                span: format!("{span:?}"),
                msg: format!("sentence has {} tokens", sent.len()),
            });
        }
        report.occurrences += 1;
        if span.len() > MAX_PHRASE_LEN {
            report.too_long += 1;
            continue;
        }
        let surface: Vec<String> = sent.tokens()[span.start..span.end]
            .iter()
            .map(|t| t.as_str().to_lowercase())
            .collect();
        let target = tgt_corpus[span.sentence_index].lowercased();
        let mut found = false;
        for entry in by_src.get(&surface).into_iter().flatten() {
            let q: Vec<String> = entry.tgt.iter().map(|t| t.as_str().to_lowercase()).collect();
            if contains_subsequence(&target, &q) {
                found = true;
                report.candidates += 1;
                lexicon.offer(TranslationPair {
                    src: entry.src.clone(),
                    tgt: entry.tgt.clone(),
                    score: entry.scores[cfg.score_index],
                });
            }
        }
        if found {
            report.verified += 1;
        } else {
            report.unverified += 1;
        }
    }
    Ok((lexicon, report))
}

/// Fallback entity recognizer: greedy longest-match, left to right, against
/// a list of phrases. Matching is case-insensitive.
pub fn apply_gazetteer(corpus: &[Sentence], gazetteer: &[Vec<Token>]) -> Vec<NeSpan> {
    let phrases: HashSet<Vec<String>> = gazetteer
        .iter()
        .filter(|p| !p.is_empty() && p.len() <= MAX_PHRASE_LEN)
        .map(|p| p.iter().map(|t| t.as_str().to_lowercase()).collect())
        .collect();
    let longest = phrases.iter().map(Vec::len).max().unwrap_or(0);
    let mut spans = Vec::new();
    if longest == 0 {
        return spans;
    }
    for (si, sent) in corpus.iter().enumerate() {
        let toks = sent.lowercased();
        let mut i = 0;
        while i < toks.len() {
            let max_n = longest.min(toks.len() - i);
            match (1..=max_n).rev().find(|&n| phrases.contains(&toks[i..i + n])) {
                Some(n) => {
                    spans.push(NeSpan::new(si, i, i + n));
                    i += n;
                }
                None => i += 1,
            }
        }
    }
    spans
}

/// Reads a gazetteer file: one phrase per line.
pub fn read_gazetteer(path: &Path) -> Result<Vec<Vec<Token>>> {
    Ok(text::read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(Token::trusted).collect::<Vec<_>>())
        .filter(|p| !p.is_empty())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        s.split_whitespace().map(|t| Token::new(t).unwrap()).collect()
    }

    fn entry(src: &str, tgt: &str, p: f64) -> PhraseTableEntry {
        PhraseTableEntry {
            src: toks(src),
            tgt: toks(tgt),
            scores: [0.5, 0.5, p, 0.5],
        }
    }

    #[test]
    fn parses_well_formed_lines() {
        let e = parse_phrase_table_line("香港 ||| hong kong ||| 0.2 0.1 0.9 0.3", 1).unwrap();
        assert_eq!(e.src, toks("香港"));
        assert_eq!(e.tgt, toks("hong kong"));
        assert_eq!(e.scores, [0.2, 0.1, 0.9, 0.3]);

        let e = parse_phrase_table_line("a b ||| x ||| 1 1 1 1", 1).unwrap();
        assert_eq!(e.src, toks("a b"));
        assert_eq!(e.tgt, toks("x"));
        assert_eq!(e.scores, [1.0; 4]);
    }

    #[test]
    fn malformed_lines_carry_line_number() {
        for bad in [
            "a ||| x ||| 0.5",
            "a ||| x",
            "a ||| x ||| 0.1 0.2 nan? 0.3",
            "a ||| x ||| 0.1 0.2 1.5 0.3",
            " ||| x ||| 1 1 1 1",
        ] {
            match parse_phrase_table_line(bad, 7) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 7, "{bad}"),
                other => panic!("{bad}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn stream_reports_errors_in_order() {
        let input = "a ||| x ||| 1 1 1 1\na ||| x ||| 0.5\nb ||| y ||| 0 0 0 0\n";
        let items: Vec<_> = parse_phrase_table(input.as_bytes()).collect();
        assert_eq!(items.len(), 3);
        assert!(items[0].is_ok());
        assert!(matches!(items[1], Err(Error::Parse { line: 2, .. })));
        assert!(items[2].is_ok());
    }

    #[test]
    fn extra_moses_columns_are_ignored() {
        let e = parse_phrase_table_line("a ||| x ||| 0.1 0.2 0.3 0.4 ||| 0-0 ||| 1 1 1", 1).unwrap();
        assert_eq!(e.scores, [0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn mines_highest_probability_verified_candidate() {
        let src = vec![Sentence::from_text("我 爱 香港")];
        let tgt = vec![Sentence::from_text("i love hong kong")];
        let spans = [NeSpan::new(0, 2, 3)];
        let table = [entry("香港", "hong kong", 0.9), entry("香港", "hongkong", 0.8)];
        let (lex, report) = mine_lexicon(&src, &tgt, &spans, &table, &MiningConfig::default()).unwrap();
        assert_eq!(lex.len(), 1);
        let p = lex.get("香港").unwrap();
        assert_eq!(p.tgt, toks("hong kong"));
        assert_eq!(p.score, 0.9);
        assert_eq!(report.verified, 1);
    }

    #[test]
    fn unverified_target_gives_empty_lexicon() {
        let src = vec![Sentence::from_text("我 爱 香港")];
        let tgt = vec![Sentence::from_text("i love macau")];
        let spans = [NeSpan::new(0, 2, 3)];
        let table = [entry("香港", "hong kong", 0.9), entry("香港", "hongkong", 0.8)];
        let (lex, report) = mine_lexicon(&src, &tgt, &spans, &table, &MiningConfig::default()).unwrap();
        assert!(lex.is_empty());
        assert_eq!(report.unverified, 1);
    }

    #[test]
    fn max_is_taken_across_occurrences() {
        let src = vec![Sentence::from_text("x 香港"), Sentence::from_text("香港 y")];
        let tgt = vec![Sentence::from_text("u hk"), Sentence::from_text("hong kong v")];
        let spans = [NeSpan::new(0, 1, 2), NeSpan::new(1, 0, 1)];
        let table = [entry("香港", "hk", 0.3), entry("香港", "hong kong", 0.7)];
        let (lex, _) = mine_lexicon(&src, &tgt, &spans, &table, &MiningConfig::default()).unwrap();
        assert_eq!(lex.get("香港").unwrap().score, 0.7);
    }

    #[test]
    fn ties_prefer_smallest_target() {
        let mut lex = Lexicon::new();
        lex.offer(TranslationPair { src: toks("a"), tgt: toks("z"), score: 0.5 });
        lex.offer(TranslationPair { src: toks("a"), tgt: toks("b"), score: 0.5 });
        lex.offer(TranslationPair { src: toks("a"), tgt: toks("c"), score: 0.5 });
        assert_eq!(lex.get("a").unwrap().tgt, toks("b"));
    }

    #[test]
    fn matching_is_case_insensitive() {
        let src = vec![Sentence::from_text("visit Paris now")];
        let tgt = vec![Sentence::from_text("besuche PARIS jetzt")];
        let spans = [NeSpan::new(0, 1, 2)];
        let table = [entry("paris", "Paris", 0.6)];
        let (lex, _) = mine_lexicon(&src, &tgt, &spans, &table, &MiningConfig::default()).unwrap();
        assert_eq!(lex.get("paris").unwrap().tgt, toks("paris"));
    }

    #[test]
    fn out_of_bounds_span_is_an_error() {
        let src = vec![Sentence::from_text("a b")];
        let tgt = vec![Sentence::from_text("x y")];
        for span in [NeSpan::new(1, 0, 1), NeSpan::new(0, 1, 3), NeSpan::new(0, 1, 1)] {
            let r = mine_lexicon(&src, &tgt, &[span], &[], &MiningConfig::default());
            assert!(matches!(r, Err(Error::SpanOutOfBounds { .. })), "{span:?}");
        }
    }

    #[test]
    fn long_spans_are_dropped_and_counted() {
        let src = vec![Sentence::from_text("a b c d e f")];
        let tgt = vec![Sentence::from_text("a b c d e f")];
        let table = [entry("a b c d e f", "a b c d e f", 1.0)];
        let (lex, report) =
            mine_lexicon(&src, &tgt, &[NeSpan::new(0, 0, 6)], &table, &MiningConfig::default()).unwrap();
        assert!(lex.is_empty());
        assert_eq!(report.too_long, 1);
    }

    #[test]
    fn score_column_is_configurable() {
        let src = vec![Sentence::from_text("a")];
        let tgt = vec![Sentence::from_text("x y")];
        let table = [
            PhraseTableEntry { src: toks("a"), tgt: toks("x"), scores: [0.9, 0.0, 0.1, 0.0] },
            PhraseTableEntry { src: toks("a"), tgt: toks("y"), scores: [0.1, 0.0, 0.9, 0.0] },
        ];
        let spans = [NeSpan::new(0, 0, 1)];
        let (lex, _) = mine_lexicon(&src, &tgt, &spans, &table, &MiningConfig::default()).unwrap();
        assert_eq!(lex.get("a").unwrap().tgt, toks("y"));
        let (lex, _) = mine_lexicon(&src, &tgt, &spans, &table, &MiningConfig { score_index: 0 }).unwrap();
        assert_eq!(lex.get("a").unwrap().tgt, toks("x"));
    }

    #[test]
    fn gazetteer_longest_match() {
        let corpus = vec![Sentence::from_text("我 爱 香港")];
        assert_eq!(apply_gazetteer(&corpus, &[toks("香港")]), vec![NeSpan::new(0, 2, 3)]);

        let corpus = vec![Sentence::from_text("a b c")];
        assert_eq!(
            apply_gazetteer(&corpus, &[toks("b c"), toks("b")]),
            vec![NeSpan::new(0, 1, 3)]
        );

        let corpus = vec![Sentence::from_text("a")];
        assert!(apply_gazetteer(&corpus, &[]).is_empty());
    }

    #[test]
    fn lexicon_tsv_round_trip() {
        let lex: Lexicon = [
            TranslationPair { src: toks("香港"), tgt: toks("hong kong"), score: 0.9 },
            TranslationPair { src: toks("北京"), tgt: toks("beijing"), score: 0.25 },
        ]
        .into_iter()
        .collect();
        let mut buf = Vec::new();
        lex.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        // sorted by source phrase
        assert!(text.starts_with("北京\tbeijing\t0.25\n"));
        let back = Lexicon::read(buf.as_slice()).unwrap();
        assert_eq!(back, lex);
    }
}
