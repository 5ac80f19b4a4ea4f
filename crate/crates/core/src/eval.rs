//! Constraint satisfaction, corpus BLEU-4 and embedding neighbours.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::annotator::Sidecar;
use crate::error::{Error, Result};
use crate::model::Matrix;
use crate::model::Float;
use crate::text::Sentence;
use crate::vocab::JointVocab;

/// `round(10000 · ok / total)` with halves rounded up, in exact integer
/// arithmetic. Zero when `total` is zero.
pub fn rate_hundredths(ok: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    (20_000 * ok + total) / (2 * total)
}

/// Percentage rounded to two decimals.
pub fn rate(ok: u64, total: u64) -> f64 {
    rate_hundredths(ok, total) as f64 / 100.0
}

pub fn format_percent(ok: u64, total: u64) -> String {
    let r = rate_hundredths(ok, total);
    format!("{}.{:02}%", r / 100, r % 100)
}

/// Thousands-separated count, e.g. `6,092`.
pub fn format_count(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// `2,276 (74.19%)`
pub fn format_count_rate(ok: u64, total: u64) -> String {
    format!("{} ({})", format_count(ok), format_percent(ok, total))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Sentences with at least one constraint.
    pub total_sentences: u64,
    pub total_phrases: u64,
    pub ok_sentences: u64,
    pub ok_phrases: u64,
    pub bleu: Option<BleuReport>,
}

impl EvalReport {
    pub fn from_counts(ok_sentences: u64, total_sentences: u64, ok_phrases: u64, total_phrases: u64) -> Self {
        EvalReport {
            total_sentences,
            total_phrases,
            ok_sentences,
            ok_phrases,
            bleu: None,
        }
    }

    pub fn sentence_rate(&self) -> f64 {
        rate(self.ok_sentences, self.total_sentences)
    }

    pub fn phrase_rate(&self) -> f64 {
        rate(self.ok_phrases, self.total_phrases)
    }

    pub fn sentence_cell(&self) -> String {
        format_count_rate(self.ok_sentences, self.total_sentences)
    }

    pub fn phrase_cell(&self) -> String {
        format_count_rate(self.ok_phrases, self.total_phrases)
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "total_sentences={}\nok_sentences={}\nsentence_rate={}\ntotal_phrases={}\nok_phrases={}\nphrase_rate={}\n",
            self.total_sentences,
            self.ok_sentences,
            format_percent(self.ok_sentences, self.total_sentences).trim_end_matches('%'),
            self.total_phrases,
            self.ok_phrases,
            format_percent(self.ok_phrases, self.total_phrases).trim_end_matches('%'),
        );
        if let Some(b) = &self.bleu {
            let _ = writeln!(s, "bleu={:.2}", b.score);
        }
        s
    }
}

/// A text table with one row per labelled report: totals first, then
/// `count (rate)` cells for sentences and phrases, then BLEU when present.
pub fn format_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let _ = writeln!(out, "{:<width$}  {:<18}  {:<18}  {}", "Method", "Sentences", "Phrases", "BLEU");
    let _ = writeln!(
        out,
        "{:<width$}  {:<18}  {:<18}",
        "Total",
        format_count(first.total_sentences),
        format_count(first.total_phrases)
    );
    for (label, r) in rows {
        let bleu = r.bleu.as_ref().map(|b| format!("{:.2}", b.score)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<width$}  {:<18}  {:<18}  {}",
            label,
            r.sentence_cell(),
            r.phrase_cell(),
            bleu
        );
    }
    out
}

/// Number of pairwise disjoint occurrences of `needle` in `hay` (greedy
/// leftmost, which is maximal for a single pattern).
pub fn disjoint_occurrences<T: PartialEq>(hay: &[T], needle: &[T]) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut from = 0;
    while let Some(p) = crate::text::find_subsequence(hay, needle, from) {
        count += 1;
        from = p + needle.len();
    }
    count
}

/// Phrase and sentence level constraint satisfaction of (detagged,
/// BPE-undone) hypotheses. Matching is case-insensitive.
pub fn constraint_accuracy(hyps: &[Sentence], sidecar: &Sidecar) -> Result<EvalReport> {
    if hyps.len() != sidecar.lines {
        return Err(Error::LineMismatch {
            left: "hypotheses".into(),
            left_lines: hyps.len(),
            right: "constraints".into(),
            right_lines: sidecar.lines,
        });
    }
    let mut report = EvalReport::default();
    for (hyp, entries) in hyps.iter().zip(sidecar.by_line()) {
        if entries.is_empty() {
            continue;
        }
        let h = hyp.lowercased();
        let mut wanted: HashMap<Vec<String>, usize> = HashMap::new();
        for e in &entries {
            let q: Vec<String> = e.tgt.iter().map(|t| t.as_str().to_lowercase()).collect();
            *wanted.entry(q).or_insert(0) += 1;
        }
        let ok: usize = wanted.iter().map(|(q, &k)| k.min(disjoint_occurrences(&h, q))).sum();
        report.total_sentences += 1;
        report.total_phrases += entries.len() as u64;
        report.ok_phrases += ok as u64;
        if ok == entries.len() {
            report.ok_sentences += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuReport {
    /// 100 × BLEU.
    pub score: f64,
    pub precisions: [f64; 4],
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Case-insensitive corpus BLEU-4 with clipped counts against any number of
/// references per line, closest reference length (ties to the shorter) and
/// no smoothing.
pub fn bleu4(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::LineMismatch {
            left: "hypotheses".into(),
            left_lines: hyps.len(),
            right: "references".into(),
            right_lines: refs.len(),
        });
    }
    let mut r = BleuReport::default();
    for (hyp, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::Invalid("a hypothesis has no reference".into()));
        }
        let h = hyp.lowercased();
        let rl: Vec<Vec<String>> = rs.iter().map(Sentence::lowercased).collect();
        r.hyp_len += h.len() as u64;
        let closest = rl
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| ((l as i64 - h.len() as i64).abs(), l))
            .expect("at least one reference");
        r.ref_len += closest as u64;
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for x in &rl {
                for (g, c) in ngram_counts(x, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                r.matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            r.totals[n - 1] += h.len().saturating_sub(n - 1) as u64;
        }
    }
    if r.hyp_len == 0 {
        return Err(Error::Empty("hypotheses contain no tokens".into()));
    }
    for n in 0..4 {
        r.precisions[n] = if r.totals[n] == 0 {
            0.0
        } else {
            r.matches[n] as f64 / r.totals[n] as f64
        };
    }
    r.brevity_penalty = if r.hyp_len < r.ref_len {
        (1.0 - r.ref_len as f64 / r.hyp_len as f64).exp()
    } else {
        1.0
    };
    r.score = if r.precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = r.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * r.brevity_penalty * log_mean.exp()
    };
    Ok(r)
}

fn normalized_rows<T: Float>(emb: &Matrix<T>) -> Vec<Vec<f64>> {
    (0..emb.rows)
        .map(|r| {
            let row: Vec<f64> = emb.row(r).iter().map(|v| v.to_f64()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                row
            } else {
                row.into_iter().map(|v| v / norm).collect()
            }
        })
        .collect()
}

/// All rows ranked by cosine similarity to `query` (descending, ties by
/// index), skipping the indices in `exclude`.
pub fn cosine_ranking<T: Float>(emb: &Matrix<T>, query: &[f64], exclude: &[usize]) -> Vec<(usize, f64)> {
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rows = normalized_rows(emb);
    let mut out: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .map(|(i, row)| {
            let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
            let sim = if qn == 0.0 { 0.0 } else { (dot / qn).clamp(-1.0, 1.0) };
            (i, sim)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// The `k` vocabulary entries whose embeddings are closest to `query`'s by
/// cosine similarity, excluding the query itself.
pub fn nearest_neighbors<T: Float>(
    emb: &Matrix<T>,
    vocab: &JointVocab,
    query: &str,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if emb.rows != vocab.len() {
        return Err(Error::Shape(format!(
            "embedding has {} rows but the vocabulary has {} entries",
            emb.rows,
            vocab.len()
        )));
    }
    let q = vocab.id(query).ok_or_else(|| Error::UnknownToken(query.to_string()))? as usize;
    let qv: Vec<f64> = emb.row(q).iter().map(|v| v.to_f64()).collect();
    Ok(cosine_ranking(emb, &qv, &[q])
        .into_iter()
        .take(k)
        .map(|(i, s)| (vocab.tokens()[i].clone(), s))
        .collect())
}
