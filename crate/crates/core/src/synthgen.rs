//! Seeded synthetic parallel corpora with named-entity-like phrases.
//!
//! Base words `a<i>` translate one-to-one into target words `b<j>` under a
//! fixed random bijection, with occasional adjacent swaps on the target side.
//! Entities are short phrases over their own alphabets (`x<i>` on the source
//! side, `y<j>` on the target side) whose translations are arbitrary, so an
//! unseen entity can only be translated correctly by consulting the lexicon.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::miner::{write_spans, Lexicon, NeSpan, TranslationPair};
use crate::text::{self, contains_subsequence, Sentence, Token};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Inclusive range of base words per sentence.
    pub sent_len: (usize, usize),
    pub base_vocab: usize,
    /// Size of the entity inventory (seen plus unseen).
    pub entity_count: usize,
    /// Inclusive range of entity length in tokens, on each side.
    pub entity_len: (usize, usize),
    /// Symbols per side in the entity alphabets.
    pub entity_alphabet: usize,
    pub swap_prob: f64,
    pub entity_rate: f64,
    pub unseen_fraction: f64,
    /// Wrong phrase-table translations listed per entity.
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_train: 20_000,
            n_test: 1_000,
            sent_len: (4, 10),
            base_vocab: 200,
            entity_count: 4000,
            entity_len: (1, 3),
            entity_alphabet: 50,
            swap_prob: 0.2,
            entity_rate: 0.5,
            unseen_fraction: 0.5,
            distractors: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("swap_prob", self.swap_prob),
            ("entity_rate", self.entity_rate),
            ("unseen_fraction", self.unseen_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.sent_len.0 == 0 || self.sent_len.0 > self.sent_len.1 {
            return Err(Error::Invalid(format!("bad sentence length range {:?}", self.sent_len)));
        }
        if self.entity_len.0 == 0 || self.entity_len.0 > self.entity_len.1 {
            return Err(Error::Invalid(format!("bad entity length range {:?}", self.entity_len)));
        }
        if self.base_vocab == 0 || self.entity_alphabet == 0 {
            return Err(Error::Invalid("base_vocab and entity_alphabet must be positive".into()));
        }
        let (seen, unseen) = self.pool_sizes();
        if self.entity_rate > 0.0 && ((seen == 0 && self.unseen_fraction < 1.0) || (unseen == 0 && self.unseen_fraction > 0.0)) {
            return Err(Error::Invalid(format!(
                "entity_count {} too small for unseen_fraction {}",
                self.entity_count, self.unseen_fraction
            )));
        }
        let capacity: usize = (self.entity_len.0..=self.entity_len.1)
            .map(|l| self.entity_alphabet.saturating_pow(l as u32))
            .fold(0usize, usize::saturating_add);
        if capacity < self.entity_count * 2 {
            return Err(Error::Invalid(format!(
                "entity alphabet of {} cannot form {} distinct entities comfortably",
                self.entity_alphabet, self.entity_count
            )));
        }
        Ok(())
    }

    /// `(seen, unseen)` entity pool sizes.
    pub fn pool_sizes(&self) -> (usize, usize) {
        let unseen = (self.entity_count as f64 * self.unseen_fraction).round() as usize;
        (self.entity_count - unseen.min(self.entity_count), unseen.min(self.entity_count))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad value {v:?} for {key}")))
        }
        fn range(key: &str, v: &str) -> Result<(usize, usize)> {
            let (a, b) = v
                .split_once(['-', ','])
                .ok_or_else(|| Error::Invalid(format!("{key} expects a range like 4-10, got {v:?}")))?;
            Ok((num(key, a)?, num(key, b)?))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_test" => self.n_test = num(key, value)?,
            "sent_len" => self.sent_len = range(key, value)?,
            "base_vocab" => self.base_vocab = num(key, value)?,
            "entity_count" => self.entity_count = num(key, value)?,
            "entity_len" => self.entity_len = range(key, value)?,
            "entity_alphabet" => self.entity_alphabet = num(key, value)?,
            "swap_prob" => self.swap_prob = num(key, value)?,
            "entity_rate" => self.entity_rate = num(key, value)?,
            "unseen_fraction" => self.unseen_fraction = num(key, value)?,
            "distractors" => self.distractors = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "seed={}\nn_train={}\nn_test={}\nsent_len={}-{}\nbase_vocab={}\nentity_count={}\nentity_len={}-{}\n\
             entity_alphabet={}\nswap_prob={}\nentity_rate={}\nunseen_fraction={}\ndistractors={}\n",
            self.seed,
            self.n_train,
            self.n_test,
            self.sent_len.0,
            self.sent_len.1,
            self.base_vocab,
            self.entity_count,
            self.entity_len.0,
            self.entity_len.1,
            self.entity_alphabet,
            self.swap_prob,
            self.entity_rate,
            self.unseen_fraction,
            self.distractors
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub train_src: Vec<Sentence>,
    pub train_tgt: Vec<Sentence>,
    pub test_src: Vec<Sentence>,
    pub test_tgt: Vec<Sentence>,
    pub seen: Vec<Entity>,
    pub unseen: Vec<Entity>,
    /// Every entity, seen and unseen.
    pub lexicon: Lexicon,
    /// Source-side entity spans.
    pub train_spans: Vec<NeSpan>,
    pub test_spans: Vec<NeSpan>,
    /// Moses-style lines: the true pair for every seen entity plus
    /// lower-scored wrong translations.
    pub phrase_table: Vec<String>,
}

enum Unit {
    Word(usize),
    Entity,
}

fn phrase_tokens(words: &[String]) -> Vec<Token> {
    words.iter().map(|w| Token::trusted(w.as_str())).collect()
}

struct Gen<'c> {
    cfg: &'c SynthConfig,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
}

impl Gen<'_> {
    fn random_form(&mut self, prefix: &str, first: Option<usize>) -> Vec<String> {
        let len = self.rng.gen_range(self.cfg.entity_len.0..=self.cfg.entity_len.1);
        (0..len)
            .map(|i| {
                let s = match (i, first) {
                    (0, Some(f)) => f,
                    _ => self.rng.gen_range(0..self.cfg.entity_alphabet),
                };
                format!("{prefix}{s}")
            })
            .collect()
    }

    /// Distinct entities; the first `entity_alphabet` of them start with
    /// each alphabet symbol in turn so seen entities cover both alphabets.
    /// Unseen entities are never sub-phrases of seen ones.
    fn entities(&mut self) -> Result<Vec<Entity>> {
        let mut used_src = HashSet::new();
        let mut used_tgt = HashSet::new();
        let mut out = Vec::with_capacity(self.cfg.entity_count);
        let mut src_order: Vec<usize> = (0..self.cfg.entity_alphabet).collect();
        let mut tgt_order: Vec<usize> = (0..self.cfg.entity_alphabet).collect();
        src_order.shuffle(&mut self.rng);
        tgt_order.shuffle(&mut self.rng);
        let (n_seen, _) = self.cfg.pool_sizes();
        let mut attempts = 0usize;
        while out.len() < self.cfg.entity_count {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::Invalid(format!(
                    "could not draw {} distinct entities from an alphabet of {}",
                    self.cfg.entity_count, self.cfg.entity_alphabet
                )));
            }
            let k = out.len();
            let src = self.random_form("x", src_order.get(k).copied());
            let tgt = self.random_form("y", tgt_order.get(k).copied());
            if used_src.contains(&src) || used_tgt.contains(&tgt) {
                continue;
            }
            // an unseen phrase must not hide inside a seen one
            if k >= n_seen && out[..n_seen].iter().any(|e: &Entity| contains_subsequence(&e.src, &src)) {
                continue;
            }
            used_src.insert(src.clone());
            used_tgt.insert(tgt.clone());
            out.push(Entity { src, tgt });
        }
        Ok(out)
    }

    fn sentence(&mut self, entity: Option<&Entity>, idx: usize) -> (Sentence, Sentence, Option<NeSpan>) {
        let len = self.rng.gen_range(self.cfg.sent_len.0..=self.cfg.sent_len.1);
        let mut units: Vec<Unit> = (0..len)
            .map(|_| Unit::Word(self.rng.gen_range(0..self.cfg.base_vocab)))
            .collect();
        let mut span = None;
        if let Some(e) = entity {
            let at = self.rng.gen_range(0..=len);
            units.insert(at, Unit::Entity);
            span = Some(NeSpan::new(idx, at, at + e.src.len()));
        }
        let mut order: Vec<usize> = (0..units.len()).collect();
        let mut j = 0;
        while j + 1 < order.len() {
            if self.rng.gen_bool(self.cfg.swap_prob) {
                order.swap(j, j + 1);
                j += 2;
            } else {
                j += 1;
            }
        }
        let mut src = Vec::new();
        for u in &units {
            match u {
                Unit::Word(w) => src.push(Token::trusted(format!("a{w}"))),
                Unit::Entity => src.extend(phrase_tokens(&entity.expect("entity unit").src)),
            }
        }
        let mut tgt = Vec::new();
        for &o in &order {
            match units[o] {
                Unit::Word(w) => tgt.push(Token::trusted(format!("b{}", self.perm[w]))),
                Unit::Entity => tgt.extend(phrase_tokens(&entity.expect("entity unit").tgt)),
            }
        }
        (Sentence::new(src), Sentence::new(tgt), span)
    }
}

/// Exactly `round(n · frac)` trues, shuffled.
fn exact_mask<R: Rng>(n: usize, frac: f64, rng: &mut R) -> Vec<bool> {
    let k = ((n as f64) * frac).round() as usize;
    let mut v: Vec<bool> = (0..n).map(|i| i < k.min(n)).collect();
    v.shuffle(rng);
    v
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perm: Vec<usize> = (0..cfg.base_vocab).collect();
    perm.shuffle(&mut rng);
    let mut g = Gen { cfg, rng, perm };

    let mut all = g.entities()?;
    let (n_seen, _) = cfg.pool_sizes();
    let unseen = all.split_off(n_seen);
    let seen = all;

    let mut train_src = Vec::with_capacity(cfg.n_train);
    let mut train_tgt = Vec::with_capacity(cfg.n_train);
    let mut train_spans = Vec::new();
    let with_entity = exact_mask(cfg.n_train, cfg.entity_rate, &mut g.rng);
    for (i, &has) in with_entity.iter().enumerate() {
        let e = if has && !seen.is_empty() {
            Some(seen[g.rng.gen_range(0..seen.len())].clone())
        } else {
            None
        };
        let (s, t, span) = g.sentence(e.as_ref(), i);
        train_src.push(s);
        train_tgt.push(t);
        train_spans.extend(span);
    }

    let mut test_src = Vec::with_capacity(cfg.n_test);
    let mut test_tgt = Vec::with_capacity(cfg.n_test);
    let mut test_spans = Vec::new();
    let with_entity = exact_mask(cfg.n_test, cfg.entity_rate, &mut g.rng);
    let n_entities = with_entity.iter().filter(|&&b| b).count();
    let mut from_unseen = exact_mask(n_entities, cfg.unseen_fraction, &mut g.rng).into_iter();
    for (i, &has) in with_entity.iter().enumerate() {
        let e = if has {
            let pool = match from_unseen.next() {
                Some(true) if !unseen.is_empty() => &unseen,
                _ if !seen.is_empty() => &seen,
                _ => &unseen,
            };
            Some(pool[g.rng.gen_range(0..pool.len())].clone())
        } else {
            None
        };
        let (s, t, span) = g.sentence(e.as_ref(), i);
        test_src.push(s);
        test_tgt.push(t);
        test_spans.extend(span);
    }

    let mut lexicon = Lexicon::new();
    for e in seen.iter().chain(&unseen) {
        lexicon.offer(TranslationPair {
            src: phrase_tokens(&e.src),
            tgt: phrase_tokens(&e.tgt),
            score: 1.0,
        });
    }

    let mut phrase_table = Vec::new();
    for (k, e) in seen.iter().enumerate() {
        phrase_table.push(format!("{} ||| {} ||| 0.8 0.7 0.9 0.6", e.src.join(" "), e.tgt.join(" ")));
        for d in 0..cfg.distractors {
            let other = &seen[(k + 1 + d * 7) % seen.len()];
            if other.tgt == e.tgt {
                continue;
            }
            let p = 0.5 / (d + 2) as f64;
            phrase_table.push(format!(
                "{} ||| {} ||| {p} {p} {p} {p}",
                e.src.join(" "),
                other.tgt.join(" ")
            ));
        }
    }

    Ok(SynthCorpus {
        config: cfg.clone(),
        train_src,
        train_tgt,
        test_src,
        test_tgt,
        seen,
        unseen,
        lexicon,
        train_spans,
        test_spans,
        phrase_table,
    })
}

pub const FILES: [&str; 9] = [
    "train.src",
    "train.tgt",
    "test.src",
    "test.tgt",
    "lexicon.tsv",
    "train.spans.tsv",
    "test.spans.tsv",
    "phrase_table.txt",
    "synth.info",
];

impl SynthCorpus {
    /// Source keys of entities that never occur in training.
    pub fn unseen_keys(&self) -> BTreeSet<String> {
        self.unseen.iter().map(|e| e.src.join(" ")).collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        text::write_corpus(&dir.join("train.src"), &self.train_src)?;
        text::write_corpus(&dir.join("train.tgt"), &self.train_tgt)?;
        text::write_corpus(&dir.join("test.src"), &self.test_src)?;
        text::write_corpus(&dir.join("test.tgt"), &self.test_tgt)?;
        self.lexicon.save(&dir.join("lexicon.tsv"))?;
        write_spans(&dir.join("train.spans.tsv"), &self.train_spans)?;
        write_spans(&dir.join("test.spans.tsv"), &self.test_spans)?;
        let pt = dir.join("phrase_table.txt");
        let mut w = text::create_writer(&pt)?;
        for line in &self.phrase_table {
            writeln!(w, "{line}").map_err(|e| Error::io(&pt, e))?;
        }
        w.flush().map_err(|e| Error::io(&pt, e))?;
        let (seen, unseen) = (self.seen.len(), self.unseen.len());
        let info = format!(
            "{}seen_entities={seen}\nunseen_entities={unseen}\ntrain_spans={}\ntest_spans={}\n",
            self.config.to_kv(),
            self.train_spans.len(),
            self.test_spans.len()
        );
        let ip = dir.join("synth.info");
        std::fs::write(&ip, info).map_err(|e| Error::io(&ip, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_train: 1000,
            n_test: 200,
            entity_count: 60,
            entity_alphabet: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn spans_are_lexicon_entries_and_translations_are_present() {
        let c = generate(&small()).unwrap();
        for (spans, src, tgt) in [
            (&c.train_spans, &c.train_src, &c.train_tgt),
            (&c.test_spans, &c.test_src, &c.test_tgt),
        ] {
            for s in spans {
                let surface = src[s.sentence_index].lowercased()[s.start..s.end].join(" ");
                let pair = c.lexicon.get(&surface).expect("span in lexicon");
                let q: Vec<String> = pair.tgt.iter().map(|t| t.to_string()).collect();
                assert!(contains_subsequence(&tgt[s.sentence_index].lowercased(), &q));
            }
        }
    }

    #[test]
    fn unseen_entities_never_occur_in_training() {
        let c = generate(&small()).unwrap();
        let unseen: Vec<Vec<String>> = c.unseen.iter().map(|e| e.src.clone()).collect();
        for s in &c.train_src {
            let toks = s.lowercased();
            assert!(unseen.iter().all(|u| !contains_subsequence(&toks, u)));
        }
        let test_unseen = c
            .test_spans
            .iter()
            .filter(|s| {
                let surface = c.test_src[s.sentence_index].lowercased()[s.start..s.end].to_vec();
                unseen.contains(&surface)
            })
            .count();
        assert_eq!(test_unseen, (c.test_spans.len() as f64 * 0.5).round() as usize);
    }

    #[test]
    fn seen_entities_cover_the_target_alphabet() {
        let c = generate(&small()).unwrap();
        let symbols: BTreeSet<&str> = c.seen.iter().flat_map(|e| e.tgt.iter().map(String::as_str)).collect();
        assert_eq!(symbols.len(), 20);
    }

    #[test]
    fn entity_rate_extremes() {
        let none = generate(&SynthConfig {
            entity_rate: 0.0,
            ..small()
        })
        .unwrap();
        assert!(none.train_spans.is_empty() && none.test_spans.is_empty());
        assert_eq!(none.lexicon.len(), 60);
        let all = generate(&SynthConfig {
            entity_rate: 1.0,
            ..small()
        })
        .unwrap();
        assert_eq!(all.train_spans.len(), 1000);
        let mut lines: Vec<usize> = all.train_spans.iter().map(|s| s.sentence_index).collect();
        lines.dedup();
        assert_eq!(lines.len(), 1000);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate(&small()).unwrap().write_to(&a).unwrap();
        generate(&small()).unwrap().write_to(&b).unwrap();
        for f in FILES {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        let other = generate(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(other.train_src, generate(&small()).unwrap().train_src);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&SynthConfig { swap_prob: 1.5, ..small() }).is_err());
        assert!(generate(&SynthConfig { sent_len: (5, 2), ..small() }).is_err());
        assert!(generate(&SynthConfig {
            entity_alphabet: 2,
            entity_len: (1, 1),
            ..small()
        })
        .is_err());
    }
}
