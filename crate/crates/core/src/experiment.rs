//! In-memory end-to-end runs: annotate, segment, build the vocabulary,
//! train, decode and score.

use std::time::Instant;

use crate::annotator::{annotate_sentences, detag, AnnotationScheme, AnnotationStats, Method, Sidecar, TokenType};
use crate::error::{Error, Result};
use crate::eval::{bleu4, constraint_accuracy, EvalReport};
use crate::miner::Lexicon;
use crate::model::{beam_search, Example, Hypothesis, ModelConfig, StepInfo, TrainConfig, TrainReport, Trainer, Transformer};
use crate::subword::{bpe_undo, BpeModel};
use crate::model::Matrix;
use crate::text::{Sentence, Token};
use crate::vocab::{JointVocab, VocabConfig};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub scheme: AnnotationScheme,
    pub bpe_merges: usize,
    pub vocab: VocabConfig,
    /// `vocab_size`, `target_size` and `use_extra` are filled in from the
    /// data and scheme.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam_size: usize,
    /// Upper bound on output length; the effective limit per sentence is
    /// `min(2 · source length + 10, max_output_len)`.
    pub max_output_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scheme: AnnotationScheme::new(Method::TagMixed, true),
            bpe_merges: 30_000,
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam_size: 6,
            max_output_len: 200,
        }
    }
}

impl ExperimentConfig {
    /// Sets one field from text, covering the scheme, segmentation,
    /// vocabulary, decoding, model and training settings. Returns `false`
    /// for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad value {v:?} for {key}")))
        }
        fn cap(key: &str, v: &str) -> Result<Option<usize>> {
            match v.trim() {
                "" | "none" => Ok(None),
                s => num(key, s).map(Some),
            }
        }
        match key {
            "scheme" => self.scheme.method = value.trim().parse()?,
            "extra" => self.scheme.extra = num(key, value)?,
            "bpe_merges" => self.bpe_merges = num(key, value)?,
            "min_freq" => self.vocab.min_freq = num(key, value)?,
            "max_target_words" => self.vocab.max_target_words = cap(key, value)?,
            "max_source_words" => self.vocab.max_source_words = cap(key, value)?,
            "beam_size" => self.beam_size = num(key, value)?,
            "max_output_len" => self.max_output_len = num(key, value)?,
            "vocab_size" | "target_size" | "use_extra" => {
                return Err(Error::Invalid(format!("{key} is derived from the data and scheme")))
            }
            _ => return Ok(self.model.set(key, value)? || self.train.set(key, value)?),
        }
        Ok(true)
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, got {line:?}")))?;
            if !self.set(k.trim(), v)? {
                return Err(Error::parse(i + 1, format!("unknown setting {:?}", k.trim())));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |n| n.to_string());
        let mut s = format!(
            "scheme={}\nextra={}\nbpe_merges={}\nmin_freq={}\nmax_target_words={}\nmax_source_words={}\n\
             beam_size={}\nmax_output_len={}\n",
            self.scheme.method,
            self.scheme.extra,
            self.bpe_merges,
            self.vocab.min_freq,
            opt(self.vocab.max_target_words),
            opt(self.vocab.max_source_words),
            self.beam_size,
            self.max_output_len
        );
        for line in self.model.to_kv().lines() {
            if !["vocab_size=", "target_size=", "use_extra="].iter().any(|p| line.starts_with(p)) {
                s.push_str(line);
                s.push('\n');
            }
        }
        s.push_str(&self.train.to_kv());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_output_len == 0 {
            return Err(Error::Invalid("beam_size and max_output_len must be positive".into()));
        }
        self.train.validate()
    }
}

/// A segmented, typed source sentence ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSource {
    pub ids: Vec<u32>,
    pub types: Vec<TokenType>,
}

/// Annotated and BPE-segmented training data.
#[derive(Clone, Debug)]
pub struct PreparedTraining {
    pub src: Vec<Sentence>,
    pub tgt: Vec<Sentence>,
    pub types: Vec<Vec<TokenType>>,
    pub stats: AnnotationStats,
}

fn types_or_normal(types: Option<Vec<TokenType>>, len: usize) -> Vec<TokenType> {
    types.unwrap_or_else(|| vec![TokenType::Normal; len])
}

/// Annotates the training corpus (target-verified matching) and returns it
/// still unsegmented.
pub fn annotate_training(
    src: &[Sentence],
    tgt: &[Sentence],
    lexicon: &Lexicon,
    scheme: AnnotationScheme,
) -> Result<PreparedTraining> {
    let (annotated, stats) = annotate_sentences(src, Some(tgt), lexicon, scheme)?;
    let mut out = PreparedTraining {
        src: Vec::with_capacity(src.len()),
        tgt: Vec::with_capacity(src.len()),
        types: Vec::with_capacity(src.len()),
        stats,
    };
    for a in annotated {
        let n = a.src.len();
        out.types.push(types_or_normal(a.types, n));
        out.src.push(a.src);
        out.tgt.push(a.tgt.expect("training annotation keeps the target"));
    }
    Ok(out)
}

/// Segments typed sentences, repeating each token's type over its pieces.
pub fn segment_typed(bpe: &BpeModel, src: &[Sentence], types: &[Vec<TokenType>]) -> Result<(Vec<Sentence>, Vec<Vec<TokenType>>)> {
    let mut out_s = Vec::with_capacity(src.len());
    let mut out_t = Vec::with_capacity(src.len());
    for (s, t) in src.iter().zip(types) {
        let (a, b) = bpe.apply_with_types(s, t)?;
        out_s.push(a);
        out_t.push(b);
    }
    Ok((out_s, out_t))
}

pub fn encode_examples(vocab: &JointVocab, src: &[Sentence], types: &[Vec<TokenType>], tgt: &[Sentence]) -> Vec<Example> {
    src.iter()
        .zip(types)
        .zip(tgt)
        .map(|((s, ty), t)| Example {
            src: vocab.encode(s),
            types: ty.clone(),
            tgt: vocab.encode(t),
        })
        .collect()
}

/// Annotates test sources in test mode, segments and encodes them. Returns
/// the encoded inputs and the constraint sidecar.
pub fn prepare_test(
    src: &[Sentence],
    lexicon: &Lexicon,
    scheme: AnnotationScheme,
    bpe: &BpeModel,
    vocab: &JointVocab,
) -> Result<(Vec<EncodedSource>, Sidecar)> {
    let (annotated, _) = annotate_sentences(src, None, lexicon, scheme)?;
    let mut sidecar = Sidecar {
        lines: src.len(),
        entries: Vec::new(),
    };
    let mut inputs = Vec::with_capacity(src.len());
    for (i, a) in annotated.into_iter().enumerate() {
        sidecar.push_constraints(i, &a.constraints);
        let n = a.src.len();
        let (seg, types) = bpe.apply_with_types(&a.src, &types_or_normal(a.types, n))?;
        inputs.push(EncodedSource {
            ids: vocab.encode(&seg),
            types,
        });
    }
    Ok((inputs, sidecar))
}

/// Output ids back to plain words: joined subwords with tags removed.
pub fn postprocess(vocab: &JointVocab, ids: &[u32]) -> Result<Sentence> {
    let raw = vocab.decode(ids)?;
    Ok(detag(&bpe_undo(&raw).sentence).sentence)
}

pub fn decode_limit(src_len: usize, max_output_len: usize) -> usize {
    (2 * src_len + 10).min(max_output_len)
}

pub fn translate_all(
    model: &Transformer<f32>,
    inputs: &[EncodedSource],
    beam_size: usize,
    max_output_len: usize,
) -> Result<Vec<Hypothesis>> {
    inputs
        .iter()
        .map(|s| beam_search(model, &s.ids, &s.types, beam_size, decode_limit(s.ids.len(), max_output_len)))
        .collect()
}

/// Mean of the length-normalized embeddings of a phrase's subword pieces.
/// `None` when a piece is out of vocabulary.
pub fn phrase_vector(emb: &Matrix<f32>, vocab: &JointVocab, bpe: &BpeModel, phrase: &[Token]) -> Option<Vec<f64>> {
    let pieces = bpe.apply(&Sentence::new(phrase.to_vec()));
    if pieces.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; emb.cols];
    for tok in pieces.iter() {
        let row = emb.row(vocab.id(tok.as_str())? as usize);
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64 / norm;
        }
    }
    let n = pieces.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

/// Phrase-level nearest neighbours: for each `(src, tgt)` query, ranks every
/// candidate phrase by cosine similarity to the source phrase vector and
/// checks whether `tgt` is among the first `k` (ties broken by candidate
/// order). Returns `(hits, evaluated)`; queries with out-of-vocabulary
/// pieces are skipped.
pub fn paired_neighbor_hits(
    emb: &Matrix<f32>,
    vocab: &JointVocab,
    bpe: &BpeModel,
    queries: &[(Vec<Token>, Vec<Token>)],
    candidates: &[Vec<Token>],
    k: usize,
) -> (usize, usize) {
    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    }
    let cands: Vec<Option<Vec<f64>>> = candidates
        .iter()
        .map(|c| phrase_vector(emb, vocab, bpe, c).map(unit))
        .collect();
    let (mut hits, mut evaluated) = (0, 0);
    for (src, tgt) in queries {
        let (Some(q), Some(own)) = (
            phrase_vector(emb, vocab, bpe, src).map(unit),
            candidates.iter().position(|c| c == tgt),
        ) else {
            continue;
        };
        let Some(own_vec) = &cands[own] else { continue };
        evaluated += 1;
        let sim = |v: &[f64]| v.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        let own_sim = sim(own_vec);
        let better = cands
            .iter()
            .enumerate()
            .filter(|(i, c)| *i != own && c.as_ref().is_some_and(|c| {
                let s = sim(c);
                s > own_sim || (s == own_sim && *i < own)
            }))
            .count();
        hits += (better < k) as usize;
    }
    (hits, evaluated)
}

#[derive(Clone, Debug, Default)]
pub struct Timings {
    pub prepare_secs: f64,
    pub train_secs: f64,
    pub decode_secs: f64,
}

pub struct ExperimentResult {
    pub report: EvalReport,
    pub hypotheses: Vec<Sentence>,
    pub model: Transformer<f32>,
    pub vocab: JointVocab,
    pub bpe: BpeModel,
    pub sidecar: Sidecar,
    pub annotation: AnnotationStats,
    pub training: TrainReport,
    pub timings: Timings,
}

/// Full run. `train_lexicon` drives training annotation; `test_lexicon` is
/// the database consulted at test time.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment<F: FnMut(&StepInfo)>(
    train_src: &[Sentence],
    train_tgt: &[Sentence],
    test_src: &[Sentence],
    test_tgt: &[Sentence],
    train_lexicon: &Lexicon,
    test_lexicon: &Lexicon,
    cfg: &ExperimentConfig,
    on_step: F,
) -> Result<ExperimentResult> {
    if test_src.len() != test_tgt.len() {
        return Err(Error::LineMismatch {
            left: "test source".into(),
            left_lines: test_src.len(),
            right: "test target".into(),
            right_lines: test_tgt.len(),
        });
    }
    cfg.validate()?;
    let t0 = Instant::now();
    let prepared = annotate_training(train_src, train_tgt, train_lexicon, cfg.scheme)?;
    let bpe = BpeModel::learn(prepared.src.iter().chain(&prepared.tgt), cfg.bpe_merges, &[]);
    let (seg_src, seg_types) = segment_typed(&bpe, &prepared.src, &prepared.types)?;
    let seg_tgt = bpe.apply_corpus(&prepared.tgt);
    let vocab = JointVocab::build(&seg_src, &seg_tgt, &cfg.vocab);
    let examples = encode_examples(&vocab, &seg_src, &seg_types, &seg_tgt);
    let (inputs, sidecar) = prepare_test(test_src, test_lexicon, cfg.scheme, &bpe, &vocab)?;
    let prepare_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mcfg = ModelConfig {
        vocab_size: vocab.len(),
        target_size: vocab.target_size(),
        use_extra: cfg.scheme.extra,
        ..cfg.model.clone()
    };
    let mut model = Transformer::<f32>::new(mcfg)?;
    let training = Trainer::new(&mut model, cfg.train.clone())?.fit(&examples, on_step)?;
    let train_secs = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let hyps = translate_all(&model, &inputs, cfg.beam_size, cfg.max_output_len)?;
    let hypotheses = hyps
        .iter()
        .map(|h| postprocess(&vocab, &h.tokens))
        .collect::<Result<Vec<_>>>()?;
    let decode_secs = t2.elapsed().as_secs_f64();

    let mut report = constraint_accuracy(&hypotheses, &sidecar)?;
    let refs: Vec<Vec<Sentence>> = test_tgt.iter().map(|t| vec![t.clone()]).collect();
    report.bleu = Some(bleu4(&hypotheses, &refs)?);
    Ok(ExperimentResult {
        report,
        hypotheses,
        model,
        vocab,
        bpe,
        sidecar,
        annotation: prepared.stats,
        training,
        timings: Timings {
            prepare_secs,
            train_secs,
            decode_secs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig};

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv("layers=1\nmodel_dim=16\nff_dim=32\nheads=2\nepochs=1\nbeam_size=2\n").unwrap();
        cfg
    }

    #[test]
    fn settings_round_trip_through_text() {
        let mut cfg = tiny();
        cfg.apply_kv("# comment\nscheme=r\nextra=false\nmax_target_words=50\nlr=0.002\n").unwrap();
        assert_eq!(cfg.scheme, AnnotationScheme::new(Method::Replace, false));
        let mut back = ExperimentConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back.to_kv(), cfg.to_kv());
        assert_eq!(back.vocab.max_target_words, Some(50));
        assert!(cfg.apply_kv("bogus=1").is_err());
        assert!(cfg.apply_kv("target_size=3").is_err());
        assert!(cfg.apply_kv("no equals sign").is_err());
    }

    #[test]
    fn end_to_end_run_scores_every_test_constraint() {
        let corpus = generate(&SynthConfig {
            n_train: 200,
            n_test: 20,
            entity_count: 60,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = tiny();
        let mut steps = 0;
        let r = run_experiment(
            &corpus.train_src,
            &corpus.train_tgt,
            &corpus.test_src,
            &corpus.test_tgt,
            &corpus.lexicon,
            &corpus.lexicon,
            &cfg,
            |_| steps += 1,
        )
        .unwrap();
        assert_eq!(steps, r.training.steps);
        assert_eq!(r.hypotheses.len(), 20);
        assert_eq!(r.report.total_phrases as usize, corpus.test_spans.len());
        assert!(r.report.bleu.is_some());
        assert!(r.model.config().use_extra);
        assert!(r.hypotheses.iter().flatten().all(|t| !crate::annotator::is_tag(t.as_str())));
    }

    #[test]
    fn test_inputs_carry_types_per_piece() {
        let corpus = generate(&SynthConfig {
            n_train: 50,
            n_test: 10,
            entity_count: 20,
            entity_rate: 1.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let scheme = AnnotationScheme::new(Method::TagMixed, true);
        let prep = annotate_training(&corpus.train_src, &corpus.train_tgt, &corpus.lexicon, scheme).unwrap();
        let bpe = BpeModel::learn(prep.src.iter().chain(&prep.tgt), 100, &[]);
        let (seg, types) = segment_typed(&bpe, &prep.src, &prep.types).unwrap();
        let vocab = JointVocab::build(&seg, &bpe.apply_corpus(&prep.tgt), &VocabConfig::default());
        let (inputs, sidecar) = prepare_test(&corpus.test_src, &corpus.lexicon, scheme, &bpe, &vocab).unwrap();
        assert_eq!(sidecar.entries.len(), 10);
        for (inp, ty) in inputs.iter().zip(&types) {
            assert_eq!(inp.ids.len(), inp.types.len());
            assert!(!ty.is_empty());
        }
        assert!(inputs.iter().all(|i| i.types.contains(&TokenType::Source)));
    }

    #[test]
    fn identical_embeddings_rank_their_pair_first() {
        let vocab = JointVocab::build(
            &[Sentence::from_text("x1 x2")],
            &[Sentence::from_text("y1 y2")],
            &VocabConfig::default(),
        );
        let bpe = BpeModel::learn(&[Sentence::from_text("x1 x2 y1 y2 zz")], 100, &[]);
        let mut emb = Matrix::<f32>::zeros(vocab.len(), 2);
        for (tok, row) in [("x1", [1.0, 0.0]), ("y1", [2.0, 0.1]), ("x2", [0.0, 1.0]), ("y2", [0.1, 3.0])] {
            let i = vocab.id(tok).unwrap() as usize;
            emb.row_mut(i).copy_from_slice(&row);
        }
        let t = |s: &str| Sentence::from_text(s).into_tokens();
        let queries = vec![(t("x1"), t("y1")), (t("x2"), t("y2"))];
        let cands = vec![t("y1"), t("y2")];
        assert_eq!(paired_neighbor_hits(&emb, &vocab, &bpe, &queries, &cands, 1), (2, 2));
        let swapped = vec![(t("x1"), t("y2")), (t("x2"), t("y1"))];
        assert_eq!(paired_neighbor_hits(&emb, &vocab, &bpe, &swapped, &cands, 1), (0, 2));
        assert_eq!(paired_neighbor_hits(&emb, &vocab, &bpe, &swapped, &cands, 2), (2, 2));
        // out-of-vocabulary queries are skipped
        assert_eq!(paired_neighbor_hits(&emb, &vocab, &bpe, &[(t("zz"), t("y1"))], &cands, 1), (0, 0));
    }
}
