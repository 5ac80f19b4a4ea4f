use std::collections::HashMap;

use prespec_core::annotator::{
    annotate_sentences, detag, restore_source, AnnotationScheme, Method, Sidecar, TokenType, TAGS,
};
use prespec_core::eval::{bleu4, constraint_accuracy};
use prespec_core::miner::{Lexicon, TranslationPair};
use prespec_core::subword::{bpe_undo, BpeModel};
use prespec_core::text::{Sentence, Token};
use prespec_core::vocab::{JointVocab, VocabConfig};
use proptest::prelude::*;

fn tok(s: &str) -> Token {
    Token::new(s).unwrap()
}

fn sent(words: &[String]) -> Sentence {
    Sentence::new(words.iter().map(|w| tok(w)).collect())
}

fn word(prefix: &'static str, n: u32) -> impl Strategy<Value = String> {
    (0..n, any::<bool>()).prop_map(move |(i, up)| {
        let w = format!("{prefix}{i}");
        if up && i % 3 == 0 {
            w.to_uppercase()
        } else {
            w
        }
    })
}

fn phrase(prefix: &'static str, n: u32) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(prefix, n), 1..=3)
}

/// A small lexicon, a source sentence and a target that contains some of
/// the lexicon translations.
fn annotated_case() -> impl Strategy<Value = (Vec<(Vec<String>, Vec<String>)>, Vec<String>, Vec<String>)> {
    let pairs = prop::collection::vec((phrase("w", 6), phrase("v", 6)), 0..5);
    (pairs, prop::collection::vec(word("w", 6), 1..12), prop::collection::vec(word("v", 8), 0..8)).prop_flat_map(
        |(pairs, src, noise)| {
            let n = pairs.len();
            let picks = prop::collection::vec(0..n.max(1), 0..3);
            (Just(pairs), Just(src), Just(noise), picks)
        },
    )
    .prop_map(|(pairs, src, mut tgt, picks)| {
        for p in picks {
            if let Some((_, t)) = pairs.get(p) {
                tgt.extend(t.iter().cloned());
            }
        }
        if tgt.is_empty() {
            tgt.push("v0".into());
        }
        (pairs, src, tgt)
    })
}

fn lexicon(pairs: &[(Vec<String>, Vec<String>)]) -> Lexicon {
    let mut lex = Lexicon::new();
    for (s, t) in pairs {
        lex.offer(TranslationPair {
            src: s.iter().map(|w| tok(w)).collect(),
            tgt: t.iter().map(|w| tok(w)).collect(),
            score: 1.0,
        });
    }
    lex
}

fn scheme() -> impl Strategy<Value = AnnotationScheme> {
    (prop::sample::select(Method::ALL.to_vec()), any::<bool>()).prop_map(|(m, e)| AnnotationScheme::new(m, e))
}

/// Maximum number of pairwise disjoint occurrences by dynamic programming
/// over end positions.
fn max_disjoint(hay: &[String], q: &[String]) -> usize {
    let n = q.len();
    let mut best = vec![0usize; hay.len() + 1];
    for i in 1..=hay.len() {
        best[i] = best[i - 1];
        if i >= n && hay[i - n..i] == *q {
            best[i] = best[i].max(best[i - n] + 1);
        }
    }
    best[hay.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn annotation_is_reversible((pairs, src, tgt) in annotated_case(), scheme in scheme()) {
        let lex = lexicon(&pairs);
        let (s, t) = (sent(&src), sent(&tgt));
        let (out, stats) = annotate_sentences(
            std::slice::from_ref(&s),
            Some(std::slice::from_ref(&t)),
            &lex,
            scheme,
        ).unwrap();
        let a = &out[0];
        prop_assert_eq!(&restore_source(&a.src, &a.constraints, scheme.method).unwrap(), &s);
        let back = detag(a.tgt.as_ref().unwrap());
        prop_assert!(!back.unbalanced);
        prop_assert_eq!(&back.sentence, &t);
        prop_assert_eq!(stats.constraints, a.constraints.len());
        match &a.types {
            Some(types) => {
                prop_assert!(scheme.extra);
                prop_assert_eq!(types.len(), a.src.len());
                prop_assert!(!types.contains(&TokenType::Pad));
            }
            None => prop_assert!(!scheme.extra),
        }
        let (test, _) = annotate_sentences(std::slice::from_ref(&s), None, &lex, scheme).unwrap();
        prop_assert!(test[0].tgt.is_none());
        prop_assert_eq!(&restore_source(&test[0].src, &test[0].constraints, scheme.method).unwrap(), &s);
    }

    #[test]
    fn detag_leaves_untagged_text_alone(words in prop::collection::vec(word("w", 20), 0..15)) {
        let s = sent(&words);
        let d = detag(&s);
        prop_assert!(!d.unbalanced);
        prop_assert_eq!(d.sentence, s);
    }

    #[test]
    fn bpe_undo_inverts_apply(
        corpus in prop::collection::vec(prop::collection::vec("[a-e]{1,6}", 1..8), 1..20),
        merges in 0usize..60,
        probe in prop::collection::vec("[a-g]{1,8}", 1..10),
    ) {
        let corpus: Vec<Sentence> = corpus.iter().map(|w| sent(w)).collect();
        let model = BpeModel::learn(&corpus, merges, &[]);
        for s in corpus.iter().chain(std::iter::once(&sent(&probe))) {
            let seg = model.apply(s);
            let u = bpe_undo(&seg);
            prop_assert_eq!(u.dangling_markers, 0);
            prop_assert_eq!(&u.sentence, s);
        }
        // tags pass through untouched
        let tagged = sent(&[TAGS[0].to_string(), "abc".into(), TAGS[2].to_string()]);
        let seg = model.apply(&tagged);
        prop_assert_eq!(seg.tokens().first().map(|t| t.as_str()), Some(TAGS[0]));
        prop_assert_eq!(seg.tokens().last().map(|t| t.as_str()), Some(TAGS[2]));
    }

    #[test]
    fn vocab_round_trips_and_restricts(
        src in prop::collection::vec(prop::collection::vec(word("s", 30), 1..8), 1..10),
        tgt in prop::collection::vec(prop::collection::vec(word("s", 15), 1..8), 1..10),
    ) {
        let src: Vec<Sentence> = src.iter().map(|w| sent(w)).collect();
        let tgt: Vec<Sentence> = tgt.iter().map(|w| sent(w)).collect();
        let v = JointVocab::build(&src, &tgt, &VocabConfig::default());
        for s in src.iter().chain(&tgt) {
            prop_assert_eq!(&v.decode(&v.encode(s)).unwrap(), s);
        }
        for s in &tgt {
            prop_assert!(v.encode(s).iter().all(|&i| (i as usize) < v.target_size()));
        }
        let mask = v.restriction_mask();
        prop_assert_eq!(mask.len(), v.len());
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), v.target_size());
        prop_assert!(mask[..v.target_size()].iter().all(|&m| m));
        prop_assert!(v.decode(&[v.len() as u32]).is_err());
    }

    #[test]
    fn constraint_accuracy_matches_recount(
        lines in prop::collection::vec(
            (prop::collection::vec(word("t", 4), 0..12), prop::collection::vec(phrase("t", 4), 0..4)),
            1..12,
        ),
    ) {
        let hyps: Vec<Sentence> = lines.iter().map(|(h, _)| sent(h)).collect();
        let mut sidecar = Sidecar { lines: lines.len(), entries: Vec::new() };
        for (i, (_, qs)) in lines.iter().enumerate() {
            for q in qs {
                sidecar.entries.push(prespec_core::annotator::SidecarEntry {
                    line: i,
                    start: 0,
                    end: 1,
                    src: vec![tok("p")],
                    tgt: q.iter().map(|w| tok(w)).collect(),
                });
            }
        }
        let report = constraint_accuracy(&hyps, &sidecar).unwrap();

        let (mut sents, mut ok_sents, mut phrases, mut ok_phrases) = (0u64, 0u64, 0u64, 0u64);
        for (h, qs) in &lines {
            if qs.is_empty() {
                continue;
            }
            let h: Vec<String> = h.iter().map(|w| w.to_lowercase()).collect();
            let mut need: HashMap<Vec<String>, usize> = HashMap::new();
            for q in qs {
                *need.entry(q.iter().map(|w| w.to_lowercase()).collect()).or_default() += 1;
            }
            let ok: usize = need.iter().map(|(q, &k)| k.min(max_disjoint(&h, q))).sum();
            sents += 1;
            phrases += qs.len() as u64;
            ok_phrases += ok as u64;
            ok_sents += (ok == qs.len()) as u64;
        }
        prop_assert_eq!(report.total_sentences, sents);
        prop_assert_eq!(report.ok_sentences, ok_sents);
        prop_assert_eq!(report.total_phrases, phrases);
        prop_assert_eq!(report.ok_phrases, ok_phrases);

        // appending tags and detagging again changes nothing
        let tagged: Vec<Sentence> = hyps
            .iter()
            .map(|h| {
                let mut t: Vec<Token> = h.tokens().to_vec();
                t.extend([tok(TAGS[0]), tok(TAGS[2])]);
                detag(&Sentence::new(t)).sentence
            })
            .collect();
        prop_assert_eq!(constraint_accuracy(&tagged, &sidecar).unwrap(), report);
    }

    #[test]
    fn bleu_self_score_and_case_invariance(
        lines in prop::collection::vec(prop::collection::vec(word("b", 8), 4..12), 1..8),
        refs in prop::collection::vec(prop::collection::vec(word("b", 8), 1..12), 8),
    ) {
        let hyps: Vec<Sentence> = lines.iter().map(|l| sent(l)).collect();
        let own: Vec<Vec<Sentence>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        prop_assert_eq!(bleu4(&hyps, &own).unwrap().score, 100.0);

        let refs: Vec<Vec<Sentence>> = refs[..hyps.len()].iter().map(|r| vec![sent(r)]).collect();
        let upper = |s: &Sentence| sent(&s.tokens().iter().map(|t| t.as_str().to_uppercase()).collect::<Vec<_>>());
        let a = bleu4(&hyps, &refs).unwrap();
        let b = bleu4(
            &hyps.iter().map(upper).collect::<Vec<_>>(),
            &refs.iter().map(|r| vec![upper(&r[0])]).collect::<Vec<_>>(),
        ).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((0.0..=100.0).contains(&a.score));
    }
}
