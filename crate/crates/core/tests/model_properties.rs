use prespec_core::annotator::TokenType;
use prespec_core::model::checkpoint::{from_bytes, to_bytes};
use prespec_core::model::{beam_search, greedy, Checkpoint, ModelConfig, Transformer};
use prespec_core::vocab::{BOS_ID, EOS_ID};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    cfg: ModelConfig,
    src: Vec<u32>,
    types: Vec<TokenType>,
    prefix: Vec<u32>,
}

fn case() -> impl Strategy<Value = Case> {
    (
        1usize..=2,
        prop::sample::select(vec![(4usize, 1usize), (8, 2), (8, 4), (12, 3)]),
        6usize..24,
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_flat_map(|(layers, (dim, heads), vocab, extra, tie, seed)| {
            let target = 5..=vocab;
            (Just((layers, dim, heads, vocab, extra, tie, seed)), target)
        })
        .prop_flat_map(|((layers, dim, heads, vocab, extra, tie, seed), target)| {
            let cfg = ModelConfig {
                layers,
                model_dim: dim,
                ff_dim: 2 * dim,
                heads,
                dropout: 0.0,
                max_len: 32,
                seed,
                vocab_size: vocab,
                target_size: target,
                use_extra: extra,
                tie_output: tie,
                ..ModelConfig::default()
            };
            let src = prop::collection::vec(4u32..vocab as u32, 1..8);
            let prefix = prop::collection::vec(4u32..target as u32, 0..5);
            (Just(cfg), src, prefix)
        })
        .prop_flat_map(|(cfg, src, prefix)| {
            let n = src.len();
            let types = prop::collection::vec(
                prop::sample::select(vec![TokenType::Normal, TokenType::Source, TokenType::Target]),
                n,
            );
            (Just(cfg), Just(src), types, Just(prefix))
        })
        .prop_map(|(cfg, src, types, mut prefix)| {
            prefix.insert(0, BOS_ID);
            Case {
                cfg,
                src,
                types,
                prefix,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_stay_in_the_target_slice(c in case()) {
        let model: Transformer<f32> = Transformer::new(c.cfg.clone()).unwrap();
        let dist = model.next_token_distribution(&c.src, &c.types, &c.prefix).unwrap();
        prop_assert_eq!(dist.len(), c.cfg.target_size);
        prop_assert!(dist.iter().all(|&p| p >= 0.0));
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let enc = model.encode(&c.src, &c.types).unwrap();
        let mut states = vec![model.start_state()];
        let step = model.decode_step(&enc, &mut states, &[BOS_ID]).unwrap();
        prop_assert_eq!(step.cols, c.cfg.target_size);

        for beam in [1, 3] {
            let h = beam_search(&model, &c.src, &c.types, beam, 12).unwrap();
            prop_assert!(h.tokens.iter().all(|&t| (t as usize) < c.cfg.target_size && t != EOS_ID));
        }
        let g = greedy(&model, &c.src, &c.types, 12).unwrap();
        prop_assert_eq!(g.tokens, beam_search(&model, &c.src, &c.types, 1, 12).unwrap().tokens);
    }

    #[test]
    fn checkpoints_round_trip_bytes(c in case(), digest in "[0-9a-f]{8}") {
        let model: Transformer<f32> = Transformer::new(c.cfg.clone()).unwrap();
        let bytes = to_bytes(&model, &digest);
        let back: Checkpoint<f32> = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.vocab_digest, &digest);
        prop_assert_eq!(to_bytes(&back.model, &digest), bytes);
    }

    #[test]
    fn zeroed_type_embedding_matches_plain_model(c in case()) {
        let with = ModelConfig { use_extra: true, ..c.cfg.clone() };
        let mut model: Transformer<f64> = Transformer::new(with).unwrap();
        let id = model.params().id("extra").unwrap();
        model.params_mut().get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        let mut params = prespec_core::model::ParamStore::default();
        for (n, m) in model.params().iter().filter(|(n, _)| *n != "extra") {
            params.add(n, m.clone());
        }
        let plain = Transformer::from_params(ModelConfig { use_extra: false, ..c.cfg.clone() }, params).unwrap();
        let a = model.next_token_distribution(&c.src, &c.types, &c.prefix).unwrap();
        let b = plain.next_token_distribution(&c.src, &c.types, &c.prefix).unwrap();
        prop_assert_eq!(a, b);
    }
}
