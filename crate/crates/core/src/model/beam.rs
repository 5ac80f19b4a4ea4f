//! Length-normalized beam search over the cached decoder.

use super::tensor::Float;
use super::transformer::{DecoderState, Transformer};
use crate::annotator::TokenType;
use crate::error::{Error, Result};
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without bos or eos.
    pub tokens: Vec<u32>,
    /// Sum of per-step log-probabilities, including eos when finished.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored steps.
    pub score: f64,
    /// `false` when no hypothesis reached eos within the length limit.
    pub finished: bool,
}

struct Live<T> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: DecoderState<T>,
}

/// Returns the best finished hypothesis by length-normalized score, or the
/// best unfinished one (flagged) if none ended within `max_len` steps.
/// Padding and bos are never proposed.
pub fn beam_search<T: Float>(
    model: &Transformer<T>,
    src: &[u32],
    types: &[TokenType],
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Invalid("beam size must be at least 1".into()));
    }
    let target_size = model.config().target_size;
    // the decoder consumes bos plus up to max_len - 1 outputs
    let max_len = max_len.min(model.config().max_len).max(1);
    let enc = model.encode(src, types)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start_state(),
    }];
    let mut inputs = vec![BOS_ID];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut states: Vec<DecoderState<T>> = live.iter().map(|h| h.state.clone()).collect();
        let lp = model.decode_step(&enc, &mut states, &inputs)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * target_size);
        for (i, h) in live.iter().enumerate() {
            for (v, &l) in lp.row(i).iter().enumerate() {
                let v = v as u32;
                if v == PAD_ID || v == BOS_ID {
                    continue;
                }
                cands.push((h.log_prob + l.to_f64(), i, v));
            }
        }
        let k = beam_size.min(cands.len());
        let cmp = |a: &(f64, usize, u32), b: &(f64, usize, u32)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if k < cands.len() {
            cands.select_nth_unstable_by(k, cmp);
            cands.truncate(k);
        }
        cands.sort_by(cmp);

        let mut next = Vec::with_capacity(k);
        let mut next_inputs = Vec::with_capacity(k);
        for (log_prob, parent, v) in cands {
            let mut tokens = live[parent].tokens.clone();
            if v == EOS_ID {
                let steps = tokens.len() + 1;
                finished.push(Hypothesis {
                    tokens,
                    log_prob,
                    score: log_prob / steps as f64,
                    finished: true,
                });
            } else {
                tokens.push(v);
                next.push(Live {
                    tokens,
                    log_prob,
                    state: states[parent].clone(),
                });
                next_inputs.push(v);
            }
        }
        live = next;
        inputs = next_inputs;
        if live.is_empty() || finished.len() >= beam_size {
            break;
        }
    }

    let best = |hs: Vec<Hypothesis>| {
        hs.into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
    };
    if let Some(h) = best(finished) {
        return Ok(h);
    }
    let unfinished = live
        .into_iter()
        .map(|h| {
            let n = h.tokens.len().max(1);
            Hypothesis {
                score: h.log_prob / n as f64,
                tokens: h.tokens,
                log_prob: h.log_prob,
                finished: false,
            }
        })
        .collect();
    best(unfinished).ok_or_else(|| Error::Empty("beam search produced no hypothesis".into()))
}

/// Greedy argmax decoding (padding and bos excluded), for reference.
pub fn greedy<T: Float>(model: &Transformer<T>, src: &[u32], types: &[TokenType], max_len: usize) -> Result<Hypothesis> {
    let enc = model.encode(src, types)?;
    let mut state = vec![model.start_state()];
    let mut input = BOS_ID;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let max_len = max_len.min(model.config().max_len).max(1);
    for _ in 0..max_len {
        let lp = model.decode_step(&enc, &mut state, &[input])?;
        let (v, l) = lp
            .row(0)
            .iter()
            .enumerate()
            .filter(|(v, _)| *v as u32 != PAD_ID && *v as u32 != BOS_ID)
            .fold((0usize, f64::NEG_INFINITY), |best, (v, &l)| {
                if l.to_f64() > best.1 {
                    (v, l.to_f64())
                } else {
                    best
                }
            });
        log_prob += l;
        if v as u32 == EOS_ID {
            let steps = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                log_prob,
                score: log_prob / steps as f64,
                finished: true,
            });
        }
        tokens.push(v as u32);
        input = v as u32;
    }
    let n = tokens.len().max(1);
    Ok(Hypothesis {
        tokens,
        log_prob,
        score: log_prob / n as f64,
        finished: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::ModelConfig;

    fn model(seed: u64) -> Transformer<f64> {
        Transformer::new(ModelConfig {
            layers: 1,
            model_dim: 8,
            ff_dim: 16,
            heads: 2,
            dropout: 0.0,
            max_len: 12,
            vocab_size: 16,
            target_size: 10,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..10 {
            let m = model(seed);
            let src = [4, 12, 7];
            let types = [TokenType::Normal; 3];
            assert_eq!(beam_search(&m, &src, &types, 1, 10).unwrap(), greedy(&m, &src, &types, 10).unwrap());
        }
    }

    #[test]
    fn score_is_recomputable_and_outputs_are_legal() {
        for seed in 0..10 {
            let m = model(seed);
            let src = [5, 14, 6, 4];
            let types = [TokenType::Normal; 4];
            let h = beam_search(&m, &src, &types, 4, 10).unwrap();
            assert!(h.tokens.iter().all(|&t| (t as usize) < 10));
            if h.finished {
                let steps = m.score_sequence(&src, &types, &h.tokens).unwrap();
                let total: f64 = steps.iter().sum();
                assert!((total - h.log_prob).abs() < 1e-9);
                assert!((total / steps.len() as f64 - h.score).abs() < 1e-9);
            } else {
                assert_eq!(h.tokens.len(), 10);
            }
        }
    }

    #[test]
    fn zero_beam_is_rejected() {
        let m = model(1);
        assert!(beam_search(&m, &[4], &[TokenType::Normal], 0, 5).is_err());
    }
}
