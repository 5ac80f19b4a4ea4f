//! Encoded training examples and padded batches.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::annotator::TokenType;
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

/// One encoded sentence pair. `tgt` excludes the bos/eos wrappers, which
/// batching adds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub types: Vec<TokenType>,
    pub tgt: Vec<u32>,
}

impl Example {
    /// An example whose source types are all normal.
    pub fn untyped(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        let types = vec![TokenType::Normal; src.len()];
        Example { src, types, tgt }
    }
}

/// A padded batch. Row-major `[batch][len]` layout for every sequence field.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src: Vec<u32>,
    pub src_types: Vec<TokenType>,
    pub src_lens: Vec<usize>,
    pub tgt_len: usize,
    /// `bos y1 .. yn`, padded.
    pub tgt_in: Vec<u32>,
    /// `y1 .. yn eos`, padded.
    pub tgt_out: Vec<u32>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Self {
        let size = examples.len();
        let src_len = examples.iter().map(|e| e.src.len()).max().unwrap_or(0);
        let tgt_len = examples.iter().map(|e| e.tgt.len() + 1).max().unwrap_or(0);
        let mut b = Batch {
            size,
            src_len,
            src: vec![PAD_ID; size * src_len],
            src_types: vec![TokenType::Pad; size * src_len],
            src_lens: Vec::with_capacity(size),
            tgt_len,
            tgt_in: vec![PAD_ID; size * tgt_len],
            tgt_out: vec![PAD_ID; size * tgt_len],
            tgt_lens: Vec::with_capacity(size),
        };
        for (i, e) in examples.iter().enumerate() {
            assert_eq!(e.src.len(), e.types.len(), "source tokens and types differ in length");
            let s = i * src_len;
            b.src[s..s + e.src.len()].copy_from_slice(&e.src);
            b.src_types[s..s + e.src.len()].copy_from_slice(&e.types);
            b.src_lens.push(e.src.len());
            let t = i * tgt_len;
            b.tgt_in[t] = BOS_ID;
            b.tgt_in[t + 1..t + 1 + e.tgt.len()].copy_from_slice(&e.tgt);
            b.tgt_out[t..t + e.tgt.len()].copy_from_slice(&e.tgt);
            b.tgt_out[t + e.tgt.len()] = EOS_ID;
            b.tgt_lens.push(e.tgt.len() + 1);
        }
        b
    }

    /// A decoder-only batch of one: the source plus an explicit decoder
    /// input prefix (which should start with bos). `tgt_out` is padding.
    pub fn with_prefix(src: &[u32], types: &[TokenType], prefix: &[u32]) -> Self {
        Batch {
            size: 1,
            src_len: src.len(),
            src: src.to_vec(),
            src_types: types.to_vec(),
            src_lens: vec![src.len()],
            tgt_len: prefix.len(),
            tgt_in: prefix.to_vec(),
            tgt_out: vec![PAD_ID; prefix.len()],
            tgt_lens: vec![prefix.len()],
        }
    }

    /// Number of non-pad target positions, i.e. loss terms.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    /// Per-position loss weights: 1 on real target positions, 0 on padding.
    pub fn loss_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.size * self.tgt_len];
        for (i, &n) in self.tgt_lens.iter().enumerate() {
            w[i * self.tgt_len..i * self.tgt_len + n].iter_mut().for_each(|v| *v = 1.0);
        }
        w
    }
}

/// Groups example indices into batches of similar length whose padded size
/// (`batch × longest side`) stays within `tokens_per_batch`. Batch order is
/// shuffled with `rng`; examples inside a batch are length-sorted.
pub fn bucket_batches<R: Rng>(examples: &[Example], tokens_per_batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    // shuffle first so equal-length examples are grouped differently per epoch
    order.shuffle(rng);
    let width = |i: usize| examples[i].src.len().max(examples[i].tgt.len() + 1);
    order.sort_by_key(|&i| (width(i), examples[i].src.len()));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0;
    for i in order {
        let w = width(i);
        let m = cur_max.max(w);
        if !cur.is_empty() && m * (cur.len() + 1) > tokens_per_batch {
            batches.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(w);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn padding_and_wrapping() {
        let a = Example::untyped(vec![10, 11, 12], vec![20]);
        let b = Example::untyped(vec![10], vec![20, 21, 22]);
        let batch = Batch::new(&[&a, &b]);
        assert_eq!((batch.src_len, batch.tgt_len), (3, 4));
        assert_eq!(batch.src, vec![10, 11, 12, 10, PAD_ID, PAD_ID]);
        assert_eq!(batch.src_types[4], TokenType::Pad);
        assert_eq!(batch.tgt_in, vec![BOS_ID, 20, PAD_ID, PAD_ID, BOS_ID, 20, 21, 22]);
        assert_eq!(batch.tgt_out, vec![20, EOS_ID, PAD_ID, PAD_ID, 20, 21, 22, EOS_ID]);
        assert_eq!(batch.target_tokens(), 6);
        assert_eq!(batch.loss_weights(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn buckets_cover_everything_once_within_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let examples: Vec<Example> = (0..200)
            .map(|i| Example::untyped(vec![4; 1 + i % 17], vec![5; 1 + (i * 7) % 13]))
            .collect();
        let batches = bucket_batches(&examples, 64, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for b in &batches {
            let w = b
                .iter()
                .map(|&i| examples[i].src.len().max(examples[i].tgt.len() + 1))
                .max()
                .unwrap();
            assert!(b.len() == 1 || w * b.len() <= 64);
        }
    }
}
