//! Finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{Batch, Example};
use super::graph::Graph;
use super::tensor::Matrix;
use super::transformer::{ModelConfig, Transformer};
use crate::annotator::TokenType;
use crate::error::Result;
use crate::vocab::SPECIALS;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss(model: &Transformer<f64>, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, l) = model.loss(&mut g, batch, model.config().label_smoothing, model.config().dropout, &mut rng)?;
    Ok(g.value(l).data[0])
}

/// Analytic gradient of the summed batch loss. Dropout masks come from a
/// fixed stream, so every evaluation sees the same masks.
pub fn analytic_gradients(model: &Transformer<f64>, batch: &Batch, seed: f64) -> Result<Vec<Matrix<f64>>> {
    let mut grads = model.params().zeros_like();
    let mut g = Graph::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, l) = model.loss(&mut g, batch, model.config().label_smoothing, model.config().dropout, &mut rng)?;
    g.backward(l, seed, &mut grads);
    Ok(grads)
}

/// Compares every parameter entry against a central difference with the
/// given step.
pub fn grad_check(model: &Transformer<f64>, batch: &Batch, step: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(model, batch, 1.0)?;
    let mut work = model.clone();
    let mut per_tensor = Vec::with_capacity(analytic.len());
    let mut checked = 0;
    for (i, a) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..a.data.len() {
            let orig = work.params().get(i).data[j];
            work.params_mut().get_mut(i).data[j] = orig + step;
            let up = loss(&work, batch)?;
            work.params_mut().get_mut(i).data[j] = orig - step;
            let down = loss(&work, batch)?;
            work.params_mut().get_mut(i).data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a.data[j], numeric));
            checked += 1;
        }
        per_tensor.push((model.params().names()[i].clone(), worst));
    }
    let max_rel_error = per_tensor.iter().map(|t| t.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_tensor,
        checked,
    })
}

/// The smallest configuration the check is meant for: one layer, one head,
/// width 8, with the type embedding enabled.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 1,
        model_dim: 8,
        ff_dim: 16,
        heads: 1,
        dropout: 0.0,
        label_smoothing: 0.1,
        max_len: 16,
        seed,
        vocab_size: 14,
        target_size: 10,
        use_extra: true,
        tie_output: true,
    }
}

/// Two sentence pairs of different lengths, so the batch contains padding
/// and every token type.
pub fn sample_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = SPECIALS.len() as u32;
    let mut word = |hi: usize| rng.gen_range(lo..hi as u32);
    let long = Example {
        src: (0..5).map(|_| word(cfg.vocab_size)).collect(),
        types: vec![
            TokenType::Normal,
            TokenType::Source,
            TokenType::Normal,
            TokenType::Target,
            TokenType::Normal,
        ],
        tgt: (0..4).map(|_| word(cfg.target_size)).collect(),
    };
    let short = Example {
        src: (0..3).map(|_| word(cfg.vocab_size)).collect(),
        types: vec![TokenType::Normal, TokenType::Target, TokenType::Normal],
        tgt: (0..2).map(|_| word(cfg.target_size)).collect(),
    };
    Batch::new(&[&long, &short])
}
