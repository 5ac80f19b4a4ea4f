//! Adam training with length-bucketed batches, gradient accumulation and
//! global-norm clipping.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{bucket_batches, Batch, Example};
use super::graph::Graph;
use super::tensor::{Float, Matrix};
use super::transformer::Transformer;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    /// Padded token budget per micro-batch.
    pub tokens_per_batch: usize,
    /// Micro-batches summed into one update.
    pub accum_steps: usize,
    pub epochs: usize,
    /// Stop after this many updates (0 = no limit).
    pub max_steps: usize,
    /// Linear warmup length in updates (0 = constant rate).
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 5.0,
            tokens_per_batch: 512,
            accum_steps: 1,
            epochs: 20,
            max_steps: 0,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Invalid(format!("{name} {v} outside [0, 1)")));
            }
        }
        if self.tokens_per_batch == 0 || self.accum_steps == 0 || self.epochs == 0 {
            return Err(Error::Invalid("tokens_per_batch, accum_steps and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lr={}\nadam_beta1={}\nadam_beta2={}\nadam_eps={}\ngrad_clip_norm={}\ntokens_per_batch={}\n\
             accum_steps={}\nepochs={}\nmax_steps={}\nwarmup_steps={}\n",
            self.lr,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.grad_clip_norm,
            self.tokens_per_batch,
            self.accum_steps,
            self.epochs,
            self.max_steps,
            self.warmup_steps
        )
    }

    /// Sets one field from text. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad value {v:?} for {key}")))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = num(key, value)?,
            "tokens_per_batch" => self.tokens_per_batch = num(key, value)?,
            "accum_steps" => self.accum_steps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// What one parameter update did.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub step: usize,
    pub epoch: usize,
    /// Mean label-smoothed loss per target token over the update.
    pub loss: f64,
    pub tokens: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    /// `(step, loss)` per update.
    pub losses: Vec<(usize, f64)>,
    /// Examples dropped for exceeding `max_len` or having an empty source.
    pub skipped: usize,
}

pub fn write_loss_curve<W: Write>(mut w: W, losses: &[(usize, f64)]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (s, l) in losses {
        writeln!(w, "{s},{l}")?;
    }
    Ok(())
}

pub fn save_loss_curve(path: &Path, losses: &[(usize, f64)]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_curve(std::io::BufWriter::new(f), losses).map_err(|e| Error::io(path, e))
}

pub struct Trainer<'m, T: Float> {
    model: &'m mut Transformer<T>,
    cfg: TrainConfig,
    grads: Vec<Matrix<T>>,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    pending_tokens: usize,
    pending_loss: f64,
    step: usize,
    rng: ChaCha8Rng,
}

impl<'m, T: Float> Trainer<'m, T> {
    pub fn new(model: &'m mut Transformer<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let grads = model.params().zeros_like();
        let m = model.params().zeros_like();
        let v = model.params().zeros_like();
        // a stream separate from initialization, still fixed by the model seed
        let rng = ChaCha8Rng::seed_from_u64(model.config().seed ^ 0x5eed_7ea1);
        Ok(Trainer {
            model,
            cfg,
            grads,
            m,
            v,
            pending_tokens: 0,
            pending_loss: 0.0,
            step: 0,
            rng,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &Transformer<T> {
        self.model
    }

    /// Adds one micro-batch's summed gradient. Returns its summed loss.
    pub fn accumulate(&mut self, batch: &Batch) -> Result<f64> {
        let model: &Transformer<T> = self.model;
        let mcfg = model.config();
        let mut g = Graph::new(model.params());
        let (_, loss) = model.loss(&mut g, batch, mcfg.label_smoothing, mcfg.dropout, &mut self.rng)?;
        let value = g.value(loss).data[0].to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "loss {value} on a batch of {} sentences (source length {}, target length {})",
                    batch.size, batch.src_len, batch.tgt_len
                ),
            });
        }
        g.backward(loss, T::one(), &mut self.grads);
        self.pending_tokens += batch.target_tokens();
        self.pending_loss += value;
        Ok(value)
    }

    /// Normalizes the accumulated gradient by the number of target tokens,
    /// clips it and takes one Adam step.
    pub fn update(&mut self) -> Result<StepInfo> {
        if self.pending_tokens == 0 {
            return Err(Error::Empty("no gradient accumulated".into()));
        }
        let inv = T::from_f64(1.0 / self.pending_tokens as f64);
        for g in &mut self.grads {
            g.scale(inv);
        }
        let norm = self.grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("gradient norm {norm}"),
            });
        }
        if norm > self.cfg.grad_clip_norm {
            let f = T::from_f64(self.cfg.grad_clip_norm / norm);
            for g in &mut self.grads {
                g.scale(f);
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let warm = if c.warmup_steps > 0 {
            (self.step as f64 / c.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = c.lr * warm;
        let (b1, b2) = (T::from_f64(c.adam_beta1), T::from_f64(c.adam_beta2));
        let (nb1, nb2) = (T::one() - b1, T::one() - b2);
        let c1 = T::from_f64(1.0 / (1.0 - c.adam_beta1.powi(t)));
        let c2 = T::from_f64(1.0 / (1.0 - c.adam_beta2.powi(t)));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(c.adam_eps));
        let params = self.model.params_mut();
        for (i, g) in self.grads.iter_mut().enumerate() {
            let p = params.get_mut(i);
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + nb1 * gj;
                v[j] = b2 * v[j] + nb2 * gj * gj;
                let mh = m[j] * c1;
                let vh = v[j] * c2;
                p.data[j] -= lr * mh / (vh.sqrt() + eps);
                g.data[j] = T::zero();
            }
        }
        let info = StepInfo {
            step: self.step,
            epoch: 0,
            loss: self.pending_loss / self.pending_tokens as f64,
            tokens: self.pending_tokens,
            grad_norm: norm,
        };
        self.pending_tokens = 0;
        self.pending_loss = 0.0;
        Ok(info)
    }

    /// Runs the configured number of epochs (or `max_steps` updates).
    pub fn fit<F: FnMut(&StepInfo)>(&mut self, examples: &[Example], mut on_step: F) -> Result<TrainReport> {
        let max_len = self.model.config().max_len;
        let kept: Vec<Example> = examples
            .iter()
            .filter(|e| !e.src.is_empty() && e.src.len() <= max_len && e.tgt.len() < max_len)
            .cloned()
            .collect();
        let mut report = TrainReport {
            skipped: examples.len() - kept.len(),
            ..TrainReport::default()
        };
        if kept.is_empty() {
            return Err(Error::Empty("no usable training examples".into()));
        }
        let limit = if self.cfg.max_steps == 0 {
            usize::MAX
        } else {
            self.cfg.max_steps
        };
        'epochs: for epoch in 0..self.cfg.epochs {
            let batches = bucket_batches(&kept, self.cfg.tokens_per_batch, &mut self.rng);
            let mut micro = 0;
            for idx in &batches {
                let refs: Vec<&Example> = idx.iter().map(|&i| &kept[i]).collect();
                self.accumulate(&Batch::new(&refs))?;
                micro += 1;
                if micro == self.cfg.accum_steps {
                    micro = 0;
                    self.finish_update(epoch, &mut report, &mut on_step)?;
                    if self.step >= limit {
                        break 'epochs;
                    }
                }
            }
            if micro > 0 {
                self.finish_update(epoch, &mut report, &mut on_step)?;
            }
            report.epochs = epoch + 1;
            if self.step >= limit {
                break;
            }
        }
        report.steps = self.step;
        Ok(report)
    }

    fn finish_update<F: FnMut(&StepInfo)>(&mut self, epoch: usize, report: &mut TrainReport, on_step: &mut F) -> Result<()> {
        let mut info = self.update()?;
        info.epoch = epoch;
        report.losses.push((info.step, info.loss));
        on_step(&info);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            model_dim: 16,
            ff_dim: 32,
            heads: 2,
            dropout: 0.0,
            label_smoothing: 0.1,
            max_len: 16,
            vocab_size: 12,
            target_size: 12,
            ..ModelConfig::default()
        }
    }

    fn copy_task(n: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|_| {
                let len = rand::Rng::gen_range(&mut rng, 2..6);
                let s: Vec<u32> = (0..len).map(|_| rand::Rng::gen_range(&mut rng, 4..12)).collect();
                Example::untyped(s.clone(), s)
            })
            .collect()
    }

    #[test]
    fn loss_decreases_on_copy_task() {
        let mut model: Transformer<f32> = Transformer::new(cfg()).unwrap();
        let tc = TrainConfig {
            tokens_per_batch: 64,
            epochs: 100,
            max_steps: 50,
            ..TrainConfig::default()
        };
        let report = Trainer::new(&mut model, tc).unwrap().fit(&copy_task(100), |_| {}).unwrap();
        assert_eq!(report.steps, 50);
        let first: f64 = report.losses[..5].iter().map(|l| l.1).sum();
        let last: f64 = report.losses[45..].iter().map(|l| l.1).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn accumulation_matches_one_large_batch() {
        let data = copy_task(8);
        let refs: Vec<&Example> = data.iter().collect();
        let tc = TrainConfig::default();
        let mut a: Transformer<f64> = Transformer::new(cfg()).unwrap();
        let mut b = a.clone();
        {
            let mut t = Trainer::new(&mut a, tc.clone()).unwrap();
            for _ in 0..3 {
                t.accumulate(&Batch::new(&refs)).unwrap();
                t.update().unwrap();
            }
        }
        {
            let mut t = Trainer::new(&mut b, tc).unwrap();
            for _ in 0..3 {
                for chunk in refs.chunks(2) {
                    t.accumulate(&Batch::new(chunk)).unwrap();
                }
                t.update().unwrap();
            }
        }
        for ((name, x), (_, y)) in a.params().iter().zip(b.params().iter()) {
            for (p, q) in x.data.iter().zip(&y.data) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(q.abs()).max(1e-3), "{name}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut model: Transformer<f32> = Transformer::new(ModelConfig { dropout: 0.1, ..cfg() }).unwrap();
            let tc = TrainConfig {
                tokens_per_batch: 40,
                max_steps: 5,
                ..TrainConfig::default()
            };
            let r = Trainer::new(&mut model, tc).unwrap().fit(&copy_task(30), |_| {}).unwrap();
            (r.losses, model.into_params())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn loss_curve_csv() {
        let mut buf = Vec::new();
        write_loss_curve(&mut buf, &[(1, 2.5), (2, 2.0)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n1,2.5\n2,2\n");
    }
}
