//! Pre-norm encoder-decoder Transformer.
//!
//! Two forward paths share the same kernels: a taped path over whole
//! batches (training, scoring, attention inspection) and an incremental
//! path with key/value caches for decoding.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::batch::{Batch, Example};
use super::graph::{attention_forward, AttentionSpec, Graph, NodeId, ParamStore};
use super::tensor::{gemm, layer_norm_forward, linear_forward, log_softmax, matmul, positional_encoding, softmax_prefix, Float, Matrix, View};
use crate::annotator::TokenType;
use crate::error::{Error, Result};
use crate::vocab::SPECIALS;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_len: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub target_size: usize,
    /// Adds the 4-row token-type embedding to encoder inputs.
    pub use_extra: bool,
    /// Output projection shares the target slice of the word embedding.
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            model_dim: 64,
            ff_dim: 256,
            heads: 4,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 256,
            seed: 1,
            vocab_size: 0,
            target_size: 0,
            use_extra: false,
            tie_output: true,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value {value:?} for {key}")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.layers == 0 || self.model_dim == 0 || self.ff_dim == 0 || self.heads == 0 {
            return bad("layers, model_dim, ff_dim and heads must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        for (name, r) in [("dropout", self.dropout), ("label_smoothing", self.label_smoothing)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1)"));
            }
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.target_size < SPECIALS.len() || self.target_size > self.vocab_size {
            return bad(format!(
                "target_size {} must lie in {}..={}",
                self.target_size,
                SPECIALS.len(),
                self.vocab_size
            ));
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "layers" => self.layers = parse_value(key, value)?,
            "model_dim" => self.model_dim = parse_value(key, value)?,
            "ff_dim" => self.ff_dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "label_smoothing" => self.label_smoothing = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "target_size" => self.target_size = parse_value(key, value)?,
            "use_extra" => self.use_extra = parse_value(key, value)?,
            "tie_output" => self.tie_output = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "layers={}\nmodel_dim={}\nff_dim={}\nheads={}\ndropout={}\nlabel_smoothing={}\nmax_len={}\nseed={}\n\
             vocab_size={}\ntarget_size={}\nuse_extra={}\ntie_output={}\n",
            self.layers,
            self.model_dim,
            self.ff_dim,
            self.heads,
            self.dropout,
            self.label_smoothing,
            self.max_len,
            self.seed,
            self.vocab_size,
            self.target_size,
            self.use_extra,
            self.tie_output
        );
        s
    }

    /// Parses `key=value` lines; unknown keys are an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected key=value, got {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::parse(i + 1, format!("unknown model setting {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

/// Every parameter tensor of a configuration, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.model_dim;
    let mut out = vec![("embed".to_string(), cfg.vocab_size, d, Init::Embedding)];
    if cfg.use_extra {
        out.push(("extra".into(), 4, d, Init::Embedding));
    }
    if !cfg.tie_output {
        out.push(("out_proj".into(), d, cfg.target_size, Init::Xavier));
    }
    let ln = |out: &mut Vec<_>, p: &str| {
        out.push((format!("{p}.g"), 1, d, Init::Ones));
        out.push((format!("{p}.b"), 1, d, Init::Zeros));
    };
    let attn = |out: &mut Vec<_>, p: &str| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{m}"), d, d, Init::Xavier));
            out.push((format!("{p}.b{m}"), 1, d, Init::Zeros));
        }
    };
    let ff = |out: &mut Vec<_>, p: &str| {
        out.push((format!("{p}.w1"), d, cfg.ff_dim, Init::Xavier));
        out.push((format!("{p}.b1"), 1, cfg.ff_dim, Init::Zeros));
        out.push((format!("{p}.w2"), cfg.ff_dim, d, Init::Xavier));
        out.push((format!("{p}.b2"), 1, d, Init::Zeros));
    };
    for l in 0..cfg.layers {
        ln(&mut out, &format!("enc.{l}.ln1"));
        attn(&mut out, &format!("enc.{l}.self"));
        ln(&mut out, &format!("enc.{l}.ln2"));
        ff(&mut out, &format!("enc.{l}.ff"));
    }
    ln(&mut out, "enc.ln");
    for l in 0..cfg.layers {
        ln(&mut out, &format!("dec.{l}.ln1"));
        attn(&mut out, &format!("dec.{l}.self"));
        ln(&mut out, &format!("dec.{l}.ln2"));
        attn(&mut out, &format!("dec.{l}.cross"));
        ln(&mut out, &format!("dec.{l}.ln3"));
        ff(&mut out, &format!("dec.{l}.ff"));
    }
    ln(&mut out, "dec.ln");
    out
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ff: FfIds,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ff: FfIds,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: usize,
    extra: Option<usize>,
    out_proj: Option<usize>,
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
}

impl Ids {
    fn resolve<T: Float>(cfg: &ModelConfig, p: &ParamStore<T>) -> Ids {
        let id = |n: String| p.id(&n).unwrap_or_else(|| panic!("missing parameter {n}"));
        let ln = |n: &str| LnIds {
            g: id(format!("{n}.g")),
            b: id(format!("{n}.b")),
        };
        let attn = |n: &str| AttnIds {
            wq: id(format!("{n}.wq")),
            bq: id(format!("{n}.bq")),
            wk: id(format!("{n}.wk")),
            bk: id(format!("{n}.bk")),
            wv: id(format!("{n}.wv")),
            bv: id(format!("{n}.bv")),
            wo: id(format!("{n}.wo")),
            bo: id(format!("{n}.bo")),
        };
        let ff = |n: &str| FfIds {
            w1: id(format!("{n}.w1")),
            b1: id(format!("{n}.b1")),
            w2: id(format!("{n}.w2")),
            b2: id(format!("{n}.b2")),
        };
        Ids {
            embed: id("embed".into()),
            extra: cfg.use_extra.then(|| id("extra".into())),
            out_proj: (!cfg.tie_output).then(|| id("out_proj".into())),
            enc: (0..cfg.layers)
                .map(|l| EncLayer {
                    ln1: ln(&format!("enc.{l}.ln1")),
                    attn: attn(&format!("enc.{l}.self")),
                    ln2: ln(&format!("enc.{l}.ln2")),
                    ff: ff(&format!("enc.{l}.ff")),
                })
                .collect(),
            enc_ln: ln("enc.ln"),
            dec: (0..cfg.layers)
                .map(|l| DecLayer {
                    ln1: ln(&format!("dec.{l}.ln1")),
                    attn: attn(&format!("dec.{l}.self")),
                    ln2: ln(&format!("dec.{l}.ln2")),
                    cross: attn(&format!("dec.{l}.cross")),
                    ln3: ln(&format!("dec.{l}.ln3")),
                    ff: ff(&format!("dec.{l}.ff")),
                })
                .collect(),
            dec_ln: ln("dec.ln"),
        }
    }
}

/// Node ids of interest from one taped forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub logits: NodeId,
    pub enc_self: Vec<NodeId>,
    pub dec_self: Vec<NodeId>,
    pub dec_cross: Vec<NodeId>,
}

/// Attention weights of a single sentence pair, indexed `[layer][head]`.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    /// `src_len × src_len`
    pub enc_self: Vec<Vec<Matrix<f64>>>,
    /// `tgt_len × tgt_len`, rows are decoder inputs (`bos y1 .. yn`)
    pub dec_self: Vec<Vec<Matrix<f64>>>,
    /// `tgt_len × src_len`
    pub dec_cross: Vec<Vec<Matrix<f64>>>,
}

/// Encoder output prepared for incremental decoding.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub src_len: usize,
    cross_k: Vec<Matrix<T>>,
    cross_v: Vec<Matrix<T>>,
}

/// Self-attention key/value cache of one decoder hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    k: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    len: usize,
}

impl<T> DecoderState<T> {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug)]
pub struct Transformer<T: Float> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
    pe: Matrix<T>,
}

/// Multi-head attention of every row of `q` over all rows of `k`/`v`.
fn attend_all<T: Float>(q: View<'_, T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize) -> Matrix<T> {
    let d = k.cols;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Matrix::zeros(q.rows, d);
    let mut s = Matrix::zeros(q.rows, k.rows);
    for h in 0..heads {
        let qh = View {
            offset: q.offset + h * dh * q.cs,
            cols: dh,
            ..q
        };
        gemm(scale, qh, k.block(0, k.rows, h * dh, dh).t(), T::zero(), s.view_mut());
        for r in 0..s.rows {
            softmax_prefix(s.row_mut(r), k.rows);
        }
        gemm(T::one(), s.view(), v.block(0, v.rows, h * dh, dh), T::zero(), out.block_mut(0, q.rows, h * dh, dh));
    }
    out
}

fn relu_in_place<T: Float>(m: &mut Matrix<T>) {
    for v in &mut m.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

impl<T: Float> Transformer<T> {
    /// Fresh seeded parameters: embeddings `N(0, 1/model_dim)`, projections
    /// Xavier-uniform, biases zero, layer-norm gains one.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::default();
        let emb = Normal::new(0.0, (cfg.model_dim as f64).powf(-0.5)).expect("valid std");
        for (name, rows, cols, init) in layout(&cfg) {
            let data: Vec<T> = match init {
                Init::Embedding => (0..rows * cols).map(|_| T::from_f64(emb.sample(&mut rng))).collect(),
                Init::Xavier => {
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    let u = Uniform::new_inclusive(-a, a);
                    (0..rows * cols).map(|_| T::from_f64(u.sample(&mut rng))).collect()
                }
                Init::Zeros => vec![T::zero(); rows * cols],
                Init::Ones => vec![T::one(); rows * cols],
            };
            params.add(name, Matrix::from_vec(rows, cols, data));
        }
        Ok(Self::assemble(cfg, params))
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let want = layout(&cfg);
        if want.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, rows, cols, _) in &want {
            let m = params
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if (m.rows, m.cols) != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
        }
        Ok(Self::assemble(cfg, params))
    }

    fn assemble(cfg: ModelConfig, params: ParamStore<T>) -> Self {
        let ids = Ids::resolve(&cfg, &params);
        let pe = positional_encoding(cfg.max_len, cfg.model_dim);
        Transformer { cfg, params, ids, pe }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Float>(&self) -> Transformer<U> {
        Transformer::assemble(self.cfg.clone(), self.params.cast())
    }

    /// The shared word embedding (all vocabulary rows).
    pub fn word_embeddings(&self) -> &Matrix<T> {
        self.params.get(self.ids.embed)
    }

    pub fn extra_embeddings(&self) -> Option<&Matrix<T>> {
        self.ids.extra.map(|i| self.params.get(i))
    }

    fn p(&self, id: usize) -> &Matrix<T> {
        self.params.get(id)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            Some(&i) => Err(Error::IndexOutOfRange {
                index: i as usize,
                size: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.cfg.max_len {
            return Err(Error::Invalid(format!("sequence length {n} exceeds max_len {}", self.cfg.max_len)));
        }
        Ok(())
    }

    fn check_source(&self, tokens: &[u32], types: &[TokenType]) -> Result<()> {
        if tokens.len() != types.len() {
            return Err(Error::Shape(format!(
                "{} source tokens but {} token types",
                tokens.len(),
                types.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Empty("source sentence".into()));
        }
        self.check_len(tokens.len())?;
        self.check_ids(tokens)
    }

    /// Encoder input rows: `word · sqrt(d) + position + type`. The type term
    /// is present only when the model has the extra embedding.
    pub fn embed_input(&self, tokens: &[u32], types: &[TokenType]) -> Result<Matrix<T>> {
        self.check_source(tokens, types)?;
        let d = self.cfg.model_dim;
        let scale = T::from_f64((d as f64).sqrt());
        let emb = self.word_embeddings();
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, &w), &pe) in row.iter_mut().zip(emb.row(t as usize)).zip(self.pe.row(i)) {
                *o = w * scale + pe;
            }
            if let Some(extra) = self.extra_embeddings() {
                for (o, &e) in row.iter_mut().zip(extra.row(types[i].index())) {
                    *o += e;
                }
            }
        }
        Ok(x)
    }

    fn tiled_pe(&self, batch: usize, len: usize) -> Matrix<T> {
        let d = self.cfg.model_dim;
        let mut m = Matrix::zeros(batch * len, d);
        for b in 0..batch {
            m.data[b * len * d..(b + 1) * len * d].copy_from_slice(&self.pe.data[..len * d]);
        }
        m
    }

    fn g_ln<'p>(&'p self, g: &mut Graph<'p, T>, x: NodeId, ln: LnIds) -> NodeId {
        let (gain, bias) = (g.param(ln.g), g.param(ln.b));
        g.layer_norm(x, gain, bias)
    }

    fn g_lin<'p>(&'p self, g: &mut Graph<'p, T>, x: NodeId, w: usize, b: usize) -> NodeId {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, Some(b))
    }

    #[allow(clippy::too_many_arguments)]
    fn g_attn<'p, R: rand::Rng>(
        &'p self,
        g: &mut Graph<'p, T>,
        xq: NodeId,
        xkv: NodeId,
        a: &AttnIds,
        spec: AttentionSpec,
        dropout: f64,
        rng: &mut R,
    ) -> (NodeId, NodeId) {
        let q = self.g_lin(g, xq, a.wq, a.bq);
        let k = self.g_lin(g, xkv, a.wk, a.bk);
        let v = self.g_lin(g, xkv, a.wv, a.bv);
        let att = g.attention(q, k, v, spec, dropout, rng);
        (self.g_lin(g, att, a.wo, a.bo), att)
    }

    fn g_ff<'p>(&'p self, g: &mut Graph<'p, T>, x: NodeId, f: &FfIds) -> NodeId {
        let h = self.g_lin(g, x, f.w1, f.b1);
        let h = g.relu(h);
        self.g_lin(g, h, f.w2, f.b2)
    }

    /// Taped forward pass over a batch, producing logits over the
    /// `target_size` legal outputs for every decoder position.
    pub fn forward<'p, R: rand::Rng>(
        &'p self,
        g: &mut Graph<'p, T>,
        b: &Batch,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Trace> {
        self.check_ids(&b.src)?;
        self.check_ids(&b.tgt_in)?;
        self.check_len(b.src_len)?;
        self.check_len(b.tgt_len)?;
        if b.src_types.len() != b.src.len() {
            return Err(Error::Shape("source tokens and types differ in length".into()));
        }
        let d = self.cfg.model_dim;
        let scale = T::from_f64((d as f64).sqrt());
        let heads = self.cfg.heads;
        let emb = g.param(self.ids.embed);

        let w = g.gather(emb, &b.src);
        let w = g.scale(w, scale);
        let pe = g.input(self.tiled_pe(b.size, b.src_len));
        let mut x = g.add(w, pe);
        if let Some(extra) = self.ids.extra {
            let table = g.param(extra);
            let types: Vec<u32> = b.src_types.iter().map(|t| t.index() as u32).collect();
            let e = g.gather(table, &types);
            x = g.add(x, e);
        }
        x = g.dropout(x, dropout, rng);
        let mut enc_self = Vec::with_capacity(self.cfg.layers);
        let enc_spec = AttentionSpec {
            batch: b.size,
            q_len: b.src_len,
            k_len: b.src_len,
            heads,
            key_lens: b.src_lens.clone(),
            causal: false,
        };
        for layer in &self.ids.enc {
            let h = self.g_ln(g, x, layer.ln1);
            let (a, att) = self.g_attn(g, h, h, &layer.attn, enc_spec.clone(), dropout, rng);
            enc_self.push(att);
            let a = g.dropout(a, dropout, rng);
            x = g.add(x, a);
            let h = self.g_ln(g, x, layer.ln2);
            let f = self.g_ff(g, h, &layer.ff);
            let f = g.dropout(f, dropout, rng);
            x = g.add(x, f);
        }
        let mem = self.g_ln(g, x, self.ids.enc_ln);

        let w = g.gather(emb, &b.tgt_in);
        let w = g.scale(w, scale);
        let pe = g.input(self.tiled_pe(b.size, b.tgt_len));
        let mut y = g.add(w, pe);
        y = g.dropout(y, dropout, rng);
        let self_spec = AttentionSpec {
            batch: b.size,
            q_len: b.tgt_len,
            k_len: b.tgt_len,
            heads,
            key_lens: b.tgt_lens.clone(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch: b.size,
            q_len: b.tgt_len,
            k_len: b.src_len,
            heads,
            key_lens: b.src_lens.clone(),
            causal: false,
        };
        let mut dec_self = Vec::with_capacity(self.cfg.layers);
        let mut dec_cross = Vec::with_capacity(self.cfg.layers);
        for layer in &self.ids.dec {
            let h = self.g_ln(g, y, layer.ln1);
            let (a, att) = self.g_attn(g, h, h, &layer.attn, self_spec.clone(), dropout, rng);
            dec_self.push(att);
            let a = g.dropout(a, dropout, rng);
            y = g.add(y, a);
            let h = self.g_ln(g, y, layer.ln2);
            let (a, att) = self.g_attn(g, h, mem, &layer.cross, cross_spec.clone(), dropout, rng);
            dec_cross.push(att);
            let a = g.dropout(a, dropout, rng);
            y = g.add(y, a);
            let h = self.g_ln(g, y, layer.ln3);
            let f = self.g_ff(g, h, &layer.ff);
            let f = g.dropout(f, dropout, rng);
            y = g.add(y, f);
        }
        let h = self.g_ln(g, y, self.ids.dec_ln);
        let logits = match self.ids.out_proj {
            Some(o) => {
                let w = g.param(o);
                g.linear(h, w, None)
            }
            None => g.matmul_rows_t(h, emb, self.cfg.target_size),
        };
        Ok(Trace {
            logits,
            enc_self,
            dec_self,
            dec_cross,
        })
    }

    /// Summed label-smoothed cross-entropy of a batch (padding excluded).
    pub fn loss<'p, R: rand::Rng>(
        &'p self,
        g: &mut Graph<'p, T>,
        b: &Batch,
        label_smoothing: f64,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(Trace, NodeId)> {
        let trace = self.forward(g, b, dropout, rng)?;
        let weights: Vec<T> = b.loss_weights().into_iter().map(T::from_f64).collect();
        let loss = g.cross_entropy(trace.logits, &b.tgt_out, &weights, label_smoothing);
        Ok((trace, loss))
    }

    /// Distribution over the `target_size` legal outputs after `prefix`
    /// (which should start with bos), computed with the taped path.
    pub fn next_token_distribution(&self, src: &[u32], types: &[TokenType], prefix: &[u32]) -> Result<Vec<f64>> {
        self.check_source(src, types)?;
        if prefix.is_empty() {
            return Err(Error::Empty("decoder prefix".into()));
        }
        let batch = Batch::with_prefix(src, types, prefix);
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.forward(&mut g, &batch, 0.0, &mut rng)?;
        let logits = g.value(trace.logits);
        let mut row: Vec<f64> = logits.row(logits.rows - 1).iter().map(|v| v.to_f64()).collect();
        softmax_prefix(&mut row, self.cfg.target_size);
        Ok(row)
    }

    /// Log-probabilities of each token of `tgt` followed by eos under
    /// teacher forcing.
    pub fn score_sequence(&self, src: &[u32], types: &[TokenType], tgt: &[u32]) -> Result<Vec<f64>> {
        self.check_source(src, types)?;
        let ex = Example {
            src: src.to_vec(),
            types: types.to_vec(),
            tgt: tgt.to_vec(),
        };
        let batch = Batch::new(&[&ex]);
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.forward(&mut g, &batch, 0.0, &mut rng)?;
        let logits = g.value(trace.logits);
        Ok((0..logits.rows)
            .map(|r| {
                let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64()).collect();
                log_softmax(&row)[batch.tgt_out[r] as usize]
            })
            .collect())
    }

    pub fn attention_dump(&self, src: &[u32], types: &[TokenType], tgt: &[u32]) -> Result<AttentionDump> {
        self.check_source(src, types)?;
        let ex = Example {
            src: src.to_vec(),
            types: types.to_vec(),
            tgt: tgt.to_vec(),
        };
        let batch = Batch::new(&[&ex]);
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.forward(&mut g, &batch, 0.0, &mut rng)?;
        let collect = |nodes: &[NodeId]| -> Vec<Vec<Matrix<f64>>> {
            nodes
                .iter()
                .map(|&n| {
                    let (spec, probs) = g.attention_probs(n).expect("attention node");
                    let block = spec.q_len * spec.k_len;
                    (0..spec.heads)
                        .map(|h| {
                            let data = probs[h * block..(h + 1) * block].iter().map(|v| v.to_f64()).collect();
                            Matrix::from_vec(spec.q_len, spec.k_len, data)
                        })
                        .collect()
                })
                .collect()
        };
        Ok(AttentionDump {
            enc_self: collect(&trace.enc_self),
            dec_self: collect(&trace.dec_self),
            dec_cross: collect(&trace.dec_cross),
        })
    }

    fn ln(&self, x: &Matrix<T>, ln: LnIds) -> Matrix<T> {
        layer_norm_forward(x, self.p(ln.g), self.p(ln.b)).0
    }

    fn lin(&self, x: &Matrix<T>, w: usize, b: usize) -> Matrix<T> {
        linear_forward(x, self.p(w), Some(self.p(b)))
    }

    fn ff(&self, x: &Matrix<T>, f: &FfIds) -> Matrix<T> {
        let mut h = self.lin(x, f.w1, f.b1);
        relu_in_place(&mut h);
        self.lin(&h, f.w2, f.b2)
    }

    /// Runs the encoder once and precomputes cross-attention keys and values.
    pub fn encode(&self, src: &[u32], types: &[TokenType]) -> Result<Encoded<T>> {
        let mut x = self.embed_input(src, types)?;
        let n = src.len();
        let spec = AttentionSpec {
            batch: 1,
            q_len: n,
            k_len: n,
            heads: self.cfg.heads,
            key_lens: vec![n],
            causal: false,
        };
        for layer in &self.ids.enc {
            let h = self.ln(&x, layer.ln1);
            let a = &layer.attn;
            let (q, k, v) = (self.lin(&h, a.wq, a.bq), self.lin(&h, a.wk, a.bk), self.lin(&h, a.wv, a.bv));
            let (o, _) = attention_forward(&q, &k, &v, &spec, None);
            x.add_assign(&self.lin(&o, a.wo, a.bo));
            let h = self.ln(&x, layer.ln2);
            x.add_assign(&self.ff(&h, &layer.ff));
        }
        let mem = self.ln(&x, self.ids.enc_ln);
        let cross_k = self.ids.dec.iter().map(|l| self.lin(&mem, l.cross.wk, l.cross.bk)).collect();
        let cross_v = self.ids.dec.iter().map(|l| self.lin(&mem, l.cross.wv, l.cross.bv)).collect();
        Ok(Encoded {
            src_len: n,
            cross_k,
            cross_v,
        })
    }

    pub fn start_state(&self) -> DecoderState<T> {
        let d = self.cfg.model_dim;
        DecoderState {
            k: (0..self.cfg.layers).map(|_| Matrix::zeros(0, d)).collect(),
            v: (0..self.cfg.layers).map(|_| Matrix::zeros(0, d)).collect(),
            len: 0,
        }
    }

    /// Feeds one token to each hypothesis and returns next-token
    /// log-probabilities, one row of `target_size` entries per state.
    pub fn decode_step(&self, enc: &Encoded<T>, states: &mut [DecoderState<T>], tokens: &[u32]) -> Result<Matrix<T>> {
        assert_eq!(states.len(), tokens.len(), "one token per decoder state");
        self.check_ids(tokens)?;
        let d = self.cfg.model_dim;
        let heads = self.cfg.heads;
        let scale = T::from_f64((d as f64).sqrt());
        let n = tokens.len();
        let emb = self.word_embeddings();
        let mut x = Matrix::zeros(n, d);
        for (i, (&t, st)) in tokens.iter().zip(states.iter()).enumerate() {
            if st.len >= self.cfg.max_len {
                return Err(Error::Invalid(format!("decoder passed max_len {}", self.cfg.max_len)));
            }
            for ((o, &w), &pe) in x.row_mut(i).iter_mut().zip(emb.row(t as usize)).zip(self.pe.row(st.len)) {
                *o = w * scale + pe;
            }
        }
        for (l, layer) in self.ids.dec.iter().enumerate() {
            let h = self.ln(&x, layer.ln1);
            let a = &layer.attn;
            let (q, k, v) = (self.lin(&h, a.wq, a.bq), self.lin(&h, a.wk, a.bk), self.lin(&h, a.wv, a.bv));
            let mut o = Matrix::zeros(n, d);
            for (i, st) in states.iter_mut().enumerate() {
                st.k[l].push_row(k.row(i));
                st.v[l].push_row(v.row(i));
                let r = attend_all(q.block(i, 1, 0, d), &st.k[l], &st.v[l], heads);
                o.row_mut(i).copy_from_slice(&r.data);
            }
            x.add_assign(&self.lin(&o, a.wo, a.bo));
            let h = self.ln(&x, layer.ln2);
            let c = &layer.cross;
            let q = self.lin(&h, c.wq, c.bq);
            let o = attend_all(q.view(), &enc.cross_k[l], &enc.cross_v[l], heads);
            x.add_assign(&self.lin(&o, c.wo, c.bo));
            let h = self.ln(&x, layer.ln3);
            x.add_assign(&self.ff(&h, &layer.ff));
        }
        for st in states.iter_mut() {
            st.len += 1;
        }
        let h = self.ln(&x, self.ids.dec_ln);
        let mut logits = match self.ids.out_proj {
            Some(o) => matmul(h.view(), self.p(o).view()),
            None => matmul(h.view(), emb.rows_view(0, self.cfg.target_size).t()),
        };
        for r in 0..n {
            let lp = log_softmax(logits.row(r));
            logits.row_mut(r).copy_from_slice(&lp);
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(use_extra: bool) -> ModelConfig {
        ModelConfig {
            layers: 1,
            model_dim: 8,
            ff_dim: 16,
            heads: 2,
            dropout: 0.0,
            max_len: 32,
            vocab_size: 20,
            target_size: 12,
            use_extra,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = tiny(true);
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::from_kv("bogus=1\n").is_err());
        let bad = ModelConfig { heads: 3, ..tiny(false) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extra_embedding_is_additive() {
        let m: Transformer<f64> = Transformer::new(tiny(true)).unwrap();
        let toks = [5, 5];
        let x = m.embed_input(&toks, &[TokenType::Source, TokenType::Normal]).unwrap();
        let same_pos_n = m.embed_input(&toks, &[TokenType::Normal, TokenType::Normal]).unwrap();
        let extra = m.extra_embeddings().unwrap();
        for j in 0..8 {
            let diff = x.data[j] - same_pos_n.data[j];
            let want = extra.data[TokenType::Source.index() * 8 + j] - extra.data[j];
            assert!((diff - want).abs() < 1e-12);
        }
        assert!(matches!(
            m.embed_input(&toks, &[TokenType::Normal]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_extra_table_matches_model_without_it() {
        let mut with: Transformer<f64> = Transformer::new(tiny(true)).unwrap();
        with.params_mut().by_name_mut("extra").unwrap().data.fill(0.0);
        let mut store = ParamStore::default();
        for (name, m) in with.params().iter().filter(|(n, _)| *n != "extra") {
            store.add(name, m.clone());
        }
        let without = Transformer::from_params(tiny(false), store).unwrap();
        let types = [TokenType::Source, TokenType::Target, TokenType::Normal];
        let a = with.next_token_distribution(&[4, 13, 6], &types, &[2, 7]).unwrap();
        let b = without.next_token_distribution(&[4, 13, 6], &types, &[2, 7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distribution_shape_and_determinism() {
        let m: Transformer<f64> = Transformer::new(tiny(false)).unwrap();
        let types = [TokenType::Normal; 3];
        let p = m.next_token_distribution(&[4, 15, 6], &types, &[2]).unwrap();
        assert_eq!(p.len(), 12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p, m.next_token_distribution(&[4, 15, 6], &types, &[2]).unwrap());
        assert!(matches!(
            m.next_token_distribution(&[40], &[TokenType::Normal], &[2]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn incremental_decoder_matches_taped_forward() {
        for tie in [true, false] {
            let cfg = ModelConfig {
                tie_output: tie,
                ..tiny(true)
            };
            let m: Transformer<f64> = Transformer::new(cfg).unwrap();
            let src = [4, 13, 6, 9];
            let types = [TokenType::Normal, TokenType::Source, TokenType::Target, TokenType::Normal];
            let prefix = [2u32, 7, 8, 5];
            let enc = m.encode(&src, &types).unwrap();
            let mut st = vec![m.start_state()];
            for i in 0..prefix.len() {
                let lp = m.decode_step(&enc, &mut st, &prefix[i..=i]).unwrap();
                let want = m.next_token_distribution(&src, &types, &prefix[..=i]).unwrap();
                for (a, b) in lp.row(0).iter().zip(&want) {
                    assert!((a.exp() - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn score_sequence_agrees_with_stepwise_distributions() {
        let m: Transformer<f64> = Transformer::new(tiny(false)).unwrap();
        let src = [4, 5];
        let types = [TokenType::Normal; 2];
        let scores = m.score_sequence(&src, &types, &[7, 8]).unwrap();
        assert_eq!(scores.len(), 3);
        let p = m.next_token_distribution(&src, &types, &[2, 7]).unwrap();
        assert!((scores[1] - p[8].ln()).abs() < 1e-10);
    }

    #[test]
    fn attention_dump_shapes_and_masks() {
        let m: Transformer<f64> = Transformer::new(ModelConfig { layers: 2, ..tiny(true) }).unwrap();
        let src = [4, 13, 6];
        let types = [TokenType::Normal; 3];
        let dump = m.attention_dump(&src, &types, &[7, 8]).unwrap();
        assert_eq!(dump.dec_cross.len(), 2);
        assert_eq!(dump.dec_cross[0].len(), 2);
        assert_eq!((dump.dec_cross[1][1].rows, dump.dec_cross[1][1].cols), (3, 3));
        for layer in dump.enc_self.iter().chain(&dump.dec_self).chain(&dump.dec_cross) {
            for head in layer {
                for r in 0..head.rows {
                    assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
        let s = &dump.dec_self[0][0];
        for i in 0..s.rows {
            for j in i + 1..s.cols {
                assert_eq!(s.data[i * s.cols + j], 0.0);
            }
        }
    }
}
