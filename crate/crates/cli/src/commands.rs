use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::Args;
use prespec_core::annotator::{
    annotate_corpus, detag as detag_sentence, format_types, read_types, AnnotationScheme, CorpusOutputs, Method,
    Sidecar, TokenType,
};
use prespec_core::eval::{bleu4, constraint_accuracy, format_table, nearest_neighbors};
use prespec_core::experiment::{decode_limit, postprocess, ExperimentConfig};
use prespec_core::miner::{
    apply_gazetteer, mine_lexicon, read_gazetteer, read_phrase_table_lenient, read_spans, write_spans, Lexicon,
    MiningConfig, DEFAULT_SCORE_INDEX,
};
use prespec_core::model::checkpoint::{self, Checkpoint};
use prespec_core::model::gradcheck::{grad_check as run_grad_check, sample_batch, tiny_config};
use prespec_core::model::{beam_search, Example, Matrix, Trainer, Transformer};
use prespec_core::subword::{bpe_undo as undo, BpeModel};
use prespec_core::synthgen::{generate, SynthConfig};
use prespec_core::text::{count_lines, create_writer, read_corpus, read_corpus_lenient, write_corpus, Sentence};
use prespec_core::vocab::{JointVocab, VocabConfig};

use crate::{ConfigArg, InStage, StageResult};

/// Reads the `--config` file, if any, on top of the given settings.
pub fn load_settings(base: ExperimentConfig, config: &ConfigArg) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = base;
    if let Some(p) = &config.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_kv(&text).with_context(|| format!("in {}", p.display()))?;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Debug, Clone)]
pub struct MineArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Entity spans, `sentence<TAB>start<TAB>end`.
    #[arg(long)]
    pub spans: PathBuf,
    #[arg(long)]
    pub phrase_table: PathBuf,
    /// Lexicon output (TSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Which phrase-table score ranks candidates (0-3).
    #[arg(long, default_value_t = DEFAULT_SCORE_INDEX)]
    pub score_index: usize,
}

pub fn mine(a: &MineArgs) -> StageResult<()> {
    let s = "mine";
    let src = read_corpus(&a.src).stage(s)?;
    let tgt = read_corpus(&a.tgt).stage(s)?;
    let spans = read_spans(&a.spans).stage(s)?;
    let (table, skipped) = read_phrase_table_lenient(&a.phrase_table).stage(s)?;
    if !skipped.is_empty() {
        eprintln!("mine: skipped {} malformed phrase-table lines", skipped.len());
    }
    let cfg = MiningConfig {
        score_index: a.score_index,
    };
    let (lexicon, report) = mine_lexicon(&src, &tgt, &spans, &table, &cfg).stage(s)?;
    lexicon.save(&a.out).stage(s)?;
    eprintln!(
        "mine: {} occurrences, {} verified, {} unverified, {} too long; {} pairs",
        report.occurrences,
        report.verified,
        report.unverified,
        report.too_long,
        lexicon.len()
    );
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct GazetteerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// One phrase per line.
    #[arg(long)]
    pub gazetteer: PathBuf,
    /// Span output (TSV).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gazetteer(a: &GazetteerArgs) -> StageResult<()> {
    let s = "gazetteer";
    let corpus = read_corpus(&a.corpus).stage(s)?;
    let phrases = read_gazetteer(&a.gazetteer).stage(s)?;
    let spans = apply_gazetteer(&corpus, &phrases);
    write_spans(&a.out, &spans).stage(s)?;
    eprintln!("gazetteer: {} spans", spans.len());
    Ok(())
}

pub fn parse_scheme(name: &str, extra: bool) -> anyhow::Result<AnnotationScheme> {
    Ok(AnnotationScheme::new(name.parse::<Method>()?, extra))
}

#[derive(Args, Debug, Clone)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub src: PathBuf,
    /// Aligned target corpus; required unless `--test-mode`.
    #[arg(long)]
    pub tgt: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: PathBuf,
    /// base, t, r, m, tr or tm.
    #[arg(long, default_value = "tm")]
    pub scheme: String,
    /// Also write token types for the extra embedding.
    #[arg(long)]
    pub extra: bool,
    /// Match against the lexicon alone, without target verification.
    #[arg(long)]
    pub test_mode: bool,
    /// Outputs go to `<prefix>.src`, `.tgt`, `.types`, `.constraints.tsv`
    /// and `.stats`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

pub fn annotate(a: &AnnotateArgs) -> StageResult<()> {
    let s = "annotate";
    let scheme = parse_scheme(&a.scheme, a.extra).stage(s)?;
    let tgt = match (&a.tgt, a.test_mode) {
        (Some(_), true) => return Err(anyhow!("--tgt is not used with --test-mode")).stage(s),
        (None, false) => {
            return Err(anyhow!("training-mode annotation needs --tgt (use --test-mode to annotate without one)"))
                .stage(s)
        }
        (t, _) => t.as_deref(),
    };
    if let Some(parent) = a.out_prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).stage(s)?;
    }
    let lexicon = Lexicon::load(&a.lexicon).stage(s)?;
    let outputs = CorpusOutputs::with_prefix(&a.out_prefix, tgt.is_some(), scheme.extra);
    let stats = annotate_corpus(&a.src, tgt, &lexicon, scheme, &outputs).stage(s)?;
    eprintln!(
        "annotate: {} sentences, {} annotated, {} constraints",
        stats.sentences, stats.annotated_sentences, stats.constraints
    );
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct IoArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn detag(a: &IoArgs) -> StageResult<()> {
    let s = "detag";
    let corpus = read_corpus_lenient(&a.input).stage(s)?;
    let mut unbalanced = 0;
    let out: Vec<Sentence> = corpus
        .iter()
        .map(|c| {
            let d = detag_sentence(c);
            unbalanced += d.unbalanced as usize;
            d.sentence
        })
        .collect();
    write_corpus(&a.output, &out).stage(s)?;
    if unbalanced > 0 {
        eprintln!("detag: {unbalanced} lines had unbalanced tags");
    }
    Ok(())
}

pub fn bpe_undo(a: &IoArgs) -> StageResult<()> {
    let s = "bpe-undo";
    let corpus = read_corpus_lenient(&a.input).stage(s)?;
    let mut dangling = 0;
    let out: Vec<Sentence> = corpus
        .iter()
        .map(|c| {
            let u = undo(c);
            dangling += u.dangling_markers;
            u.sentence
        })
        .collect();
    write_corpus(&a.output, &out).stage(s)?;
    if dangling > 0 {
        eprintln!("bpe-undo: {dangling} dangling continuation markers");
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct BpeLearnArgs {
    /// Corpora to learn from (source and target for joint BPE).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 30_000)]
    pub merges: usize,
    /// Extra tokens never split.
    #[arg(long, num_args = 1..)]
    pub protect: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bpe_learn(a: &BpeLearnArgs) -> StageResult<()> {
    let s = "bpe-learn";
    let mut all = Vec::new();
    for p in &a.input {
        all.extend(read_corpus(p).stage(s)?);
    }
    let model = BpeModel::learn(&all, a.merges, &a.protect);
    model.save(&a.out).stage(s)?;
    eprintln!("bpe-learn: {} merges", model.merges().len());
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct BpeApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Token types aligned to the input; each type is repeated over the
    /// pieces of its word.
    #[arg(long, requires = "types_out")]
    pub types: Option<PathBuf>,
    #[arg(long, requires = "types")]
    pub types_out: Option<PathBuf>,
}

pub fn bpe_apply(a: &BpeApplyArgs) -> StageResult<()> {
    let s = "bpe-apply";
    let model = BpeModel::load(&a.model).stage(s)?;
    let corpus = read_corpus(&a.input).stage(s)?;
    match (&a.types, &a.types_out) {
        (Some(tp), Some(to)) => {
            let types = read_types(tp).stage(s)?;
            if types.len() != corpus.len() {
                return Err(anyhow!(
                    "{} has {} lines but {} has {}",
                    a.input.display(),
                    corpus.len(),
                    tp.display(),
                    types.len()
                ))
                .stage(s);
            }
            let mut out = Vec::with_capacity(corpus.len());
            let mut w = create_writer(to).stage(s)?;
            for (i, (c, t)) in corpus.iter().zip(&types).enumerate() {
                let (seg, ty) = model
                    .apply_with_types(c, t)
                    .with_context(|| format!("line {}", i + 1))
                    .stage(s)?;
                writeln!(w, "{}", format_types(&ty).stage(s)?).stage(s)?;
                out.push(seg);
            }
            w.flush().stage(s)?;
            write_corpus(&a.output, &out).stage(s)
        }
        _ => write_corpus(&a.output, &model.apply_corpus(&corpus)).stage(s),
    }
}

#[derive(Args, Debug, Clone)]
pub struct VocabArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub max_target_words: Option<usize>,
    #[arg(long)]
    pub max_source_words: Option<usize>,
}

pub fn vocab(a: &VocabArgs) -> StageResult<()> {
    let s = "vocab";
    let src = read_corpus(&a.src).stage(s)?;
    let tgt = read_corpus(&a.tgt).stage(s)?;
    let cfg = VocabConfig {
        min_freq: a.min_freq,
        max_target_words: a.max_target_words,
        max_source_words: a.max_source_words,
    };
    let v = JointVocab::build(&src, &tgt, &cfg);
    v.save(&a.out).stage(s)?;
    eprintln!("vocab: {} entries, target_size {}", v.len(), v.target_size());
    Ok(())
}

fn encode_sources(
    vocab: &JointVocab,
    src: &[Sentence],
    types: Option<&[Vec<TokenType>]>,
    names: (&Path, Option<&PathBuf>),
) -> anyhow::Result<Vec<(Vec<u32>, Vec<TokenType>)>> {
    if let (Some(t), Some(tp)) = (types, names.1) {
        if t.len() != src.len() {
            bail!(
                "{} has {} lines but {} has {}",
                names.0.display(),
                src.len(),
                tp.display(),
                t.len()
            );
        }
    }
    src.iter()
        .enumerate()
        .map(|(i, s)| {
            let ty = match types {
                Some(t) => t[i].clone(),
                None => vec![TokenType::Normal; s.len()],
            };
            if ty.len() != s.len() {
                bail!("line {}: {} tokens but {} types", i + 1, s.len(), ty.len());
            }
            Ok((vocab.encode(s), ty))
        })
        .collect()
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Segmented, annotated source corpus.
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Token types; their presence enables the extra embedding.
    #[arg(long)]
    pub types: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint output.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV `step,loss`.
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Print progress every N updates (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[command(flatten)]
    pub config: ConfigArg,
}

pub fn train(a: &TrainArgs) -> StageResult<()> {
    let s = "train";
    let mut base = ExperimentConfig::default();
    if let Some(seed) = a.seed {
        base.model.seed = seed;
    }
    if let Some(e) = a.epochs {
        base.train.epochs = e;
    }
    let cfg = load_settings(base, &a.config).stage(s)?;
    let vocab = JointVocab::load(&a.vocab).stage(s)?;
    let src = read_corpus(&a.src).stage(s)?;
    let tgt = read_corpus(&a.tgt).stage(s)?;
    if src.len() != tgt.len() {
        return Err(anyhow!(
            "{} has {} lines but {} has {}",
            a.src.display(),
            src.len(),
            a.tgt.display(),
            tgt.len()
        ))
        .stage(s);
    }
    let types = a.types.as_ref().map(|p| read_types(p)).transpose().stage(s)?;
    let encoded = encode_sources(&vocab, &src, types.as_deref(), (&a.src, a.types.as_ref())).stage(s)?;
    let examples: Vec<Example> = encoded
        .into_iter()
        .zip(&tgt)
        .map(|((ids, ty), t)| Example {
            src: ids,
            types: ty,
            tgt: vocab.encode(t),
        })
        .collect();
    let mut mcfg = cfg.model.clone();
    mcfg.vocab_size = vocab.len();
    mcfg.target_size = vocab.target_size();
    mcfg.use_extra = types.is_some();
    let mut model = Transformer::<f32>::new(mcfg).stage(s)?;
    eprintln!(
        "train: {} examples, {} parameters, vocab {} (target {})",
        examples.len(),
        model.params().num_scalars(),
        vocab.len(),
        vocab.target_size()
    );
    let start = std::time::Instant::now();
    let log_every = a.log_every;
    let report = Trainer::new(&mut model, cfg.train.clone())
        .stage(s)?
        .fit(&examples, |info| {
            if log_every > 0 && info.step % log_every == 0 {
                eprintln!(
                    "train: step {} epoch {} loss {:.4} |g| {:.3} ({:.0}s)",
                    info.step,
                    info.epoch + 1,
                    info.loss,
                    info.grad_norm,
                    start.elapsed().as_secs_f64()
                );
            }
        })
        .stage(s)?;
    checkpoint::save(&a.out, &model, &vocab.digest()).stage(s)?;
    if let Some(p) = &a.loss_curve {
        prespec_core::model::train::save_loss_curve(p, &report.losses).stage(s)?;
    }
    eprintln!(
        "train: {} updates over {} epochs in {:.1}s",
        report.steps,
        report.epochs,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_model(checkpoint_path: &Path, vocab_path: &Path) -> anyhow::Result<(Transformer<f32>, JointVocab)> {
    let ck: Checkpoint<f32> = checkpoint::load(checkpoint_path)?;
    let vocab = JointVocab::load(vocab_path)?;
    if ck.vocab_digest != vocab.digest() {
        bail!(
            "{} was trained with a different vocabulary than {}",
            checkpoint_path.display(),
            vocab_path.display()
        );
    }
    Ok((ck.model, vocab))
}

#[derive(Args, Debug, Clone)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Segmented, annotated source corpus.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub types: Option<PathBuf>,
    /// Detokenized output: subwords joined and tags removed.
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the raw decoder output.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArg,
}

pub fn translate(a: &TranslateArgs) -> StageResult<()> {
    let s = "translate";
    let mut base = ExperimentConfig::default();
    if let Some(b) = a.beam {
        base.beam_size = b;
    }
    if let Some(m) = a.max_len {
        base.max_output_len = m;
    }
    let cfg = load_settings(base, &a.config).stage(s)?;
    cfg.validate().stage(s)?;
    let (model, vocab) = load_model(&a.checkpoint, &a.vocab).stage(s)?;
    let src = read_corpus(&a.input).stage(s)?;
    let types = a.types.as_ref().map(|p| read_types(p)).transpose().stage(s)?;
    if model.config().use_extra && types.is_none() {
        return Err(anyhow!("{} uses token types; pass --types", a.checkpoint.display())).stage(s);
    }
    let inputs = encode_sources(&vocab, &src, types.as_deref(), (&a.input, a.types.as_ref())).stage(s)?;
    let mut out = create_writer(&a.output).stage(s)?;
    let mut raw = a.raw.as_ref().map(|p| create_writer(p)).transpose().stage(s)?;
    let start = std::time::Instant::now();
    let mut unfinished = 0;
    for (i, (ids, ty)) in inputs.iter().enumerate() {
        let limit = decode_limit(ids.len(), cfg.max_output_len.min(model.config().max_len));
        let hyp = beam_search(&model, ids, ty, cfg.beam_size, limit)
            .with_context(|| format!("line {}", i + 1))
            .stage(s)?;
        unfinished += !hyp.finished as usize;
        writeln!(out, "{}", postprocess(&vocab, &hyp.tokens).stage(s)?).stage(s)?;
        if let Some(w) = raw.as_mut() {
            writeln!(w, "{}", vocab.decode(&hyp.tokens).stage(s)?).stage(s)?;
        }
    }
    out.flush().stage(s)?;
    if let Some(w) = raw.as_mut() {
        w.flush().stage(s)?;
    }
    eprintln!(
        "translate: {} sentences in {:.1}s ({} hit the length limit)",
        inputs.len(),
        start.elapsed().as_secs_f64(),
        unfinished
    );
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    /// Detokenized hypotheses.
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference translations; enables BLEU.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Constraint sidecar from test-mode annotation.
    #[arg(long)]
    pub sidecar: PathBuf,
    /// Row label in the table.
    #[arg(long, default_value = "system")]
    pub label: String,
    /// Write the `key=value` report here as well.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn evaluate(a: &EvaluateArgs) -> StageResult<prespec_core::eval::EvalReport> {
    let s = "evaluate";
    let hyp_lines = count_lines(&a.hyp).stage(s)?;
    let sidecar = Sidecar::load(&a.sidecar).stage(s)?;
    if sidecar.lines != hyp_lines {
        return Err(anyhow!(
            "line count mismatch: {} has {} lines but {} covers {}",
            a.hyp.display(),
            hyp_lines,
            a.sidecar.display(),
            sidecar.lines
        ))
        .stage(s);
    }
    let hyps = read_corpus_lenient(&a.hyp).stage(s)?;
    let mut report = constraint_accuracy(&hyps, &sidecar).stage(s)?;
    if let Some(rp) = &a.refs {
        let ref_lines = count_lines(rp).stage(s)?;
        if ref_lines != hyp_lines {
            return Err(anyhow!(
                "line count mismatch: {} has {} lines but {} has {}",
                a.hyp.display(),
                hyp_lines,
                rp.display(),
                ref_lines
            ))
            .stage(s);
        }
        let refs: Vec<Vec<Sentence>> = read_corpus_lenient(rp)
            .stage(s)?
            .into_iter()
            .map(|r| vec![r])
            .collect();
        report.bleu = Some(bleu4(&hyps, &refs).stage(s)?);
    }
    print!("{}", format_table(&[(a.label.as_str(), &report)]));
    println!();
    print!("{}", report.to_kv());
    if let Some(p) = &a.report {
        write_text(p, &report.to_kv()).stage(s)?;
    }
    Ok(report)
}

#[derive(Args, Debug, Clone)]
pub struct NnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Tokens to look up.
    #[arg(long, required = true, num_args = 1..)]
    pub query: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

pub fn nn(a: &NnArgs) -> StageResult<()> {
    let s = "nn";
    let (model, vocab) = load_model(&a.checkpoint, &a.vocab).stage(s)?;
    for q in &a.query {
        let ranked = nearest_neighbors(model.word_embeddings(), &vocab, q, a.k).stage(s)?;
        println!("{q}");
        for (i, (tok, sim)) in ranked.iter().enumerate() {
            println!("  {:>2}. {tok}\t{sim:.4}", i + 1);
        }
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Segmented, annotated source sentence.
    #[arg(long)]
    pub src: String,
    /// Segmented target sentence (forced decoding).
    #[arg(long)]
    pub tgt: String,
    /// Token types for the source, e.g. `n n s n t t n`.
    #[arg(long)]
    pub types: Option<String>,
    /// Output file; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn dump_matrices(out: &mut String, kind: &str, maps: &[Vec<Matrix<f64>>]) {
    for (layer, heads) in maps.iter().enumerate() {
        for (head, m) in heads.iter().enumerate() {
            let _ = writeln!(out, "# {kind} layer={layer} head={head} rows={} cols={}", m.rows, m.cols);
            for r in 0..m.rows {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
    }
}

pub fn attn_dump(a: &AttnDumpArgs) -> StageResult<()> {
    let s = "attn-dump";
    let (model, vocab) = load_model(&a.checkpoint, &a.vocab).stage(s)?;
    let src = Sentence::parse(&a.src).stage(s)?;
    let tgt = Sentence::parse(&a.tgt).stage(s)?;
    let types = match &a.types {
        Some(t) => prespec_core::annotator::parse_types(t).stage(s)?,
        None => vec![TokenType::Normal; src.len()],
    };
    let dump = model
        .attention_dump(&vocab.encode(&src), &types, &vocab.encode(&tgt))
        .stage(s)?;
    let mut out = format!("src: {src}\ntgt: {tgt}\n");
    dump_matrices(&mut out, "enc_self", &dump.enc_self);
    dump_matrices(&mut out, "dec_self", &dump.dec_self);
    dump_matrices(&mut out, "dec_cross", &dump.dec_cross);
    match &a.out {
        Some(p) => write_text(p, &out).stage(s),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
}

pub fn grad_check(a: &GradCheckArgs) -> StageResult<()> {
    let s = "grad-check";
    let mut cfg = tiny_config(a.seed);
    cfg.dropout = a.dropout;
    let model: Transformer<f64> = Transformer::new(cfg.clone()).stage(s)?;
    let report = run_grad_check(&model, &sample_batch(&cfg, a.seed), a.step).stage(s)?;
    for (name, err) in &report.per_tensor {
        println!("{name}\t{err:.3e}");
    }
    println!("checked={} max_rel_error={:.3e}", report.checked, report.max_rel_error);
    if report.max_rel_error >= a.threshold {
        return Err(anyhow!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            a.threshold
        ))
        .stage(s);
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct SynthGenArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `key=value` generator settings.
    #[command(flatten)]
    pub config: ConfigArg,
}

pub fn synth_gen(a: &SynthGenArgs) -> StageResult<()> {
    let s = "synth-gen";
    let mut cfg = SynthConfig {
        seed: a.seed,
        ..SynthConfig::default()
    };
    if let Some(p) = &a.config.config {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .stage(s)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key=value", p.display(), i + 1))
                .stage(s)?;
            if !cfg.set(k.trim(), v).stage(s)? {
                return Err(anyhow!("{}:{}: unknown setting {:?}", p.display(), i + 1, k.trim())).stage(s);
            }
        }
    }
    let corpus = generate(&cfg).stage(s)?;
    corpus.write_to(&a.out_dir).stage(s)?;
    eprintln!(
        "synth-gen: {} train / {} test sentences, {} seen + {} unseen entities in {}",
        corpus.train_src.len(),
        corpus.test_src.len(),
        corpus.seen.len(),
        corpus.unseen.len(),
        a.out_dir.display()
    );
    Ok(())
}
