//! End-to-end run over a data directory laid out like `synth-gen` output.
//!
//! Every stage is executed by parsing the same argument vector a user would
//! type, so the commands recorded in the manifest re-run each stage alone.
//! Work happens in a scratch directory that is renamed into place once all
//! stages succeed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser};
use prespec_core::experiment::ExperimentConfig;

use crate::commands::{load_settings, parse_scheme};
use crate::manifest::{render_command, sha256_file, Manifest};
use crate::{Cli, ConfigArg, InStage, StageResult};

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    /// Directory holding train.src, train.tgt, test.src, test.tgt and
    /// lexicon.tsv (plus train.spans.tsv and phrase_table.txt for `--mine`).
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Created by the run; must not exist unless `--force`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "tm")]
    pub scheme: String,
    #[arg(long)]
    pub extra: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Mine the training lexicon from entity spans and the phrase table
    /// instead of using lexicon.tsv for training annotation.
    #[arg(long)]
    pub mine: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub config: ConfigArg,
}

struct Runner {
    scratch: PathBuf,
    final_dir: PathBuf,
    manifest: Manifest,
}

impl Runner {
    /// Runs one stage. `argv` builds the command line for a given output
    /// directory; the scratch version runs, the final version is recorded.
    fn stage(&mut self, name: &str, argv: impl Fn(&Path) -> Vec<String>) -> StageResult<()> {
        let mut recorded = vec!["prespec".to_string()];
        recorded.extend(argv(&self.final_dir));
        let mut actual = vec!["prespec".to_string()];
        actual.extend(argv(&self.scratch));
        let cli = Cli::try_parse_from(&actual).map_err(|e| anyhow!("internal command line: {e}")).stage(name)?;
        eprintln!("pipeline: stage {name}");
        let t = Instant::now();
        crate::run(cli).map_err(|mut e| {
            e.stage = format!("{name}/{}", e.stage);
            e
        })?;
        self.manifest.set(format!("stage.{name}.cmd"), render_command(&recorded));
        self.manifest.set(format!("stage.{name}.secs"), format!("{:.3}", t.elapsed().as_secs_f64()));
        Ok(())
    }
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn s(x: &str) -> String {
    x.to_string()
}

fn prepare_out_dir(a: &PipelineArgs) -> anyhow::Result<PathBuf> {
    if a.out_dir.exists() {
        if !a.force {
            bail!("{} already exists (use --force to replace it)", a.out_dir.display());
        }
    }
    let name = a
        .out_dir
        .file_name()
        .ok_or_else(|| anyhow!("{} has no final path component", a.out_dir.display()))?
        .to_string_lossy()
        .into_owned();
    let parent = match a.out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let scratch = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch)?;
    }
    std::fs::create_dir(&scratch).with_context(|| format!("creating {}", scratch.display()))?;
    Ok(scratch)
}

pub fn run(a: &PipelineArgs) -> StageResult<()> {
    let setup = "pipeline";
    let mut base = ExperimentConfig::default();
    base.scheme = parse_scheme(&a.scheme, a.extra).stage(setup)?;
    base.model.seed = a.seed;
    if let Some(e) = a.epochs {
        base.train.epochs = e;
    }
    let cfg = load_settings(base, &a.config).stage(setup)?;
    cfg.validate().stage(setup)?;
    let scheme = cfg.scheme;

    let data = &a.data_dir;
    let mut inputs = vec!["train.src", "train.tgt", "test.src", "test.tgt", "lexicon.tsv"];
    if a.mine {
        inputs.extend(["train.spans.tsv", "phrase_table.txt"]);
    }
    for f in &inputs {
        if !data.join(f).is_file() {
            return Err(anyhow!("missing input {}", data.join(f).display())).stage(setup);
        }
    }

    let scratch = prepare_out_dir(a).stage(setup)?;
    let mut r = Runner {
        scratch: scratch.clone(),
        final_dir: a.out_dir.clone(),
        manifest: Manifest::default(),
    };
    let result = run_stages(a, &cfg, &mut r, &inputs);
    if let Err(e) = result {
        eprintln!("pipeline: partial outputs left in {}", scratch.display());
        return Err(e);
    }
    if a.out_dir.exists() {
        std::fs::remove_dir_all(&a.out_dir).stage(setup)?;
    }
    std::fs::rename(&scratch, &a.out_dir)
        .with_context(|| format!("moving {} to {}", scratch.display(), a.out_dir.display()))
        .stage(setup)?;
    eprintln!(
        "pipeline: {} done, outputs in {}",
        scheme.label(),
        a.out_dir.display()
    );
    Ok(())
}

fn run_stages(a: &PipelineArgs, cfg: &ExperimentConfig, r: &mut Runner, inputs: &[&str]) -> StageResult<()> {
    let data = a.data_dir.clone();
    let scheme = cfg.scheme;
    let setup = "pipeline";

    r.manifest.set("tool", format!("prespec {}", env!("CARGO_PKG_VERSION")));
    r.manifest.set("command", render_command(&std::env::args().collect::<Vec<_>>()));
    r.manifest.set("scheme", scheme.label());
    r.manifest.set("seed", a.seed);
    for f in inputs {
        r.manifest.digest(&format!("input.{f}"), &data.join(f)).stage(setup)?;
    }
    // The effective settings, so every stage reads the same values.
    let settings = cfg.to_kv();
    std::fs::write(r.scratch.join("settings.conf"), &settings).stage(setup)?;
    r.manifest.extend_kv("config", &settings);

    let scheme_args = {
        let mut v = vec![s("--scheme"), scheme.method.name().to_lowercase()];
        if scheme.extra {
            v.push(s("--extra"));
        }
        v
    };
    let d = |f: &str| p(&data, f);

    let train_lexicon = if a.mine {
        r.stage("mine", |o| {
            vec![
                s("mine"),
                s("--src"),
                d("train.src"),
                s("--tgt"),
                d("train.tgt"),
                s("--spans"),
                d("train.spans.tsv"),
                s("--phrase-table"),
                d("phrase_table.txt"),
                s("--out"),
                p(o, "lexicon.mined.tsv"),
            ]
        })?;
        None
    } else {
        Some(d("lexicon.tsv"))
    };
    let lexicon_for_training = |o: &Path| train_lexicon.clone().unwrap_or_else(|| p(o, "lexicon.mined.tsv"));

    r.stage("annotate-train", |o| {
        let mut v = vec![
            s("annotate"),
            s("--src"),
            d("train.src"),
            s("--tgt"),
            d("train.tgt"),
            s("--lexicon"),
            lexicon_for_training(o),
            s("--out-prefix"),
            p(o, "train.ann"),
        ];
        v.extend(scheme_args.clone());
        v
    })?;
    r.stage("annotate-test", |o| {
        let mut v = vec![
            s("annotate"),
            s("--test-mode"),
            s("--src"),
            d("test.src"),
            s("--lexicon"),
            d("lexicon.tsv"),
            s("--out-prefix"),
            p(o, "test.ann"),
        ];
        v.extend(scheme_args.clone());
        v
    })?;
    r.stage("bpe-learn", |o| {
        vec![
            s("bpe-learn"),
            s("--input"),
            p(o, "train.ann.src"),
            p(o, "train.ann.tgt"),
            s("--merges"),
            cfg.bpe_merges.to_string(),
            s("--out"),
            p(o, "bpe.model"),
        ]
    })?;
    for (stage, input, output, types) in [
        ("bpe-apply-train-src", "train.ann.src", "train.bpe.src", Some(("train.ann.types", "train.bpe.types"))),
        ("bpe-apply-train-tgt", "train.ann.tgt", "train.bpe.tgt", None),
        ("bpe-apply-test-src", "test.ann.src", "test.bpe.src", Some(("test.ann.types", "test.bpe.types"))),
    ] {
        r.stage(stage, |o| {
            let mut v = vec![
                s("bpe-apply"),
                s("--model"),
                p(o, "bpe.model"),
                s("--input"),
                p(o, input),
                s("--output"),
                p(o, output),
            ];
            if let (true, Some((ti, to))) = (scheme.extra, types) {
                v.extend([s("--types"), p(o, ti), s("--types-out"), p(o, to)]);
            }
            v
        })?;
    }
    r.stage("vocab", |o| {
        let mut v = vec![
            s("vocab"),
            s("--src"),
            p(o, "train.bpe.src"),
            s("--tgt"),
            p(o, "train.bpe.tgt"),
            s("--out"),
            p(o, "vocab.txt"),
            s("--min-freq"),
            cfg.vocab.min_freq.to_string(),
        ];
        if let Some(n) = cfg.vocab.max_target_words {
            v.extend([s("--max-target-words"), n.to_string()]);
        }
        if let Some(n) = cfg.vocab.max_source_words {
            v.extend([s("--max-source-words"), n.to_string()]);
        }
        v
    })?;
    r.stage("train", |o| {
        let mut v = vec![
            s("train"),
            s("--src"),
            p(o, "train.bpe.src"),
            s("--tgt"),
            p(o, "train.bpe.tgt"),
            s("--vocab"),
            p(o, "vocab.txt"),
            s("--out"),
            p(o, "model.ckpt"),
            s("--loss-curve"),
            p(o, "loss.csv"),
            s("--config"),
            p(o, "settings.conf"),
        ];
        if scheme.extra {
            v.extend([s("--types"), p(o, "train.bpe.types")]);
        }
        v
    })?;
    r.stage("translate", |o| {
        let mut v = vec![
            s("translate"),
            s("--checkpoint"),
            p(o, "model.ckpt"),
            s("--vocab"),
            p(o, "vocab.txt"),
            s("--input"),
            p(o, "test.bpe.src"),
            s("--output"),
            p(o, "test.hyp"),
            s("--raw"),
            p(o, "test.hyp.raw"),
            s("--config"),
            p(o, "settings.conf"),
        ];
        if scheme.extra {
            v.extend([s("--types"), p(o, "test.bpe.types")]);
        }
        v
    })?;
    r.stage("evaluate", |o| {
        vec![
            s("evaluate"),
            s("--hyp"),
            p(o, "test.hyp"),
            s("--refs"),
            d("test.tgt"),
            s("--sidecar"),
            p(o, "test.ann.constraints.tsv"),
            s("--label"),
            scheme.label(),
            s("--report"),
            p(o, "report.txt"),
        ]
    })?;

    let report = std::fs::read_to_string(r.scratch.join("report.txt")).stage(setup)?;
    r.manifest.extend_kv("result", &report);
    for f in ["bpe.model", "vocab.txt", "model.ckpt", "test.hyp", "report.txt"] {
        let digest = sha256_file(&r.scratch.join(f)).stage(setup)?;
        r.manifest.set(format!("output.{f}.sha256"), digest);
    }
    std::fs::write(r.scratch.join("manifest.txt"), r.manifest.render()).stage(setup)?;
    Ok(())
}
