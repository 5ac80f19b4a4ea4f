//! `prespec`: one binary, one subcommand per pipeline stage, plus
//! `pipeline` to chain them.

mod commands;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "prespec", version, about = "Pre-specified phrase translation with annotated NMT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine a bilingual lexicon from a parallel corpus, entity spans and a phrase table.
    Mine(commands::MineArgs),
    /// Find entity spans by longest match against a phrase list.
    Gazetteer(commands::GazetteerArgs),
    /// Annotate a corpus with lexicon matches.
    Annotate(commands::AnnotateArgs),
    /// Strip annotation tags from a corpus.
    Detag(commands::IoArgs),
    /// Learn joint BPE merges.
    BpeLearn(commands::BpeLearnArgs),
    /// Segment a corpus with learned merges.
    BpeApply(commands::BpeApplyArgs),
    /// Join BPE pieces back into words.
    BpeUndo(commands::IoArgs),
    /// Build the joint target-first vocabulary.
    Vocab(commands::VocabArgs),
    /// Train a transformer.
    Train(commands::TrainArgs),
    /// Beam-decode a corpus.
    Translate(commands::TranslateArgs),
    /// Score hypotheses: constraint accuracy and BLEU.
    Evaluate(commands::EvaluateArgs),
    /// Nearest neighbours of a token in the shared embedding.
    Nn(commands::NnArgs),
    /// Dump attention weights for one sentence pair.
    AttnDump(commands::AttnDumpArgs),
    /// Finite-difference gradient check on a tiny model.
    GradCheck(commands::GradCheckArgs),
    /// Generate a synthetic corpus with planted entities.
    SynthGen(commands::SynthGenArgs),
    /// Run every stage end to end.
    Pipeline(pipeline::PipelineArgs),
}

/// Common `--config` flag: a `key=value` file applied after the other
/// flags, so its values win.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// An error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub source: anyhow::Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait InStage<T> {
    fn stage(self, name: &str) -> StageResult<T>;
}

impl<T, E: Into<anyhow::Error>> InStage<T> for std::result::Result<T, E> {
    fn stage(self, name: &str) -> StageResult<T> {
        self.map_err(|e| StageError {
            stage: name.to_string(),
            source: e.into(),
        })
    }
}

fn run(cli: Cli) -> StageResult<()> {
    use Command::*;
    match cli.command {
        Mine(a) => commands::mine(&a),
        Gazetteer(a) => commands::gazetteer(&a),
        Annotate(a) => commands::annotate(&a),
        Detag(a) => commands::detag(&a),
        BpeLearn(a) => commands::bpe_learn(&a),
        BpeApply(a) => commands::bpe_apply(&a),
        BpeUndo(a) => commands::bpe_undo(&a),
        Vocab(a) => commands::vocab(&a),
        Train(a) => commands::train(&a),
        Translate(a) => commands::translate(&a),
        Evaluate(a) => commands::evaluate(&a).map(|_| ()),
        Nn(a) => commands::nn(&a),
        AttnDump(a) => commands::attn_dump(&a),
        GradCheck(a) => commands::grad_check(&a),
        SynthGen(a) => commands::synth_gen(&a),
        Pipeline(a) => pipeline::run(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{:#}", e.source).replace('\n', " ");
            eprintln!("error: stage={} {msg}", e.stage);
            ExitCode::from(1)
        }
    }
}
