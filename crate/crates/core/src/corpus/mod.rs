//! Synthetic corpus, data expansion, scoring and experiment orchestration.

pub mod expand;
pub mod experiment;
pub mod features;
pub mod io;
pub mod language;
pub mod recipe;
pub mod scoring;

use thiserror::Error;

pub use expand::{
    expand_dataset, load_decoded, parse_sources, save_decoded, DecodedUtterance, PairedCorpus,
    Source,
};
pub use experiment::{run_experiment, synthesize, ExperimentConfig, ExperimentReport, SynthData};
pub use features::{stack_frames, synth_features, ChannelConfig};
pub use io::{Pair, Utterance};
pub use language::{build_char_vocab, synth_language, CharVocab, LanguageConfig, Lexicon};
pub use recipe::Recipe;
pub use scoring::{
    relative_improvement, report, score, AlignmentReport, ComparisonTable, ScoredRun,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("utterance ids do not match: {0}")]
    IdMismatch(String),
    #[error("unknown baseline system {0:?}")]
    UnknownBaseline(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Ctc(#[from] crate::ctc::CtcError),
    #[error(transparent)]
    Am(#[from] crate::dfsmn::AmError),
    #[error(transparent)]
    Wfst(#[from] crate::wfst::WfstError),
    #[error(transparent)]
    Speller(#[from] crate::speller::SpellerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CorpusError {
    /// Whether the error stems from bad input rather than a failure while
    /// running (the CLI maps these to different exit codes).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CorpusError::Config(_)
                | CorpusError::Vocab(_)
                | CorpusError::MissingArtifact(_)
                | CorpusError::IdMismatch(_)
                | CorpusError::UnknownBaseline(_)
                | CorpusError::Parse { .. }
        )
    }
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;
