//! Tropical-semiring transducers: token, lexicon and grammar builders,
//! composition, determinization, minimization, beam search and n-best.

mod builders;
mod fst;
mod ops;
mod search;
mod weight;

use thiserror::Error;

pub use builders::{
    build_decoding_graph, build_grammar_fst, build_lexicon_fst, build_token_fst, ctc_label,
    decoding_graph_from_parts, is_aux, word_label, NgramCounts, NgramModel, AUX_BASE,
    BACKOFF_LABEL, BOS, EOS,
};
pub use fst::{Arc, Fst, Label, StateId, SymbolTable, EPS};
pub use ops::{compose, determinize, minimize, remove_aux_labels, DETERMINIZE_STATE_FACTOR};
pub use search::{beam_search_decode, nbest, BeamOptions, Lattice, LatticePath, SearchGraph};
pub use weight::Weight;

#[derive(Debug, Error)]
pub enum WfstError {
    #[error("determinization exceeded {cap} states (input has {input_states}); the input is not determinizable, add disambiguation symbols")]
    DeterminizeCap { cap: usize, input_states: usize },
    #[error("input is not functional: state {state} is reachable with two different pending outputs; add disambiguation symbols")]
    NonFunctional { state: StateId },
    #[error("determinization needs an input without epsilon arcs (state {0} has one)")]
    InputEpsilon(StateId),
    #[error("word {0} has an empty pronunciation")]
    EmptyPronunciation(usize),
    #[error("grammar: {0}")]
    Grammar(String),
    #[error("beam search: {0}")]
    Beam(String),
    #[error("graph input label {label} exceeds posterior width {width}")]
    LabelOutOfRange { label: Label, width: usize },
    #[error("every hypothesis was pruned; retry with a larger beam")]
    EmptyLattice,
    #[error("lattice has a cycle")]
    Cyclic,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
