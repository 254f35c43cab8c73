//! PCK evaluation, ground-truth-free layer selection and synthetic data.

mod beam;
mod eval;
mod pck;
mod synth;

pub use beam::{beam_search, select_layers, BeamConfig, BeamResult, BeamState, MAX_SEARCH_PAIRS};
pub use eval::{evaluate_pair, summarize, BBox, PairAnnotation, PairRecord, PckTable};
pub use pck::{pck, PckBasis};
pub use synth::{generate_synthetic_pairs, SynthConfig, SynthLayer, SyntheticDataset};
