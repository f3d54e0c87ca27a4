//! Synthetic referential scenes with exact relational ground truth.

mod generator;
mod predicates;

pub use generator::{
    atom_holds, generate_dataset, generate_record, generate_record_range, generate_records, generate_scene, satisfiers, synthesize_utterance,
    Atom, Chain, Conjunction, DatasetSummary, GenConfig,
};
pub use predicates::{evaluate_predicate, Predicate};
