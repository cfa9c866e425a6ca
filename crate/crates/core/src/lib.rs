//! Core pipeline for retrieval-augmented Quechua → Spanish translation
//! experiments.
//!
//! The crate covers everything that does not need a network or a server:
//! resource ingestion ([`resources`]), morphological segmentation
//! ([`morphology`]), context retrieval ([`retrieval`]), prompt assembly
//! ([`promptgen`]), automatic scoring ([`evaluation`]) and the MQM
//! annotation model with its agreement statistics ([`mqm`]).

pub mod digest;
pub mod evaluation;
pub mod morphology;
pub mod mqm;
pub mod promptgen;
pub mod records;
pub mod resources;
pub mod retrieval;
mod subprocess;

pub use morphology::{FallbackLexicon, Morph, MorphemeAnalysis};
pub use promptgen::{PromptBundle, PromptCondition, RetrievalMode};
pub use records::{BackendKind, RecordKey, RecordStatus, TranslationRecord};
pub use resources::{
    normalize_text, CorpusPair, DatasetItem, DictionaryEntry, GrammarSection, ResourceBundle, SourcePaths,
};
