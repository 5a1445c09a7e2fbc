//! Word recognition, gating and plurality experiments on a trained model,
//! plus the synthetic corpus that stands in for recorded data.

mod corpus;
mod data;
mod gating;
mod glmm;
mod plurality;
mod recognition;
mod synth;

pub use corpus::Corpus;
pub use data::{
    load_targets, parse_targets, targets_to_tsv, AlignmentTable, AnnotationSet, Morphology, Multiplicity, PhoneInterval,
    Recording, TargetWord, WordClass,
};
pub use gating::{audit_prefixes, gate_prefixes, gating_curve, mean_at_final_gate, mean_at_gate, run_gating, write_gating_plot, GatePoint};
pub use glmm::{log_count, Column, GlmmTable, CENTRED, MORPHOLOGY_DUMMIES, RAW_COLUMNS, STANDARDISED};
pub use plurality::{chi_square_2x2, plurality_nouns, run_plurality, ConfusionTable, PluralityOptions, PluralityTrial};
pub use recognition::{
    is_form, mean_p10, naive_answer, naive_baseline, precision_at_10, random_baseline, random_models,
    random_ranking_expectation, run_word_recognition, summarize, top_k, word_table, BaselineScore, NamedModel,
    RecognitionOptions, RecognitionSummary, TrialRecord, WordInfo, RANDOM_BASELINE_MODELS, TOP_K,
};
pub use synth::{make_synthetic_corpus, SynthBookkeeping, SynthConfig};
