//! Pronouncing dictionary, cohort and neighbourhood statistics, word counts.

mod dict;
mod stats;

pub use dict::{parse_dictionary, phone_class, strip_stress, PhoneClass, PhoneSeq, PronDict, ARPABET_VOWELS};
pub use stats::{
    initial_cohort_size, load_lemma_map, neighbourhood_density, parse_lemma_map, speaking_rate, tokenize, word_stats,
    Exclusion, NeighbourMode, WordStats,
};
