//! Dataset files, format conversion, statistics, distant supervision and
//! synthetic corpora.

pub mod formats;
pub mod supervision;
pub mod synthetic;
pub mod transform;

pub use formats::{
    load_samples, read_mqmrc, read_sqmrc, write_mqmrc, write_sqmrc, MqmrcRecord, SqmrcRecord,
};
pub use supervision::{
    build_gazetteer, distant_supervise, tag_texts, value_frequencies, Gazetteer, Heuristics,
    ValueFrequencies,
};
pub use synthetic::{generate_synthetic, Preset, SyntheticSpec};
pub use transform::{
    entities_per_text_stats, reduction_pct, to_mqmrc, to_sqmrc, EntityStats, Grouping,
};
