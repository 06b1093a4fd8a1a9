//! Corpus parsing, slot-label prefixing, few-shot split generation, run
//! configuration and result persistence.

mod corpus;

pub use corpus::{
    apply_slot_prefixing, parse_dataset_file, parse_dataset_str, prefix_slot_label,
    serialize_records, split_bio, write_dataset_file, UtteranceRecord, OUTSIDE,
};

mod config;
mod results;
mod splits;

pub use config::{parse_run_config, read_run_config, DatasetSpec, RunConfig, RUN_CONFIG_KEYS};
pub use results::{
    format_cell, parse_results, read_results, render_results_table, serialize_results, table_path,
    write_results, ResultRecord,
};
pub use splits::{
    generate_splits, published_statistics, render_split_statistics, split_statistics,
    GeneratedSplits, SplitConfig, SplitStats, PUBLISHED_SPLIT_STATISTICS,
};

mod model_files;

pub use model_files::{load_model, meta_path, save_model, ModelMeta, EMBEDDING_ENTRY};
