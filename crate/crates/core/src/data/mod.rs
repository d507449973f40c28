//! Tables, CSV ingestion, preprocessing, transfer splits, few-shot sampling
//! and data generators.

mod csv_io;
mod fewshot;
mod noise;
mod preprocess;
mod split;
pub mod synthetic;
mod table;

pub use csv_io::{load_csv, read_csv, save_csv, write_csv, ColumnHint, ColumnKind, LabelHint, SchemaHint};
pub use fewshot::{few_shot_indices, sample_few_shot};
pub use noise::add_gaussian_noise;
pub use preprocess::{preprocess, ColumnStats, PreprocessStats, STD_FLOOR};
pub use split::{
    generic_counts, make_transfer_split, preset_counts, FeatureCounts, OverlapLevel, OverlapMap, OverlapRequest,
    SplitManifest, TransferSplit,
};
pub use synthetic::gen_synthetic_fourclass;
pub use table::{Cell, DatasetTable, FeatureKind, FeatureSpec, Labels, TaskKind};
