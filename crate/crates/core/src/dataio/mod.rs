//! Smart-meter ingestion, windowing, splitting and synthetic data.

mod store;
mod synth;
mod table;
mod window;

pub use store::{load_dataset, save_dataset, DatasetSidecar, DATASET_FORMAT_VERSION};
pub use synth::{synth_dataset, synth_with, SynthData, SynthParams};
pub use table::{
    derive_states, load_power_csv, parse_timestamp, resample_mean, write_power_csv, Channel,
    CsvSchema, LoadedTable, OnThresholds, SkippedRow, StateSeries, TimeSeriesTable,
};
pub use window::{
    split_dataset, split_indices, windowize, SplitIndices, WindowOptions, WindowedDataset,
};
