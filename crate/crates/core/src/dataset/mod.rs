//! Series ingestion, chronological splitting, window sampling, and
//! evaluation metrics.

mod csv_io;
mod metrics;
mod series;
mod split;
mod windows;

pub use csv_io::{load_csv, read_csv, write_csv, write_csv_to};
pub use metrics::{mae, mse, write_metrics_csv, write_metrics_json, MetricRow};
pub use series::{time_features, TimeSeries, TIME_FEATURES};
pub use split::{chronological_split, split_lengths, NormStats, Split, STD_FLOOR};
pub use windows::{sample_windows, window_count, WindowPair};
