//! Training loop, evaluation protocol, timing benchmark and report writers.

mod bench;
mod eval;
mod montage;
mod train;

pub use bench::{benchmark_reconstruction, BenchReport, BenchRow, DEFAULT_BENCH_BATCHES, WARMUP_RUNS};
pub use eval::{
    ablation_table, binarize, binarize_values, evaluate, predict, run_ablations, AblationRow, EvalReport,
    BINARIZE_THRESHOLD,
};
pub use montage::{
    error_montage, montage_image, parse_pgm_header, pgm_bytes, write_error_montage, write_montage, GrayImage,
    MONTAGE_COLS, MONTAGE_ROWS, MONTAGE_TILES, SEPARATOR, SEPARATOR_GRAY,
};
pub use train::{prepare_splits, train, EpochRecord, TrainConfig, TrainOutcome};
