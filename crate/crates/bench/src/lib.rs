//! Fixtures shared by the benchmarks.

use disagg_core::dataio::synth_dataset;
use disagg_core::{train_mlcddl, train_mlcdtl, DdlModel, DtlModel, Matrix, TrainConfig};

pub const WINDOW: usize = 60;
pub const APPLIANCES: usize = 4;

/// `WINDOW x n` synthetic aggregate windows.
pub fn windows(n: usize, seed: u64) -> Matrix {
    synth_dataset(APPLIANCES, n, WINDOW, 20.0, seed)
        .expect("valid synthetic parameters")
        .dataset
        .x
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        max_iter: 5,
        infer_iter: 10,
        ..TrainConfig::default()
    }
}

/// Dictionary and transform models trained briefly with default widths.
pub fn models() -> (DdlModel, DtlModel) {
    let data = synth_dataset(APPLIANCES, 300, WINDOW, 20.0, 7).expect("valid synthetic parameters");
    let ds = data.dataset;
    let ddl = train_mlcddl(&ds.x, &ds.y, &quick_config()).expect("training succeeds");
    let dtl = train_mlcdtl(&ds.x, &ds.y, &quick_config()).expect("training succeeds");
    (ddl, dtl)
}

/// Deterministic dense `rows x n` targets.
pub fn codes(rows: usize, n: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * n)
        .map(|k| ((k * 7919 % 1009) as f64 / 1009.0 - 0.5).sin())
        .collect();
    Matrix::from_row_slice(rows, n, &data).expect("finite values")
}
