use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::window::WindowedDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format_version: u32,
    pub windows: usize,
    pub window_len: usize,
    pub period_seconds: i64,
    pub appliance_names: Vec<String>,
    pub mean_on_power: Vec<f64>,
    #[serde(default)]
    pub groups: Option<Vec<u32>>,
}

const FILES: [&str; 5] = [
    "X.csv",
    "Y.csv",
    "power.csv",
    "on_power_sum.csv",
    "on_count.csv",
];

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `m` transposed: one row per window.
fn write_columns(path: &Path, header: &[String], m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for j in 0..m.ncols() {
        w.write_record(m.column(j).iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_columns(path: &Path, header: &[String]) -> Result<Matrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let got: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    if got != header {
        return Err(Error::Data(format!(
            "{}: unexpected header {got:?}",
            path.display()
        )));
    }
    let mut cols = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let col = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}: line {}: bad number '{s}'",
                        path.display(),
                        i + 2
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        cols.push(col);
    }
    let rows = header.len();
    let flat: Vec<f64> = cols.iter().flatten().copied().collect();
    Matrix::new(DMatrix::from_column_slice(rows, cols.len(), &flat))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `X.csv`, `Y.csv`, `power.csv`, `on_power_sum.csv`, `on_count.csv`
/// (one row per window) and `dataset.json`.
pub fn save_dataset(ds: &WindowedDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let x_header: Vec<String> = (0..ds.window_len).map(|i| format!("x{i}")).collect();
    let names = &ds.appliance_names;
    write_columns(&dir.join(FILES[0]), &x_header, &ds.x)?;
    write_columns(&dir.join(FILES[1]), names, &ds.y)?;
    write_columns(&dir.join(FILES[2]), names, &ds.power)?;
    write_columns(&dir.join(FILES[3]), names, &ds.on_power_sum)?;
    write_columns(&dir.join(FILES[4]), names, &ds.on_count)?;
    let sidecar = DatasetSidecar {
        format_version: DATASET_FORMAT_VERSION,
        windows: ds.len(),
        window_len: ds.window_len,
        period_seconds: ds.period_seconds,
        appliance_names: names.clone(),
        mean_on_power: ds.mean_on_power.clone(),
        groups: ds.groups.clone(),
    };
    let path = dir.join("dataset.json");
    let text = serde_json::to_string_pretty(&sidecar).map_err(|source| Error::Json {
        context: "serializing dataset sidecar".into(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<WindowedDataset> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let side: DatasetSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: format!("parsing {}", path.display()),
        source,
    })?;
    if side.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format version {}",
            path.display(),
            side.format_version
        )));
    }
    let x_header: Vec<String> = (0..side.window_len).map(|i| format!("x{i}")).collect();
    let names = &side.appliance_names;
    let ds = WindowedDataset {
        x: read_columns(&dir.join(FILES[0]), &x_header)?,
        y: read_columns(&dir.join(FILES[1]), names)?,
        power: read_columns(&dir.join(FILES[2]), names)?,
        on_power_sum: read_columns(&dir.join(FILES[3]), names)?,
        on_count: read_columns(&dir.join(FILES[4]), names)?,
        appliance_names: side.appliance_names,
        mean_on_power: side.mean_on_power,
        window_len: side.window_len,
        period_seconds: side.period_seconds,
        groups: side.groups,
    };
    if ds.len() != side.windows {
        return Err(Error::Data(format!(
            "{}: sidecar lists {} windows, X.csv has {}",
            dir.display(),
            side.windows,
            ds.len()
        )));
    }
    ds.validate()?;
    Ok(ds)
}
