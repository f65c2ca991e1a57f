use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::{StateSeries, TimeSeriesTable};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Windows of aggregate readings with appliance labels and power statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `d x N`, one window per column.
    pub x: Matrix,
    /// `L x N` binary labels.
    pub y: Matrix,
    /// `L x N` mean appliance power over each window, in watts.
    pub power: Matrix,
    /// `L x N` summed appliance power over the ON instants of each window.
    pub on_power_sum: Matrix,
    /// `L x N` number of ON instants in each window.
    pub on_count: Matrix,
    pub appliance_names: Vec<String>,
    /// Mean appliance power over all ON instants (0 if never ON).
    pub mean_on_power: Vec<f64>,
    pub window_len: usize,
    pub period_seconds: i64,
    /// Optional group id per window (for example a house).
    pub groups: Option<Vec<u32>>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn label_count(&self) -> usize {
        self.y.nrows()
    }

    pub fn window_seconds(&self) -> i64 {
        self.window_len as i64 * self.period_seconds
    }

    /// Checks the shape and value invariants.
    pub fn validate(&self) -> Result<()> {
        let (l, n) = self.y.shape();
        if self.x.ncols() != n {
            return Err(Error::Data(format!(
                "X has {} windows, Y has {n}",
                self.x.ncols()
            )));
        }
        if self.x.nrows() != self.window_len {
            return Err(Error::Data(format!(
                "X rows {} differ from window length {}",
                self.x.nrows(),
                self.window_len
            )));
        }
        for (what, m) in [
            ("power", &self.power),
            ("on_power_sum", &self.on_power_sum),
            ("on_count", &self.on_count),
        ] {
            if m.shape() != (l, n) {
                return Err(Error::Data(format!(
                    "{what} has shape {:?}, expected {:?}",
                    m.shape(),
                    (l, n)
                )));
            }
        }
        if self.appliance_names.len() != l || self.mean_on_power.len() != l {
            return Err(Error::Data(format!(
                "expected {l} appliance names and mean ON powers"
            )));
        }
        if self.mean_on_power.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Data("mean ON power must be nonnegative".into()));
        }
        if let Some(g) = &self.groups {
            if g.len() != n {
                return Err(Error::Data(format!(
                    "{} group ids for {n} windows",
                    g.len()
                )));
            }
        }
        crate::model::check_binary(&self.y)
    }

    /// Windows `idx` in order, with mean ON power recomputed on the subset.
    pub fn subset(&self, idx: &[usize]) -> WindowedDataset {
        let on_power_sum = self.on_power_sum.select_columns(idx);
        let on_count = self.on_count.select_columns(idx);
        WindowedDataset {
            x: self.x.select_columns(idx),
            y: self.y.select_columns(idx),
            power: self.power.select_columns(idx),
            mean_on_power: mean_on(&on_power_sum, &on_count),
            on_power_sum,
            on_count,
            appliance_names: self.appliance_names.clone(),
            window_len: self.window_len,
            period_seconds: self.period_seconds,
            groups: self
                .groups
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i]).collect()),
        }
    }

    /// Concatenates datasets with identical appliances and window layout.
    pub fn concat(parts: &[WindowedDataset]) -> Result<WindowedDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        for p in parts {
            if p.appliance_names != first.appliance_names
                || p.window_len != first.window_len
                || p.period_seconds != first.period_seconds
            {
                return Err(Error::Data(
                    "datasets differ in appliances or window layout".into(),
                ));
            }
        }
        let cat = |f: fn(&WindowedDataset) -> &Matrix| -> Result<Matrix> {
            let rows = f(first).nrows();
            let cols: usize = parts.iter().map(|p| f(p).ncols()).sum();
            let mut out = DMatrix::zeros(rows, cols);
            let mut at = 0;
            for p in parts {
                let m = f(p);
                out.columns_mut(at, m.ncols()).copy_from(m.inner());
                at += m.ncols();
            }
            Matrix::new(out)
        };
        let on_power_sum = cat(|d| &d.on_power_sum)?;
        let on_count = cat(|d| &d.on_count)?;
        let groups = if parts.iter().all(|p| p.groups.is_some()) {
            Some(
                parts
                    .iter()
                    .flat_map(|p| p.groups.clone().unwrap_or_default())
                    .collect(),
            )
        } else {
            None
        };
        Ok(WindowedDataset {
            x: cat(|d| &d.x)?,
            y: cat(|d| &d.y)?,
            power: cat(|d| &d.power)?,
            mean_on_power: mean_on(&on_power_sum, &on_count),
            on_power_sum,
            on_count,
            appliance_names: first.appliance_names.clone(),
            window_len: first.window_len,
            period_seconds: first.period_seconds,
            groups,
        })
    }
}

pub(crate) fn mean_on(sum: &Matrix, count: &Matrix) -> Vec<f64> {
    (0..sum.nrows())
        .map(|i| {
            let c = count.row(i).sum();
            if c > 0.0 {
                sum.row(i).sum() / c
            } else {
                0.0
            }
        })
        .collect()
}

/// Windowing options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowOptions {
    /// Readings per window.
    pub window_len: usize,
    /// Offset between window starts; `None` gives non-overlapping windows.
    pub stride: Option<usize>,
    /// Fraction of ON instants at which a window is labeled ON.
    pub on_fraction: f64,
    /// Z-score every row of `X` across windows.
    pub standardize: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions {
            window_len: 60,
            stride: None,
            on_fraction: 0.5,
            standardize: false,
        }
    }
}

/// Cuts the aggregate into windows of consecutive readings. A gap larger
/// than the table's native spacing ends the current run of windows.
pub fn windowize(
    table: &TimeSeriesTable,
    states: &StateSeries,
    opts: &WindowOptions,
) -> Result<WindowedDataset> {
    let w = opts.window_len;
    let stride = opts.stride.unwrap_or(w);
    if w == 0 || stride == 0 {
        return Err(Error::invalid("window length and stride must be positive"));
    }
    if !(opts.on_fraction > 0.0 && opts.on_fraction <= 1.0) {
        return Err(Error::invalid("on_fraction must be in (0, 1]"));
    }
    let names: Vec<String> = table.appliances.iter().map(|c| c.name.clone()).collect();
    if states.names != names || states.states.iter().any(|s| s.len() != table.len()) {
        return Err(Error::invalid("state series do not match the table"));
    }
    let period = table.native_period().unwrap_or(1);
    let mut starts = Vec::new();
    let mut seg_start = 0;
    for i in 0..=table.len() {
        let boundary = i == table.len()
            || (i > seg_start && table.timestamps[i] - table.timestamps[i - 1] != period);
        if boundary {
            let mut s = seg_start;
            while s + w <= i {
                starts.push(s);
                s += stride;
            }
            seg_start = i;
        }
    }
    if starts.is_empty() {
        return Err(Error::Data(format!("no complete windows of {w} readings")));
    }
    let l = names.len();
    let n = starts.len();
    let mut x = DMatrix::from_fn(w, n, |r, j| table.aggregate.values[starts[j] + r]);
    let mut y = DMatrix::zeros(l, n);
    let mut power = DMatrix::zeros(l, n);
    let mut on_sum = DMatrix::zeros(l, n);
    let mut on_count = DMatrix::zeros(l, n);
    for (j, &s) in starts.iter().enumerate() {
        for (i, ch) in table.appliances.iter().enumerate() {
            let mut count = 0usize;
            let mut sum = 0.0;
            for t in s..s + w {
                if states.states[i][t] {
                    count += 1;
                    sum += ch.values[t];
                }
            }
            power[(i, j)] = ch.values[s..s + w].iter().sum::<f64>() / w as f64;
            on_sum[(i, j)] = sum;
            on_count[(i, j)] = count as f64;
            if count as f64 >= opts.on_fraction * w as f64 {
                y[(i, j)] = 1.0;
            }
        }
    }
    if opts.standardize {
        for mut row in x.row_iter_mut() {
            let mean = row.mean();
            let sd = row.variance().sqrt();
            row.apply(|v| {
                *v = if sd > 0.0 {
                    (*v - mean) / sd
                } else {
                    *v - mean
                }
            });
        }
    }
    let on_power_sum = Matrix::new(on_sum)?;
    let on_count = Matrix::new(on_count)?;
    let ds = WindowedDataset {
        x: Matrix::new(x)?,
        y: Matrix::new(y)?,
        power: Matrix::new(power)?,
        mean_on_power: mean_on(&on_power_sum, &on_count),
        on_power_sum,
        on_count,
        appliance_names: names,
        window_len: w,
        period_seconds: period,
        groups: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Index sets of a train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn train_count(total: usize, fraction: f64) -> usize {
    ((fraction * total as f64).round() as usize).clamp(1, total - 1)
}

/// Seeded split; with `groups` whole groups go to one side.
pub fn split_indices(
    n: usize,
    train_fraction: f64,
    groups: Option<&[u32]>,
    seed: u64,
) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    match groups {
        Some(g) => {
            if g.len() != n {
                return Err(Error::dims(
                    "split_dataset",
                    format!("{n} group ids"),
                    format!("{}", g.len()),
                ));
            }
            let mut ids: Vec<u32> = g.to_vec();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() < 2 {
                return Err(Error::invalid("grouped split needs at least 2 groups"));
            }
            ids.shuffle(&mut rng);
            let k = train_count(ids.len(), train_fraction);
            let train_ids = &ids[..k];
            for (i, gid) in g.iter().enumerate() {
                if train_ids.contains(gid) {
                    train.push(i);
                } else {
                    test.push(i);
                }
            }
        }
        None => {
            if n < 2 {
                return Err(Error::invalid("split needs at least 2 samples"));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let k = train_count(n, train_fraction);
            train = idx[..k].to_vec();
            test = idx[k..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
        }
    }
    Ok(SplitIndices { train, test })
}

/// `(train, test)`; mean ON powers are recomputed on each side.
pub fn split_dataset(
    ds: &WindowedDataset,
    train_fraction: f64,
    groups: Option<&[u32]>,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let s = split_indices(ds.len(), train_fraction, groups, seed)?;
    Ok((ds.subset(&s.train), ds.subset(&s.test)))
}
