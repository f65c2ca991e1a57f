use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use crate::error::{Error, Result};

/// One named power series in watts.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub values: Vec<f64>,
}

/// Aggregate and appliance readings on a shared, strictly increasing clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesTable {
    /// Epoch seconds.
    pub timestamps: Vec<i64>,
    pub aggregate: Channel,
    pub appliances: Vec<Channel>,
}

impl TimeSeriesTable {
    pub fn new(timestamps: Vec<i64>, aggregate: Channel, appliances: Vec<Channel>) -> Result<Self> {
        let n = timestamps.len();
        for ch in std::iter::once(&aggregate).chain(&appliances) {
            if ch.values.len() != n {
                return Err(Error::Data(format!(
                    "channel '{}' has {} values for {n} timestamps",
                    ch.name,
                    ch.values.len()
                )));
            }
            if let Some(row) = ch
                .values
                .iter()
                .position(|v| !(*v >= 0.0) || !v.is_finite())
            {
                return Err(Error::Data(format!(
                    "channel '{}' row {row}: power must be a finite nonnegative number, got {}",
                    ch.name, ch.values[row]
                )));
            }
        }
        if let Some(row) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {}",
                row + 1
            )));
        }
        Ok(TimeSeriesTable {
            timestamps,
            aggregate,
            appliances,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Smallest gap between consecutive timestamps.
    pub fn native_period(&self) -> Option<i64> {
        self.timestamps.windows(2).map(|w| w[1] - w[0]).min()
    }

    pub fn appliance(&self, name: &str) -> Option<&Channel> {
        self.appliances.iter().find(|c| c.name == name)
    }
}

/// Column names to read from a power CSV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "default_timestamp_column")]
    pub timestamp: String,
    pub aggregate: String,
    pub appliances: Vec<String>,
}

fn default_timestamp_column() -> String {
    "timestamp".into()
}

/// A data row that was dropped while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    /// 1-based line number in the file (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTable {
    pub table: TimeSeriesTable,
    pub skipped: Vec<SkippedRow>,
}

impl LoadedTable {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

/// Epoch seconds or an ISO-8601 date-time (UTC when no offset is given).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.floor() as i64);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads `timestamp,<aggregate>,<appliance>...` columns named by `schema`.
///
/// Rows with unparseable, negative or non-increasing values are skipped and
/// reported.
pub fn load_power_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column '{name}'", path.display())))
    };
    let ts_col = find(&schema.timestamp)?;
    let agg_col = find(&schema.aggregate)?;
    let app_cols = schema
        .appliances
        .iter()
        .map(|a| find(a))
        .collect::<Result<Vec<_>>>()?;

    let mut timestamps = Vec::new();
    let mut aggregate = Vec::new();
    let mut appliances: Vec<Vec<f64>> = vec![Vec::new(); app_cols.len()];
    let mut skipped = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                skipped.push(SkippedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let parsed = (|| -> std::result::Result<(i64, f64, Vec<f64>), String> {
            let field = |c: usize| record.get(c).ok_or_else(|| format!("missing field {c}"));
            let ts = parse_timestamp(field(ts_col)?).ok_or("unparseable timestamp")?;
            let value = |c: usize| -> std::result::Result<f64, String> {
                let raw = field(c)?;
                let v: f64 = raw
                    .parse()
                    .map_err(|_| format!("unparseable value '{raw}'"))?;
                if !v.is_finite() {
                    return Err(format!("non-finite value '{raw}'"));
                }
                if v < 0.0 {
                    return Err(format!("negative power {v}"));
                }
                Ok(v)
            };
            let agg = value(agg_col)?;
            let apps = app_cols
                .iter()
                .map(|&c| value(c))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((ts, agg, apps))
        })();
        match parsed {
            Ok((ts, agg, apps)) => {
                if timestamps.last().is_some_and(|&last| ts <= last) {
                    skipped.push(SkippedRow {
                        line,
                        reason: format!("timestamp {ts} not after the previous row"),
                    });
                    continue;
                }
                timestamps.push(ts);
                aggregate.push(agg);
                for (dst, v) in appliances.iter_mut().zip(apps) {
                    dst.push(v);
                }
            }
            Err(reason) => skipped.push(SkippedRow { line, reason }),
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no usable rows", path.display())));
    }
    if !skipped.is_empty() {
        log::warn!(
            "{}: skipped {} rows (first at line {})",
            path.display(),
            skipped.len(),
            skipped[0].line
        );
    }
    let table = TimeSeriesTable::new(
        timestamps,
        Channel {
            name: schema.aggregate.clone(),
            values: aggregate,
        },
        schema
            .appliances
            .iter()
            .zip(appliances)
            .map(|(name, values)| Channel {
                name: name.clone(),
                values,
            })
            .collect(),
    )?;
    Ok(LoadedTable { table, skipped })
}

/// Writes a table in the layout read by [`load_power_csv`], epoch-second timestamps.
pub fn write_power_csv(table: &TimeSeriesTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["timestamp".to_string(), table.aggregate.name.clone()];
    header.extend(table.appliances.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, ts) in table.timestamps.iter().enumerate() {
        let mut row = vec![ts.to_string(), table.aggregate.values[i].to_string()];
        row.extend(table.appliances.iter().map(|c| c.values[i].to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Bin means over `[t0 + k period, t0 + (k + 1) period)`; empty bins are dropped.
pub fn resample_mean(table: &TimeSeriesTable, period_seconds: i64) -> Result<TimeSeriesTable> {
    if period_seconds <= 0 {
        return Err(Error::invalid("resample period must be positive"));
    }
    if let Some(native) = table.native_period() {
        if period_seconds < native {
            return Err(Error::invalid(format!(
                "resample period {period_seconds} s is shorter than the native spacing {native} s"
            )));
        }
    }
    let Some(&t0) = table.timestamps.first() else {
        return Ok(table.clone());
    };
    let channels: Vec<&Channel> = std::iter::once(&table.aggregate)
        .chain(&table.appliances)
        .collect();
    let mut out_ts = Vec::new();
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); channels.len()];
    let mut i = 0;
    while i < table.len() {
        let bin = (table.timestamps[i] - t0).div_euclid(period_seconds);
        let start = i;
        while i < table.len() && (table.timestamps[i] - t0).div_euclid(period_seconds) == bin {
            i += 1;
        }
        let count = (i - start) as f64;
        out_ts.push(t0 + bin * period_seconds);
        for (dst, ch) in out.iter_mut().zip(&channels) {
            dst.push(ch.values[start..i].iter().sum::<f64>() / count);
        }
    }
    let mut iter = out.into_iter().zip(channels).map(|(values, ch)| Channel {
        name: ch.name.clone(),
        values,
    });
    let aggregate = iter.next().expect("aggregate channel");
    TimeSeriesTable::new(out_ts, aggregate, iter.collect())
}

/// Per-appliance ON cutoffs in watts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnThresholds {
    pub default_watts: f64,
    pub per_appliance: BTreeMap<String, f64>,
}

impl Default for OnThresholds {
    fn default() -> Self {
        OnThresholds {
            default_watts: 10.0,
            per_appliance: BTreeMap::new(),
        }
    }
}

/// Binary ON/OFF series, one per appliance, in table order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSeries {
    pub names: Vec<String>,
    pub states: Vec<Vec<bool>>,
}

/// State is ON iff power `>=` the appliance's threshold.
pub fn derive_states(table: &TimeSeriesTable, thresholds: &OnThresholds) -> Result<StateSeries> {
    for (name, &w) in &thresholds.per_appliance {
        if table.appliance(name).is_none() {
            return Err(Error::invalid(format!("unknown appliance '{name}'")));
        }
        if !(w > 0.0) {
            return Err(Error::invalid(format!(
                "ON threshold for '{name}' must be positive"
            )));
        }
    }
    if !(thresholds.default_watts > 0.0) {
        return Err(Error::invalid("default ON threshold must be positive"));
    }
    let states = table
        .appliances
        .iter()
        .map(|ch| {
            let cut = thresholds
                .per_appliance
                .get(&ch.name)
                .copied()
                .unwrap_or(thresholds.default_watts);
            ch.values.iter().map(|&v| v >= cut).collect()
        })
        .collect();
    Ok(StateSeries {
        names: table.appliances.iter().map(|c| c.name.clone()).collect(),
        states,
    })
}
