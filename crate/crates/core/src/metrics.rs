//! Multi-label F1, energy error and threshold calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::check_binary;
use crate::numerics::Matrix;

/// `2 tp / (2 tp + fp + fn)`; 1.0 when all three counts are zero.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    if is_vacuous(tp, fp, fn_) {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// True when a label is absent and never predicted.
pub fn is_vacuous(tp: u64, fp: u64, fn_: u64) -> bool {
    tp == 0 && fp == 0 && fn_ == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    pub fn is_vacuous(&self) -> bool {
        is_vacuous(self.tp, self.fp, self.fn_)
    }
}

/// Per-label confusion counts over `samples` columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelConfusion {
    per_label: Vec<Counts>,
    samples: u64,
}

impl LabelConfusion {
    pub fn new(per_label: Vec<Counts>, samples: u64) -> Result<Self> {
        if per_label.is_empty() {
            return Err(Error::invalid("confusion needs at least one label"));
        }
        for (i, c) in per_label.iter().enumerate() {
            if c.tp + c.fp + c.fn_ > samples {
                return Err(Error::invalid(format!(
                    "label {i}: tp + fp + fn = {} exceeds {samples} samples",
                    c.tp + c.fp + c.fn_
                )));
            }
        }
        Ok(LabelConfusion { per_label, samples })
    }

    pub fn per_label(&self) -> &[Counts] {
        &self.per_label
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn totals(&self) -> Counts {
        self.per_label
            .iter()
            .fold(Counts::default(), |acc, c| Counts {
                tp: acc.tp + c.tp,
                fp: acc.fp + c.fp,
                fn_: acc.fn_ + c.fn_,
            })
    }
}

pub fn f1_micro(conf: &LabelConfusion) -> f64 {
    conf.totals().f1()
}

pub fn f1_macro(conf: &LabelConfusion) -> f64 {
    let sum: f64 = conf.per_label.iter().map(Counts::f1).sum();
    sum / conf.per_label.len() as f64
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

pub fn confusion_from_labels(y_hat: &Matrix, y_true: &Matrix) -> Result<LabelConfusion> {
    same_shape("confusion_from_labels", y_true, y_hat)?;
    check_binary(y_hat)?;
    check_binary(y_true)?;
    let mut per_label = vec![Counts::default(); y_true.nrows()];
    for j in 0..y_true.ncols() {
        for (i, c) in per_label.iter_mut().enumerate() {
            match (y_hat[(i, j)] == 1.0, y_true[(i, j)] == 1.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    LabelConfusion::new(per_label, y_true.ncols() as u64)
}

/// Predicted versus actual energy, overall and per appliance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

impl EnergyBreakdown {
    /// `(predicted - actual) / actual` over all appliances.
    pub fn signed(&self) -> Result<f64> {
        let actual: f64 = self.actual.iter().sum();
        if !(actual > 0.0) {
            return Err(Error::ZeroEnergy);
        }
        Ok((self.predicted.iter().sum::<f64>() - actual) / actual)
    }

    pub fn absolute(&self) -> Result<f64> {
        Ok(self.signed()?.abs())
    }

    /// Signed ratio for appliance `i`; `None` if it consumed no energy.
    pub fn appliance_signed(&self, i: usize) -> Option<f64> {
        let actual = self.actual[i];
        (actual > 0.0).then(|| (self.predicted[i] - actual) / actual)
    }

    pub fn appliance_absolute(&self, i: usize) -> Option<f64> {
        self.appliance_signed(i).map(f64::abs)
    }
}

/// Predicted energy is the ON count times the mean ON power of each appliance.
pub fn energy_breakdown(
    states: &Matrix,
    actual_power: &Matrix,
    mean_on_power: &[f64],
) -> Result<EnergyBreakdown> {
    same_shape("energy_error", actual_power, states)?;
    if mean_on_power.len() != states.nrows() {
        return Err(Error::dims(
            "energy_error",
            format!("{} mean ON powers", states.nrows()),
            format!("{}", mean_on_power.len()),
        ));
    }
    check_binary(states)?;
    let predicted = (0..states.nrows())
        .map(|i| states.row(i).sum() * mean_on_power[i])
        .collect();
    let actual = (0..states.nrows())
        .map(|i| actual_power.row(i).sum())
        .collect();
    Ok(EnergyBreakdown { predicted, actual })
}

/// `|sum predicted - sum actual| / sum actual`.
pub fn energy_error(states: &Matrix, actual_power: &Matrix, mean_on_power: &[f64]) -> Result<f64> {
    energy_breakdown(states, actual_power, mean_on_power)?.absolute()
}

pub fn energy_error_signed(
    states: &Matrix,
    actual_power: &Matrix,
    mean_on_power: &[f64],
) -> Result<f64> {
    energy_breakdown(states, actual_power, mean_on_power)?.signed()
}

/// Thresholds chosen per label, with a flag for labels whose scores were all equal.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub thresholds: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Per-label threshold maximizing F1 on `(scores, y_true)`.
pub fn calibrate_thresholds(scores: &Matrix, y_true: &Matrix) -> Result<Vec<f64>> {
    Ok(calibrate(scores, y_true)?.thresholds)
}

/// Scans the cutpoints at the smallest score, between consecutive distinct
/// scores and above the largest score; ties go to the larger threshold.
pub fn calibrate(scores: &Matrix, y_true: &Matrix) -> Result<Calibration> {
    same_shape("calibrate_thresholds", y_true, scores)?;
    check_binary(y_true)?;
    if scores.ncols() == 0 {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    let mut thresholds = Vec::with_capacity(scores.nrows());
    let mut degenerate = Vec::with_capacity(scores.nrows());
    for i in 0..scores.nrows() {
        let mut pairs: Vec<(f64, bool)> = (0..scores.ncols())
            .map(|j| (scores[(i, j)], y_true[(i, j)] == 1.0))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let positives = pairs.iter().filter(|p| p.1).count() as u64;
        let n = pairs.len();
        let max = pairs[n - 1].0;

        // Walk from "predict nothing" toward "predict everything"; `tp`/`fp`
        // count the suffix predicted ON.
        let mut best_threshold = max + 1.0;
        let mut best = f1(0, 0, positives);
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut k = n;
        while k > 0 {
            let value = pairs[k - 1].0;
            while k > 0 && pairs[k - 1].0 == value {
                if pairs[k - 1].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                k -= 1;
            }
            let threshold = if k == 0 {
                value
            } else {
                0.5 * (pairs[k - 1].0 + value)
            };
            let score = f1(tp, fp, positives - tp);
            if score > best {
                best = score;
                best_threshold = threshold;
            }
        }
        degenerate.push(pairs[0].0 == max);
        thresholds.push(best_threshold);
    }
    Ok(Calibration {
        thresholds,
        degenerate,
    })
}

/// Overall and per-appliance evaluation of one prediction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// Absolute relative energy error.
    pub energy_error: f64,
    pub energy_error_signed: f64,
    pub sample_count: u64,
    /// Labels absent from both prediction and truth; their F1 is 1 by convention.
    pub vacuous_labels: Vec<String>,
    pub per_appliance: Vec<ApplianceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplianceMetrics {
    pub name: String,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub threshold: Option<f64>,
    /// `None` when the appliance consumed no energy in the split.
    pub energy_error: Option<f64>,
    pub energy_error_signed: Option<f64>,
}

/// Everything a report is built from.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub predicted: &'a Matrix,
    pub truth: &'a Matrix,
    pub actual_power: &'a Matrix,
    pub mean_on_power: &'a [f64],
    pub names: &'a [String],
    pub thresholds: Option<&'a [f64]>,
}

impl MetricsReport {
    pub fn build(run: impl Into<String>, inputs: ReportInputs<'_>) -> Result<MetricsReport> {
        let conf = confusion_from_labels(inputs.predicted, inputs.truth)?;
        let energy = energy_breakdown(inputs.predicted, inputs.actual_power, inputs.mean_on_power)?;
        if inputs.names.len() != inputs.truth.nrows() {
            return Err(Error::dims(
                "MetricsReport",
                format!("{} appliance names", inputs.truth.nrows()),
                format!("{}", inputs.names.len()),
            ));
        }
        let per_appliance = conf
            .per_label()
            .iter()
            .enumerate()
            .map(|(i, c)| ApplianceMetrics {
                name: inputs.names[i].clone(),
                f1: c.f1(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                threshold: inputs.thresholds.map(|t| t[i]),
                energy_error: energy.appliance_absolute(i),
                energy_error_signed: energy.appliance_signed(i),
            })
            .collect();
        let vacuous_labels = conf
            .per_label()
            .iter()
            .zip(inputs.names)
            .filter(|(c, _)| c.is_vacuous())
            .map(|(_, n)| n.clone())
            .collect();
        let signed = energy.signed()?;
        Ok(MetricsReport {
            run: run.into(),
            macro_f1: f1_macro(&conf),
            micro_f1: f1_micro(&conf),
            energy_error: signed.abs(),
            energy_error_signed: signed,
            sample_count: conf.samples(),
            vacuous_labels,
            per_appliance,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "serializing metrics report".into(),
            source,
        })
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: "parsing metrics report".into(),
            source,
        })
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "run",
            "macro_f1",
            "micro_f1",
            "energy_error",
            "energy_error_signed",
            "sample_count",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for a in &self.per_appliance {
            h.push(format!("{}_f1", a.name));
            h.push(format!("{}_energy_error", a.name));
        }
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.run.clone(),
            self.macro_f1.to_string(),
            self.micro_f1.to_string(),
            self.energy_error.to_string(),
            self.energy_error_signed.to_string(),
            self.sample_count.to_string(),
        ];
        for a in &self.per_appliance {
            r.push(a.f1.to_string());
            r.push(a.energy_error.map(|e| e.to_string()).unwrap_or_default());
        }
        r
    }

    /// Header plus one row per report; all reports must share the header.
    pub fn to_csv(reports: &[MetricsReport]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if let Some(first) = reports.first() {
            let header = first.csv_header();
            w.write_record(&header).map_err(csv_err)?;
            for r in reports {
                if r.csv_header() != header {
                    return Err(Error::invalid("reports have different appliance sets"));
                }
                w.write_record(r.csv_row()).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(source: csv::Error) -> Error {
    Error::Csv {
        path: "<report>".into(),
        source,
    }
}
