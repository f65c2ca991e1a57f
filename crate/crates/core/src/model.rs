//! Trained-model container, prediction output and on-disk format.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ddl::DdlModel;
use crate::dtl::DtlModel;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Appliance metadata carried by a model for energy estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub appliance_names: Vec<String>,
    /// Mean ON power of each appliance on the training split, in watts.
    pub mean_on_power: Vec<f64>,
}

/// Scores `t = M z` and the thresholded label decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Matrix,
    pub labels: Matrix,
}

/// `labels[i, j] = 1` iff `scores[i, j] >= thresholds[i]`.
pub fn apply_thresholds(scores: &Matrix, thresholds: &[f64]) -> Result<Matrix> {
    if thresholds.len() != scores.nrows() {
        return Err(Error::dims(
            "apply_thresholds",
            format!("{} thresholds", scores.nrows()),
            format!("{}", thresholds.len()),
        ));
    }
    let labels = DMatrix::from_fn(scores.nrows(), scores.ncols(), |i, j| {
        if scores[(i, j)] >= thresholds[i] {
            1.0
        } else {
            0.0
        }
    });
    Matrix::new(labels)
}

pub(crate) fn check_binary(y: &Matrix) -> Result<()> {
    for j in 0..y.ncols() {
        for i in 0..y.nrows() {
            let v = y[(i, j)];
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinary {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Either trained model, tagged by kind on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Mlcddl(DdlModel),
    Mlcdtl(DtlModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    model: Model,
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    model: &'a Model,
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Mlcddl(_) => "mlcddl",
            Model::Mlcdtl(_) => "mlcdtl",
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        match self {
            Model::Mlcddl(m) => m.predict(x),
            Model::Mlcdtl(m) => m.predict(x),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Mlcddl(m) => m.dicts[0].nrows(),
            Model::Mlcdtl(m) => m.transforms[0].ncols(),
        }
    }

    pub fn label_count(&self) -> usize {
        match self {
            Model::Mlcddl(m) => m.label_map.nrows(),
            Model::Mlcdtl(m) => m.label_map.nrows(),
        }
    }

    pub fn thresholds(&self) -> &[f64] {
        match self {
            Model::Mlcddl(m) => &m.thresholds,
            Model::Mlcdtl(m) => &m.thresholds,
        }
    }

    pub fn set_thresholds(&mut self, thresholds: Vec<f64>) -> Result<()> {
        if thresholds.len() != self.label_count() {
            return Err(Error::dims(
                "set_thresholds",
                format!("{} thresholds", self.label_count()),
                format!("{}", thresholds.len()),
            ));
        }
        match self {
            Model::Mlcddl(m) => m.thresholds = thresholds,
            Model::Mlcdtl(m) => m.thresholds = thresholds,
        }
        Ok(())
    }

    pub fn labels(&self) -> Option<&LabelInfo> {
        match self {
            Model::Mlcddl(m) => m.labels.as_ref(),
            Model::Mlcdtl(m) => m.labels.as_ref(),
        }
    }

    pub fn set_labels(&mut self, info: LabelInfo) {
        match self {
            Model::Mlcddl(m) => m.labels = Some(info),
            Model::Mlcdtl(m) => m.labels = Some(info),
        }
    }

    pub fn objective_trace(&self) -> &[f64] {
        match self {
            Model::Mlcddl(m) => &m.objective_trace,
            Model::Mlcdtl(m) => &m.objective_trace,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ModelFileRef {
            format_version: MODEL_FORMAT_VERSION,
            model: self,
        })
        .map_err(|source| Error::Json {
            context: "serializing model".into(),
            source,
        })
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "parsing model".into(),
            source,
        })?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}
