use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ActivationSpec, Ridge};

pub const DDL_DEFAULT_LAYERS: [usize; 3] = [120, 80, 50];
pub const DTL_DEFAULT_LAYERS: [usize; 3] = [120, 80, 40];
pub const MAX_DEPTH: usize = 4;

/// How training inputs are scaled before entering the factor model.
///
/// `tanh` saturates on watt-scale readings, so by default every input is
/// divided by the largest absolute training reading. The resolved factor is
/// stored in the model and applied again at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputScale {
    #[default]
    Auto,
    None,
    Fixed(f64),
}

impl InputScale {
    pub fn resolve(&self, x: &nalgebra::DMatrix<f64>) -> Result<f64> {
        match *self {
            InputScale::None => Ok(1.0),
            InputScale::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            InputScale::Fixed(s) => Err(Error::invalid(format!(
                "input scale must be positive, got {s}"
            ))),
            InputScale::Auto => {
                let max = x.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
                Ok(if max > 0.0 { max } else { 1.0 })
            }
        }
    }
}

/// Hyper-parameters shared by both trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Layer widths, shallowest first. Empty selects the model's default.
    pub layer_sizes: Vec<usize>,
    /// Weight of the label-consistency term.
    pub lambda: f64,
    /// Weight of the layer-coupling penalties.
    pub mu: f64,
    /// Transform regularizer weight (transform learning only).
    pub eps: f64,
    pub max_iter: usize,
    /// Relative objective change that stops training.
    pub tol: f64,
    /// Alternation budget for dictionary-model inference.
    pub infer_iter: usize,
    pub seed: u64,
    /// Ridge for pseudo-inverse solves; `None` scales `1e-8` by the mean
    /// diagonal of each normal matrix.
    pub ridge_delta: Option<f64>,
    pub input_scale: InputScale,
    pub activation: ActivationSpec,
    /// Dictionary model only: after training, refit the label map by ridge
    /// regression on the representations inference produces for the
    /// training inputs.
    pub refit_label_map: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layer_sizes: Vec::new(),
            lambda: 1.0,
            mu: 1.0,
            eps: 0.1,
            max_iter: 100,
            tol: 1e-4,
            infer_iter: 50,
            seed: 0,
            ridge_delta: None,
            input_scale: InputScale::Auto,
            activation: ActivationSpec::default(),
            refit_label_map: true,
        }
    }
}

impl TrainConfig {
    pub fn with_layers(mut self, layers: &[usize]) -> Self {
        self.layer_sizes = layers.to_vec();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn ridge(&self) -> Ridge {
        Ridge::from_option(self.ridge_delta)
    }

    /// Fills in default layer sizes and validates every field.
    pub(crate) fn resolved(&self, default_layers: &[usize]) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        if cfg.layer_sizes.is_empty() {
            cfg.layer_sizes = default_layers.to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() || self.layer_sizes.len() > MAX_DEPTH {
            return Err(Error::invalid(format!(
                "layer_sizes must hold 1 to {MAX_DEPTH} widths, got {}",
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be a finite nonnegative number"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("mu must be positive"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps must be positive"));
        }
        if self.max_iter == 0 || self.infer_iter == 0 {
            return Err(Error::invalid("iteration limits must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if let Some(d) = self.ridge_delta {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::invalid(
                    "ridge_delta must be a finite nonnegative number",
                ));
            }
        }
        self.activation.validate()
    }
}

/// Layer sizes for a depth sweep: a prefix of `base`, halving the last width
/// for every extra layer.
pub fn layers_for_depth(base: &[usize], depth: usize) -> Vec<usize> {
    let mut out: Vec<usize> = base.iter().copied().take(depth).collect();
    while out.len() < depth {
        let last = out.last().copied().unwrap_or(2);
        out.push((last / 2).max(1));
    }
    out
}
