//! Config-driven experiment commands: synthesize, train, evaluate.
//!
//! Relative paths in a config file are resolved against the directory that
//! holds the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{
    layers_for_depth, TrainConfig, DDL_DEFAULT_LAYERS, DTL_DEFAULT_LAYERS, MAX_DEPTH,
};
use crate::dataio::{
    derive_states, load_dataset, load_power_csv, resample_mean, save_dataset, split_dataset,
    synth_with, windowize, CsvSchema, OnThresholds, SynthParams, WindowOptions, WindowedDataset,
};
use crate::ddl::train_mlcddl;
use crate::dtl::train_mlcdtl;
use crate::error::{Error, Result};
use crate::metrics::{calibrate, MetricsReport, ReportInputs};
use crate::model::{LabelInfo, Model};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

pub const MODEL_FILE: &str = "model.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TEST_DIR: &str = "test";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlcddl,
    Mlcdtl,
}

impl ModelKind {
    pub fn default_layers(&self) -> &'static [usize] {
        match self {
            ModelKind::Mlcddl => &DDL_DEFAULT_LAYERS,
            ModelKind::Mlcdtl => &DTL_DEFAULT_LAYERS,
        }
    }
}

/// Meter CSV files, one per house.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub paths: Vec<PathBuf>,
    pub schema: CsvSchema,
    /// Resampling period; `None` keeps the native sampling.
    #[serde(default)]
    pub resample_seconds: Option<i64>,
    #[serde(default)]
    pub on_thresholds: OnThresholds,
    #[serde(default)]
    pub window: WindowOptions,
}

/// Exactly one source of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthParams),
    /// A directory written by `cmd_synth` or `save_dataset`.
    DatasetDir(PathBuf),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    /// Keep each house on one side of the split.
    pub grouped: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
            grouped: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdPolicy {
    /// The same threshold for every label.
    Fixed(f64),
    /// Hold out part of the training split and pick per-label thresholds
    /// maximizing F1 on it; `0` calibrates on the training split itself.
    Calibrate { validation_fraction: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed(0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: DataSource,
    pub model: ModelKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub thresholds: ThresholdPolicy,
    pub output_dir: PathBuf,
    /// Depths to train side by side; each run gets its own subdirectory.
    #[serde(default)]
    pub sweep_depths: Option<Vec<usize>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "parsing experiment config".into(),
            source,
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config and resolves its relative paths.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        match &mut self.data {
            DataSource::Synth(_) => {}
            DataSource::DatasetDir(dir) => fix(dir),
            DataSource::Csv(src) => src.paths.iter_mut().for_each(fix),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "serializing experiment config".into(),
            source,
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// Replaces every seed: training, split and synthetic generator.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.split.seed = seed;
        if let DataSource::Synth(p) = &mut self.data {
            p.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::invalid("split.train_fraction must be in (0, 1)"));
        }
        match self.thresholds {
            ThresholdPolicy::Fixed(t) if !t.is_finite() => {
                return Err(Error::invalid("fixed threshold must be finite"));
            }
            ThresholdPolicy::Calibrate {
                validation_fraction: v,
            } if !(0.0..1.0).contains(&v) => {
                return Err(Error::invalid("validation_fraction must be in [0, 1)"));
            }
            _ => {}
        }
        if let Some(depths) = &self.sweep_depths {
            if depths.is_empty() || depths.iter().any(|&d| d == 0 || d > MAX_DEPTH) {
                return Err(Error::invalid(format!(
                    "sweep_depths must list depths 1 to {MAX_DEPTH}"
                )));
            }
        }
        self.resolved_train(None)?;
        match &self.data {
            DataSource::Synth(p) => {
                if p.appliances == 0 || p.windows == 0 || p.window_len == 0 {
                    return Err(Error::invalid(
                        "synthetic data needs at least one appliance, window and reading",
                    ));
                }
            }
            DataSource::DatasetDir(dir) => {
                if !dir.is_dir() {
                    return Err(Error::invalid(format!(
                        "dataset directory {} does not exist",
                        dir.display()
                    )));
                }
            }
            DataSource::Csv(src) => {
                if src.paths.is_empty() {
                    return Err(Error::invalid("csv source lists no files"));
                }
                for p in &src.paths {
                    if !p.is_file() {
                        return Err(Error::invalid(format!(
                            "data file {} does not exist",
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Training config with default layers filled in, optionally at a sweep depth.
    pub fn resolved_train(&self, depth: Option<usize>) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        if cfg.layer_sizes.is_empty() {
            cfg.layer_sizes = self.model.default_layers().to_vec();
        }
        if let Some(d) = depth {
            cfg.layer_sizes = layers_for_depth(&cfg.layer_sizes, d);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(label, output directory, depth)` for every run.
    fn runs(&self) -> Vec<(String, PathBuf, Option<usize>)> {
        match &self.sweep_depths {
            None => vec![(
                format!("{:?}", self.model).to_lowercase(),
                self.output_dir.clone(),
                None,
            )],
            Some(depths) => depths
                .iter()
                .map(|&d| {
                    let name = format!("depth_{d}");
                    (name.clone(), self.output_dir.join(name), Some(d))
                })
                .collect(),
        }
    }
}

/// Loads or generates the configured windows.
pub fn load_data(cfg: &ExperimentConfig) -> Result<WindowedDataset> {
    match &cfg.data {
        DataSource::Synth(p) => Ok(synth_with(p)?.dataset),
        DataSource::DatasetDir(dir) => load_dataset(dir),
        DataSource::Csv(src) => {
            let mut parts = Vec::with_capacity(src.paths.len());
            for (house, path) in src.paths.iter().enumerate() {
                let loaded = load_power_csv(path, &src.schema)?;
                if loaded.skip_count() > 0 {
                    log::warn!(
                        "{}: skipped {} malformed rows",
                        path.display(),
                        loaded.skip_count()
                    );
                }
                let table = match src.resample_seconds {
                    Some(period) => resample_mean(&loaded.table, period)?,
                    None => loaded.table,
                };
                let states = derive_states(&table, &src.on_thresholds)?;
                let mut ds = windowize(&table, &states, &src.window)?;
                ds.groups = Some(vec![house as u32; ds.len()]);
                parts.push(ds);
            }
            WindowedDataset::concat(&parts)
        }
    }
}

fn split(
    cfg: &ExperimentConfig,
    ds: &WindowedDataset,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let groups =
        if cfg.split.grouped {
            Some(ds.groups.as_deref().ok_or_else(|| {
                Error::invalid("grouped split requested but the data has no groups")
            })?)
        } else {
            None
        };
    split_dataset(ds, cfg.split.train_fraction, groups, cfg.split.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub windows: usize,
    pub appliances: usize,
    pub window_len: usize,
    pub snr_db: Option<f64>,
    pub output_dir: PathBuf,
}

/// Writes the synthetic dataset and the generating signatures.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let DataSource::Synth(params) = &cfg.data else {
        return Err(Error::invalid("synth needs a synthetic data source"));
    };
    let data = synth_with(params)?;
    create_dir(&cfg.output_dir)?;
    save_dataset(&data.dataset, &cfg.output_dir)?;
    let sig_path = cfg.output_dir.join("signatures.csv");
    let mut text = String::from(&data.dataset.appliance_names.join(","));
    text.push('\n');
    for r in 0..data.signatures.nrows() {
        let row: Vec<String> = (0..data.signatures.ncols())
            .map(|c| data.signatures[(r, c)].to_string())
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&sig_path, text).map_err(|e| Error::io(&sig_path, e))?;
    Ok(SynthSummary {
        windows: data.dataset.len(),
        appliances: data.dataset.label_count(),
        window_len: data.dataset.window_len,
        snr_db: params.snr_db,
        output_dir: cfg.output_dir.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// `manifest.json` written next to every trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run: String,
    pub model: ModelKind,
    pub config_sha256: String,
    pub seed: u64,
    pub layer_sizes: Vec<usize>,
    pub status: RunStatus,
    /// Full update cycles performed.
    pub iterations: usize,
    pub final_objective: Option<f64>,
    pub failure_iteration: Option<usize>,
    pub error: Option<String>,
    pub train_windows: usize,
    pub test_windows: usize,
    pub thresholds: Vec<f64>,
    pub model_sha256: Option<String>,
}

/// Trains the configured model (or every sweep depth) and writes the model,
/// its objective trace, a manifest and the held-out test split.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let data = load_data(cfg)?;
    let (train, test) = split(cfg, &data)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("split leaves an empty train or test side"));
    }
    create_dir(&cfg.output_dir)?;
    save_dataset(&test, &cfg.output_dir.join(TEST_DIR))?;

    let runs = cfg.runs();
    let results: Vec<Result<RunManifest>> = std::thread::scope(|s| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(name, dir, depth)| {
                let (train, test, hash) = (&train, &test, &hash);
                s.spawn(move || train_one(cfg, name, dir, *depth, train, test.len(), hash))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Data("training thread panicked".into())))
            })
            .collect()
    });
    results.into_iter().collect()
}

fn train_one(
    cfg: &ExperimentConfig,
    name: &str,
    dir: &Path,
    depth: Option<usize>,
    train: &WindowedDataset,
    test_windows: usize,
    hash: &str,
) -> Result<RunManifest> {
    create_dir(dir)?;
    let tcfg = cfg.resolved_train(depth)?;
    let mut manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        run: name.to_string(),
        model: cfg.model,
        config_sha256: hash.to_string(),
        seed: tcfg.seed,
        layer_sizes: tcfg.layer_sizes.clone(),
        status: RunStatus::Ok,
        iterations: 0,
        final_objective: None,
        failure_iteration: None,
        error: None,
        train_windows: train.len(),
        test_windows,
        thresholds: Vec::new(),
        model_sha256: None,
    };
    log::info!(
        "{name}: training {:?} with layers {:?}",
        cfg.model,
        tcfg.layer_sizes
    );
    match fit_with_thresholds(cfg, &tcfg, train) {
        Ok(model) => {
            let trace = model.objective_trace();
            manifest.iterations = trace.len().saturating_sub(1);
            manifest.final_objective = trace.last().copied();
            manifest.thresholds = model.thresholds().to_vec();
            let json = model.to_json()?;
            manifest.model_sha256 = Some(hex::encode(Sha256::digest(json.as_bytes())));
            write(&dir.join(MODEL_FILE), &json)?;
            write(&dir.join(TRACE_FILE), &trace_csv(trace))?;
            write(&dir.join(MANIFEST_FILE), &manifest_json(&manifest)?)?;
            log::info!(
                "{name}: {} iterations, objective {:?}",
                manifest.iterations,
                manifest.final_objective
            );
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            if let Error::Diverged { iteration, .. } = &e {
                manifest.failure_iteration = Some(*iteration);
            }
            manifest.error = Some(e.to_string());
            write(&dir.join(MANIFEST_FILE), &manifest_json(&manifest)?)?;
            Err(e)
        }
    }
}

fn fit(kind: ModelKind, tcfg: &TrainConfig, ds: &WindowedDataset) -> Result<Model> {
    let mut model = match kind {
        ModelKind::Mlcddl => Model::Mlcddl(train_mlcddl(&ds.x, &ds.y, tcfg)?),
        ModelKind::Mlcdtl => Model::Mlcdtl(train_mlcdtl(&ds.x, &ds.y, tcfg)?),
    };
    model.set_labels(LabelInfo {
        appliance_names: ds.appliance_names.clone(),
        mean_on_power: ds.mean_on_power.clone(),
    });
    Ok(model)
}

fn fit_with_thresholds(
    cfg: &ExperimentConfig,
    tcfg: &TrainConfig,
    train: &WindowedDataset,
) -> Result<Model> {
    match cfg.thresholds {
        ThresholdPolicy::Fixed(t) => {
            let mut model = fit(cfg.model, tcfg, train)?;
            model.set_thresholds(vec![t; train.label_count()])?;
            Ok(model)
        }
        ThresholdPolicy::Calibrate {
            validation_fraction,
        } => {
            let (fit_part, val) = if validation_fraction > 0.0 {
                let (a, b) = split_dataset(
                    train,
                    1.0 - validation_fraction,
                    None,
                    cfg.split.seed ^ 0x5eed,
                )?;
                if a.is_empty() || b.is_empty() {
                    return Err(Error::invalid("validation split leaves an empty side"));
                }
                (a, b)
            } else {
                (train.clone(), train.clone())
            };
            let mut model = fit(cfg.model, tcfg, &fit_part)?;
            let scores = model.predict(&val.x)?.scores;
            let cal = calibrate(&scores, &val.y)?;
            for (name, _) in train
                .appliance_names
                .iter()
                .zip(&cal.degenerate)
                .filter(|(_, d)| **d)
            {
                log::warn!("{name}: all validation scores are equal; threshold is not informative");
            }
            model.set_thresholds(cal.thresholds)?;
            if validation_fraction > 0.0 {
                model.set_labels(LabelInfo {
                    appliance_names: train.appliance_names.clone(),
                    mean_on_power: train.mean_on_power.clone(),
                });
            }
            Ok(model)
        }
    }
}

/// Scores `model` on `data`; energy uses the model's training ON powers
/// when present.
pub fn evaluate(run: &str, model: &Model, data: &WindowedDataset) -> Result<MetricsReport> {
    if model.input_dim() != data.x.nrows() || model.label_count() != data.label_count() {
        return Err(Error::dims(
            "evaluate",
            format!(
                "{} inputs and {} labels",
                model.input_dim(),
                model.label_count()
            ),
            format!(
                "{} inputs and {} labels",
                data.x.nrows(),
                data.label_count()
            ),
        ));
    }
    let pred = model.predict(&data.x)?;
    let (names, mean_on) = match model.labels() {
        Some(info) => (info.appliance_names.clone(), info.mean_on_power.clone()),
        None => (data.appliance_names.clone(), data.mean_on_power.clone()),
    };
    MetricsReport::build(
        run,
        ReportInputs {
            predicted: &pred.labels,
            truth: &data.y,
            actual_power: &data.power,
            mean_on_power: &mean_on,
            names: &names,
            thresholds: Some(model.thresholds()),
        },
    )
}

/// Explicit model and data locations for `cmd_eval`.
#[derive(Debug, Clone, Default)]
pub struct EvalPaths {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Evaluates every trained run of `cfg`, or the explicit model, and writes
/// `report.json` and `report.csv` with one row per run. Without a config,
/// `paths` must name the model, the data and the output directory.
pub fn cmd_eval(cfg: Option<&ExperimentConfig>, paths: &EvalPaths) -> Result<Vec<MetricsReport>> {
    let missing = |what: &str| Error::invalid(format!("eval needs --{what} or a config"));
    let out = match (&paths.out, cfg) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.output_dir.clone(),
        (None, None) => return Err(missing("out")),
    };
    let data_dir = match (&paths.data, cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => c.output_dir.join(TEST_DIR),
        (None, None) => return Err(missing("data")),
    };
    let runs: Vec<(String, PathBuf)> = match (&paths.model, cfg) {
        (Some(m), _) => vec![(run_name(m), m.clone())],
        (None, Some(c)) => c
            .runs()
            .into_iter()
            .map(|(name, dir, _)| (name, dir.join(MODEL_FILE)))
            .collect(),
        (None, None) => return Err(missing("model")),
    };
    let data = load_dataset(&data_dir)?;
    let mut reports = Vec::with_capacity(runs.len());
    for (name, path) in runs {
        let model = Model::load(&path)?;
        reports.push(evaluate(&name, &model, &data)?);
    }
    create_dir(&out)?;
    let json = serde_json::to_string_pretty(&reports).map_err(|source| Error::Json {
        context: "serializing metrics reports".into(),
        source,
    })?;
    write(&out.join(REPORT_JSON), &json)?;
    write(&out.join(REPORT_CSV), &MetricsReport::to_csv(&reports)?)?;
    Ok(reports)
}

fn run_name(model_path: &Path) -> String {
    model_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,objective\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

fn manifest_json(m: &RunManifest) -> Result<String> {
    serde_json::to_string_pretty(m).map_err(|source| Error::Json {
        context: "serializing manifest".into(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
