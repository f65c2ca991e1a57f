use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::window::WindowedDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub appliances: usize,
    pub windows: usize,
    pub window_len: usize,
    /// Signal-to-noise ratio in dB; `None` adds no noise.
    pub snr_db: Option<f64>,
    pub activation_prob: f64,
    /// Number of synthetic houses; windows are assigned round-robin.
    pub houses: Option<u32>,
    pub period_seconds: i64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            appliances: 4,
            windows: 2000,
            window_len: 60,
            snr_db: Some(20.0),
            activation_prob: 0.5,
            houses: None,
            period_seconds: 60,
            seed: 0,
        }
    }
}

/// Generated dataset plus the ground truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub dataset: WindowedDataset,
    /// `d x L`, column `i` is the in-window power profile of appliance `i`.
    pub signatures: Matrix,
    /// Per appliance, `d x N` instantaneous power.
    pub appliance_power: Vec<Matrix>,
}

/// `L` appliances, `N` windows of `d` readings at `snr_db` (infinite for no noise).
pub fn synth_dataset(l: usize, n: usize, d: usize, snr_db: f64, seed: u64) -> Result<SynthData> {
    synth_with(&SynthParams {
        appliances: l,
        windows: n,
        window_len: d,
        snr_db: snr_db.is_finite().then_some(snr_db),
        seed,
        ..SynthParams::default()
    })
}

fn signature(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let watts = rng.random_range(100.0..2000.0);
    let period = rng.random_range(3..=d.clamp(3, 15));
    let on_len = ((rng.random_range(0.3..0.8) * period as f64).ceil() as usize).max(1);
    let phase = rng.random_range(0..period);
    (0..d)
        .map(|t| {
            if (t + phase) % period < on_len {
                watts
            } else {
                0.15 * watts
            }
        })
        .collect()
}

/// Each appliance has a fixed profile; every window switches each appliance
/// on independently and the aggregate is the sum of active profiles plus
/// Gaussian noise.
pub fn synth_with(p: &SynthParams) -> Result<SynthData> {
    let (l, n, d) = (p.appliances, p.windows, p.window_len);
    if l == 0 || n == 0 || d == 0 {
        return Err(Error::invalid(
            "synthetic data needs at least one appliance, window and reading",
        ));
    }
    if !(p.activation_prob > 0.0 && p.activation_prob < 1.0) {
        return Err(Error::invalid("activation_prob must be in (0, 1)"));
    }
    if p.snr_db.is_some_and(|s| !s.is_finite()) {
        return Err(Error::invalid(
            "snr_db must be finite; omit it for noiseless data",
        ));
    }
    if p.houses == Some(0) || p.period_seconds <= 0 {
        return Err(Error::invalid("houses and period_seconds must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let mut sig = DMatrix::zeros(d, l);
    for attempt in 0.. {
        for i in 0..l {
            sig.set_column(i, &nalgebra::DVector::from_vec(signature(&mut rng, d)));
        }
        if d < l {
            log::warn!("window length {d} is shorter than the appliance count {l}; signatures are dependent");
            break;
        }
        let sv = sig.clone().singular_values();
        if sv.min() > 1e-3 * sv.max() {
            break;
        }
        if attempt == 100 {
            return Err(Error::Data(
                "could not draw independent appliance signatures".into(),
            ));
        }
    }

    let states = DMatrix::from_fn(l, n, |_, _| {
        if rng.random_bool(p.activation_prob) {
            1.0
        } else {
            0.0
        }
    });
    let clean = &sig * &states;
    let mut x = clean.clone();
    if let Some(snr) = p.snr_db {
        let signal = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
        let sd = (signal / 10f64.powf(snr / 10.0)).sqrt();
        if sd > 0.0 {
            let noise = Normal::new(0.0, sd).expect("finite sd");
            x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }

    let mean_sig: Vec<f64> = (0..l).map(|i| sig.column(i).mean()).collect();
    let sum_sig: Vec<f64> = (0..l).map(|i| sig.column(i).sum()).collect();
    let power = DMatrix::from_fn(l, n, |i, j| states[(i, j)] * mean_sig[i]);
    let on_sum = DMatrix::from_fn(l, n, |i, j| states[(i, j)] * sum_sig[i]);
    let on_count = DMatrix::from_fn(l, n, |i, j| states[(i, j)] * d as f64);
    let appliance_power = (0..l)
        .map(|i| Matrix::new(sig.column(i) * states.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = WindowedDataset {
        x: Matrix::new(x)?,
        y: Matrix::new(states)?,
        power: Matrix::new(power)?,
        on_power_sum: Matrix::new(on_sum)?,
        on_count: Matrix::new(on_count)?,
        appliance_names: (0..l).map(|i| format!("appliance{i}")).collect(),
        mean_on_power: mean_sig,
        window_len: d,
        period_seconds: p.period_seconds,
        groups: p.houses.map(|h| (0..n).map(|j| j as u32 % h).collect()),
    };
    dataset.validate()?;
    Ok(SynthData {
        dataset,
        signatures: Matrix::new(sig)?,
        appliance_power,
    })
}
