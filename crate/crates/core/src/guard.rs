//! Monotone acceptance of block-coordinate candidates.
//!
//! A closed-form candidate is installed if the summed objective does not
//! increase, possibly after shortening the step toward the current value.
//! Failing that, an Armijo gradient step on the full objective is tried.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::numerics::{frob_sq, Matrix};

/// Halvings tried before a non-improving block candidate is dropped.
pub const MAX_BACKTRACK: usize = 6;
/// Halvings tried by the gradient fallback.
pub const MAX_GRADIENT_HALVINGS: usize = 40;
pub(crate) const ARMIJO: f64 = 1e-4;

/// What the guard did with each block during one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport<B> {
    /// Objective after the cycle.
    pub objective: f64,
    /// Blocks installed only after shortening the step.
    pub shortened: Vec<B>,
    /// Blocks updated by the gradient fallback.
    pub gradient: Vec<B>,
    /// Blocks left unchanged.
    pub rejected: Vec<B>,
}

impl<B> Default for StepReport<B> {
    fn default() -> Self {
        StepReport {
            objective: 0.0,
            shortened: Vec::new(),
            gradient: Vec::new(),
            rejected: Vec::new(),
        }
    }
}

impl<B> StepReport<B> {
    pub(crate) fn record(&mut self, block: B, outcome: Outcome) {
        match outcome {
            Outcome::Accepted => {}
            Outcome::Shortened => self.shortened.push(block),
            Outcome::Gradient => self.gradient.push(block),
            Outcome::Rejected => self.rejected.push(block),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.shortened.is_empty() && self.gradient.is_empty() && self.rejected.is_empty()
    }
}

pub(crate) trait BlockState {
    type Block: Copy;
    fn slot_mut(&mut self, block: Self::Block) -> &mut Matrix;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outcome {
    Accepted,
    Shortened,
    Gradient,
    Rejected,
}

/// Term values with `affected` recomputed for the current state.
fn refreshed<S>(
    st: &S,
    terms: &[f64],
    affected: &[usize],
    term: &impl Fn(&S, usize) -> f64,
) -> Vec<f64> {
    let mut out = terms.to_vec();
    for &a in affected {
        out[a] = term(st, a);
    }
    out
}

/// Per-block state of the guard: the last successful gradient step length.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StepHints(Vec<f64>);

impl StepHints {
    pub(crate) fn new(blocks: usize) -> Self {
        StepHints(vec![1.0; blocks])
    }
}

/// Installs the closed-form candidate (or a shortened step toward it) if the
/// objective does not increase; otherwise tries an Armijo step along
/// `-gradient()`. `terms` is kept in sync with the state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn guarded_update<S: BlockState>(
    st: &mut S,
    block: S::Block,
    slot: usize,
    cand: DMatrix<f64>,
    terms: &mut [f64],
    affected: &[usize],
    term: impl Fn(&S, usize) -> f64,
    gradient: impl Fn(&S) -> DMatrix<f64>,
    hints: &mut StepHints,
) -> Result<Outcome> {
    let before: f64 = terms.iter().sum();
    let old = st.slot_mut(block).inner().clone();
    let mut t = 1.0;
    for attempt in 0..=MAX_BACKTRACK {
        let trial = if attempt == 0 {
            cand.clone()
        } else {
            &old + (&cand - &old) * t
        };
        *st.slot_mut(block) = Matrix::checked(trial, "block update")?;
        let trial_terms = refreshed(st, terms, affected, &term);
        if trial_terms.iter().sum::<f64>() <= before {
            terms.copy_from_slice(&trial_terms);
            return Ok(if attempt == 0 {
                Outcome::Accepted
            } else {
                Outcome::Shortened
            });
        }
        t *= 0.5;
    }

    *st.slot_mut(block) = Matrix::checked(old.clone(), "block update")?;
    let grad = gradient(st);
    let g2 = frob_sq(&grad);
    if g2 > 0.0 && g2.is_finite() {
        let mut s = hints.0[slot];
        for _ in 0..MAX_GRADIENT_HALVINGS {
            let trial = &old - &grad * s;
            if trial.iter().all(|v| v.is_finite()) {
                *st.slot_mut(block) = Matrix::checked(trial, "gradient step")?;
                let trial_terms = refreshed(st, terms, affected, &term);
                if trial_terms.iter().sum::<f64>() <= before - ARMIJO * s * g2 {
                    terms.copy_from_slice(&trial_terms);
                    hints.0[slot] = 2.0 * s;
                    return Ok(Outcome::Gradient);
                }
            }
            s *= 0.5;
        }
        hints.0[slot] = s;
    }
    *st.slot_mut(block) = Matrix::checked(old, "block update")?;
    Ok(Outcome::Rejected)
}
