//! Multi-label consistent deep transform learning.
//!
//! For depth `K` with transforms `T1..TK`, hidden codes `C1..C(K-1)`
//! (`C0 = X`) and deepest code `Z`, training minimizes
//!
//! ```text
//! ||T_K C(K-1) - Z||^2 + lambda ||Y - M Z||^2
//!   + eps sum_i (||T_i||^2 - sum log sigma(T_i))
//!   + mu sum_(i<K) ||C_i - tanh(T_i C(i-1))||^2
//! ```
//!
//! cycling `M, T1..TK, Z, C1..C(K-1)`. Inference is a single forward pass
//! `Z = T_K tanh(... tanh(T1 x))`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{InputScale, TrainConfig, DTL_DEFAULT_LAYERS};
use crate::ddl::diverged;
use crate::error::{Error, Result};
use crate::guard::{guarded_update, BlockState, StepHints, StepReport};
use crate::model::{apply_thresholds, check_binary, LabelInfo, Prediction};
use crate::numerics::{
    frob_sq, gaussian_matrix, log_pseudo_det, ridge_solve_right_raw, solve_normal, ActivationSpec,
    Matrix, Ridge,
};
use crate::transform::transform_update_raw;

/// Trained transform model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtlModel {
    /// `T1: k1 x d`, `T2: k2 x k1`, ...
    pub transforms: Vec<Matrix>,
    /// `M: L x k_last`.
    pub label_map: Matrix,
    pub thresholds: Vec<f64>,
    pub activation: ActivationSpec,
    pub config: TrainConfig,
    /// Inputs are divided by this before inference.
    pub input_scale: f64,
    pub objective_trace: Vec<f64>,
    #[serde(default)]
    pub labels: Option<LabelInfo>,
}

impl DtlModel {
    pub fn depth(&self) -> usize {
        self.transforms.len()
    }

    /// Deepest code for each column of `x`.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.nrows() != self.transforms[0].ncols() {
            return Err(Error::dims(
                "dtl_infer",
                format!("{} rows", self.transforms[0].ncols()),
                format!("{} rows", x.nrows()),
            ));
        }
        let z = forward(
            &self.transforms,
            &self.activation,
            &(x.inner() / self.input_scale),
        );
        Matrix::checked(z, "dtl_infer")
    }

    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        let z = self.infer(x)?;
        let scores = Matrix::checked(self.label_map.inner() * z.inner(), "dtl_predict")?;
        let labels = apply_thresholds(&scores, &self.thresholds)?;
        Ok(Prediction { scores, labels })
    }
}

fn forward(transforms: &[Matrix], act: &ActivationSpec, x: &DMatrix<f64>) -> DMatrix<f64> {
    let k = transforms.len();
    let mut c = x.clone();
    for t in &transforms[..k - 1] {
        c = act.forward_raw(&(t.inner() * &c));
    }
    transforms[k - 1].inner() * c
}

pub fn train_mlcdtl(x: &Matrix, y: &Matrix, config: &TrainConfig) -> Result<DtlModel> {
    DtlTrainer::new(x, y, config)?.fit()
}

pub fn dtl_infer(x: &Matrix, model: &DtlModel) -> Result<Matrix> {
    model.infer(x)
}

pub fn dtl_predict(x: &Matrix, model: &DtlModel) -> Result<Prediction> {
    model.predict(x)
}

/// One unguarded cycle of block updates.
pub fn dtl_update_step(trainer: &DtlTrainer, state: &DtlState) -> Result<DtlState> {
    let mut next = state.clone();
    for block in trainer.block_order() {
        let cand = trainer.candidate(&next, block)?;
        *next.slot_mut(block) = Matrix::checked(cand, "dtl_update_step")?;
    }
    Ok(next)
}

/// Transform update for `weight ||T X - Z||^2 + eps (||T||^2 - sum log sigma(T))`,
/// obtained by dividing through by `weight`.
pub fn weighted_transform_update(x: &Matrix, z: &Matrix, weight: f64, eps: f64) -> Result<Matrix> {
    if !(weight > 0.0) {
        return Err(Error::invalid("data weight must be positive"));
    }
    let t = transform_update_raw(x.inner(), z.inner(), eps / weight, 1.0, None)?;
    Matrix::checked(t, "weighted_transform_update")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    LabelMap,
    /// Zero-based transform index.
    Transform(usize),
    Code,
    /// Zero-based hidden-code index.
    Hidden(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtlState {
    pub transforms: Vec<Matrix>,
    /// `C1..C(K-1)`; empty for depth 1.
    pub hidden: Vec<Matrix>,
    pub z: Matrix,
    pub label_map: Matrix,
    hints: StepHints,
}

impl DtlState {
    pub fn new(transforms: Vec<Matrix>, hidden: Vec<Matrix>, z: Matrix, label_map: Matrix) -> Self {
        let blocks = 2 * transforms.len() + 1;
        DtlState {
            transforms,
            hidden,
            z,
            label_map,
            hints: StepHints::new(blocks),
        }
    }
}

impl BlockState for DtlState {
    type Block = Block;

    fn slot_mut(&mut self, block: Block) -> &mut Matrix {
        match block {
            Block::LabelMap => &mut self.label_map,
            Block::Transform(i) => &mut self.transforms[i],
            Block::Code => &mut self.z,
            Block::Hidden(i) => &mut self.hidden[i],
        }
    }
}

pub type DtlStepReport = StepReport<Block>;

#[derive(Debug, Clone)]
pub struct DtlTrainer {
    x: Matrix,
    y: DMatrix<f64>,
    config: TrainConfig,
    input_scale: f64,
}

impl DtlTrainer {
    pub fn new(x: &Matrix, y: &Matrix, config: &TrainConfig) -> Result<Self> {
        let config = config.resolved(&DTL_DEFAULT_LAYERS)?;
        if x.ncols() != y.ncols() {
            return Err(Error::dims(
                "train_mlcdtl",
                format!("{} label columns", x.ncols()),
                format!("{}", y.ncols()),
            ));
        }
        if x.nrows() == 0 || x.ncols() == 0 || y.nrows() == 0 {
            return Err(Error::invalid("training data must be non-empty"));
        }
        check_binary(y)?;
        let widest = config.layer_sizes.iter().copied().max().unwrap_or(0);
        if x.ncols() < widest {
            log::warn!(
                "{} training samples is fewer than the widest layer ({widest})",
                x.ncols()
            );
        }
        let input_scale = config.input_scale.resolve(x.inner())?;
        Ok(DtlTrainer {
            x: Matrix::checked(x.inner() / input_scale, "input scaling")?,
            y: y.inner().clone(),
            config,
            input_scale,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    fn depth(&self) -> usize {
        self.config.layer_sizes.len()
    }

    fn act(&self) -> ActivationSpec {
        self.config.activation
    }

    fn block_order(&self) -> Vec<Block> {
        let k = self.depth();
        let mut order = vec![Block::LabelMap];
        order.extend((0..k).map(Block::Transform));
        order.push(Block::Code);
        order.extend((0..k - 1).map(Block::Hidden));
        order
    }

    /// Input of transform `i`: `X` for the first, `C_i` otherwise.
    fn input<'a>(&'a self, st: &'a DtlState, i: usize) -> &'a Matrix {
        if i == 0 {
            &self.x
        } else {
            &st.hidden[i - 1]
        }
    }

    /// Gaussian transforms and forward-propagated codes, then `M` fit to the labels.
    pub fn initial_state(&self) -> Result<DtlState> {
        let layers = &self.config.layer_sizes;
        let act = self.act();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut cols = self.x.nrows();
        let mut transforms = Vec::with_capacity(layers.len());
        for &k in layers {
            let t = gaussian_matrix(&mut rng, k, cols, (1.0 / cols as f64).sqrt());
            transforms.push(Matrix::checked(t, "transform init")?);
            cols = k;
        }
        let mut hidden = Vec::with_capacity(layers.len() - 1);
        let mut c = self.x.inner().clone();
        for t in &transforms[..layers.len() - 1] {
            c = act.forward_raw(&(t.inner() * &c));
            hidden.push(Matrix::checked(c.clone(), "hidden init")?);
        }
        let z = transforms[layers.len() - 1].inner() * &c;
        let label_map = ridge_solve_right_raw(&z, &self.y, self.config.ridge())?;
        Ok(DtlState::new(
            transforms,
            hidden,
            Matrix::checked(z, "code init")?,
            Matrix::checked(label_map, "label map init")?,
        ))
    }

    /// `[fit, label, reg_1..reg_K, coupling_1..coupling_(K-1)]`, already weighted.
    pub fn objective_terms(&self, st: &DtlState) -> Vec<f64> {
        (0..2 * self.depth() + 1)
            .map(|idx| self.term(st, idx))
            .collect()
    }

    pub fn objective(&self, st: &DtlState) -> f64 {
        self.objective_terms(st).iter().sum()
    }

    fn term(&self, st: &DtlState, idx: usize) -> f64 {
        let k = self.depth();
        let cfg = &self.config;
        match idx {
            0 => frob_sq(
                &(st.transforms[k - 1].inner() * self.input(st, k - 1).inner() - st.z.inner()),
            ),
            1 => {
                if cfg.lambda == 0.0 {
                    0.0
                } else {
                    cfg.lambda * frob_sq(&(&self.y - st.label_map.inner() * st.z.inner()))
                }
            }
            i if i < 2 + k => {
                let t = st.transforms[i - 2].inner();
                match log_pseudo_det(t) {
                    Some(ld) => cfg.eps * (frob_sq(t) - ld),
                    None => f64::INFINITY,
                }
            }
            i => {
                let j = i - 2 - k;
                let pred = self
                    .act()
                    .forward_raw(&(st.transforms[j].inner() * self.input(st, j).inner()));
                cfg.mu * frob_sq(&(st.hidden[j].inner() - pred))
            }
        }
    }

    fn affected_terms(&self, block: Block) -> Vec<usize> {
        let k = self.depth();
        match block {
            Block::LabelMap => vec![1],
            Block::Transform(i) if i == k - 1 => vec![0, 2 + i],
            Block::Transform(i) => vec![2 + i, 2 + k + i],
            Block::Code => vec![0, 1],
            Block::Hidden(j) if j + 1 == k - 1 => vec![0, 2 + k + j],
            Block::Hidden(j) => vec![2 + k + j, 2 + k + j + 1],
        }
    }

    fn candidate(&self, st: &DtlState, block: Block) -> Result<DMatrix<f64>> {
        let k = self.depth();
        let act = self.act();
        let cfg = &self.config;
        match block {
            Block::LabelMap => ridge_solve_right_raw(st.z.inner(), &self.y, cfg.ridge()),
            Block::Transform(i) if i == k - 1 => transform_update_raw(
                self.input(st, i).inner(),
                st.z.inner(),
                cfg.eps,
                1.0,
                Some(st.transforms[i].inner()),
            ),
            Block::Transform(i) => transform_update_raw(
                self.input(st, i).inner(),
                &act.inverse_raw(st.hidden[i].inner()),
                cfg.eps / cfg.mu,
                1.0,
                Some(st.transforms[i].inner()),
            ),
            Block::Code => code_raw(
                st.transforms[k - 1].inner(),
                self.input(st, k - 1).inner(),
                &self.y,
                st.label_map.inner(),
                cfg.lambda,
            ),
            Block::Hidden(j) => {
                let coupling =
                    act.forward_raw(&(st.transforms[j].inner() * self.input(st, j).inner()));
                let next = st.transforms[j + 1].inner();
                if j + 1 == k - 1 {
                    last_hidden_raw(next, st.z.inner(), &coupling, cfg.mu)
                } else {
                    inner_hidden_raw(next, &act.inverse_raw(st.hidden[j + 1].inner()), &coupling)
                }
            }
        }
    }

    /// `(R, R .* tanh'(A))` for coupling `j`: `A = T_j C(j-1)`, `R = C_j - tanh(A)`.
    fn coupling_residual(&self, st: &DtlState, j: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = st.transforms[j].inner() * self.input(st, j).inner();
        let f = self.act().forward_raw(&a);
        let r = st.hidden[j].inner() - &f;
        let w = r.zip_map(&f, |r, f| r * (1.0 - f * f));
        (r, w)
    }

    /// Gradient of the full objective with respect to one block.
    pub fn gradient(&self, st: &DtlState, block: Block) -> DMatrix<f64> {
        let k = self.depth();
        let cfg = &self.config;
        let fit_resid =
            || st.transforms[k - 1].inner() * self.input(st, k - 1).inner() - st.z.inner();
        let label_resid = || &self.y - st.label_map.inner() * st.z.inner();
        match block {
            Block::LabelMap => label_resid() * st.z.transpose() * (-2.0 * cfg.lambda),
            Block::Transform(i) => {
                let t = st.transforms[i].inner();
                let mut g = (t * 2.0 - pinv_transpose(t)) * cfg.eps;
                if i == k - 1 {
                    g += fit_resid() * self.input(st, i).transpose() * 2.0;
                } else {
                    let (_, w) = self.coupling_residual(st, i);
                    g -= w * self.input(st, i).transpose() * (2.0 * cfg.mu);
                }
                g
            }
            Block::Code => {
                fit_resid() * -2.0 - st.label_map.tr_mul(&label_resid()) * (2.0 * cfg.lambda)
            }
            Block::Hidden(j) => {
                let (r, _) = self.coupling_residual(st, j);
                let mut g = r * (2.0 * cfg.mu);
                if j + 1 == k - 1 {
                    g += st.transforms[k - 1].tr_mul(&fit_resid()) * 2.0;
                } else {
                    let (_, w) = self.coupling_residual(st, j + 1);
                    g -= st.transforms[j + 1].tr_mul(&w) * (2.0 * cfg.mu);
                }
                g
            }
        }
    }

    /// Guarded cycle: a block candidate is accepted only if the total
    /// objective does not increase.
    pub fn step(&self, st: &mut DtlState, iteration: usize) -> Result<DtlStepReport> {
        let mut terms = self.objective_terms(st);
        let mut report = DtlStepReport::default();
        for (slot, block) in self.block_order().into_iter().enumerate() {
            let cand = self
                .candidate(st, block)
                .map_err(|e| diverged(iteration, e))?;
            if cand.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iteration,
                    detail: format!("non-finite {block:?} update"),
                });
            }
            let affected = self.affected_terms(block);
            let mut hints = std::mem::replace(&mut st.hints, StepHints::new(0));
            let outcome = guarded_update(
                st,
                block,
                slot,
                cand,
                &mut terms,
                &affected,
                |s, a| self.term(s, a),
                |s| self.gradient(s, block),
                &mut hints,
            );
            st.hints = hints;
            report.record(block, outcome.map_err(|e| diverged(iteration, e))?);
        }
        report.objective = terms.iter().sum();
        if !report.objective.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: "objective is not finite".into(),
            });
        }
        Ok(report)
    }

    pub fn fit(&self) -> Result<DtlModel> {
        let mut st = self.initial_state()?;
        let mut trace = vec![self.objective(&st)];
        for iteration in 1..=self.config.max_iter {
            let report = self.step(&mut st, iteration)?;
            if !report.is_clean() {
                log::debug!(
                    "iteration {iteration}: shortened {:?}, gradient {:?}, rejected {:?}",
                    report.shortened,
                    report.gradient,
                    report.rejected
                );
            }
            let prev = *trace.last().expect("trace starts non-empty");
            trace.push(report.objective);
            if (prev - report.objective).abs()
                <= self.config.tol * prev.abs().max(f64::MIN_POSITIVE)
            {
                break;
            }
        }
        log::info!(
            "mlcdtl: {} iterations, objective {:.6e}",
            trace.len() - 1,
            trace.last().copied().unwrap_or(f64::NAN)
        );
        Ok(DtlModel {
            thresholds: vec![0.5; st.label_map.nrows()],
            transforms: st.transforms,
            label_map: st.label_map,
            activation: self.config.activation,
            config: TrainConfig {
                input_scale: InputScale::Fixed(self.input_scale),
                ..self.config.clone()
            },
            input_scale: self.input_scale,
            objective_trace: trace,
            labels: None,
        })
    }
}

/// `(T^+)^T`, the gradient of `sum log sigma(T)`.
fn pinv_transpose(t: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = t.shape();
    let solved = if m <= n {
        nalgebra::Cholesky::new(t * t.transpose()).map(|c| c.solve(t))
    } else {
        nalgebra::Cholesky::new(t.tr_mul(t)).map(|c| c.solve(&t.transpose()).transpose())
    };
    solved.unwrap_or_else(|| {
        t.clone()
            .pseudo_inverse(f64::EPSILON)
            .map(|p| p.transpose())
            .unwrap_or_else(|_| DMatrix::zeros(m, n))
    })
}

fn code_raw(
    t_last: &DMatrix<f64>,
    input: &DMatrix<f64>,
    y: &DMatrix<f64>,
    m: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let rhs = t_last * input + m.tr_mul(y) * lambda;
    solve_normal("code update", m.tr_mul(m) * lambda, rhs, Ridge::Fixed(1.0))
}

fn inner_hidden_raw(
    t_next: &DMatrix<f64>,
    next_pre: &DMatrix<f64>,
    coupling: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let rhs = t_next.tr_mul(next_pre) + coupling;
    solve_normal(
        "hidden update",
        t_next.tr_mul(t_next),
        rhs,
        Ridge::Fixed(1.0),
    )
}

fn last_hidden_raw(
    t_last: &DMatrix<f64>,
    z: &DMatrix<f64>,
    coupling: &DMatrix<f64>,
    mu: f64,
) -> Result<DMatrix<f64>> {
    let rhs = t_last.tr_mul(z) + coupling * mu;
    solve_normal(
        "hidden update",
        t_last.tr_mul(t_last),
        rhs,
        Ridge::Fixed(mu),
    )
}

/// Closed-form block minimizers, one per sub-problem.
pub mod blocks {
    use super::*;

    fn wrap(m: Result<DMatrix<f64>>, op: &str) -> Result<Matrix> {
        Matrix::checked(m?, op)
    }

    /// `argmin_M ||Y - M Z||^2`.
    pub fn label_map(y: &Matrix, z: &Matrix, ridge: Ridge) -> Result<Matrix> {
        wrap(
            ridge_solve_right_raw(z.inner(), y.inner(), ridge),
            "label_map",
        )
    }

    /// `argmin_Z ||T_K C - Z||^2 + lambda ||Y - M Z||^2`.
    pub fn code(
        t_last: &Matrix,
        input: &Matrix,
        y: &Matrix,
        m: &Matrix,
        lambda: f64,
    ) -> Result<Matrix> {
        wrap(code_raw(t_last, input, y, m, lambda), "code")
    }

    /// `argmin_C ||atanh(next) - T_next C||^2 + ||C - tanh(T input)||^2`.
    pub fn inner_hidden(
        t: &Matrix,
        input: &Matrix,
        t_next: &Matrix,
        next: &Matrix,
        act: &ActivationSpec,
    ) -> Result<Matrix> {
        let coupling = act.forward_raw(&(t.inner() * input.inner()));
        wrap(
            inner_hidden_raw(t_next, &act.inverse_raw(next), &coupling),
            "inner_hidden",
        )
    }

    /// `argmin_C ||T_K C - Z||^2 + mu ||C - tanh(T input)||^2`.
    pub fn last_hidden(
        t: &Matrix,
        input: &Matrix,
        t_last: &Matrix,
        z: &Matrix,
        mu: f64,
        act: &ActivationSpec,
    ) -> Result<Matrix> {
        let coupling = act.forward_raw(&(t.inner() * input.inner()));
        wrap(last_hidden_raw(t_last, z, &coupling, mu), "last_hidden")
    }
}
