//! Multi-label consistent deep dictionary learning.
//!
//! For depth `K` with dictionaries `D1..DK`, hidden codes `C1..C(K-1)` and
//! deepest code `Z`, training minimizes
//!
//! ```text
//! ||X - D1 C1||^2 + lambda ||Y - M Z||^2 + mu sum_i ||C_i - tanh(D(i+1) C(i+1))||^2
//! ```
//!
//! (`C_K = Z`) by cycling exact least-squares block updates in the order
//! `M, D1..DK, Z, C1..C(K-1)`. Blocks whose coupling enters through `tanh`
//! are solved in the linearized `atanh` form; a candidate is kept only if the
//! full objective does not increase, otherwise it is shortened toward the
//! current value.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{InputScale, TrainConfig, DDL_DEFAULT_LAYERS};
use crate::error::{Error, Result};
use crate::guard::{
    guarded_update, BlockState, StepHints, StepReport, ARMIJO, MAX_BACKTRACK, MAX_GRADIENT_HALVINGS,
};
use crate::model::{apply_thresholds, check_binary, LabelInfo, Prediction};
use crate::numerics::{
    factor_normal, frob_sq, gaussian_matrix, ridge_solve_raw, ridge_solve_right_raw, solve_normal,
    ActivationSpec, Matrix, Ridge,
};

/// Trained dictionary model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdlModel {
    /// `D1: d x k1`, `D2: k1 x k2`, ...
    pub dicts: Vec<Matrix>,
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

impl DdlModel {
    pub fn depth(&self) -> usize {
        self.dicts.len()
    }

    /// Deepest code for each column of `x`.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.nrows() != self.dicts[0].nrows() {
            return Err(Error::dims(
                "ddl_infer_representation",
                format!("{} rows", self.dicts[0].nrows()),
                format!("{} rows", x.nrows()),
            ));
        }
        let engine = Inference::new(&self.dicts, self.activation, self.config.ridge())?;
        let scaled = x.inner() / self.input_scale;
        let (z, _) = engine.run(&scaled, self.config.infer_iter, self.config.tol)?;
        Matrix::checked(z, "ddl_infer_representation")
    }

    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        let z = self.infer(x)?;
        let scores = Matrix::checked(self.label_map.inner() * z.inner(), "ddl_predict")?;
        let labels = apply_thresholds(&scores, &self.thresholds)?;
        Ok(Prediction { scores, labels })
    }
}

/// Trains a dictionary model; see the module documentation for the objective.
pub fn train_mlcddl(x: &Matrix, y: &Matrix, config: &TrainConfig) -> Result<DdlModel> {
    DdlTrainer::new(x, y, config)?.fit()
}

/// Representation `Z` of test inputs with the dictionaries frozen.
pub fn ddl_infer_representation(x: &Matrix, model: &DdlModel) -> Result<Matrix> {
    model.infer(x)
}

pub fn ddl_predict(x: &Matrix, model: &DdlModel) -> Result<Prediction> {
    model.predict(x)
}

/// One unguarded cycle of exact block updates.
pub fn ddl_update_step(trainer: &DdlTrainer, state: &DdlState) -> Result<DdlState> {
    let mut next = state.clone();
    for block in trainer.block_order() {
        let cand = trainer.candidate(&next, block)?;
        *next.slot_mut(block) = Matrix::checked(cand, "ddl_update_step")?;
    }
    Ok(next)
}

/// All trainable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DdlState {
    pub dicts: Vec<Matrix>,
    /// `C1..C(K-1)`; empty for depth 1.
    pub hidden: Vec<Matrix>,
    pub z: Matrix,
    pub label_map: Matrix,
    hints: StepHints,
}

impl DdlState {
    pub fn new(dicts: Vec<Matrix>, hidden: Vec<Matrix>, z: Matrix, label_map: Matrix) -> Self {
        let blocks = 2 * dicts.len() + 1;
        DdlState {
            dicts,
            hidden,
            z,
            label_map,
            hints: StepHints::new(blocks),
        }
    }

    /// `C(level)` with `level = K - 1` naming `Z`.
    fn code(&self, level: usize) -> &Matrix {
        if level < self.hidden.len() {
            &self.hidden[level]
        } else {
            &self.z
        }
    }

    fn slot_mut(&mut self, block: Block) -> &mut Matrix {
        match block {
            Block::LabelMap => &mut self.label_map,
            Block::Dict(i) => &mut self.dicts[i],
            Block::Code => &mut self.z,
            Block::Hidden(i) => &mut self.hidden[i],
        }
    }
}

impl BlockState for DdlState {
    type Block = Block;

    fn slot_mut(&mut self, block: Block) -> &mut Matrix {
        DdlState::slot_mut(self, block)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    LabelMap,
    /// Zero-based dictionary index.
    Dict(usize),
    Code,
    /// Zero-based hidden-code index.
    Hidden(usize),
}

pub type DdlStepReport = StepReport<Block>;

/// Holds the scaled training data and resolved configuration.
#[derive(Debug, Clone)]
pub struct DdlTrainer {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    config: TrainConfig,
    input_scale: f64,
}

impl DdlTrainer {
    pub fn new(x: &Matrix, y: &Matrix, config: &TrainConfig) -> Result<Self> {
        let config = config.resolved(&DDL_DEFAULT_LAYERS)?;
        if x.ncols() != y.ncols() {
            return Err(Error::dims(
                "train_mlcddl",
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
        Ok(DdlTrainer {
            x: x.inner() / input_scale,
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
        order.extend((0..k).map(Block::Dict));
        order.push(Block::Code);
        order.extend((0..k - 1).map(Block::Hidden));
        order
    }

    /// Gaussian dictionaries, `Z` from unsupervised inference, hidden codes
    /// by forward propagation and `M` fit to the labels.
    pub fn initial_state(&self) -> Result<DdlState> {
        let layers = &self.config.layer_sizes;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut rows = self.x.nrows();
        let mut dicts = Vec::with_capacity(layers.len());
        for &k in layers {
            let d = gaussian_matrix(&mut rng, rows, k, (1.0 / rows as f64).sqrt());
            dicts.push(Matrix::checked(d, "dictionary init")?);
            rows = k;
        }
        let engine = Inference::new(&dicts, self.act(), self.config.ridge())?;
        let (z, _) = engine.run(&self.x, self.config.infer_iter, self.config.tol)?;
        let act = self.act();
        let mut hidden = Vec::with_capacity(layers.len() - 1);
        let mut below = z.clone();
        for i in (1..layers.len()).rev() {
            let c = act.forward_raw(&(dicts[i].inner() * &below));
            hidden.push(c.clone());
            below = c;
        }
        hidden.reverse();
        let label_map = ridge_solve_right_raw(&z, &self.y, self.config.ridge())?;
        Ok(DdlState::new(
            dicts,
            hidden
                .into_iter()
                .map(|c| Matrix::checked(c, "hidden init"))
                .collect::<Result<_>>()?,
            Matrix::checked(z, "code init")?,
            Matrix::checked(label_map, "label map init")?,
        ))
    }

    /// `[data, label, coupling_1, ..., coupling_(K-1)]`, already weighted.
    pub fn objective_terms(&self, st: &DdlState) -> Vec<f64> {
        let k = self.depth();
        let mut terms = vec![0.0; k + 1];
        for (idx, t) in terms.iter_mut().enumerate() {
            *t = self.term(st, idx);
        }
        terms
    }

    pub fn objective(&self, st: &DdlState) -> f64 {
        self.objective_terms(st).iter().sum()
    }

    fn term(&self, st: &DdlState, idx: usize) -> f64 {
        match idx {
            0 => frob_sq(&(&self.x - st.dicts[0].inner() * st.code(0).inner())),
            1 => {
                if self.config.lambda == 0.0 {
                    0.0
                } else {
                    self.config.lambda * frob_sq(&(&self.y - st.label_map.inner() * st.z.inner()))
                }
            }
            _ => {
                let j = idx - 2;
                let pred = self
                    .act()
                    .forward_raw(&(st.dicts[j + 1].inner() * st.code(j + 1).inner()));
                self.config.mu * frob_sq(&(st.code(j).inner() - pred))
            }
        }
    }

    fn affected_terms(&self, block: Block) -> Vec<usize> {
        let k = self.depth();
        match block {
            Block::LabelMap => vec![1],
            Block::Dict(0) => vec![0],
            Block::Dict(i) => vec![i + 1],
            Block::Code if k == 1 => vec![0, 1],
            Block::Code => vec![1, k],
            Block::Hidden(0) => vec![0, 2],
            Block::Hidden(l) => vec![l + 1, l + 2],
        }
    }

    /// Exact minimizer of the block's sub-problem with everything else fixed.
    fn candidate(&self, st: &DdlState, block: Block) -> Result<DMatrix<f64>> {
        let k = self.depth();
        let act = self.act();
        let ridge = self.config.ridge();
        let cfg = &self.config;
        match block {
            Block::LabelMap => label_map_raw(&self.y, &st.z, ridge),
            Block::Dict(0) => dict_raw(&self.x, st.code(0), ridge),
            Block::Dict(i) => dict_raw(&act.inverse_raw(st.code(i - 1)), st.code(i), ridge),
            Block::Code if k == 1 => shallow_code_raw(
                &self.x,
                &st.dicts[0],
                &self.y,
                &st.label_map,
                cfg.lambda,
                ridge,
            ),
            Block::Code => supervised_code_raw(
                &self.y,
                &st.label_map,
                &st.dicts[k - 1],
                &act.inverse_raw(st.code(k - 2)),
                cfg.lambda,
                cfg.mu,
                ridge,
            ),
            Block::Hidden(0) => {
                let target = act.forward_raw(&(st.dicts[1].inner() * st.code(1).inner()));
                first_hidden_raw(&self.x, &st.dicts[0], &target, cfg.mu)
            }
            Block::Hidden(l) => {
                let upper = act.inverse_raw(st.code(l - 1));
                let target = act.forward_raw(&(st.dicts[l + 1].inner() * st.code(l + 1).inner()));
                inner_hidden_raw(&upper, &st.dicts[l], &target)
            }
        }
    }

    /// `(R, R .* tanh'(A))` for coupling `j`: `A = D(j+1) C(j+1)`, `R = C(j) - tanh(A)`.
    fn coupling_residual(&self, st: &DdlState, j: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let a = st.dicts[j + 1].inner() * st.code(j + 1).inner();
        let f = self.act().forward_raw(&a);
        let r = st.code(j).inner() - &f;
        let w = r.zip_map(&f, |r, f| r * (1.0 - f * f));
        (r, w)
    }

    /// Gradient of the full objective with respect to one block.
    pub fn gradient(&self, st: &DdlState, block: Block) -> DMatrix<f64> {
        let k = self.depth();
        let cfg = &self.config;
        let label_resid = || &self.y - st.label_map.inner() * st.z.inner();
        let data_resid = || &self.x - st.dicts[0].inner() * st.code(0).inner();
        match block {
            Block::LabelMap => label_resid() * st.z.transpose() * (-2.0 * cfg.lambda),
            Block::Dict(0) => data_resid() * st.code(0).transpose() * -2.0,
            Block::Dict(i) => {
                let (_, w) = self.coupling_residual(st, i - 1);
                w * st.code(i).transpose() * (-2.0 * cfg.mu)
            }
            Block::Code => {
                let mut g = st.label_map.tr_mul(&label_resid()) * (-2.0 * cfg.lambda);
                if k == 1 {
                    g -= st.dicts[0].tr_mul(&data_resid()) * 2.0;
                } else {
                    let (_, w) = self.coupling_residual(st, k - 2);
                    g -= st.dicts[k - 1].tr_mul(&w) * (2.0 * cfg.mu);
                }
                g
            }
            Block::Hidden(l) => {
                let (r, _) = self.coupling_residual(st, l);
                let mut g = r * (2.0 * cfg.mu);
                if l == 0 {
                    g -= st.dicts[0].tr_mul(&data_resid()) * 2.0;
                } else {
                    let (_, w) = self.coupling_residual(st, l - 1);
                    g -= st.dicts[l].tr_mul(&w) * (2.0 * cfg.mu);
                }
                g
            }
        }
    }

    /// Guarded cycle: every block candidate is accepted only if the total
    /// objective does not increase.
    pub fn step(&self, st: &mut DdlState, iteration: usize) -> Result<DdlStepReport> {
        let mut terms = self.objective_terms(st);
        let mut report = DdlStepReport::default();
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

    pub fn fit(&self) -> Result<DdlModel> {
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
            "mlcddl: {} iterations, objective {:.6e}",
            trace.len() - 1,
            trace.last().copied().unwrap_or(f64::NAN)
        );
        if self.config.refit_label_map {
            let engine = Inference::new(&st.dicts, self.act(), self.config.ridge())?;
            let (z, _) = engine.run(&self.x, self.config.infer_iter, self.config.tol)?;
            st.label_map = Matrix::checked(
                ridge_solve_right_raw(&z, &self.y, self.config.ridge())?,
                "label map refit",
            )?;
        }
        Ok(DdlModel {
            thresholds: vec![0.5; st.label_map.nrows()],
            dicts: st.dicts,
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

pub(crate) fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged { iteration, detail },
        other => other,
    }
}

fn label_map_raw(y: &DMatrix<f64>, z: &Matrix, ridge: Ridge) -> Result<DMatrix<f64>> {
    ridge_solve_right_raw(z.inner(), y, ridge)
}

fn dict_raw(target: &DMatrix<f64>, codes: &Matrix, ridge: Ridge) -> Result<DMatrix<f64>> {
    ridge_solve_right_raw(codes.inner(), target, ridge)
}

fn supervised_code_raw(
    y: &DMatrix<f64>,
    m: &Matrix,
    d_last: &Matrix,
    upper_pre: &DMatrix<f64>,
    lambda: f64,
    mu: f64,
    ridge: Ridge,
) -> Result<DMatrix<f64>> {
    let normal = m.tr_mul(m.inner()) * lambda + d_last.tr_mul(d_last.inner()) * mu;
    let rhs = m.tr_mul(y) * lambda + d_last.tr_mul(upper_pre) * mu;
    solve_normal("code update", normal, rhs, ridge)
}

fn shallow_code_raw(
    x: &DMatrix<f64>,
    d1: &Matrix,
    y: &DMatrix<f64>,
    m: &Matrix,
    lambda: f64,
    ridge: Ridge,
) -> Result<DMatrix<f64>> {
    let normal = d1.tr_mul(d1.inner()) + m.tr_mul(m.inner()) * lambda;
    let rhs = d1.tr_mul(x) + m.tr_mul(y) * lambda;
    solve_normal("code update", normal, rhs, ridge)
}

fn first_hidden_raw(
    x: &DMatrix<f64>,
    d1: &Matrix,
    target: &DMatrix<f64>,
    weight: f64,
) -> Result<DMatrix<f64>> {
    let rhs = d1.tr_mul(x) + target * weight;
    solve_normal(
        "hidden update",
        d1.tr_mul(d1.inner()),
        rhs,
        Ridge::Fixed(weight),
    )
}

fn inner_hidden_raw(
    upper_pre: &DMatrix<f64>,
    d: &Matrix,
    target: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let rhs = d.tr_mul(upper_pre) + target;
    solve_normal("hidden update", d.tr_mul(d.inner()), rhs, Ridge::Fixed(1.0))
}

/// Closed-form block minimizers, one per sub-problem.
///
/// `upper` and `lower` name the codes directly above and below a block:
/// `X` or `C(i-1)` above, `C(i+1)` or `Z` below.
pub mod blocks {
    use super::*;

    fn wrap(m: Result<DMatrix<f64>>, op: &str) -> Result<Matrix> {
        Matrix::checked(m?, op)
    }

    /// `argmin_M ||Y - M Z||^2`.
    pub fn label_map(y: &Matrix, z: &Matrix, ridge: Ridge) -> Result<Matrix> {
        wrap(label_map_raw(y.inner(), z, ridge), "label_map")
    }

    /// `argmin_D1 ||X - D1 C1||^2`.
    pub fn first_dict(x: &Matrix, c1: &Matrix, ridge: Ridge) -> Result<Matrix> {
        wrap(dict_raw(x.inner(), c1, ridge), "first_dict")
    }

    /// `argmin_D ||atanh(upper) - D lower||^2`.
    pub fn inner_dict(
        upper: &Matrix,
        lower: &Matrix,
        act: &ActivationSpec,
        ridge: Ridge,
    ) -> Result<Matrix> {
        wrap(
            dict_raw(&act.inverse_raw(upper), lower, ridge),
            "inner_dict",
        )
    }

    /// `argmin_Z lambda ||Y - M Z||^2 + mu ||atanh(upper) - D_K Z||^2`.
    #[allow(clippy::too_many_arguments)]
    pub fn supervised_code(
        y: &Matrix,
        m: &Matrix,
        d_last: &Matrix,
        upper: &Matrix,
        lambda: f64,
        mu: f64,
        act: &ActivationSpec,
        ridge: Ridge,
    ) -> Result<Matrix> {
        wrap(
            supervised_code_raw(
                y.inner(),
                m,
                d_last,
                &act.inverse_raw(upper),
                lambda,
                mu,
                ridge,
            ),
            "supervised_code",
        )
    }

    /// Depth-1 code: `argmin_Z ||X - D1 Z||^2 + lambda ||Y - M Z||^2`.
    pub fn shallow_code(
        x: &Matrix,
        d1: &Matrix,
        y: &Matrix,
        m: &Matrix,
        lambda: f64,
        ridge: Ridge,
    ) -> Result<Matrix> {
        wrap(
            shallow_code_raw(x.inner(), d1, y.inner(), m, lambda, ridge),
            "shallow_code",
        )
    }

    /// `argmin_C1 ||X - D1 C1||^2 + weight ||C1 - tanh(D2 lower)||^2`.
    pub fn first_hidden(
        x: &Matrix,
        d1: &Matrix,
        d2: &Matrix,
        lower: &Matrix,
        weight: f64,
        act: &ActivationSpec,
    ) -> Result<Matrix> {
        let target = act.forward_raw(&(d2.inner() * lower.inner()));
        wrap(
            first_hidden_raw(x.inner(), d1, &target, weight),
            "first_hidden",
        )
    }

    /// `argmin_C ||atanh(upper) - D C||^2 + ||C - tanh(D_next lower)||^2`.
    pub fn inner_hidden(
        upper: &Matrix,
        d: &Matrix,
        d_next: &Matrix,
        lower: &Matrix,
        act: &ActivationSpec,
    ) -> Result<Matrix> {
        let target = act.forward_raw(&(d_next.inner() * lower.inner()));
        wrap(
            inner_hidden_raw(&act.inverse_raw(upper), d, &target),
            "inner_hidden",
        )
    }

    /// `argmin_Z ||atanh(upper) - D_K Z||^2`; with depth 1 `upper` is `X`
    /// and no inverse activation is applied.
    pub fn unsupervised_code(
        upper: &Matrix,
        d_last: &Matrix,
        act: Option<&ActivationSpec>,
        ridge: Ridge,
    ) -> Result<Matrix> {
        let target = match act {
            Some(a) => a.inverse_raw(upper),
            None => upper.inner().clone(),
        };
        wrap(
            ridge_solve_raw(d_last.inner(), &target, ridge),
            "unsupervised_code",
        )
    }
}

/// Test-time alternation with frozen dictionaries and pre-factored systems.
struct Inference<'a> {
    dicts: &'a [Matrix],
    act: ActivationSpec,
    hidden: Vec<Cholesky<f64, Dyn>>,
    last: Cholesky<f64, Dyn>,
}

impl<'a> Inference<'a> {
    fn new(dicts: &'a [Matrix], act: ActivationSpec, ridge: Ridge) -> Result<Self> {
        let k = dicts.len();
        let hidden = dicts[..k - 1]
            .iter()
            .map(|d| factor_normal("hidden update", d.tr_mul(d.inner()), Ridge::Fixed(1.0)))
            .collect::<Result<_>>()?;
        let d = &dicts[k - 1];
        let last = factor_normal("code update", d.tr_mul(d.inner()), ridge)?;
        Ok(Inference {
            dicts,
            act,
            hidden,
            last,
        })
    }

    fn objective(&self, x: &DMatrix<f64>, codes: &[DMatrix<f64>]) -> f64 {
        let mut total = frob_sq(&(x - self.dicts[0].inner() * &codes[0]));
        for j in 0..codes.len() - 1 {
            total += frob_sq(
                &(&codes[j]
                    - self
                        .act
                        .forward_raw(&(self.dicts[j + 1].inner() * &codes[j + 1]))),
            );
        }
        total
    }

    /// Per-column value of the terms that involve level `l`, given the
    /// level below (`X` for `l = 0`) and the level above, if any.
    fn local_terms(
        &self,
        l: usize,
        lower: &DMatrix<f64>,
        cur: &DMatrix<f64>,
        upper: Option<&DMatrix<f64>>,
    ) -> Vec<f64> {
        let recon = if l == 0 {
            self.dicts[0].inner() * cur
        } else {
            self.act.forward_raw(&(self.dicts[l].inner() * cur))
        };
        let mut vals: Vec<f64> = (lower - recon)
            .column_iter()
            .map(|c| c.norm_squared())
            .collect();
        if let Some(u) = upper {
            let pred = self.act.forward_raw(&(self.dicts[l + 1].inner() * u));
            for (v, c) in vals.iter_mut().zip((cur - pred).column_iter()) {
                *v += c.norm_squared();
            }
        }
        vals
    }

    fn local_gradient(
        &self,
        l: usize,
        lower: &DMatrix<f64>,
        cur: &DMatrix<f64>,
        upper: Option<&DMatrix<f64>>,
    ) -> DMatrix<f64> {
        let mut g = if l == 0 {
            self.dicts[0].tr_mul(&(lower - self.dicts[0].inner() * cur)) * -2.0
        } else {
            let f = self.act.forward_raw(&(self.dicts[l].inner() * cur));
            let w = (lower - &f).zip_map(&f, |r, f| r * (1.0 - f * f));
            self.dicts[l].tr_mul(&w) * -2.0
        };
        if let Some(u) = upper {
            g += (cur - self.act.forward_raw(&(self.dicts[l + 1].inner() * u))) * 2.0;
        }
        g
    }

    /// Installs `cand` column by column without raising any column's
    /// objective: shortened candidates first, then an Armijo gradient step.
    fn guarded_level(
        &self,
        l: usize,
        x: &DMatrix<f64>,
        codes: &mut [DMatrix<f64>],
        cand: &DMatrix<f64>,
        steps: &mut [f64],
    ) {
        let (head, tail) = codes.split_at_mut(l);
        let (cur, rest) = tail.split_first_mut().expect("level in range");
        let lower = if l == 0 { x } else { &head[l - 1] };
        let upper = rest.first();
        let old = cur.clone();
        let base = self.local_terms(l, lower, &old, upper);

        let mut pending: Vec<usize> = (0..old.ncols()).collect();
        let mut t = 1.0;
        for _ in 0..=MAX_BACKTRACK {
            if pending.is_empty() {
                return;
            }
            let o = old.select_columns(&pending);
            let trial = &o + (cand.select_columns(&pending) - &o) * t;
            let up = upper.map(|u| u.select_columns(&pending));
            let vals = self.local_terms(l, &lower.select_columns(&pending), &trial, up.as_ref());
            let mut left = Vec::new();
            for (k, &j) in pending.iter().enumerate() {
                if vals[k] <= base[j] {
                    cur.set_column(j, &trial.column(k));
                } else {
                    left.push(j);
                }
            }
            pending = left;
            t *= 0.5;
        }
        if pending.is_empty() {
            return;
        }

        let lo = lower.select_columns(&pending);
        let up = upper.map(|u| u.select_columns(&pending));
        let o = old.select_columns(&pending);
        let g = self.local_gradient(l, &lo, &o, up.as_ref());
        let mut active: Vec<usize> = (0..pending.len())
            .filter(|&k| {
                let g2 = g.column(k).norm_squared();
                g2 > 0.0 && g2.is_finite()
            })
            .collect();
        for _ in 0..MAX_GRADIENT_HALVINGS {
            if active.is_empty() {
                break;
            }
            let mut trial = o.select_columns(&active);
            for (a, &k) in active.iter().enumerate() {
                let s = steps[pending[k]];
                trial.column_mut(a).axpy(-s, &g.column(k), 1.0);
            }
            let sub_up = up.as_ref().map(|u| u.select_columns(&active));
            let vals = self.local_terms(l, &lo.select_columns(&active), &trial, sub_up.as_ref());
            let mut left = Vec::new();
            for (a, &k) in active.iter().enumerate() {
                let j = pending[k];
                let s = steps[j];
                if vals[a].is_finite()
                    && vals[a] <= base[j] - ARMIJO * s * g.column(k).norm_squared()
                {
                    cur.set_column(j, &trial.column(a));
                    steps[j] = 2.0 * s;
                } else {
                    steps[j] = 0.5 * s;
                    left.push(k);
                }
            }
            active = left;
        }
    }

    /// Returns `(Z, [C1..C(K-1)])`.
    fn run(
        &self,
        x: &DMatrix<f64>,
        max_iter: usize,
        tol: f64,
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let k = self.dicts.len();
        let n = x.ncols();
        let d1tx = self.dicts[0].tr_mul(x);
        if k == 1 {
            let z = self.last.solve(&d1tx);
            return Ok((z, Vec::new()));
        }
        let mut codes: Vec<DMatrix<f64>> = self
            .dicts
            .iter()
            .map(|d| DMatrix::zeros(d.ncols(), n))
            .collect();
        let mut steps = vec![vec![1.0; n]; k];
        let mut prev = self.objective(x, &codes);
        for _ in 0..max_iter {
            for l in 0..k {
                let cand = if l == 0 {
                    let target = self.act.forward_raw(&(self.dicts[1].inner() * &codes[1]));
                    self.hidden[0].solve(&(&d1tx + target))
                } else {
                    let upper = self.act.inverse_raw(&codes[l - 1]);
                    let rhs = self.dicts[l].tr_mul(&upper);
                    if l + 1 < k {
                        let target = self
                            .act
                            .forward_raw(&(self.dicts[l + 1].inner() * &codes[l + 1]));
                        self.hidden[l].solve(&(rhs + target))
                    } else {
                        self.last.solve(&rhs)
                    }
                };
                if cand.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("ddl inference".into()));
                }
                self.guarded_level(l, x, &mut codes, &cand, &mut steps[l]);
            }
            let cur = self.objective(x, &codes);
            if !cur.is_finite() {
                return Err(Error::NonFinite("ddl inference".into()));
            }
            let done = (prev - cur).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE);
            prev = cur;
            if done {
                break;
            }
        }
        let z = codes.pop().expect("depth >= 2");
        Ok((z, codes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(DMatrix::from_fn(rows, cols, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap()
    }

    fn rand_labels(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(DMatrix::from_fn(rows, cols, |_, _| {
            if rng.random_bool(0.5) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    fn small_config(layers: &[usize]) -> TrainConfig {
        TrainConfig {
            max_iter: 15,
            infer_iter: 20,
            ..TrainConfig::default().with_layers(layers)
        }
    }

    #[test]
    fn shapes_chain_for_every_depth() {
        let x = rand_mat(8, 20, 1);
        let y = rand_labels(3, 20, 2);
        for layers in [vec![5], vec![6, 4], vec![6, 5, 4], vec![7, 6, 5, 4]] {
            let model = train_mlcddl(&x, &y, &small_config(&layers)).unwrap();
            let mut rows = 8;
            for (d, &k) in model.dicts.iter().zip(&layers) {
                assert_eq!(d.shape(), (rows, k));
                rows = k;
            }
            assert_eq!(model.label_map.shape(), (3, rows));
            assert_eq!(model.thresholds, vec![0.5; 3]);
        }
    }

    #[test]
    fn trace_never_increases() {
        let x = rand_mat(8, 20, 3);
        let y = rand_labels(2, 20, 4);
        let model = train_mlcddl(&x, &y, &small_config(&[6, 5, 4])).unwrap();
        for w in model.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let x = rand_mat(8, 20, 5);
        let y = rand_labels(2, 20, 6);
        let cfg = small_config(&[6, 4]);
        assert_eq!(
            train_mlcddl(&x, &y, &cfg).unwrap(),
            train_mlcddl(&x, &y, &cfg).unwrap()
        );
    }

    #[test]
    fn zero_lambda_ignores_labels() {
        let x = rand_mat(8, 20, 7);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..small_config(&[6, 5, 4])
        };
        let a = train_mlcddl(&x, &rand_labels(2, 20, 8), &cfg).unwrap();
        let b = train_mlcddl(&x, &rand_labels(2, 20, 9), &cfg).unwrap();
        assert_eq!(a.dicts, b.dicts);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn zero_data_stays_zero() {
        let x = Matrix::zeros(8, 10);
        let y = Matrix::zeros(2, 10);
        let trainer = DdlTrainer::new(&x, &y, &small_config(&[6, 5, 4])).unwrap();
        let st = DdlState::new(
            vec![rand_mat(8, 6, 1), rand_mat(6, 5, 2), rand_mat(5, 4, 3)],
            vec![Matrix::zeros(6, 10), Matrix::zeros(5, 10)],
            Matrix::zeros(4, 10),
            rand_mat(2, 4, 4),
        );
        let next = ddl_update_step(&trainer, &st).unwrap();
        assert!(next.z.iter().all(|&v| v == 0.0));
        assert!(next.hidden.iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_input_infers_zero() {
        let x = rand_mat(8, 20, 10);
        let y = rand_labels(2, 20, 11);
        let model = train_mlcddl(&x, &y, &small_config(&[6, 5, 4])).unwrap();
        let z = model.infer(&Matrix::zeros(8, 3)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = rand_mat(6, 9, 30);
        let y = rand_labels(2, 9, 31);
        for layers in [vec![4], vec![5, 3], vec![5, 4, 3]] {
            let cfg = TrainConfig {
                lambda: 0.7,
                mu: 1.3,
                ..small_config(&layers)
            };
            let trainer = DdlTrainer::new(&x, &y, &cfg).unwrap();
            let mut st = trainer.initial_state().unwrap();
            for (i, c) in st.hidden.iter_mut().enumerate() {
                *c = Matrix::new(
                    c.inner() * 0.5 + rand_mat(c.nrows(), c.ncols(), 40 + i as u64).inner() * 0.3,
                )
                .unwrap();
            }
            for block in trainer.block_order() {
                let g = trainer.gradient(&st, block);
                let base = st.slot_mut(block).clone();
                let h = 1e-6;
                for (r, c) in [(0, 0), (1, 2), (base.nrows() - 1, base.ncols() - 1)] {
                    let mut plus = st.clone();
                    let mut m = base.clone().into_inner();
                    m[(r, c)] += h;
                    *plus.slot_mut(block) = Matrix::new(m.clone()).unwrap();
                    let mut minus = st.clone();
                    m[(r, c)] -= 2.0 * h;
                    *minus.slot_mut(block) = Matrix::new(m).unwrap();
                    let fd = (trainer.objective(&plus) - trainer.objective(&minus)) / (2.0 * h);
                    assert!(
                        (fd - g[(r, c)]).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "{block:?} ({r},{c}): {fd} vs {}",
                        g[(r, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn label_map_satisfies_normal_equations() {
        let x = rand_mat(8, 20, 12);
        let y = rand_labels(3, 20, 13);
        let trainer = DdlTrainer::new(&x, &y, &small_config(&[6, 5, 4])).unwrap();
        let st = trainer.initial_state().unwrap();
        let m = blocks::label_map(&y, &st.z, Ridge::Fixed(0.0)).unwrap();
        let grad = (y.inner() - m.inner() * st.z.inner()) * st.z.transpose();
        assert!(grad.norm() <= 1e-6 * (1.0 + y.norm()));
    }

    #[test]
    fn first_hidden_beats_perturbations() {
        let act = ActivationSpec::default();
        let x = rand_mat(8, 20, 14);
        let d1 = rand_mat(8, 6, 15);
        let d2 = rand_mat(6, 5, 16);
        let c2 = rand_mat(5, 20, 17);
        let mu = 1.7;
        let c1 = blocks::first_hidden(&x, &d1, &d2, &c2, mu, &act).unwrap();
        let target = act.forward_raw(&(d2.inner() * c2.inner()));
        let f = |c: &DMatrix<f64>| {
            frob_sq(&(x.inner() - d1.inner() * c)) + mu * frob_sq(&(c - &target))
        };
        let best = f(c1.inner());
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..100 {
            let eta = DMatrix::from_fn(6, 20, |_, _| rng.random_range(-1e-3..1e-3));
            assert!(best <= f(&(c1.inner() + eta)));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = rand_mat(8, 20, 19);
        assert!(train_mlcddl(&x, &rand_labels(2, 19, 1), &small_config(&[4])).is_err());
        let mut y = rand_labels(2, 20, 1).into_inner();
        y[(1, 3)] = 0.5;
        let y = Matrix::new(y).unwrap();
        assert!(matches!(
            train_mlcddl(&x, &y, &small_config(&[4])),
            Err(Error::NonBinary { .. })
        ));
        let model = train_mlcddl(&x, &rand_labels(2, 20, 1), &small_config(&[4])).unwrap();
        assert!(model.predict(&rand_mat(7, 3, 1)).is_err());
    }
}
