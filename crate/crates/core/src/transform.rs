//! Sparsifying transform learning.
//!
//! The transform update minimizes
//!
//! ```text
//! ||T X - Z||_F^2 + lambda * (eps * ||T||_F^2 - sum_i log sigma_i(T))
//! ```
//!
//! over `T` (`m x n`). With `X X^T + lambda eps I = L L^T` and the thin SVD
//! `L^{-1} X Z^T = P S Q^T`, the minimizer is
//! `T = 0.5 Q (S + (S^2 + 2 lambda I)^{1/2}) P^T L^{-1}` whenever `m >= n`.
//! For wide transforms (`m < n`) that expression is only a starting point and
//! is refined to stationarity with L-BFGS.

use nalgebra::{Cholesky, DMatrix, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{frob_sq, gaussian_matrix, hard_threshold_raw, log_pseudo_det, Matrix};

/// Shallow transform-learning problem.
#[derive(Debug, Clone)]
pub struct TransformProblem {
    /// Data, one sample per column (`n x N`).
    pub x: Matrix,
    /// Number of transform rows.
    pub m: usize,
    pub lambda: f64,
    pub eps: f64,
    /// Hard-threshold level for the coefficients.
    pub tau: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl TransformProblem {
    pub fn validate(&self) -> Result<()> {
        let (n, samples) = self.x.shape();
        if n == 0 || samples == 0 || self.m == 0 {
            return Err(Error::invalid("transform problem needs n, N, m >= 1"));
        }
        if !(self.lambda > 0.0 && self.eps > 0.0) {
            return Err(Error::invalid(
                "transform learning needs lambda > 0 and eps > 0",
            ));
        }
        if !(self.tau > 0.0) || self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::invalid(
                "transform problem needs tau > 0, max_iter >= 1, tol > 0",
            ));
        }
        Ok(())
    }
}

/// Result of [`train_shallow_transform`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShallowTransform {
    pub t: Matrix,
    pub z: Matrix,
    /// Objective after every alternation.
    pub objective_trace: Vec<f64>,
}

/// `||T X - Z||^2 + lambda (eps ||T||^2 - sum log sigma(T))`; `None` if `T`
/// is rank deficient.
pub fn transform_objective(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    t: &DMatrix<f64>,
    lambda: f64,
    eps: f64,
) -> Option<f64> {
    let logdet = log_pseudo_det(t)?;
    Some(frob_sq(&(t * x - z)) + lambda * (eps * frob_sq(t) - logdet))
}

/// Closed-form (square and tall) or refined (wide) transform update.
pub fn transform_update(x: &Matrix, z: &Matrix, lambda: f64, eps: f64) -> Result<Matrix> {
    let t = transform_update_raw(x, z, lambda, eps, None)?;
    Matrix::checked(t, "transform_update")
}

/// Transform update that never returns something worse than `warm`.
pub(crate) fn transform_update_raw(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    lambda: f64,
    eps: f64,
    warm: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    if x.ncols() != z.ncols() {
        return Err(Error::dims(
            "transform_update",
            format!("{} samples in Z", x.ncols()),
            format!("{}", z.ncols()),
        ));
    }
    if !(lambda > 0.0 && eps > 0.0) {
        return Err(Error::invalid(
            "transform_update needs lambda > 0 and eps > 0",
        ));
    }
    let n = x.nrows();
    let m = z.nrows();

    let mut normal = x * x.transpose();
    for i in 0..n {
        normal[(i, i)] += lambda * eps;
    }
    let chol = Cholesky::new(normal).ok_or(Error::NotPositiveDefinite("transform_update"))?;
    let l = chol.l();
    let xzt = x * z.transpose();
    let k = l
        .solve_lower_triangular(&xzt)
        .ok_or(Error::NotPositiveDefinite("transform_update"))?;

    let svd = SVD::new(k.clone(), true, true);
    let p = svd.u.as_ref().expect("u requested");
    let q = svd.v_t.as_ref().expect("v requested").transpose();
    let scaled = svd
        .singular_values
        .map(|s| 0.5 * (s + (s * s + 2.0 * lambda).sqrt()));
    // P^T L^{-1} = (L^{-T} P)^T
    let linv_t_p = l
        .transpose()
        .solve_upper_triangular(p)
        .ok_or(Error::NotPositiveDefinite("transform_update"))?;
    let closed = (q * DMatrix::from_diagonal(&scaled)) * linv_t_p.transpose();

    if m >= n {
        return Ok(closed);
    }

    let refine = WideRefinement::new(&l, &k, lambda)
        .ok_or(Error::NotPositiveDefinite("transform_update"))?;
    let mut w0 = &closed * &l;
    if let Some(warm) = warm {
        if warm.shape() == (m, n) {
            let w_warm = warm * &l;
            if let (Some(fw), Some(fc)) = (refine.value(&w_warm), refine.value(&w0)) {
                if fw < fc {
                    w0 = w_warm;
                }
            }
        }
    }
    let w = refine.minimize(w0);
    // T = W L^{-1}
    let t = l
        .transpose()
        .solve_upper_triangular(&w.transpose())
        .ok_or(Error::NotPositiveDefinite("transform_update"))?
        .transpose();
    Ok(t)
}

/// Wide-transform objective in whitened coordinates `W = T L`:
/// `||W - K^T||^2 - (lambda / 2) logdet(W B W^T)` with `B = L^{-1} L^{-T}`,
/// so that `W B W^T = T T^T`.
struct WideRefinement {
    target: DMatrix<f64>,
    metric: DMatrix<f64>,
    lambda: f64,
}

const LBFGS_MEMORY: usize = 12;
const LBFGS_MAX_ITER: usize = 5000;

impl WideRefinement {
    fn new(l: &DMatrix<f64>, k: &DMatrix<f64>, lambda: f64) -> Option<Self> {
        let n = l.nrows();
        let l_inv = l.solve_lower_triangular(&DMatrix::identity(n, n))?;
        Some(WideRefinement {
            target: k.transpose(),
            metric: &l_inv * l_inv.transpose(),
            lambda,
        })
    }

    fn value(&self, w: &DMatrix<f64>) -> Option<f64> {
        self.value_grad(w, false).map(|(v, _)| v)
    }

    fn value_grad(&self, w: &DMatrix<f64>, want_grad: bool) -> Option<(f64, DMatrix<f64>)> {
        let wa = w * &self.metric;
        let gram = &wa * w.transpose();
        let chol = Cholesky::new(gram)?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let diff = w - &self.target;
        let value = frob_sq(&diff) - 0.5 * self.lambda * logdet;
        if !value.is_finite() {
            return None;
        }
        let grad = if want_grad {
            2.0 * diff - self.lambda * chol.solve(&wa)
        } else {
            DMatrix::zeros(0, 0)
        };
        Some((value, grad))
    }

    fn minimize(&self, w0: DMatrix<f64>) -> DMatrix<f64> {
        let Some((mut f, mut g)) = self.value_grad(&w0, true) else {
            return w0;
        };
        let mut w = w0;
        let gtol = 1e-11 * (1.0 + w.norm() + self.target.norm() + self.lambda);
        let mut s_hist: Vec<DMatrix<f64>> = Vec::with_capacity(LBFGS_MEMORY);
        let mut y_hist: Vec<DMatrix<f64>> = Vec::with_capacity(LBFGS_MEMORY);

        for _ in 0..LBFGS_MAX_ITER {
            if g.norm() <= gtol {
                break;
            }
            let mut dir = lbfgs_direction(&g, &s_hist, &y_hist);
            let mut slope = dir.dot(&g);
            if !(slope < 0.0) {
                s_hist.clear();
                y_hist.clear();
                dir = -&g * 0.5;
                slope = dir.dot(&g);
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial = &w + &dir * step;
                if let Some((ft, gt)) = self.value_grad(&trial, true) {
                    if ft <= f + 1e-4 * step * slope {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((w_new, f_new, g_new)) = accepted else {
                break;
            };
            let s = &w_new - &w;
            let y = &g_new - &g;
            if s.dot(&y) > 1e-300 {
                if s_hist.len() == LBFGS_MEMORY {
                    s_hist.remove(0);
                    y_hist.remove(0);
                }
                s_hist.push(s);
                y_hist.push(y);
            }
            let progress = f - f_new;
            w = w_new;
            f = f_new;
            g = g_new;
            if progress <= f64::EPSILON * f.abs() && g.norm() <= 1e3 * gtol {
                break;
            }
        }
        w
    }
}

fn lbfgs_direction(
    g: &DMatrix<f64>,
    s_hist: &[DMatrix<f64>],
    y_hist: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(s_hist.len());
    for (s, y) in s_hist.iter().zip(y_hist).rev() {
        let rho = 1.0 / y.dot(s);
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push((a, rho));
    }
    // the quadratic part has Hessian 2I
    let gamma = match (s_hist.last(), y_hist.last()) {
        (Some(s), Some(y)) => s.dot(y) / y.dot(y),
        _ => 0.5,
    };
    q *= gamma;
    for ((s, y), (a, rho)) in s_hist.iter().zip(y_hist).zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

/// Alternates hard thresholding and the transform update from a seeded
/// Gaussian initialization.
///
/// The traced objective is
/// `||TX - Z||^2 + lambda (eps ||T||^2 - sum log sigma(T)) + tau^2 ||Z||_0`,
/// for which thresholding at `tau` is the exact coefficient minimizer.
pub fn train_shallow_transform(prob: &TransformProblem) -> Result<ShallowTransform> {
    prob.validate()?;
    let x = prob.x.inner();
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(prob.seed);
    let mut t = gaussian_matrix(&mut rng, prob.m, n, (1.0 / n as f64).sqrt());
    let mut z = DMatrix::zeros(prob.m, x.ncols());
    let mut trace = Vec::new();
    let penalty = prob.tau * prob.tau;

    for iter in 0..prob.max_iter {
        z = hard_threshold_raw(&(&t * x), prob.tau);
        t = transform_update_raw(x, &z, prob.lambda, prob.eps, Some(&t))?;
        let nnz = z.iter().filter(|v| **v != 0.0).count() as f64;
        let obj = transform_objective(x, &z, &t, prob.lambda, prob.eps).ok_or_else(|| {
            Error::Diverged {
                iteration: iter,
                detail: "transform lost full rank".into(),
            }
        })? + penalty * nnz;
        if !obj.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                detail: "non-finite objective".into(),
            });
        }
        let prev = trace.last().copied();
        trace.push(obj);
        if let Some(prev) = prev {
            if ((prev - obj) / f64::abs(prev).max(1e-300)).abs() < prob.tol {
                break;
            }
        }
    }
    Ok(ShallowTransform {
        t: Matrix::checked(t, "train_shallow_transform")?,
        z: Matrix::checked(z, "train_shallow_transform")?,
        objective_trace: trace,
    })
}
