//! Dense-matrix primitives shared by every solver.
//!
//! [`Matrix`] wraps a column-major `nalgebra::DMatrix<f64>` and guarantees that
//! every stored entry is finite. Serialized matrices are written row-major.
//! Decompositions (Cholesky, SVD) are delegated to nalgebra; the functions here
//! add the validation and conventions the trainers rely on.

use std::fmt;
use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, Dyn, SVD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense real matrix whose entries are all finite.
#[derive(Clone, PartialEq)]
pub struct Matrix(DMatrix<f64>);

impl Matrix {
    /// Wraps `inner`, rejecting NaN or infinite entries.
    pub fn new(inner: DMatrix<f64>) -> Result<Self> {
        if let Some(pos) = inner.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % inner.nrows(), pos / inner.nrows());
            return Err(Error::NonFinite(format!("matrix entry ({r}, {c})")));
        }
        Ok(Matrix(inner))
    }

    /// Like [`Matrix::new`] but names the producing operation in the error.
    pub(crate) fn checked(inner: DMatrix<f64>, context: &str) -> Result<Self> {
        if inner.iter().all(|v| v.is_finite()) {
            Ok(Matrix(inner))
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Matrix(DMatrix::identity(n, n))
    }

    /// Builds a matrix from row-major data.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::from_row_slice",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Matrix::new(DMatrix::from_row_slice(rows, cols, data))
    }

    /// Builds a matrix from a list of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Matrix::from_row_slice(rows.len(), cols, &flat)
    }

    pub fn inner(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        let (r, c) = self.0.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    /// Columns `idx` in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        Matrix(self.0.select_columns(idx.iter()))
    }
}

impl Deref for Matrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl TryFrom<DMatrix<f64>> for Matrix {
    type Error = Error;

    fn try_from(value: DMatrix<f64>) -> Result<Self> {
        Matrix::new(value)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{:?}{}", self.0.shape(), self.0)
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr {
            rows: self.nrows(),
            cols: self.ncols(),
            data: self.to_row_major(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(deserializer)?;
        Matrix::from_row_slice(repr.rows, repr.cols, &repr.data).map_err(serde::de::Error::custom)
    }
}

/// Squared Frobenius norm.
pub fn frob_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Regularization used by least-squares solves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    /// `1e-8` times the mean diagonal of the normal matrix.
    #[default]
    Auto,
    Fixed(f64),
}

pub(crate) const AUTO_RIDGE_SCALE: f64 = 1e-8;

impl Ridge {
    pub(crate) fn from_option(delta: Option<f64>) -> Self {
        delta.map_or(Ridge::Auto, Ridge::Fixed)
    }

    /// Resolves the ridge for a given normal matrix.
    pub fn resolve(&self, normal: &DMatrix<f64>) -> f64 {
        match *self {
            Ridge::Fixed(d) => d,
            Ridge::Auto => {
                let n = normal.nrows().max(1) as f64;
                let mean_diag = normal.diagonal().iter().sum::<f64>() / n;
                AUTO_RIDGE_SCALE * mean_diag.abs().max(f64::MIN_POSITIVE)
            }
        }
    }
}

/// Cholesky factor of `normal + delta I`.
pub(crate) fn factor_normal(
    op: &'static str,
    mut normal: DMatrix<f64>,
    ridge: Ridge,
) -> Result<Cholesky<f64, Dyn>> {
    let delta = ridge.resolve(&normal);
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!(
            "{op}: ridge delta must be nonnegative"
        )));
    }
    for i in 0..normal.nrows() {
        normal[(i, i)] += delta;
    }
    Cholesky::new(normal).ok_or(Error::Singular(op))
}

/// Solves `(normal + delta I) W = rhs` for SPD `normal`.
pub(crate) fn solve_normal(
    op: &'static str,
    normal: DMatrix<f64>,
    rhs: DMatrix<f64>,
    ridge: Ridge,
) -> Result<DMatrix<f64>> {
    let chol = factor_normal(op, normal, ridge)?;
    let out = chol.solve(&rhs);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Singular(op))
    }
}

/// `argmin_W ||A W - B||^2 + delta ||W||^2`, on raw matrices.
pub(crate) fn ridge_solve_raw(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ridge: Ridge,
) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::dims(
            "ridge_solve",
            format!("{} rows in B", a.nrows()),
            format!("{} rows", b.nrows()),
        ));
    }
    solve_normal("ridge_solve", a.tr_mul(a), a.tr_mul(b), ridge)
}

/// Right-hand ridge regression: `argmin_W ||W A - B||^2 + delta ||W||^2`.
pub(crate) fn ridge_solve_right_raw(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ridge: Ridge,
) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::dims(
            "ridge_solve",
            format!("{} columns in B", a.ncols()),
            format!("{} columns", b.ncols()),
        ));
    }
    let normal = a * a.transpose();
    let rhs = a * b.transpose();
    Ok(solve_normal("ridge_solve", normal, rhs, ridge)?.transpose())
}

/// Ridge least squares: returns `(A^T A + delta I)^{-1} A^T B`.
///
/// With `delta = 0` the normal matrix must be invertible, otherwise
/// [`Error::Singular`] is returned.
pub fn ridge_solve(a: &Matrix, b: &Matrix, delta: f64) -> Result<Matrix> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::invalid(
            "ridge_solve: delta must be a finite nonnegative number",
        ));
    }
    let w = ridge_solve_raw(a, b, Ridge::Fixed(delta))?;
    Matrix::checked(w, "ridge_solve")
}

/// Zeroes entries with `|z| < tau`; entries with `|z| >= tau` are kept.
pub fn hard_threshold(z: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("hard_threshold: tau must be positive"));
    }
    Ok(Matrix(hard_threshold_raw(z, tau)))
}

pub(crate) fn hard_threshold_raw(z: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    z.map(|v| if v.abs() >= tau { v } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
}

/// Elementwise activation with a clamped inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    /// Inverse inputs are clamped to `[-1 + clamp_delta, 1 - clamp_delta]`.
    pub clamp_delta: f64,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        ActivationSpec {
            kind: ActivationKind::Tanh,
            clamp_delta: 1e-6,
        }
    }
}

impl ActivationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clamp_delta > 0.0 && self.clamp_delta <= 0.1 {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "activation clamp_delta must lie in (0, 0.1], got {}",
                self.clamp_delta
            )))
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn invert(&self, y: f64) -> f64 {
        let bound = 1.0 - self.clamp_delta;
        match self.kind {
            ActivationKind::Tanh => y.clamp(-bound, bound).atanh(),
        }
    }

    pub(crate) fn forward_raw(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.map(|v| self.apply(v))
    }

    pub(crate) fn inverse_raw(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        y.map(|v| self.invert(v))
    }
}

/// Elementwise `tanh`.
pub fn activation_forward(x: &Matrix, spec: &ActivationSpec) -> Matrix {
    Matrix(spec.forward_raw(x))
}

/// Elementwise `atanh` of the clamped input; total on all reals.
pub fn activation_inverse(y: &Matrix, spec: &ActivationSpec) -> Matrix {
    Matrix(spec.inverse_raw(y))
}

const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `S = L L^T`.
pub fn spd_cholesky(s: &Matrix) -> Result<Matrix> {
    let (n, m) = s.shape();
    if n != m {
        return Err(Error::dims(
            "spd_cholesky",
            "square matrix",
            format!("{n}x{m}"),
        ));
    }
    let scale = s.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (s[(i, j)] - s[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric("spd_cholesky"));
            }
        }
    }
    let chol = nalgebra::Cholesky::new(s.inner().clone())
        .ok_or(Error::NotPositiveDefinite("spd_cholesky"))?;
    Matrix::checked(chol.l(), "spd_cholesky")
}

/// Full singular value decomposition `A = U diag(s) V^T`.
///
/// `U` is `m x m`, `V` is `n x n`, and `s` holds the `min(m, n)` singular
/// values in descending order. Columns beyond the thin factors are an
/// orthonormal completion.
pub fn full_svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    let svd = SVD::new(a.inner().clone(), true, true);
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let u_thin = svd.u.ok_or(Error::NonFinite("full_svd: U".into()))?;
    let v_thin = svd
        .v_t
        .ok_or(Error::NonFinite("full_svd: V".into()))?
        .transpose();
    let u = complete_orthonormal(&u_thin, m);
    let v = complete_orthonormal(&v_thin, n);
    Ok((
        Matrix::checked(u, "full_svd")?,
        s,
        Matrix::checked(v, "full_svd")?,
    ))
}

/// Extends the orthonormal columns of `q` to an orthonormal basis of R^n.
fn complete_orthonormal(q: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = q.ncols();
    if k >= n {
        return q.columns(0, n).into_owned();
    }
    let mut basis: Vec<nalgebra::DVector<f64>> = (0..k).map(|j| q.column(j).into_owned()).collect();
    while basis.len() < n {
        // pick the coordinate axis with the largest residual
        let mut best: Option<(f64, nalgebra::DVector<f64>)> = None;
        for axis in 0..n {
            let mut v = nalgebra::DVector::zeros(n);
            v[axis] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let proj = b.dot(&v);
                    v.axpy(-proj, b, 1.0);
                }
            }
            let norm = v.norm();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, v));
            }
        }
        let (norm, v) = best.expect("n > 0");
        basis.push(v / norm);
    }
    DMatrix::from_columns(&basis)
}

/// Entries i.i.d. `N(0, std^2)` drawn from `rng` in column-major order.
pub(crate) fn gaussian_matrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Log of the product of the `min(m, n)` singular values, or `None` when the
/// matrix is rank deficient.
pub(crate) fn log_pseudo_det(t: &DMatrix<f64>) -> Option<f64> {
    let (m, n) = t.shape();
    // Gram matrix on the smaller side: sum log sigma = 0.5 logdet(G)
    let gram = if m <= n {
        t * t.transpose()
    } else {
        t.tr_mul(t)
    };
    let chol = nalgebra::Cholesky::new(gram)?;
    let half = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    half.is_finite().then_some(half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix(DMatrix::from_fn(rows, cols, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(Matrix::new(DMatrix::from_element(2, 2, f64::NAN)).is_err());
        assert!(Matrix::from_row_slice(1, 2, &[1.0, f64::INFINITY]).is_err());
        assert!(Matrix::from_row_slice(1, 2, &[1.0]).is_err());
    }

    #[test]
    fn serializes_row_major() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(
            json,
            r#"{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}"#
        );
        let back: Matrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ridge_identity_system() {
        let a = Matrix::identity(2);
        let b = Matrix::from_row_slice(2, 1, &[3.0, 4.0]).unwrap();
        let w = ridge_solve(&a, &b, 0.0).unwrap();
        assert_eq!(w.to_row_major(), vec![3.0, 4.0]);
    }

    #[test]
    fn ridge_scalar_with_delta() {
        let one = Matrix::from_row_slice(1, 1, &[1.0]).unwrap();
        let w = ridge_solve(&one, &one, 1.0).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ridge_reports_singular_and_mismatch() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(3, 1);
        let err = ridge_solve(&a, &b, 0.0).unwrap_err();
        assert!(err.to_string().contains("supply delta > 0"), "{err}");
        assert!(ridge_solve(&a, &Matrix::zeros(2, 1), 0.1).is_err());
        assert!(ridge_solve(&a, &b, -1.0).is_err());
    }

    // Gradient descent on ||AW - B||^2 + delta ||W||^2, independent of the
    // Cholesky path.
    #[test]
    fn ridge_matches_gradient_descent_oracle() {
        let a = random(6, 4, 11);
        let b = random(6, 2, 12);
        let delta = 0.1;
        let w = ridge_solve(&a, &b, delta).unwrap();

        let ata = a.tr_mul(&a);
        let lip = 2.0 * (ata.symmetric_eigenvalues().max() + delta);
        let mut x = DMatrix::zeros(4, 2);
        for _ in 0..200_000 {
            let grad = 2.0 * (a.tr_mul(&(a.inner() * &x - b.inner())) + delta * &x);
            x -= grad / lip;
        }
        assert!(rel(w.inner(), &x) <= 1e-8, "rel err {}", rel(w.inner(), &x));
    }

    #[test]
    fn hard_threshold_examples() {
        let z = Matrix::zeros(2, 3);
        assert_eq!(hard_threshold(&z, 1.0).unwrap(), z);
        let z = Matrix::from_row_slice(2, 2, &[0.5, 2.0, -3.0, 0.1]).unwrap();
        let out = hard_threshold(&z, 1.0).unwrap();
        assert_eq!(out.to_row_major(), vec![0.0, 2.0, -3.0, 0.0]);
        let small = hard_threshold(&z, 0.05).unwrap();
        assert_eq!(small, z);
        assert!(hard_threshold(&z, 0.0).is_err());
    }

    #[test]
    fn activation_examples() {
        let spec = ActivationSpec::default();
        let zero = Matrix::zeros(1, 1);
        assert_eq!(activation_forward(&zero, &spec)[(0, 0)], 0.0);
        assert_eq!(activation_inverse(&zero, &spec)[(0, 0)], 0.0);
        let half = Matrix::from_row_slice(1, 1, &[0.5]).unwrap();
        assert!((activation_forward(&half, &spec)[(0, 0)] - 0.46211716).abs() < 1e-8);
        let two = Matrix::from_row_slice(1, 1, &[2.0]).unwrap();
        let back = activation_inverse(&activation_forward(&two, &spec), &spec);
        assert!((back[(0, 0)] - 2.0).abs() < 1e-9);
        let one = Matrix::from_row_slice(1, 1, &[1.0]).unwrap();
        let inv = activation_inverse(&one, &spec)[(0, 0)];
        assert_eq!(inv, (1.0 - 1e-6_f64).atanh());
        assert!(inv.is_finite());
    }

    #[test]
    fn activation_spec_validation() {
        assert!(ActivationSpec {
            clamp_delta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ActivationSpec {
            clamp_delta: 0.2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ActivationSpec {
            clamp_delta: 0.1,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(
            spd_cholesky(&Matrix::identity(3)).unwrap(),
            Matrix::identity(3)
        );
        let d = Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]).unwrap();
        assert_eq!(
            spd_cholesky(&d).unwrap().to_row_major(),
            vec![2.0, 0.0, 0.0, 3.0]
        );
        let indefinite = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            spd_cholesky(&indefinite),
            Err(Error::NotPositiveDefinite(_))
        ));
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(spd_cholesky(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        for seed in 0..10 {
            let a = random(7, 7, seed);
            let s = Matrix(a.inner() * a.transpose() + DMatrix::identity(7, 7));
            let l = spd_cholesky(&s).unwrap();
            for i in 0..7 {
                assert!(l[(i, i)] > 0.0);
                for j in i + 1..7 {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
            assert!(rel(&(l.inner() * l.transpose()), s.inner()) <= 1e-10);
        }
    }

    #[test]
    fn svd_examples() {
        let (_, s, _) = full_svd(&Matrix::identity(4)).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-14));

        let u = nalgebra::DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let v = nalgebra::DVector::from_vec(vec![0.0, 1.0]);
        let (_, s, _) = full_svd(&Matrix(&u * v.transpose())).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
    }

    #[test]
    fn svd_full_factors_reconstruct() {
        for (m, n, seed) in [(5, 3, 1), (3, 5, 2), (4, 4, 3)] {
            let a = random(m, n, seed);
            let (u, s, v) = full_svd(&a).unwrap();
            assert_eq!(u.shape(), (m, m));
            assert_eq!(v.shape(), (n, n));
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            let mut sigma = DMatrix::zeros(m, n);
            for (i, sv) in s.iter().enumerate() {
                sigma[(i, i)] = *sv;
            }
            let recon = u.inner() * sigma * v.transpose();
            assert!(rel(&recon, a.inner()) <= 1e-10);
            assert!(rel(&u.tr_mul(&u), &DMatrix::identity(m, m)) <= 1e-12);
            assert!(rel(&v.tr_mul(&v), &DMatrix::identity(n, n)) <= 1e-12);
        }
    }

    #[test]
    fn log_pseudo_det_matches_singular_values() {
        for (m, n) in [(3, 5), (5, 3), (4, 4)] {
            let t = random(m, n, 77);
            let s = SVD::new(t.inner().clone(), false, false).singular_values;
            let expected: f64 = s.iter().map(|v| v.ln()).sum();
            assert!((log_pseudo_det(&t).unwrap() - expected).abs() < 1e-10);
        }
        assert!(log_pseudo_det(&DMatrix::zeros(2, 3)).is_none());
    }

    proptest! {
        #[test]
        fn hard_threshold_is_idempotent(data in prop::collection::vec(-5.0f64..5.0, 12), tau in 0.01f64..3.0) {
            let z = Matrix::from_row_slice(3, 4, &data).unwrap();
            let once = hard_threshold(&z, tau).unwrap();
            let twice = hard_threshold(&once, tau).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn activation_round_trips(x in -5.0f64..5.0, y in -0.999f64..0.999) {
            let spec = ActivationSpec::default();
            prop_assert!((spec.invert(spec.apply(x)) - x).abs() <= 1e-9);
            prop_assert!((spec.apply(spec.invert(y)) - y).abs() <= 1e-9);
            prop_assert!((spec.apply(x) + spec.apply(-x)).abs() == 0.0);
        }

        #[test]
        fn ridge_satisfies_normal_equations(seed in 0u64..1000, delta in 0.0f64..2.0) {
            let a = random(6, 4, seed);
            let b = random(6, 3, seed + 1);
            let w = ridge_solve(&a, &b, delta).unwrap();
            let atb = a.tr_mul(&b);
            let resid = (a.tr_mul(&a) + delta * DMatrix::identity(4, 4)) * w.inner() - &atb;
            prop_assert!(resid.norm() <= 1e-8 * atb.norm().max(1e-12));
        }
    }
}
