//! Affine-invariant geometry on the manifold of symmetric positive-definite
//! matrices.
//!
//! Every matrix function (square root, logarithm, exponential, power) goes
//! through a symmetric eigendecomposition. Returned matrices are symmetrized
//! as `(M + Mᵀ) / 2` so floating-point drift never accumulates across chained
//! operations.
//!
//! The tangent space at `Σ` is the space of symmetric matrices, equipped with
//! the inner product `⟨U, V⟩_Σ = tr(Σ⁻¹ U Σ⁻¹ V)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for the symmetry check on construction.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Eigenvalues of the whitened target below this fraction of the largest
/// eigenvalue make `log_map` fail.
pub const LOG_CONDITION_FLOOR: f64 = 1e-12;

const FRECHET_MAX_ITER: usize = 100;
const FRECHET_TOLERANCE: f64 = 1e-12;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpdError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("tangent matrix is attached to a different base point")]
    BaseMismatch,
    #[error("geodesic parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("empty point set")]
    Empty,
    #[error("{points} points but {weights} weights")]
    LengthMismatch { points: usize, weights: usize },
    #[error("weights must be non-negative and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },
    #[error("entry count {found} does not match dim {dim}")]
    BadEntryCount { dim: usize, found: usize },
}

/// A symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpdRepr", into = "SpdRepr")]
pub struct SpdMatrix {
    m: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpdRepr {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<SpdRepr> for SpdMatrix {
    type Error = SpdError;

    fn try_from(r: SpdRepr) -> Result<Self, Self::Error> {
        if r.entries.len() != r.dim * r.dim {
            return Err(SpdError::BadEntryCount {
                dim: r.dim,
                found: r.entries.len(),
            });
        }
        SpdMatrix::new(DMatrix::from_row_slice(r.dim, r.dim, &r.entries))
    }
}

impl From<SpdMatrix> for SpdRepr {
    fn from(s: SpdMatrix) -> Self {
        let dim = s.dim();
        let mut entries = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                entries.push(s.m[(i, j)]);
            }
        }
        SpdRepr { dim, entries }
    }
}

impl SpdMatrix {
    /// Validates and symmetrizes `m`.
    pub fn new(m: DMatrix<f64>) -> Result<Self, SpdError> {
        let m = checked_symmetric(m)?;
        let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
        if !(min > 0.0) {
            return Err(SpdError::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        Ok(Self { m })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self, SpdError> {
        Self::new(DMatrix::from_diagonal(
            &nalgebra::DVector::from_column_slice(diag),
        ))
    }

    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self, SpdError> {
        if entries.len() != dim * dim {
            return Err(SpdError::BadEntryCount {
                dim,
                found: entries.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.m.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn inverse(&self) -> SpdMatrix {
        SpdMatrix {
            m: spectral_map(&self.m, |x| 1.0 / x),
        }
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        spectral_map(&self.m, f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        spectral_map(&self.m, |x| 1.0 / x.sqrt())
    }

    pub fn scaled(&self, c: f64) -> Result<SpdMatrix, SpdError> {
        SpdMatrix::new(&self.m * c)
    }

    fn check_dim(&self, other: &SpdMatrix) -> Result<(), SpdError> {
        if self.dim() != other.dim() {
            return Err(SpdError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    /// Wraps a matrix already known to be SPD (output of a spectral map with
    /// positive eigenvalues).
    pub(crate) fn trusted(m: DMatrix<f64>) -> Self {
        Self { m: symmetrize(&m) }
    }
}

/// A symmetric matrix attached to a base point of the manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentMatrix {
    base: SpdMatrix,
    entries: DMatrix<f64>,
}

impl TangentMatrix {
    pub fn new(base: SpdMatrix, entries: DMatrix<f64>) -> Result<Self, SpdError> {
        if entries.nrows() != base.dim() || entries.ncols() != base.dim() {
            return Err(SpdError::DimensionMismatch {
                expected: base.dim(),
                found: entries.nrows(),
            });
        }
        let entries = checked_symmetric(entries)?;
        Ok(Self { base, entries })
    }

    pub fn zeros(base: SpdMatrix) -> Self {
        let d = base.dim();
        Self {
            base,
            entries: DMatrix::zeros(d, d),
        }
    }

    pub fn base(&self) -> &SpdMatrix {
        &self.base
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm()
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn checked_symmetric(m: DMatrix<f64>) -> Result<DMatrix<f64>, SpdError> {
    if m.nrows() != m.ncols() {
        return Err(SpdError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(SpdError::NonFinite);
    }
    let scale = m.amax().max(1.0);
    let asymmetry = (&m - m.transpose()).amax();
    if asymmetry > SYMMETRY_TOLERANCE * scale {
        return Err(SpdError::NotSymmetric { asymmetry });
    }
    Ok(symmetrize(&m))
}

/// `V f(Λ) Vᵀ` for a symmetric matrix `m = V Λ Vᵀ`.
pub fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let fx = f(*lambda);
        scaled.column_mut(j).scale_mut(fx);
    }
    symmetrize(&(scaled * v.transpose()))
}

fn checked_log(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SpdError> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min > LOG_CONDITION_FLOOR * max) {
        return Err(SpdError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(lambda.ln());
    }
    Ok(symmetrize(&(scaled * v.transpose())))
}

/// `Σ^{-1/2} X Σ^{-1/2}`.
fn whiten(inv_sqrt: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(inv_sqrt * x * inv_sqrt))
}

/// Riemannian logarithm `Log_Σ(X) = Σ^{1/2} logm(Σ^{-1/2} X Σ^{-1/2}) Σ^{1/2}`.
pub fn log_map(base: &SpdMatrix, target: &SpdMatrix) -> Result<TangentMatrix, SpdError> {
    base.check_dim(target)?;
    let s = base.sqrt();
    let si = base.inv_sqrt();
    let inner = checked_log(&whiten(&si, &target.m))?;
    Ok(TangentMatrix {
        base: base.clone(),
        entries: symmetrize(&(&s * inner * &s)),
    })
}

/// Riemannian exponential `Exp_Σ(V) = Σ^{1/2} expm(Σ^{-1/2} V Σ^{-1/2}) Σ^{1/2}`.
pub fn exp_map(base: &SpdMatrix, tangent: &TangentMatrix) -> Result<SpdMatrix, SpdError> {
    if tangent.base.dim() != base.dim() {
        return Err(SpdError::DimensionMismatch {
            expected: base.dim(),
            found: tangent.base.dim(),
        });
    }
    if tangent.base != *base {
        return Err(SpdError::BaseMismatch);
    }
    Ok(exp_unchecked(base, &tangent.entries))
}

/// Exponential of a raw symmetric matrix at `base`, skipping the base check.
fn exp_unchecked(base: &SpdMatrix, v: &DMatrix<f64>) -> SpdMatrix {
    let s = base.sqrt();
    let si = base.inv_sqrt();
    let inner = spectral_map(&whiten(&si, v), f64::exp);
    SpdMatrix::trusted(&s * inner * &s)
}

/// Cached square roots of a base point for repeated log/exp evaluations.
#[derive(Debug, Clone)]
pub(crate) struct Chart {
    sqrt: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

impl Chart {
    pub(crate) fn new(base: &SpdMatrix) -> Self {
        Self {
            sqrt: base.sqrt(),
            inv_sqrt: base.inv_sqrt(),
        }
    }

    pub(crate) fn log(&self, target: &SpdMatrix) -> Result<DMatrix<f64>, SpdError> {
        let inner = checked_log(&whiten(&self.inv_sqrt, &target.m))?;
        Ok(symmetrize(&(&self.sqrt * inner * &self.sqrt)))
    }

    pub(crate) fn exp(&self, v: &DMatrix<f64>) -> SpdMatrix {
        let inner = spectral_map(&whiten(&self.inv_sqrt, v), f64::exp);
        SpdMatrix::trusted(&self.sqrt * inner * &self.sqrt)
    }
}

/// The linear map `E` with `Γ_{from→to}(V) = E V Eᵀ`, where
/// `E = (to · from⁻¹)^{1/2} = from^{1/2} (from^{-1/2} to from^{-1/2})^{1/2} from^{-1/2}`.
pub fn transport_operator(from: &SpdMatrix, to: &SpdMatrix) -> Result<DMatrix<f64>, SpdError> {
    from.check_dim(to)?;
    let s = from.sqrt();
    let si = from.inv_sqrt();
    let mid = spectral_map(&whiten(&si, &to.m), f64::sqrt);
    Ok(&s * mid * &si)
}

/// Parallel transport along the geodesic from `from` to `to`.
pub fn parallel_transport(
    from: &SpdMatrix,
    to: &SpdMatrix,
    tangent: &TangentMatrix,
) -> Result<TangentMatrix, SpdError> {
    if tangent.base != *from {
        return Err(SpdError::BaseMismatch);
    }
    let e = transport_operator(from, to)?;
    Ok(TangentMatrix {
        base: to.clone(),
        entries: symmetrize(&(&e * &tangent.entries * e.transpose())),
    })
}

/// Affine-invariant inner product `tr(Σ⁻¹ U Σ⁻¹ V)`.
pub fn inner_product(
    base: &SpdMatrix,
    u: &TangentMatrix,
    v: &TangentMatrix,
) -> Result<f64, SpdError> {
    if u.base != *base || v.base != *base {
        return Err(SpdError::BaseMismatch);
    }
    let inv = base.inverse().m;
    Ok((&inv * &u.entries * &inv * &v.entries).trace())
}

/// Geodesic distance `‖logm(a^{-1/2} b a^{-1/2})‖_F`.
pub fn distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64, SpdError> {
    a.check_dim(b)?;
    let inner = whiten(&a.inv_sqrt(), &b.m);
    let eig = SymmetricEigen::new(inner);
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(SpdError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    Ok(eig
        .eigenvalues
        .iter()
        .map(|l| l.ln().powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Point at fraction `s` of the geodesic from `a` to `b`.
pub fn geodesic(a: &SpdMatrix, b: &SpdMatrix, s: f64) -> Result<SpdMatrix, SpdError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SpdError::ParameterOutOfRange(s));
    }
    a.check_dim(b)?;
    if s == 0.0 {
        return Ok(a.clone());
    }
    if s == 1.0 {
        return Ok(b.clone());
    }
    let sq = a.sqrt();
    let si = a.inv_sqrt();
    let inner = spectral_map(&whiten(&si, &b.m), |x| x.powf(s));
    Ok(SpdMatrix::trusted(&sq * inner * &sq))
}

/// Result of a Karcher mean iteration.
#[derive(Debug, Clone)]
pub struct KarcherMean {
    pub mean: SpdMatrix,
    pub iterations: usize,
    /// Frobenius norm of the weighted tangent mean at `mean`.
    pub residual: f64,
}

/// Weighted Fréchet (Karcher) mean under the affine-invariant metric.
pub fn frechet_mean(points: &[SpdMatrix], weights: &[f64]) -> Result<SpdMatrix, SpdError> {
    frechet_mean_detailed(points, weights).map(|k| k.mean)
}

pub fn frechet_mean_detailed(
    points: &[SpdMatrix],
    weights: &[f64],
) -> Result<KarcherMean, SpdError> {
    if points.is_empty() {
        return Err(SpdError::Empty);
    }
    if points.len() != weights.len() {
        return Err(SpdError::LengthMismatch {
            points: points.len(),
            weights: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(SpdError::InvalidWeights { sum });
    }
    let d = points[0].dim();
    for p in points {
        if p.dim() != d {
            return Err(SpdError::DimensionMismatch {
                expected: d,
                found: p.dim(),
            });
        }
    }

    // Log-Euclidean mean as the starting point.
    let mut acc = DMatrix::zeros(d, d);
    for (p, w) in points.iter().zip(weights) {
        if *w > 0.0 {
            acc += checked_log(&p.m)? * *w;
        }
    }
    let mut mean = SpdMatrix::trusted(spectral_map(&acc, f64::exp));

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < FRECHET_MAX_ITER {
        let s = mean.sqrt();
        let si = mean.inv_sqrt();
        let mut step = DMatrix::zeros(d, d);
        for (p, w) in points.iter().zip(weights) {
            if *w > 0.0 {
                step += checked_log(&whiten(&si, &p.m))? * *w;
            }
        }
        residual = symmetrize(&(&s * &step * &s)).norm();
        if residual < FRECHET_TOLERANCE {
            break;
        }
        mean = SpdMatrix::trusted(&s * spectral_map(&step, f64::exp) * &s);
        iterations += 1;
    }
    Ok(KarcherMean {
        mean,
        iterations,
        residual,
    })
}

/// Alignment objective `‖Log_current(target)‖²_F`, using the ambient
/// Frobenius norm of the log-map matrix.
pub fn spd_objective(current: &SpdMatrix, target: &SpdMatrix) -> Result<f64, SpdError> {
    Ok(log_map(current, target)?.entries.norm_squared())
}

/// Projects a symmetric matrix onto the SPD cone by clamping eigenvalues to
/// at least `floor`.
pub fn nearest_spd(m: &DMatrix<f64>, floor: f64) -> SpdMatrix {
    let floor = if floor > 0.0 {
        floor
    } else {
        f64::MIN_POSITIVE
    };
    SpdMatrix::trusted(spectral_map(&symmetrize(m), |x| x.max(floor)))
}
