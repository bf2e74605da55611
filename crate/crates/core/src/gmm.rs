//! Gaussian mixtures over (time, SPD matrix) pairs and time-driven regression.
//!
//! Each component has a scalar time mean, an SPD center and a covariance in
//! stacked coordinates `[t - μ_t, vec(Log_Ξ(B))]`, where `vec` is the Mandel
//! vectorization. The Euclidean baseline uses `vec(B - Ξ)` instead and plain
//! weighted averages for centers.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spd::{
    distance, frechet_mean, spd_objective, symmetrize, transport_operator, Chart, SpdError,
    SpdMatrix, TangentMatrix,
};

pub const DEFAULT_COMPONENTS: usize = 5;
/// Fixed-point iterations of the manifold mean update during regression.
pub const GMR_ITERATIONS: usize = 3;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 100;
const COVARIANCE_FLOOR_RELATIVE: f64 = 1e-8;
const COVARIANCE_FLOOR_ABSOLUTE: f64 = 1e-12;
/// Components whose responsibility mass falls below this fraction of the data
/// are re-seeded.
const EMPTY_COMPONENT_MASS: f64 = 1e-10;
/// Points with normalized weight below this fraction of the largest weight are
/// skipped when computing a component center.
const NEGLIGIBLE_WEIGHT: f64 = 1e-12;
const PRIOR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GmmError {
    #[error(transparent)]
    Spd(#[from] SpdError),
    #[error("component count must be positive")]
    NoComponents,
    #[error("{k} components need at least {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("covariance is not positive definite")]
    SingularCovariance,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("log-likelihood became non-finite at iteration {0}")]
    NonFiniteLikelihood(usize),
}

/// A time-stamped ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    #[serde(rename = "t")]
    pub time: f64,
    pub bme: SpdMatrix,
}

impl ManifoldPoint {
    pub fn new(time: f64, bme: SpdMatrix) -> Result<Self, GmmError> {
        check_time(time)?;
        Ok(Self { time, bme })
    }
}

fn check_time(t: f64) -> Result<(), GmmError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(GmmError::TimeOutOfRange(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    AffineInvariant,
    Euclidean,
}

/// Local coordinates around a component center.
enum Frame {
    Curved(Chart),
    Flat(DMatrix<f64>),
}

impl Frame {
    fn log(&self, x: &SpdMatrix) -> Result<DMatrix<f64>, SpdError> {
        match self {
            Frame::Curved(chart) => chart.log(x),
            Frame::Flat(base) => Ok(x.as_matrix() - base),
        }
    }
}

impl Metric {
    fn frame(self, base: &SpdMatrix) -> Frame {
        match self {
            Metric::AffineInvariant => Frame::Curved(Chart::new(base)),
            Metric::Euclidean => Frame::Flat(base.as_matrix().clone()),
        }
    }

    fn mean(self, points: &[&SpdMatrix], weights: &[f64]) -> Result<SpdMatrix, SpdError> {
        match self {
            Metric::AffineInvariant => {
                let owned: Vec<SpdMatrix> = points.iter().map(|p| (*p).clone()).collect();
                frechet_mean(&owned, weights)
            }
            Metric::Euclidean => {
                let d = points[0].dim();
                let mut acc = DMatrix::zeros(d, d);
                for (p, w) in points.iter().zip(weights) {
                    acc += p.as_matrix() * *w;
                }
                Ok(SpdMatrix::trusted(acc))
            }
        }
    }

    fn distance(self, a: &SpdMatrix, b: &SpdMatrix) -> Result<f64, SpdError> {
        match self {
            Metric::AffineInvariant => distance(a, b),
            Metric::Euclidean => Ok((a.as_matrix() - b.as_matrix()).norm()),
        }
    }
}

/// Number of Mandel coordinates of a symmetric `d×d` matrix.
pub fn tangent_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Mandel vectorization: diagonal entries first, then the strict upper
/// triangle row by row scaled by √2. Dot products of the result equal
/// Frobenius inner products of the matrices.
pub fn vectorize_symmetric(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut v = DVector::zeros(tangent_dim(d));
    for i in 0..d {
        v[i] = m[(i, i)];
    }
    let mut k = d;
    for i in 0..d {
        for j in i + 1..d {
            v[k] = SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]);
            k += 1;
        }
    }
    v
}

pub fn vectorize_tangent(t: &TangentMatrix) -> DVector<f64> {
    vectorize_symmetric(t.entries())
}

/// Inverse of [`vectorize_symmetric`].
pub fn unvectorize(v: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), tangent_dim(d));
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = v[i];
    }
    let mut k = d;
    for i in 0..d {
        for j in i + 1..d {
            let x = v[k] / SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    m
}

/// Matrix of the map `V ↦ E V Eᵀ` in Mandel coordinates.
fn congruence_in_coords(e: &DMatrix<f64>) -> DMatrix<f64> {
    let d = e.nrows();
    let p = tangent_dim(d);
    let mut out = DMatrix::zeros(p, p);
    let mut basis = vec![0.0; p];
    for j in 0..p {
        basis[j] = 1.0;
        let image = e * unvectorize(&basis, d) * e.transpose();
        out.set_column(j, &vectorize_symmetric(&image));
        basis[j] = 0.0;
    }
    out
}

struct GaussianCache {
    lower: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianCache {
    fn new(cov: &DMatrix<f64>) -> Result<Self, GmmError> {
        let chol = Cholesky::new(cov.clone()).ok_or(GmmError::SingularCovariance)?;
        let log_det: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|x| x.ln())
                .sum::<f64>();
        let dim = cov.nrows() as f64;
        Ok(Self {
            lower: chol.unpack(),
            log_norm: -0.5 * (dim * (2.0 * PI).ln() + log_det),
        })
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let y = self
            .lower
            .solve_lower_triangular(x)
            .expect("triangular factor is nonsingular");
        self.log_norm - 0.5 * y.norm_squared()
    }
}

fn stack(dt: f64, tangent: &DMatrix<f64>) -> DVector<f64> {
    let v = vectorize_symmetric(tangent);
    let mut x = DVector::zeros(v.len() + 1);
    x[0] = dt;
    x.rows_mut(1, v.len()).copy_from(&v);
    x
}

/// Time mean and SPD center of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMean {
    #[serde(rename = "t")]
    pub time: f64,
    pub spd: SpdMatrix,
}

/// Gaussian density on (time × SPD) evaluated in stacked tangent coordinates
/// at the component center, under the affine-invariant metric.
pub fn manifold_gaussian_pdf(
    point: &ManifoldPoint,
    mean: &ComponentMean,
    covariance: &DMatrix<f64>,
) -> Result<f64, GmmError> {
    Ok(manifold_gaussian_log_pdf(point, mean, covariance, Metric::AffineInvariant)?.exp())
}

pub fn manifold_gaussian_log_pdf(
    point: &ManifoldPoint,
    mean: &ComponentMean,
    covariance: &DMatrix<f64>,
    metric: Metric,
) -> Result<f64, GmmError> {
    let p = 1 + tangent_dim(mean.spd.dim());
    if covariance.nrows() != p || covariance.ncols() != p {
        return Err(GmmError::DimensionMismatch {
            expected: p,
            found: covariance.nrows(),
        });
    }
    if point.bme.dim() != mean.spd.dim() {
        return Err(GmmError::DimensionMismatch {
            expected: mean.spd.dim(),
            found: point.bme.dim(),
        });
    }
    let cache = GaussianCache::new(covariance)?;
    let x = stack(
        point.time - mean.time,
        &metric.frame(&mean.spd).log(&point.bme)?,
    );
    Ok(cache.log_density(&x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdGmmModel {
    metric: Metric,
    seed: u64,
    priors: Vec<f64>,
    means: Vec<ComponentMean>,
    covariances: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    #[serde(rename = "K")]
    k: usize,
    priors: Vec<f64>,
    means: Vec<ComponentMean>,
    covariances: Vec<Vec<f64>>,
    metric: Metric,
    seed: u64,
}

impl SpdGmmModel {
    pub fn new(
        metric: Metric,
        seed: u64,
        priors: Vec<f64>,
        means: Vec<ComponentMean>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self, GmmError> {
        let k = priors.len();
        if k == 0 {
            return Err(GmmError::NoComponents);
        }
        if means.len() != k || covariances.len() != k {
            return Err(GmmError::InvalidModel(
                "component arrays differ in length".into(),
            ));
        }
        let sum: f64 = priors.iter().sum();
        if priors.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > PRIOR_TOLERANCE {
            return Err(GmmError::InvalidModel(format!("priors sum to {sum}")));
        }
        let d = means[0].spd.dim();
        let p = 1 + tangent_dim(d);
        for (m, c) in means.iter().zip(&covariances) {
            check_time(m.time)?;
            if m.spd.dim() != d {
                return Err(GmmError::DimensionMismatch {
                    expected: d,
                    found: m.spd.dim(),
                });
            }
            if c.shape() != (p, p) {
                return Err(GmmError::DimensionMismatch {
                    expected: p,
                    found: c.nrows(),
                });
            }
            if (c - c.transpose()).amax() > 1e-10 * c.amax().max(1.0) {
                return Err(GmmError::InvalidModel("covariance not symmetric".into()));
            }
            GaussianCache::new(c)?;
        }
        Ok(Self {
            metric,
            seed,
            priors,
            means,
            covariances,
        })
    }

    pub fn components(&self) -> usize {
        self.priors.len()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn means(&self) -> &[ComponentMean] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn spd_dim(&self) -> usize {
        self.means[0].spd.dim()
    }

    pub fn to_json(&self) -> String {
        let repr = ModelRepr {
            k: self.components(),
            priors: self.priors.clone(),
            means: self.means.clone(),
            covariances: self
                .covariances
                .iter()
                .map(|c| c.transpose().iter().copied().collect())
                .collect(),
            metric: self.metric,
            seed: self.seed,
        };
        serde_json::to_string_pretty(&repr).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GmmError> {
        let repr: ModelRepr =
            serde_json::from_str(text).map_err(|e| GmmError::InvalidModel(e.to_string()))?;
        if repr.k != repr.priors.len() {
            return Err(GmmError::InvalidModel(format!(
                "K = {} but {} priors",
                repr.k,
                repr.priors.len()
            )));
        }
        let d = repr.means.first().map(|m| m.spd.dim()).unwrap_or(0);
        let p = 1 + tangent_dim(d);
        let mut covariances = Vec::with_capacity(repr.k);
        for c in &repr.covariances {
            if c.len() != p * p {
                return Err(GmmError::DimensionMismatch {
                    expected: p * p,
                    found: c.len(),
                });
            }
            covariances.push(DMatrix::from_row_slice(p, p, c));
        }
        Self::new(repr.metric, repr.seed, repr.priors, repr.means, covariances)
    }

    /// Total log-likelihood of `data` under the mixture.
    pub fn log_likelihood(&self, data: &[ManifoldPoint]) -> Result<f64, GmmError> {
        let table = LogTable::build(self.metric, &self.state(), data)?;
        Ok(table.log_likelihood)
    }

    fn state(&self) -> Vec<Component> {
        (0..self.components())
            .map(|k| Component {
                prior: self.priors[k],
                time: self.means[k].time,
                center: self.means[k].spd.clone(),
                cov: self.covariances[k].clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Component {
    prior: f64,
    time: f64,
    center: SpdMatrix,
    cov: DMatrix<f64>,
}

/// Per-point, per-component log densities and responsibilities.
struct LogTable {
    /// `log N_k(x_i)` without the prior.
    log_density: Vec<Vec<f64>>,
    resp: Vec<Vec<f64>>,
    log_likelihood: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl LogTable {
    fn build(
        metric: Metric,
        comps: &[Component],
        data: &[ManifoldPoint],
    ) -> Result<Self, GmmError> {
        let mut log_density = vec![vec![0.0; comps.len()]; data.len()];
        for (k, c) in comps.iter().enumerate() {
            let cache = GaussianCache::new(&c.cov)?;
            let frame = metric.frame(&c.center);
            for (i, pt) in data.iter().enumerate() {
                let x = stack(pt.time - c.time, &frame.log(&pt.bme)?);
                log_density[i][k] = cache.log_density(&x);
            }
        }
        let mut resp = vec![vec![0.0; comps.len()]; data.len()];
        let mut log_likelihood = 0.0;
        let mut joint = vec![0.0; comps.len()];
        for i in 0..data.len() {
            for (k, c) in comps.iter().enumerate() {
                joint[k] = c.prior.ln() + log_density[i][k];
            }
            let lse = log_sum_exp(&joint);
            log_likelihood += lse;
            for k in 0..comps.len() {
                resp[i][k] = (joint[k] - lse).exp();
            }
        }
        Ok(Self {
            log_density,
            resp,
            log_likelihood,
        })
    }
}

/// Options for [`fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub components: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub metric: Metric,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            components: DEFAULT_COMPONENTS,
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            metric: Metric::AffineInvariant,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: SpdGmmModel,
    /// Log-likelihood before each M-step, plus the final value.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Components re-seeded after losing all responsibility mass.
    pub reseeds: usize,
}

/// Fits an affine-invariant mixture.
pub fn em_fit(
    data: &[ManifoldPoint],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<SpdGmmModel, GmmError> {
    fit(
        data,
        &EmOptions {
            components: k,
            seed,
            max_iter,
            tol,
            metric: Metric::AffineInvariant,
        },
    )
    .map(|f| f.model)
}

/// Fits the Euclidean baseline, treating matrices as flat vectors.
pub fn euclid_gmm_gmr_fit(
    data: &[ManifoldPoint],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<SpdGmmModel, GmmError> {
    fit(
        data,
        &EmOptions {
            components: k,
            seed,
            max_iter,
            tol,
            metric: Metric::Euclidean,
        },
    )
    .map(|f| f.model)
}

struct DataSummary {
    covariance: DMatrix<f64>,
    floor: f64,
    time_scale: f64,
    spd_scale: f64,
}

fn summarize(metric: Metric, data: &[ManifoldPoint]) -> Result<DataSummary, GmmError> {
    let n = data.len() as f64;
    let w = vec![1.0 / n; data.len()];
    let refs: Vec<&SpdMatrix> = data.iter().map(|p| &p.bme).collect();
    let center = metric.mean(&refs, &w)?;
    let t_mean = data.iter().map(|p| p.time).sum::<f64>() / n;
    let frame = metric.frame(&center);
    let p = 1 + tangent_dim(center.dim());
    let mut cov = DMatrix::zeros(p, p);
    let mut spread = 0.0;
    for pt in data {
        let x = stack(pt.time - t_mean, &frame.log(&pt.bme)?);
        cov += &x * x.transpose() / n;
        spread += metric.distance(&center, &pt.bme)?.powi(2) / n;
    }
    let floor = (COVARIANCE_FLOOR_RELATIVE * cov.trace() / p as f64).max(COVARIANCE_FLOOR_ABSOLUTE);
    let positive_or_one = |s: f64| if s > 1e-12 { s } else { 1.0 };
    Ok(DataSummary {
        time_scale: positive_or_one(cov[(0, 0)].sqrt()),
        spd_scale: positive_or_one(spread.sqrt()),
        covariance: cov,
        floor,
    })
}

fn with_floor(mut cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    cov = symmetrize(&cov);
    for i in 0..cov.nrows() {
        cov[(i, i)] += floor;
    }
    cov
}

/// Weighted center (time mean and metric mean) of a set of points.
fn weighted_center(
    metric: Metric,
    data: &[ManifoldPoint],
    weights: &[f64],
) -> Result<(f64, SpdMatrix), GmmError> {
    let max = weights.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| weights[i] > NEGLIGIBLE_WEIGHT * max)
        .collect();
    let total: f64 = keep.iter().map(|&i| weights[i]).sum();
    let w: Vec<f64> = keep.iter().map(|&i| weights[i] / total).collect();
    let time = keep.iter().zip(&w).map(|(&i, wi)| wi * data[i].time).sum();
    let pts: Vec<&SpdMatrix> = keep.iter().map(|&i| &data[i].bme).collect();
    Ok((time, metric.mean(&pts, &w)?))
}

/// Responsibility-weighted second moment of stacked residuals about a center.
fn scatter(
    metric: Metric,
    data: &[ManifoldPoint],
    weights: &[f64],
    time: f64,
    center: &SpdMatrix,
) -> Result<(DMatrix<f64>, Vec<DVector<f64>>), GmmError> {
    let frame = metric.frame(center);
    let p = 1 + tangent_dim(center.dim());
    let mut s = DMatrix::zeros(p, p);
    let total: f64 = weights.iter().sum();
    let mut coords = Vec::with_capacity(data.len());
    for (pt, w) in data.iter().zip(weights) {
        let x = stack(pt.time - time, &frame.log(&pt.bme)?);
        s += &x * x.transpose() * (*w / total);
        coords.push(x);
    }
    Ok((s, coords))
}

fn expected_log_density(
    cov: &DMatrix<f64>,
    coords: &[DVector<f64>],
    weights: &[f64],
) -> Result<f64, GmmError> {
    let cache = GaussianCache::new(cov)?;
    Ok(coords
        .iter()
        .zip(weights)
        .map(|(x, w)| w * cache.log_density(x))
        .sum())
}

/// Scaled squared distance used by the k-means initializer.
fn init_distance(
    metric: Metric,
    s: &DataSummary,
    a: (f64, &SpdMatrix),
    b: (f64, &SpdMatrix),
) -> Result<f64, GmmError> {
    let dt = (a.0 - b.0) / s.time_scale;
    let db = metric.distance(a.1, b.1)? / s.spd_scale;
    Ok(dt * dt + db * db)
}

struct Clustering {
    centers: Vec<(f64, SpdMatrix)>,
    labels: Vec<usize>,
    inertia: f64,
}

fn nearest(
    metric: Metric,
    s: &DataSummary,
    centers: &[(f64, SpdMatrix)],
    pt: &ManifoldPoint,
) -> Result<(usize, f64), GmmError> {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = init_distance(metric, s, (pt.time, &pt.bme), (c.0, &c.1))?;
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best)
}

fn kmeans_once(
    metric: Metric,
    s: &DataSummary,
    data: &[ManifoldPoint],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Clustering, GmmError> {
    let n = data.len();
    let first = rng.random_range(0..n);
    let mut centers = vec![(data[first].time, data[first].bme.clone())];
    let mut d2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = centers.last().expect("non-empty");
        for (i, pt) in data.iter().enumerate() {
            d2[i] = d2[i].min(init_distance(
                metric,
                s,
                (pt.time, &pt.bme),
                (last.0, &last.1),
            )?);
        }
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push((data[pick].time, data[pick].bme.clone()));
    }

    let mut labels = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, pt) in data.iter().enumerate() {
            let (j, d) = nearest(metric, s, &centers, pt)?;
            dist[i] = d;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (j, center) in centers.iter_mut().enumerate() {
            let w: Vec<f64> = labels
                .iter()
                .map(|&l| if l == j { 1.0 } else { 0.0 })
                .collect();
            if w.iter().any(|x| *x > 0.0) {
                *center = weighted_center(metric, data, &w)?;
            } else {
                // Empty cluster: move it to the point worst served by its center.
                let far = argmax(&dist);
                *center = (data[far].time, data[far].bme.clone());
                dist[far] = 0.0;
            }
        }
    }
    let mut inertia = 0.0;
    for (i, pt) in data.iter().enumerate() {
        let (j, d) = nearest(metric, s, &centers, pt)?;
        labels[i] = j;
        inertia += d;
    }
    Ok(Clustering {
        centers,
        labels,
        inertia,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn initialize(
    metric: Metric,
    s: &DataSummary,
    data: &[ManifoldPoint],
    k: usize,
    seed: u64,
) -> Result<Vec<Component>, GmmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..KMEANS_RESTARTS {
        let c = kmeans_once(metric, s, data, k, &mut rng)?;
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    let best = best.expect("at least one restart");
    let counts: Vec<usize> = (0..k)
        .map(|j| best.labels.iter().filter(|&&l| l == j).count())
        .collect();
    let prior_total: usize = counts.iter().map(|c| (*c).max(1)).sum();
    let mut comps = Vec::with_capacity(k);
    for (j, (time, center)) in best.centers.into_iter().enumerate() {
        let cov = if counts[j] > 0 {
            let w: Vec<f64> = best
                .labels
                .iter()
                .map(|&l| if l == j { 1.0 } else { 0.0 })
                .collect();
            scatter(metric, data, &w, time, &center)?.0
        } else {
            s.covariance.clone()
        };
        comps.push(Component {
            prior: counts[j].max(1) as f64 / prior_total as f64,
            time,
            center,
            cov: with_floor(cov, s.floor),
        });
    }
    Ok(comps)
}

/// Expectation-maximization with a monotonicity safeguard.
///
/// The M-step proposes the weighted Fréchet mean with the matching scatter
/// matrix. Because that center does not maximize the expected complete-data
/// log-likelihood exactly, a proposal that lowers it is replaced by the
/// previous center with refreshed scatter, or by the previous component.
pub fn fit(data: &[ManifoldPoint], opts: &EmOptions) -> Result<EmFit, GmmError> {
    let k = opts.components;
    if k == 0 {
        return Err(GmmError::NoComponents);
    }
    if data.len() < k {
        return Err(GmmError::TooFewPoints { k, n: data.len() });
    }
    let d = data[0].bme.dim();
    for pt in data {
        check_time(pt.time)?;
        if pt.bme.dim() != d {
            return Err(GmmError::DimensionMismatch {
                expected: d,
                found: pt.bme.dim(),
            });
        }
    }
    let metric = opts.metric;
    let summary = summarize(metric, data)?;
    let mut comps = initialize(metric, &summary, data, k, opts.seed)?;
    let n = data.len() as f64;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeds = 0;
    let mut iterations = 0;
    let mut table = LogTable::build(metric, &comps, data)?;
    while iterations < opts.max_iter {
        if !table.log_likelihood.is_finite() {
            return Err(GmmError::NonFiniteLikelihood(iterations));
        }
        trace.push(table.log_likelihood);
        iterations += 1;

        for j in 0..k {
            let r: Vec<f64> = table.resp.iter().map(|row| row[j]).collect();
            let mass: f64 = r.iter().sum();
            if mass < EMPTY_COMPONENT_MASS * n {
                let worst: Vec<f64> = table
                    .log_density
                    .iter()
                    .map(|ld| -ld.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                let far = argmax(&worst);
                comps[j] = Component {
                    prior: 1.0 / n,
                    time: data[far].time,
                    center: data[far].bme.clone(),
                    cov: with_floor(summary.covariance.clone(), summary.floor),
                };
                reseeds += 1;
                continue;
            }
            let q_old: f64 = table
                .log_density
                .iter()
                .zip(&r)
                .map(|(ld, w)| w * ld[j])
                .sum();
            let prior = mass / n;

            let (time, center) = weighted_center(metric, data, &r)?;
            let (s, coords) = scatter(metric, data, &r, time, &center)?;
            let cov = with_floor(s, summary.floor);
            if expected_log_density(&cov, &coords, &r)? >= q_old {
                comps[j] = Component {
                    prior,
                    time,
                    center,
                    cov,
                };
                continue;
            }
            let old = &comps[j];
            let (s, coords) = scatter(metric, data, &r, old.time, &old.center)?;
            let cov = with_floor(s, summary.floor);
            if expected_log_density(&cov, &coords, &r)? >= q_old {
                comps[j].cov = cov;
            }
            comps[j].prior = prior;
        }
        let total: f64 = comps.iter().map(|c| c.prior).sum();
        for c in comps.iter_mut() {
            c.prior /= total;
        }

        table = LogTable::build(metric, &comps, data)?;
        let last = *trace.last().expect("pushed above");
        if (table.log_likelihood - last).abs() < opts.tol {
            converged = true;
            break;
        }
    }
    trace.push(table.log_likelihood);

    let model = SpdGmmModel::new(
        metric,
        opts.seed,
        comps.iter().map(|c| c.prior).collect(),
        comps
            .iter()
            .map(|c| ComponentMean {
                time: c.time,
                spd: c.center.clone(),
            })
            .collect(),
        comps.iter().map(|c| c.cov.clone()).collect(),
    )?;
    Ok(EmFit {
        model,
        log_likelihood: trace,
        iterations,
        converged,
        reseeds,
    })
}

/// Conditional ellipsoid distribution at a given time.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrOutput {
    pub mean: SpdMatrix,
    /// Covariance over the Mandel coordinates at `mean`.
    pub covariance: DMatrix<f64>,
    /// Normalized component weights at the query time.
    pub weights: Vec<f64>,
    /// True when the Euclidean mean left the SPD cone and was projected back.
    pub clamped: bool,
}

struct Conditional {
    /// Regression shift of the SPD block, as a symmetric matrix.
    shift: DMatrix<f64>,
    /// Conditional covariance of the SPD block in Mandel coordinates.
    cov: DMatrix<f64>,
}

fn condition_component(cov: &DMatrix<f64>, dt: f64, d: usize) -> Conditional {
    let p = cov.nrows() - 1;
    let s_tt = cov[(0, 0)];
    let s_bt = cov.view((1, 0), (p, 1)).clone_owned();
    let s_bb = cov.view((1, 1), (p, p)).clone_owned();
    let u = &s_bt * (dt / s_tt);
    Conditional {
        shift: unvectorize(u.as_slice(), d),
        cov: symmetrize(&(s_bb - &s_bt * s_bt.transpose() / s_tt)),
    }
}

fn time_weights(model: &SpdGmmModel, t: f64) -> Vec<f64> {
    let logs: Vec<f64> = (0..model.components())
        .map(|k| {
            let var = model.covariances[k][(0, 0)];
            let dt = t - model.means[k].time;
            model.priors[k].ln() - 0.5 * ((2.0 * PI * var).ln() + dt * dt / var)
        })
        .collect();
    let lse = log_sum_exp(&logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

/// Eigenvalue floor used when a Euclidean regression mean leaves the SPD cone.
fn projection_floor(m: &DMatrix<f64>) -> f64 {
    let lambda_max = SymmetricEigen::new(m.clone()).eigenvalues.max();
    (1e-6 * lambda_max).max(1e-9)
}

/// Time-driven regression: the conditional ellipsoid mean and covariance.
pub fn gmr_condition(model: &SpdGmmModel, t: f64) -> Result<GmrOutput, GmmError> {
    check_time(t)?;
    let d = model.spd_dim();
    let h = time_weights(model, t);
    let conds: Vec<Conditional> = (0..model.components())
        .map(|k| condition_component(&model.covariances[k], t - model.means[k].time, d))
        .collect();
    let p = tangent_dim(d);

    match model.metric {
        Metric::AffineInvariant => {
            let mut mean = model.means[argmax(&h)].spd.clone();
            for _ in 0..GMR_ITERATIONS {
                let chart = Chart::new(&mean);
                let mut step = DMatrix::zeros(d, d);
                for (k, c) in conds.iter().enumerate() {
                    let e = transport_operator(&model.means[k].spd, &mean)?;
                    step +=
                        (chart.log(&model.means[k].spd)? + &e * &c.shift * e.transpose()) * h[k];
                }
                mean = chart.exp(&step);
            }
            let chart = Chart::new(&mean);
            let mut vs = Vec::with_capacity(conds.len());
            let mut cov = DMatrix::zeros(p, p);
            for (k, c) in conds.iter().enumerate() {
                let e = transport_operator(&model.means[k].spd, &mean)?;
                let v = vectorize_symmetric(
                    &(chart.log(&model.means[k].spd)? + &e * &c.shift * e.transpose()),
                );
                let g = congruence_in_coords(&e);
                cov += (&g * &c.cov * g.transpose() + &v * v.transpose()) * h[k];
                vs.push(v);
            }
            let vbar = vs
                .iter()
                .zip(&h)
                .fold(DVector::zeros(p), |acc, (v, w)| acc + v * *w);
            cov -= &vbar * vbar.transpose();
            Ok(GmrOutput {
                mean,
                covariance: symmetrize(&cov),
                weights: h,
                clamped: false,
            })
        }
        Metric::Euclidean => {
            let mut raw = DMatrix::zeros(d, d);
            let targets: Vec<DMatrix<f64>> = conds
                .iter()
                .enumerate()
                .map(|(k, c)| model.means[k].spd.as_matrix() + &c.shift)
                .collect();
            for (x, w) in targets.iter().zip(&h) {
                raw += x * *w;
            }
            let raw = symmetrize(&raw);
            let mut cov = DMatrix::zeros(p, p);
            for ((x, c), w) in targets.iter().zip(&conds).zip(&h) {
                let v = vectorize_symmetric(&(x - &raw));
                cov += (&c.cov + &v * v.transpose()) * *w;
            }
            let floor = projection_floor(&raw);
            let min = SymmetricEigen::new(raw.clone()).eigenvalues.min();
            let (mean, clamped) = if min < floor {
                (crate::spd::nearest_spd(&raw, floor), true)
            } else {
                (SpdMatrix::trusted(raw), false)
            };
            Ok(GmrOutput {
                mean,
                covariance: symmetrize(&cov),
                weights: h,
                clamped,
            })
        }
    }
}

/// Alias of [`gmr_condition`] for models fitted with the Euclidean metric.
pub fn euclid_gmr_condition(model: &SpdGmmModel, t: f64) -> Result<GmrOutput, GmmError> {
    gmr_condition(model, t)
}

/// Reproduction accuracy `exp(-G_B)` between a reproduced and a demonstrated
/// ellipsoid.
pub fn mra(reproduced: &SpdMatrix, demonstrated: &SpdMatrix) -> Result<f64, GmmError> {
    Ok((-spd_objective(reproduced, demonstrated)?).exp())
}

/// Summary of reproducing a set of demonstrations with a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReproductionReport {
    /// Mean MRA per distinct time stamp, in order of first appearance.
    pub per_time: Vec<(f64, f64)>,
    pub mean_mra: f64,
    /// Regression outputs that had to be projected onto the SPD cone.
    pub clamp_events: usize,
}

/// Conditions the model at every time stamp in `data` and scores the result
/// against the demonstrated ellipsoid.
pub fn reproduction_report(
    model: &SpdGmmModel,
    data: &[ManifoldPoint],
) -> Result<ReproductionReport, GmmError> {
    let mut times: Vec<f64> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut cache: Vec<GmrOutput> = Vec::new();
    let mut clamp_events = 0;
    let mut total = 0.0;
    for pt in data {
        let idx = match times.iter().position(|t| *t == pt.time) {
            Some(i) => i,
            None => {
                let out = gmr_condition(model, pt.time)?;
                clamp_events += usize::from(out.clamped);
                times.push(pt.time);
                sums.push((0.0, 0));
                cache.push(out);
                times.len() - 1
            }
        };
        let score = mra(&cache[idx].mean, &pt.bme)?;
        sums[idx].0 += score;
        sums[idx].1 += 1;
        total += score;
    }
    Ok(ReproductionReport {
        per_time: times
            .iter()
            .zip(&sums)
            .map(|(t, (s, c))| (*t, s / *c as f64))
            .collect(),
        mean_mra: total / data.len().max(1) as f64,
        clamp_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn diag(d: &[f64]) -> SpdMatrix {
        SpdMatrix::from_diagonal(d).unwrap()
    }

    #[test]
    fn mandel_examples() {
        let v = vectorize_symmetric(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])));
        assert_eq!(v.as_slice(), &[1.0, 2.0, 0.0]);
        let v = vectorize_symmetric(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - SQRT_2).abs() < 1e-15);
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let v = vectorize_symmetric(&m);
        assert!((v.norm() - m.norm()).abs() < 1e-12);
        assert!((unvectorize(v.as_slice(), 3) - m).amax() < 1e-14);
    }

    #[test]
    fn density_at_mean_with_unit_covariance() {
        let mean = ComponentMean {
            time: 0.4,
            spd: diag(&[2.0, 0.5]),
        };
        let pt = ManifoldPoint::new(0.4, diag(&[2.0, 0.5])).unwrap();
        let pdf = manifold_gaussian_pdf(&pt, &mean, &DMatrix::identity(4, 4)).unwrap();
        assert!((pdf - (2.0 * PI).powf(-2.0)).abs() < 1e-15);
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let mean = ComponentMean {
            time: 0.0,
            spd: diag(&[1.0, 1.0]),
        };
        let pt = ManifoldPoint::new(0.0, diag(&[1.0, 1.0])).unwrap();
        assert_eq!(
            manifold_gaussian_pdf(&pt, &mean, &DMatrix::zeros(4, 4)),
            Err(GmmError::SingularCovariance)
        );
    }

    #[test]
    fn repeated_point_gives_floor_covariance() {
        let pt = ManifoldPoint::new(0.3, diag(&[3.0, 1.0])).unwrap();
        let data = vec![pt.clone(); 6];
        let model = em_fit(&data, 1, 7, 50, 1e-9).unwrap();
        assert!((model.means()[0].spd.as_matrix() - pt.bme.as_matrix()).amax() < 1e-12);
        assert_eq!(model.means()[0].time, 0.3);
        let expected = DMatrix::identity(4, 4) * COVARIANCE_FLOOR_ABSOLUTE;
        assert!((model.covariances()[0].clone() - expected).amax() < 1e-20);
    }

    #[test]
    fn too_few_points() {
        let data = vec![ManifoldPoint::new(0.0, diag(&[1.0, 1.0])).unwrap()];
        assert_eq!(
            em_fit(&data, 2, 0, 10, 1e-6).unwrap_err(),
            GmmError::TooFewPoints { k: 2, n: 1 }
        );
        assert_eq!(
            em_fit(&data, 0, 0, 10, 1e-6).unwrap_err(),
            GmmError::NoComponents
        );
    }

    #[test]
    fn single_component_without_coupling_returns_center() {
        let center = diag(&[2.0, 0.7]);
        let model = SpdGmmModel::new(
            Metric::AffineInvariant,
            0,
            vec![1.0],
            vec![ComponentMean {
                time: 0.5,
                spd: center.clone(),
            }],
            vec![DMatrix::identity(4, 4) * 0.1],
        )
        .unwrap();
        for t in [0.0, 0.3, 1.0] {
            let out = gmr_condition(&model, t).unwrap();
            assert!((out.mean.as_matrix() - center.as_matrix()).amax() < 1e-12);
            assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mra_examples() {
        let a = diag(&[1.3, 0.2]);
        assert_eq!(mra(&a, &a).unwrap(), 1.0);
        let m = mra(&SpdMatrix::identity(2), &diag(&[E * E, 1.0])).unwrap();
        assert!((m - (-4.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn model_json_round_trip() {
        let model = SpdGmmModel::new(
            Metric::Euclidean,
            11,
            vec![0.25, 0.75],
            vec![
                ComponentMean {
                    time: 0.1,
                    spd: diag(&[1.0, 2.0]),
                },
                ComponentMean {
                    time: 0.9,
                    spd: diag(&[3.0, 0.5]),
                },
            ],
            vec![DMatrix::identity(4, 4) * 0.2, DMatrix::identity(4, 4) * 0.3],
        )
        .unwrap();
        let text = model.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["K"], 2);
        assert_eq!(v["metric"], "euclidean");
        assert_eq!(v["means"][1]["t"], 0.9);
        assert_eq!(SpdGmmModel::from_json(&text).unwrap(), model);
        let broken = text.replace("0.75", "0.5");
        assert!(matches!(
            SpdGmmModel::from_json(&broken),
            Err(GmmError::InvalidModel(_))
        ));
    }

    #[test]
    fn transport_in_coordinates_matches_matrix_congruence() {
        let e = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, -0.4, 0.9]);
        let v = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, -1.0, 2.0]);
        let g = congruence_in_coords(&e);
        let direct = vectorize_symmetric(&(&e * &v * e.transpose()));
        assert!((g * vectorize_symmetric(&v) - direct).amax() < 1e-14);
    }
}
