//! Fully-connected Gaussian CRF over 2D landmarks.
//!
//! Landmarks are stacked as `y = (x_0, y_0, x_1, y_1, …)`. Given deformable
//! parameters `ζ`, the conditional `p(y | ζ, x)` is Gaussian with precision
//!
//! ```text
//! Λ_ii = Σ_i⁻¹ + Σ_{j≠i} C_ij      Λ_ij = −C_ij
//! b_i  = Σ_i⁻¹ μ_i + Σ_{j≠i} C_ij μ_ij
//! ```
//!
//! and mean `E = Λ⁻¹ b`. Each pairwise matrix is stored through a
//! lower-triangular factor, `C_ij = L_ij L_ijᵀ`, so it is PSD for any factor
//! values and gradient steps on the factors need no projection.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::linalg::Cholesky;
use crate::model::{all_expected_offsets, DeformParams, ShapeModel3D};
use crate::pairs::{pair_count, pair_index, pairs};

/// Smallest eigenvalue admitted for a unary covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-8;

/// Symmetry tolerance for unary covariances.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// The paper's initialization of every pairwise matrix, `C_ij = 0.01 I`.
pub const INIT_PAIR_SCALE: f64 = 0.01;

fn min_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    half_tr - (half_diff * half_diff + off * off).sqrt()
}

fn check_covariance(sigma: &Matrix2<f64>) -> Result<()> {
    if !sigma.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalDomain(
            "covariance has non-finite entries".into(),
        ));
    }
    if (sigma[(0, 1)] - sigma[(1, 0)]).abs() > SYMMETRY_TOL {
        return Err(Error::NumericalDomain(format!(
            "covariance is not symmetric ({} vs {})",
            sigma[(0, 1)],
            sigma[(1, 0)]
        )));
    }
    let lmin = min_eigenvalue(sigma);
    if lmin < COVARIANCE_FLOOR {
        return Err(Error::NumericalDomain(format!(
            "covariance eigenvalue {lmin:e} below floor {COVARIANCE_FLOOR:e}"
        )));
    }
    Ok(())
}

fn inverse2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
}

/// Per-landmark Gaussian predictions `(μ_i, Σ_i)` from an appearance model.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryPrediction {
    means: Vec<Vector2<f64>>,
    covariances: Vec<Matrix2<f64>>,
    precisions: Vec<Matrix2<f64>>,
}

impl UnaryPrediction {
    /// Strict constructor: every covariance must be symmetric with smallest
    /// eigenvalue at least [`COVARIANCE_FLOOR`].
    pub fn new(means: Vec<Vector2<f64>>, covariances: Vec<Matrix2<f64>>) -> Result<Self> {
        if means.len() != covariances.len() {
            return Err(invalid(format!(
                "{} means but {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if means.is_empty() {
            return Err(invalid("unary prediction has no landmarks"));
        }
        if !means.iter().all(|m| m.iter().all(|v| v.is_finite())) {
            return Err(invalid("unary means must be finite"));
        }
        for (i, s) in covariances.iter().enumerate() {
            check_covariance(s).map_err(|e| match e {
                Error::NumericalDomain(m) => Error::NumericalDomain(format!("landmark {i}: {m}")),
                other => other,
            })?;
        }
        let precisions = covariances.iter().map(inverse2).collect();
        Ok(Self {
            means,
            covariances,
            precisions,
        })
    }

    /// Ingestion constructor: covariances are symmetrized and shifted by a
    /// multiple of the identity when their smallest eigenvalue is below
    /// [`COVARIANCE_FLOOR`]. Asymmetry beyond [`SYMMETRY_TOL`] is still an
    /// error.
    pub fn with_floor(means: Vec<Vector2<f64>>, covariances: Vec<Matrix2<f64>>) -> Result<Self> {
        let mut fixed = Vec::with_capacity(covariances.len());
        for (i, s) in covariances.into_iter().enumerate() {
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericalDomain(format!(
                    "landmark {i}: covariance has non-finite entries"
                )));
            }
            if (s[(0, 1)] - s[(1, 0)]).abs() > SYMMETRY_TOL {
                return Err(Error::NumericalDomain(format!(
                    "landmark {i}: covariance is not symmetric"
                )));
            }
            let off = 0.5 * (s[(0, 1)] + s[(1, 0)]);
            let mut s = Matrix2::new(s[(0, 0)], off, off, s[(1, 1)]);
            let lmin = min_eigenvalue(&s);
            if lmin < COVARIANCE_FLOOR {
                let shift = COVARIANCE_FLOOR - lmin;
                warn!("landmark {i}: covariance eigenvalue {lmin:e} raised to floor (added {shift:e} I)");
                s += Matrix2::identity() * shift;
                // guard against the shift landing a hair under the floor
                if min_eigenvalue(&s) < COVARIANCE_FLOOR {
                    s += Matrix2::identity() * (COVARIANCE_FLOOR * 1e-6);
                }
            }
            fixed.push(s);
        }
        Self::new(means, fixed)
    }

    /// Isotropic predictions `Σ_i = var · I`.
    pub fn isotropic(means: Vec<Vector2<f64>>, var: f64) -> Result<Self> {
        let n = means.len();
        Self::new(means, vec![Matrix2::identity() * var; n])
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn means(&self) -> &[Vector2<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix2<f64>] {
        &self.covariances
    }

    /// `Σ_i⁻¹` for every landmark.
    pub fn precisions(&self) -> &[Matrix2<f64>] {
        &self.precisions
    }

    /// Means stacked into a `2N` vector.
    pub fn stacked_means(&self) -> DVector<f64> {
        stack(&self.means)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: UnaryFile = io::read_json(path)?;
        file.into_prediction().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &UnaryFile::from(self))
    }
}

/// `{"n": N, "landmarks": [{"mu": [x,y], "sigma": [[a,b],[b,c]]}]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnaryFile {
    pub n: usize,
    pub landmarks: Vec<UnaryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnaryEntry {
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
}

impl UnaryFile {
    pub fn into_prediction(self) -> Result<UnaryPrediction> {
        if self.landmarks.len() != self.n {
            return Err(invalid(format!(
                "\"n\" is {} but {} landmarks listed",
                self.n,
                self.landmarks.len()
            )));
        }
        let means = self
            .landmarks
            .iter()
            .map(|l| Vector2::new(l.mu[0], l.mu[1]))
            .collect();
        let covs = self
            .landmarks
            .iter()
            .map(|l| Matrix2::new(l.sigma[0][0], l.sigma[0][1], l.sigma[1][0], l.sigma[1][1]))
            .collect();
        UnaryPrediction::with_floor(means, covs)
    }
}

impl From<&UnaryPrediction> for UnaryFile {
    fn from(u: &UnaryPrediction) -> Self {
        Self {
            n: u.len(),
            landmarks: u
                .means
                .iter()
                .zip(&u.covariances)
                .map(|(m, s)| UnaryEntry {
                    mu: [m.x, m.y],
                    sigma: [[s[(0, 0)], s[(0, 1)]], [s[(1, 0)], s[(1, 1)]]],
                })
                .collect(),
        }
    }
}

/// Pairwise structure parameters: one lower-triangular factor per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseSet {
    n: usize,
    factors: Vec<Matrix2<f64>>,
}

impl PairwiseSet {
    /// All `C_ij = 0`: the CRF reduces to the unary predictor.
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            factors: vec![Matrix2::zeros(); pair_count(n)],
        }
    }

    /// All `C_ij = scale · I`.
    pub fn scaled_identity(n: usize, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(invalid(format!(
                "pair scale must be non-negative, got {scale}"
            )));
        }
        Ok(Self {
            n,
            factors: vec![Matrix2::identity() * scale.sqrt(); pair_count(n)],
        })
    }

    /// Factors in [`pairs`] order. Each must be lower triangular and finite;
    /// negative diagonal entries are absorbed by flipping the column sign
    /// (which leaves `C_ij` unchanged).
    pub fn from_factors(n: usize, factors: Vec<Matrix2<f64>>) -> Result<Self> {
        if factors.len() != pair_count(n) {
            return Err(invalid(format!(
                "{} pair factors for N={n}, expected {}",
                factors.len(),
                pair_count(n)
            )));
        }
        for (slot, f) in factors.iter().enumerate() {
            if !f.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!(
                    "pair factor {slot} has non-finite entries"
                )));
            }
            if f[(0, 1)] != 0.0 {
                return Err(invalid(format!(
                    "pair factor {slot} is not lower triangular"
                )));
            }
        }
        let mut set = Self { n, factors };
        set.canonicalize();
        Ok(set)
    }

    pub fn num_landmarks(&self) -> usize {
        self.n
    }

    pub fn factors(&self) -> &[Matrix2<f64>] {
        &self.factors
    }

    /// `L_ij`; `(j, i)` returns the same entry as `(i, j)`.
    pub fn factor(&self, i: usize, j: usize) -> &Matrix2<f64> {
        &self.factors[pair_index(self.n, i, j)]
    }

    /// `C_ij = L_ij L_ijᵀ`.
    pub fn matrix(&self, i: usize, j: usize) -> Matrix2<f64> {
        let l = self.factor(i, j);
        l * l.transpose()
    }

    /// All `C_ij` in [`pairs`] order.
    pub fn matrices(&self) -> Vec<Matrix2<f64>> {
        self.factors.iter().map(|l| l * l.transpose()).collect()
    }

    pub fn is_all_zero(&self) -> bool {
        self.factors.iter().all(|l| l.iter().all(|v| *v == 0.0))
    }

    /// Applies `L ← L − step · grad` to every factor (upper entries stay
    /// zero) and restores non-negative diagonals.
    pub fn descend(&self, grad: &[Matrix2<f64>], step: f64) -> Self {
        let mut out = self.clone();
        for (l, g) in out.factors.iter_mut().zip(grad) {
            l[(0, 0)] -= step * g[(0, 0)];
            l[(1, 0)] -= step * g[(1, 0)];
            l[(1, 1)] -= step * g[(1, 1)];
        }
        out.canonicalize();
        out
    }

    fn canonicalize(&mut self) {
        for l in &mut self.factors {
            for c in 0..2 {
                if l[(c, c)] < 0.0 {
                    l[(c, c)] = -l[(c, c)];
                    if c == 0 {
                        l[(1, 0)] = -l[(1, 0)];
                    }
                }
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PairwiseFile = io::read_json(path)?;
        file.into_set().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &PairwiseFile::from(self))
    }
}

/// `{"n": N, "pairs": [{"i", "j", "l": [[l11, 0], [l21, l22]]}]}`, every
/// `i < j` present exactly once, any order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseFile {
    pub n: usize,
    pub pairs: Vec<PairEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub i: usize,
    pub j: usize,
    pub l: [[f64; 2]; 2],
}

impl PairwiseFile {
    pub fn into_set(self) -> Result<PairwiseSet> {
        let n = self.n;
        let mut slots: Vec<Option<Matrix2<f64>>> = vec![None; pair_count(n)];
        for e in &self.pairs {
            if e.i >= e.j || e.j >= n {
                return Err(invalid(format!(
                    "pair ({}, {}) is not a valid i<j pair for N={n}",
                    e.i, e.j
                )));
            }
            let slot = pair_index(n, e.i, e.j);
            if slots[slot].is_some() {
                return Err(invalid(format!("pair ({}, {}) listed twice", e.i, e.j)));
            }
            slots[slot] = Some(Matrix2::new(e.l[0][0], e.l[0][1], e.l[1][0], e.l[1][1]));
        }
        let factors = slots
            .into_iter()
            .zip(pairs(n))
            .map(|(s, (i, j))| s.ok_or_else(|| invalid(format!("pair ({i}, {j}) missing"))))
            .collect::<Result<Vec<_>>>()?;
        PairwiseSet::from_factors(n, factors)
    }
}

impl From<&PairwiseSet> for PairwiseFile {
    fn from(p: &PairwiseSet) -> Self {
        Self {
            n: p.n,
            pairs: pairs(p.n)
                .zip(&p.factors)
                .map(|((i, j), l)| PairEntry {
                    i,
                    j,
                    l: [[l[(0, 0)], l[(0, 1)]], [l[(1, 0)], l[(1, 1)]]],
                })
                .collect(),
        }
    }
}

/// Expected offsets `μ_ij` for `i < j`; the reverse direction is implied by
/// antisymmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct PairOffsets {
    n: usize,
    offsets: Vec<Vector2<f64>>,
}

impl PairOffsets {
    /// Offsets in [`pairs`] order.
    pub fn new(n: usize, offsets: Vec<Vector2<f64>>) -> Result<Self> {
        if offsets.len() != pair_count(n) {
            return Err(invalid(format!(
                "{} offsets for N={n}, expected {}",
                offsets.len(),
                pair_count(n)
            )));
        }
        Ok(Self { n, offsets })
    }

    /// From a full `N x N` table (diagonal ignored). The table must satisfy
    /// `μ_ji = −μ_ij` within 1e-12.
    pub fn from_table(table: &[Vec<Vector2<f64>>]) -> Result<Self> {
        let n = table.len();
        if table.iter().any(|row| row.len() != n) {
            return Err(invalid("offset table must be square"));
        }
        let mut offsets = Vec::with_capacity(pair_count(n));
        for (i, j) in pairs(n) {
            let (f, r) = (table[i][j], table[j][i]);
            if (f + r).amax() > 1e-12 {
                return Err(invalid(format!(
                    "offsets are not antisymmetric at ({i}, {j}): {f:?} vs {r:?}"
                )));
            }
            offsets.push(f);
        }
        Ok(Self { n, offsets })
    }

    /// `μ_ij(ζ)` from a shape model.
    pub fn from_model(model: &ShapeModel3D, zeta: &DeformParams) -> Result<Self> {
        Ok(Self {
            n: model.num_landmarks(),
            offsets: all_expected_offsets(model, zeta)?,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            offsets: vec![Vector2::zeros(); pair_count(n)],
        }
    }

    pub fn as_slice(&self) -> &[Vector2<f64>] {
        &self.offsets
    }

    /// `μ_ij` for any ordered pair.
    pub fn get(&self, i: usize, j: usize) -> Vector2<f64> {
        let o = self.offsets[pair_index(self.n, i, j)];
        if i < j {
            o
        } else {
            -o
        }
    }
}

/// Exact conditional `p(y | ζ, x)`: mean, Cholesky factor of the precision
/// and its log-determinant.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub precision_factor: Cholesky,
    pub log_det_precision: f64,
}

impl ConditionalGaussian {
    pub fn precision(&self) -> DMatrix<f64> {
        let l = self.precision_factor.l();
        l * l.transpose()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision_factor.inverse()
    }

    pub fn landmarks(&self) -> Vec<Vector2<f64>> {
        unstack(&self.mean)
    }
}

/// Per-block gradients of the negative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGradients {
    /// NLL at the evaluation point.
    pub value: f64,
    /// ∂/∂μ_i
    pub d_means: Vec<Vector2<f64>>,
    /// ∂/∂Σ_i⁻¹ as a symmetric matrix: for a symmetric perturbation `dP`,
    /// `dLoss = Σ_ab G_ab dP_ab`.
    pub d_inv_covariances: Vec<Matrix2<f64>>,
    /// ∂/∂L_ij, lower triangular, in pair order.
    pub d_pair_factors: Vec<Matrix2<f64>>,
    /// ∂/∂μ_ij for `i < j`, in pair order.
    pub d_offsets: Vec<Vector2<f64>>,
}

pub(crate) fn stack(points: &[Vector2<f64>]) -> DVector<f64> {
    DVector::from_iterator(2 * points.len(), points.iter().flat_map(|p| [p.x, p.y]))
}

pub(crate) fn unstack(v: &DVector<f64>) -> Vec<Vector2<f64>> {
    (0..v.len() / 2)
        .map(|i| Vector2::new(v[2 * i], v[2 * i + 1]))
        .collect()
}

fn block(v: &DVector<f64>, i: usize) -> Vector2<f64> {
    Vector2::new(v[2 * i], v[2 * i + 1])
}

/// `½ (y − μ)ᵀ Σ⁻¹ (y − μ)`.
pub fn unary_energy(y: &Vector2<f64>, mu: &Vector2<f64>, sigma: &Matrix2<f64>) -> Result<f64> {
    check_covariance(sigma)?;
    let r = y - mu;
    Ok(0.5 * r.dot(&(inverse2(sigma) * r)))
}

/// `(y_i − y_j − μ_ij)ᵀ C_ij (y_i − y_j − μ_ij)`.
pub fn pairwise_energy(
    yi: &Vector2<f64>,
    yj: &Vector2<f64>,
    mu_ij: &Vector2<f64>,
    c: &Matrix2<f64>,
) -> Result<f64> {
    let all_finite = yi
        .iter()
        .chain(yj.iter())
        .chain(mu_ij.iter())
        .chain(c.iter())
        .all(|v| v.is_finite());
    if !all_finite {
        return Err(invalid("pairwise energy inputs must be finite"));
    }
    let d = yi - yj - mu_ij;
    Ok(d.dot(&(c * d)))
}

fn check_sizes(unaries: &UnaryPrediction, pairs_: &PairwiseSet) -> Result<usize> {
    let n = unaries.len();
    if pairs_.num_landmarks() != n {
        return Err(invalid(format!(
            "unary has N={n}, pairwise set has N={}",
            pairs_.num_landmarks()
        )));
    }
    Ok(n)
}

/// Dense `2N x 2N` precision matrix.
pub fn assemble_precision(unaries: &UnaryPrediction, pairs_: &PairwiseSet) -> Result<DMatrix<f64>> {
    let n = check_sizes(unaries, pairs_)?;
    let mut lam = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for (i, p) in unaries.precisions().iter().enumerate() {
        lam.fixed_view_mut::<2, 2>(2 * i, 2 * i).copy_from(p);
    }
    for ((i, j), c) in pairs(n).zip(pairs_.matrices()) {
        let mut ii = lam.fixed_view_mut::<2, 2>(2 * i, 2 * i);
        ii += c;
        let mut jj = lam.fixed_view_mut::<2, 2>(2 * j, 2 * j);
        jj += c;
        lam.fixed_view_mut::<2, 2>(2 * i, 2 * j).copy_from(&(-c));
        lam.fixed_view_mut::<2, 2>(2 * j, 2 * i).copy_from(&(-c));
    }
    Ok(lam)
}

/// Right-hand side `b` of `Λ E = b`.
pub fn assemble_rhs(
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    offsets: &PairOffsets,
) -> Result<DVector<f64>> {
    let n = check_sizes(unaries, pairs_)?;
    if offsets.n != n {
        return Err(invalid(format!(
            "offsets have N={}, expected {n}",
            offsets.n
        )));
    }
    let mut b = DVector::<f64>::zeros(2 * n);
    for (i, (p, mu)) in unaries.precisions().iter().zip(unaries.means()).enumerate() {
        b.fixed_rows_mut::<2>(2 * i).copy_from(&(p * mu));
    }
    for (((i, j), c), mu_ij) in pairs(n).zip(pairs_.matrices()).zip(offsets.as_slice()) {
        let t = c * mu_ij;
        let mut bi = b.fixed_rows_mut::<2>(2 * i);
        bi += t;
        let mut bj = b.fixed_rows_mut::<2>(2 * j);
        bj -= t;
    }
    Ok(b)
}

/// Conditional Gaussian for explicit offsets.
pub fn conditional_gaussian_with_offsets(
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    offsets: &PairOffsets,
) -> Result<ConditionalGaussian> {
    let lam = assemble_precision(unaries, pairs_)?;
    let b = assemble_rhs(unaries, pairs_, offsets)?;
    let factor = Cholesky::factor(&lam)?;
    let log_det_precision = factor.log_det();
    // with no pairwise coupling the mode is the unary mean, returned exactly
    let mean = if pairs_.is_all_zero() {
        unaries.stacked_means()
    } else {
        factor.solve(&b)
    };
    Ok(ConditionalGaussian {
        mean,
        precision_factor: factor,
        log_det_precision,
    })
}

/// `p(y | ζ, x)` with offsets `μ_ij(ζ)` from the shape model.
pub fn conditional_gaussian(
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
    zeta: &DeformParams,
) -> Result<ConditionalGaussian> {
    check_model(unaries, model)?;
    let offsets = PairOffsets::from_model(model, zeta)?;
    conditional_gaussian_with_offsets(unaries, pairs_, &offsets)
}

fn check_model(unaries: &UnaryPrediction, model: &ShapeModel3D) -> Result<()> {
    if model.num_landmarks() != unaries.len() {
        return Err(invalid(format!(
            "shape model has N={}, unary has N={}",
            model.num_landmarks(),
            unaries.len()
        )));
    }
    Ok(())
}

/// Sum of pairwise energies `Σ_{i<j} ψ_ij` for explicit offsets.
pub fn pairwise_sum(
    y: &[Vector2<f64>],
    pairs_: &PairwiseSet,
    offsets: &PairOffsets,
) -> Result<f64> {
    let mut acc = 0.0;
    for (((i, j), c), mu) in pairs(pairs_.num_landmarks())
        .zip(pairs_.matrices())
        .zip(offsets.as_slice())
    {
        acc += pairwise_energy(&y[i], &y[j], mu, &c)?;
    }
    Ok(acc)
}

/// Negative log of the unnormalized joint density,
/// `Σ_i φ_i + ½ Σ_{i<j} ψ_ij`.
///
/// The pairwise terms carry weight ½ so that the precision above is exactly
/// the Hessian of this energy in `y`, which makes the conditional mean `E`
/// its exact minimizer at fixed `ζ`.
pub fn total_energy(
    y: &DVector<f64>,
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
    zeta: &DeformParams,
) -> Result<f64> {
    check_model(unaries, model)?;
    let offsets = PairOffsets::from_model(model, zeta)?;
    total_energy_with_offsets(y, unaries, pairs_, &offsets)
}

pub fn total_energy_with_offsets(
    y: &DVector<f64>,
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    offsets: &PairOffsets,
) -> Result<f64> {
    let n = check_sizes(unaries, pairs_)?;
    if y.len() != 2 * n {
        return Err(invalid(format!(
            "y has length {}, expected {}",
            y.len(),
            2 * n
        )));
    }
    let pts = unstack(y);
    let mut acc = 0.0;
    for ((yi, mu), s) in pts.iter().zip(unaries.means()).zip(unaries.covariances()) {
        acc += unary_energy(yi, mu, s)?;
    }
    Ok(acc + 0.5 * pairwise_sum(&pts, pairs_, offsets)?)
}

/// `−½ ln|Λ| + ½ (y − E)ᵀ Λ (y − E)`, evaluated through the stored factor.
/// The `N ln 2π` normalization constant is not included.
pub fn nll(y_gt: &DVector<f64>, cg: &ConditionalGaussian) -> Result<f64> {
    if y_gt.len() != cg.mean.len() {
        return Err(invalid(format!(
            "ground truth has length {}, expected {}",
            y_gt.len(),
            cg.mean.len()
        )));
    }
    let r = y_gt - &cg.mean;
    Ok(-0.5 * cg.log_det_precision + 0.5 * cg.precision_factor.quad_form(&r))
}

/// Analytic NLL gradients with offsets from the shape model.
pub fn nll_gradients(
    y_gt: &DVector<f64>,
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
    zeta: &DeformParams,
) -> Result<NllGradients> {
    check_model(unaries, model)?;
    let offsets = PairOffsets::from_model(model, zeta)?;
    nll_gradients_with_offsets(y_gt, unaries, pairs_, &offsets)
}

/// Analytic NLL gradients for explicit offsets.
///
/// With `Σ_p = Λ⁻¹`, `r = y − E`, the loss differential is
/// `dL = ⟨G, dΛ⟩ − rᵀ db` where `G = −½ Σ_p + ½ (r rᵀ + r Eᵀ + E rᵀ)`;
/// the per-parameter gradients follow from how each block enters `Λ` and `b`.
pub fn nll_gradients_with_offsets(
    y_gt: &DVector<f64>,
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    offsets: &PairOffsets,
) -> Result<NllGradients> {
    let cg = conditional_gaussian_with_offsets(unaries, pairs_, offsets)?;
    let value = nll(y_gt, &cg)?;
    let n = unaries.len();
    let cov = cg.covariance();
    let r = y_gt - &cg.mean;

    let g_block = |a: usize, b: usize| -> Matrix2<f64> {
        let ra = block(&r, a);
        let rb = block(&r, b);
        let ea = block(&cg.mean, a);
        let eb = block(&cg.mean, b);
        let outer = ra * rb.transpose() + ra * eb.transpose() + ea * rb.transpose();
        (outer - cov.fixed_view::<2, 2>(2 * a, 2 * b)) * 0.5
    };
    // ∂L/∂b = E − y
    let gb = |a: usize| -> Vector2<f64> { -block(&r, a) };

    let mut d_means = Vec::with_capacity(n);
    let mut d_inv_covariances = Vec::with_capacity(n);
    for (i, (p, mu)) in unaries.precisions().iter().zip(unaries.means()).enumerate() {
        let g = gb(i);
        d_means.push(p * g);
        let a = g_block(i, i) + g * mu.transpose();
        d_inv_covariances.push((a + a.transpose()) * 0.5);
    }

    let mut d_pair_factors = Vec::with_capacity(pair_count(n));
    let mut d_offsets = Vec::with_capacity(pair_count(n));
    for (((i, j), l), mu_ij) in pairs(n).zip(pairs_.factors()).zip(offsets.as_slice()) {
        let c = l * l.transpose();
        let gij = g_block(i, j);
        let dg = gb(i) - gb(j);
        let a = g_block(i, i) + g_block(j, j) - gij - gij.transpose() + dg * mu_ij.transpose();
        let mut dl = (a + a.transpose()) * l;
        dl[(0, 1)] = 0.0;
        d_pair_factors.push(dl);
        d_offsets.push(c * dg);
    }

    let grads = NllGradients {
        value,
        d_means,
        d_inv_covariances,
        d_pair_factors,
        d_offsets,
    };
    let finite = grads
        .d_means
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
        && grads
            .d_inv_covariances
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
        && grads
            .d_pair_factors
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
        && grads
            .d_offsets
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
    if !finite || !value.is_finite() {
        return Err(Error::NumericalDomain("non-finite NLL gradient".into()));
    }
    Ok(grads)
}
