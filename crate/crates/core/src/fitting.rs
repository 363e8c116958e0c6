//! Deformable-parameter fitting: minimizes
//!
//! ```text
//! Σ_{i<j} (y_i − y_j − μ_ij(ζ))ᵀ C_ij (y_i − y_j − μ_ij(ζ)) + λ_q ‖q‖²
//! ```
//!
//! over `ζ` by Levenberg-Marquardt on the whitened residuals
//! `ρ_ij = L_ijᵀ (y_i − y_j − μ_ij(ζ))`. Scales are optimized in log space so
//! they stay positive; trial points with `|ln s|` above [`MAX_LOG_SCALE`]
//! are treated as infeasible.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::crf::{unstack, PairwiseSet};
use crate::error::{invalid, Error, Result};
use crate::model::{project_shape, rotation_from_euler, DeformParams, ShapeModel3D};
use crate::pairs::pairs;

/// Bound on `|ln sx|` and `|ln sy|` during fitting.
pub const MAX_LOG_SCALE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Weight of the `‖q‖²` shape prior; zero disables it.
    pub lambda_q: f64,
    pub max_iters: usize,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction.
    pub rel_tol: f64,
    /// Stop when the step norm falls below this.
    pub step_tol: f64,
    /// Gradient norm required for the result to count as converged.
    pub grad_tol: f64,
    /// Forward-difference step for the Jacobian.
    pub fd_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda_q: 1e-3,
            max_iters: 200,
            rel_tol: 1e-10,
            step_tol: 1e-10,
            grad_tol: 1e-6,
            fd_step: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// LM iterations, including rejected trial steps.
    pub iterations: usize,
    pub initial_objective: f64,
    pub objective: f64,
    /// Norm of the objective gradient at the returned parameters.
    pub grad_norm: f64,
    pub converged: bool,
}

struct ActivePair {
    i: usize,
    j: usize,
    /// Lᵀ
    lt: Matrix2<f64>,
    /// Lᵀ (y_i − y_j)
    target: Vector2<f64>,
}

/// Residual evaluator with everything independent of ζ precomputed.
struct Problem<'a> {
    model: &'a ShapeModel3D,
    active: Vec<ActivePair>,
    reg: f64,
    k: usize,
}

impl<'a> Problem<'a> {
    fn new(
        y: &[Vector2<f64>],
        pairs_: &PairwiseSet,
        model: &'a ShapeModel3D,
        lambda_q: f64,
    ) -> Self {
        let active = pairs(model.num_landmarks())
            .zip(pairs_.factors())
            .filter(|(_, l)| l.iter().any(|v| *v != 0.0))
            .map(|((i, j), l)| {
                let lt = l.transpose();
                ActivePair {
                    i,
                    j,
                    lt,
                    target: lt * (y[i] - y[j]),
                }
            })
            .collect();
        Self {
            model,
            active,
            reg: lambda_q.max(0.0).sqrt(),
            k: model.num_bases(),
        }
    }

    fn num_params(&self) -> usize {
        5 + self.k
    }

    fn num_residuals(&self) -> usize {
        2 * self.active.len() + if self.reg > 0.0 { self.k } else { 0 }
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        if !(p[0].abs() <= MAX_LOG_SCALE && p[1].abs() <= MAX_LOG_SCALE) {
            return DVector::from_element(self.num_residuals(), f64::NAN);
        }
        let (sx, sy) = (p[0].exp(), p[1].exp());
        let rot: Matrix3<f64> = rotation_from_euler(p[2], p[3], p[4])
            .unwrap_or_else(|_| Matrix3::from_element(f64::NAN));
        let q = p.rows(5, self.k);
        let mean = self.model.mean_shape();
        let bases = self.model.bases();
        let row = |i: usize| -> Vector3<f64> {
            let mut v = mean[i];
            for (qk, b) in q.iter().zip(bases) {
                v += b[i] * *qk;
            }
            v
        };
        let inst: Vec<Vector3<f64>> = (0..self.model.num_landmarks()).map(row).collect();
        let mut r = DVector::zeros(self.num_residuals());
        for (slot, ap) in self.active.iter().enumerate() {
            let v = rot * (inst[ap.i] - inst[ap.j]);
            let mu = Vector2::new(sx * v.x, sy * v.y);
            let rho = ap.target - ap.lt * mu;
            r[2 * slot] = rho.x;
            r[2 * slot + 1] = rho.y;
        }
        if self.reg > 0.0 {
            let base = 2 * self.active.len();
            for k in 0..self.k {
                r[base + k] = self.reg * q[k];
            }
        }
        r
    }

    fn jacobian(&self, p: &DVector<f64>, r0: &DVector<f64>, step: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(r0.len(), p.len());
        let mut pp = p.clone();
        for c in 0..p.len() {
            let h = step * p[c].abs().max(1.0);
            pp[c] = p[c] + h;
            let mut rc = self.residuals(&pp);
            if rc[0].is_nan() {
                pp[c] = p[c] - h;
                rc = self.residuals(&pp);
            }
            let h = pp[c] - p[c];
            jac.set_column(c, &((rc - r0) / h));
            pp[c] = p[c];
        }
        jac
    }
}

fn to_vector(z: &DeformParams) -> DVector<f64> {
    let mut v = Vec::with_capacity(5 + z.q.len());
    v.extend([z.sx.ln(), z.sy.ln(), z.pitch, z.yaw, z.roll]);
    v.extend_from_slice(&z.q);
    DVector::from_vec(v)
}

fn from_vector(p: &DVector<f64>) -> DeformParams {
    DeformParams {
        sx: p[0].exp(),
        sy: p[1].exp(),
        pitch: p[2],
        yaw: p[3],
        roll: p[4],
        q: p.rows(5, p.len() - 5).iter().copied().collect(),
    }
}

/// Regularized fitting objective at `zeta` (the quantity the fit minimizes).
pub fn fit_objective(
    y: &DVector<f64>,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
    zeta: &DeformParams,
    lambda_q: f64,
) -> Result<f64> {
    let pts = check_inputs(y, pairs_, model)?;
    zeta.validate(model.num_bases())?;
    let problem = Problem::new(&pts, pairs_, model, lambda_q);
    Ok(problem.residuals(&to_vector(zeta)).norm_squared())
}

fn check_inputs(
    y: &DVector<f64>,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
) -> Result<Vec<Vector2<f64>>> {
    let n = model.num_landmarks();
    if y.len() != 2 * n {
        return Err(invalid(format!(
            "y has length {}, model expects {}",
            y.len(),
            2 * n
        )));
    }
    if pairs_.num_landmarks() != n {
        return Err(invalid(format!(
            "pairwise set has N={}, model has N={n}",
            pairs_.num_landmarks()
        )));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(invalid("landmarks must be finite"));
    }
    Ok(unstack(y))
}

/// Cold-start parameters: zero rotation and shape coefficients, isotropic
/// scale matching the RMS pairwise spread of `y` to that of the projected
/// mean shape.
pub fn cold_start(y: &DVector<f64>, model: &ShapeModel3D) -> Result<DeformParams> {
    let n = model.num_landmarks();
    if y.len() != 2 * n {
        return Err(invalid(format!(
            "y has length {}, model expects {}",
            y.len(),
            2 * n
        )));
    }
    let pts = unstack(y);
    let mean = model.mean_shape();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, j) in pairs(n) {
        num += (pts[i] - pts[j]).norm_squared();
        let d = mean[i] - mean[j];
        den += d.x * d.x + d.y * d.y;
    }
    let s = if num > 0.0 && den > 0.0 {
        (num / den).sqrt()
    } else {
        1.0
    };
    Ok(DeformParams {
        sx: s,
        sy: s,
        ..DeformParams::identity(model.num_bases())
    })
}

/// Fits `ζ` to fixed landmark positions `y`.
///
/// The returned parameters never have a higher objective than `init`.
/// Hitting `max_iters` is not an error: the best iterate is returned with
/// `converged = false`.
pub fn fit_deform_params(
    y: &DVector<f64>,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
    init: &DeformParams,
    opts: &FitOptions,
) -> Result<(DeformParams, FitDiagnostics)> {
    let pts = check_inputs(y, pairs_, model)?;
    init.validate(model.num_bases())?;
    if model.num_landmarks() < 3 {
        return Err(Error::Underdetermined(format!(
            "{} landmarks give too few residuals for {} parameters",
            model.num_landmarks(),
            5 + model.num_bases()
        )));
    }
    if pairs_.is_all_zero() {
        return Err(Error::Underdetermined(
            "all pairwise matrices are zero".into(),
        ));
    }

    let problem = Problem::new(&pts, pairs_, model, opts.lambda_q);
    let mut p = to_vector(init);
    let mut r = problem.residuals(&p);
    let mut f = r.norm_squared();
    if !f.is_finite() {
        return Err(invalid(format!(
            "initial parameters are outside the fitting domain (sx={}, sy={})",
            init.sx, init.sy
        )));
    }
    let initial_objective = f;
    let mut jac = problem.jacobian(&p, &r, opts.fd_step);
    let mut damping = 1e-3;
    let mut iterations = 0;
    let mut stopped = f == 0.0;

    while !stopped && iterations < opts.max_iters {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut a = jtj.clone();
        for d in 0..problem.num_params() {
            a[(d, d)] += damping * jtj[(d, d)].max(1e-12);
        }
        let step = match a.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => {
                damping *= 10.0;
                continue;
            }
        };
        let step_norm = step.norm();
        let p_new = &p + &step;
        let r_new = problem.residuals(&p_new);
        let f_new = r_new.norm_squared();
        if f_new.is_finite() && f_new < f {
            let rel = (f - f_new) / f;
            p = p_new;
            r = r_new;
            f = f_new;
            jac = problem.jacobian(&p, &r, opts.fd_step);
            damping = (damping / 3.0).max(1e-15);
            if rel < opts.rel_tol || step_norm < opts.step_tol || f == 0.0 {
                stopped = true;
            }
        } else {
            damping *= 4.0;
            if step_norm < opts.step_tol || damping > 1e16 {
                stopped = true;
            }
        }
    }

    let grad_norm = 2.0 * (jac.transpose() * &r).norm();
    let zeta = from_vector(&p).canonicalized();
    let diag = FitDiagnostics {
        iterations,
        initial_objective,
        objective: f,
        grad_norm,
        converged: stopped && grad_norm <= opts.grad_tol,
    };
    Ok((zeta, diag))
}

/// Projected shape placed with the least-squares translation onto `y`.
pub fn fitted_landmarks(
    y: &DVector<f64>,
    model: &ShapeModel3D,
    zeta: &DeformParams,
) -> Result<Vec<Vector2<f64>>> {
    let proj = project_shape(model, zeta)?;
    if y.len() != 2 * proj.len() {
        return Err(invalid("landmark count does not match the model"));
    }
    let pts = unstack(y);
    let t = pts
        .iter()
        .zip(&proj)
        .map(|(a, b)| a - b)
        .sum::<Vector2<f64>>()
        / pts.len() as f64;
    Ok(proj.iter().map(|p| p + t).collect())
}
