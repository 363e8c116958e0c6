//! Joint inference of landmarks and deformable parameters by alternating
//! a ζ-step (shape fit at fixed landmarks) and a y-step (exact conditional
//! mean at fixed ζ), starting from the unary means.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::crf::{conditional_gaussian, total_energy, PairwiseSet, UnaryPrediction};
use crate::error::{invalid, Result};
use crate::fitting::{cold_start, fit_deform_params, FitOptions};
use crate::model::{DeformParams, ShapeModel3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferOptions {
    /// Stop once `‖yᵗ⁺¹ − yᵗ‖_∞` drops below this.
    pub tol: f64,
    pub max_iters: usize,
    pub fit: FitOptions,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iters: 50,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Unary means with the cold-start ζ.
    Init,
    Zeta,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfStep {
    pub kind: StepKind,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferTrace {
    /// Energy after every half-step, in order.
    pub half_steps: Vec<HalfStep>,
    /// Energy at the end of each full iteration.
    pub iteration_energies: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Energy tracked during inference: [`total_energy`] plus the shape prior
/// `½ λ_q ‖q‖²`, the same prior (at the same relative weight) that the
/// ζ-step minimizes alongside the pairwise terms.
pub fn joint_energy(
    y: &DVector<f64>,
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
    zeta: &DeformParams,
    lambda_q: f64,
) -> Result<f64> {
    let q2: f64 = zeta.q.iter().map(|v| v * v).sum();
    Ok(total_energy(y, unaries, pairs_, model, zeta)? + 0.5 * lambda_q * q2)
}

/// Alternating joint inference. Deterministic: no randomized components.
pub fn infer(
    unaries: &UnaryPrediction,
    pairs_: &PairwiseSet,
    model: &ShapeModel3D,
    opts: &InferOptions,
) -> Result<(DVector<f64>, DeformParams, InferTrace)> {
    if opts.max_iters == 0 {
        return Err(invalid("max_iters must be at least 1"));
    }
    let lq = opts.fit.lambda_q;
    let mut y = unaries.stacked_means();
    let mut zeta = cold_start(&y, model)?;
    let mut trace = InferTrace {
        half_steps: Vec::new(),
        iteration_energies: Vec::new(),
        iterations: 0,
        converged: false,
    };

    if pairs_.is_all_zero() {
        // no coupling: the ζ-step is undefined and the y-step returns μ
        let cg = conditional_gaussian(unaries, pairs_, model, &zeta)?;
        y = cg.mean;
        let e = joint_energy(&y, unaries, pairs_, model, &zeta, lq)?;
        trace.half_steps.push(HalfStep {
            kind: StepKind::Y,
            energy: e,
        });
        trace.iteration_energies.push(e);
        trace.iterations = 1;
        trace.converged = true;
        return Ok((y, zeta, trace));
    }

    let e0 = joint_energy(&y, unaries, pairs_, model, &zeta, lq)?;
    trace.half_steps.push(HalfStep {
        kind: StepKind::Init,
        energy: e0,
    });

    for _ in 0..opts.max_iters {
        let (fitted, _) = fit_deform_params(&y, pairs_, model, &zeta, &opts.fit)?;
        zeta = fitted;
        let e = joint_energy(&y, unaries, pairs_, model, &zeta, lq)?;
        trace.half_steps.push(HalfStep {
            kind: StepKind::Zeta,
            energy: e,
        });

        let cg = conditional_gaussian(unaries, pairs_, model, &zeta)?;
        let change = (&cg.mean - &y).amax();
        y = cg.mean;
        let e = joint_energy(&y, unaries, pairs_, model, &zeta, lq)?;
        trace.half_steps.push(HalfStep {
            kind: StepKind::Y,
            energy: e,
        });
        trace.iteration_energies.push(e);
        trace.iterations += 1;

        if change < opts.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((y, zeta, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::stack;
    use crate::model::project_shape;
    use nalgebra::Vector2;

    fn clean_unaries(model: &ShapeModel3D, zeta: &DeformParams, var: f64) -> UnaryPrediction {
        let pts: Vec<_> = project_shape(model, zeta)
            .unwrap()
            .iter()
            .map(|p| p + Vector2::new(0.5, 0.5))
            .collect();
        UnaryPrediction::isotropic(pts, var).unwrap()
    }

    #[test]
    fn zero_pairs_return_means_in_one_iteration() {
        let model = ShapeModel3D::synthetic(10, 2, 0.25, 5).unwrap();
        let u = clean_unaries(
            &model,
            &DeformParams {
                yaw: 0.3,
                ..DeformParams::identity(2)
            },
            4e-4,
        );
        let (y, _, trace) = infer(
            &u,
            &PairwiseSet::zeros(10),
            &model,
            &InferOptions::default(),
        )
        .unwrap();
        assert_eq!(y, u.stacked_means());
        assert_eq!(trace.iterations, 1);
        assert!(trace.converged);
    }

    #[test]
    fn clean_sample_stays_at_unary_means() {
        let model = ShapeModel3D::synthetic(12, 4, 0.25, 5).unwrap();
        let truth = DeformParams {
            sx: 1.1,
            sy: 1.0,
            pitch: 0.1,
            yaw: -0.4,
            roll: 0.05,
            q: vec![0.0; 4],
        };
        let u = clean_unaries(&model, &truth, 1e-8);
        let pairs_ = PairwiseSet::scaled_identity(12, 0.01).unwrap();
        let (y, _, trace) = infer(&u, &pairs_, &model, &InferOptions::default()).unwrap();
        assert!((y - u.stacked_means()).amax() < 1e-6);
        for w in trace.half_steps.windows(2) {
            assert!(w[1].energy <= w[0].energy + 1e-9, "{trace:?}");
        }
    }

    #[test]
    fn energy_is_monotone_with_a_corrupted_landmark() {
        let model = ShapeModel3D::synthetic(12, 4, 0.25, 8).unwrap();
        let truth = DeformParams {
            sx: 1.0,
            sy: 1.1,
            pitch: -0.2,
            yaw: 0.6,
            roll: 0.1,
            q: vec![0.0; 4],
        };
        let clean = clean_unaries(&model, &truth, 4e-4);
        let mut means = clean.means().to_vec();
        means[3] += Vector2::new(0.15, 0.0);
        let mut covs = clean.covariances().to_vec();
        covs[3] *= 100.0;
        let u = UnaryPrediction::new(means, covs).unwrap();
        let pairs_ = PairwiseSet::scaled_identity(12, 5.0).unwrap();
        let (y, _, trace) = infer(&u, &pairs_, &model, &InferOptions::default()).unwrap();
        for w in trace.half_steps.windows(2) {
            assert!(w[1].energy <= w[0].energy + 1e-9, "{trace:?}");
        }
        let gt = stack(clean.means());
        let err = |v: &DVector<f64>| (v.rows(6, 2) - gt.rows(6, 2)).norm();
        assert!(err(&y) < err(&u.stacked_means()));
    }

    #[test]
    fn max_iters_bounds_the_trace() {
        let model = ShapeModel3D::synthetic(8, 2, 0.25, 2).unwrap();
        let u = clean_unaries(
            &model,
            &DeformParams {
                roll: 0.4,
                ..DeformParams::identity(2)
            },
            4e-4,
        );
        let mut means = u.means().to_vec();
        means[0] += Vector2::new(0.05, -0.02);
        let u = UnaryPrediction::isotropic(means, 4e-4).unwrap();
        let opts = InferOptions {
            max_iters: 1,
            ..InferOptions::default()
        };
        let pairs_ = PairwiseSet::scaled_identity(8, 1.0).unwrap();
        let (_, _, trace) = infer(&u, &pairs_, &model, &opts).unwrap();
        assert_eq!(trace.iteration_energies.len(), 1);
    }

    #[test]
    fn inference_is_deterministic() {
        let model = ShapeModel3D::synthetic(9, 3, 0.25, 4).unwrap();
        let u = clean_unaries(
            &model,
            &DeformParams {
                pitch: 0.2,
                ..DeformParams::identity(3)
            },
            1e-3,
        );
        let pairs_ = PairwiseSet::scaled_identity(9, 0.5).unwrap();
        let a = infer(&u, &pairs_, &model, &InferOptions::default()).unwrap();
        let b = infer(&u, &pairs_, &model, &InferOptions::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
