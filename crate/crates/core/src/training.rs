//! Learning of the pairwise structure parameters by exact maximum
//! likelihood. Each outer iteration refits every sample's deformable
//! parameters to its current conditional mean (stage 1), then runs
//! full-batch gradient descent on the pair factors (stage 3). The unary
//! gradients in [`NllGradients`] are left for an external network trainer.

use log::{debug, info};
use nalgebra::{DVector, Matrix2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{
    conditional_gaussian, nll, nll_gradients, NllGradients, PairwiseSet, UnaryPrediction,
    INIT_PAIR_SCALE,
};
use crate::error::{invalid, Error, Result};
use crate::fitting::{cold_start, fit_deform_params, FitOptions};
use crate::inference::{infer, InferOptions};
use crate::model::{DeformParams, ShapeModel3D};

/// One training example: unary predictions and ground-truth landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub unaries: UnaryPrediction,
    pub y_gt: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Initial stage-3 step size.
    pub learning_rate: f64,
    /// Step-size multiplier after an accepted step.
    pub lr_growth: f64,
    /// Rejected steps in a row before stage 3 gives up for this iteration.
    pub max_halvings: usize,
    pub max_outer: usize,
    /// Stop when the NLL improves by less than this fraction over
    /// `patience` outer iterations.
    pub rel_tol: f64,
    pub patience: usize,
    /// Conditional-mean / refit rounds per outer iteration.
    pub stage1_iters: usize,
    /// Gradient steps per outer iteration.
    pub stage3_steps: usize,
    /// Pairs whose matrices are eigen-checked each outer iteration.
    pub psd_checks: usize,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_growth: 1.5,
            max_halvings: 60,
            max_outer: 100,
            rel_tol: 1e-6,
            patience: 3,
            stage1_iters: 1,
            stage3_steps: 20,
            psd_checks: 8,
            seed: 0,
            fit: FitOptions::default(),
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(self.lr_growth >= 1.0 && self.lr_growth.is_finite()) {
            return Err(invalid("lr_growth must be at least 1"));
        }
        if self.max_outer == 0 || self.patience == 0 {
            return Err(invalid("max_outer and patience must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub outer: usize,
    /// Training NLL after stage 3.
    pub nll: f64,
    /// Step size at the end of the iteration.
    pub learning_rate: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training NLL at the initial parameters.
    pub initial_nll: f64,
    pub epochs: Vec<EpochRecord>,
    pub converged: bool,
    pub psd_checks: usize,
    /// Smallest eigenvalue seen across all checked `C_ij`.
    pub psd_min_eigenvalue: f64,
}

impl TrainReport {
    /// `initial_nll` followed by every epoch's NLL.
    pub fn nll_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial_nll)
            .chain(self.epochs.iter().map(|e| e.nll))
            .collect()
    }
}

fn check_data(data: &[TrainSample], model: &ShapeModel3D) -> Result<usize> {
    let n = model.num_landmarks();
    for s in data {
        if s.unaries.len() != n || s.y_gt.len() != 2 * n {
            return Err(invalid(format!(
                "sample {} has {} unaries and {} coordinates, model has N={n}",
                s.id,
                s.unaries.len(),
                s.y_gt.len()
            )));
        }
    }
    Ok(n)
}

fn sample_nll(
    s: &TrainSample,
    model: &ShapeModel3D,
    pairs_: &PairwiseSet,
    zeta: &DeformParams,
) -> Result<f64> {
    let cg = conditional_gaussian(&s.unaries, pairs_, model, zeta)?;
    nll(&s.y_gt, &cg)
}

/// `Σ_m nll_m` with each sample's conditional Gaussian at its own `ζ_m`.
pub fn dataset_nll(
    data: &[TrainSample],
    model: &ShapeModel3D,
    pairs_: &PairwiseSet,
    zetas: &[DeformParams],
) -> Result<f64> {
    if zetas.len() != data.len() {
        return Err(invalid(format!(
            "{} parameter sets for {} samples",
            zetas.len(),
            data.len()
        )));
    }
    check_data(data, model)?;
    let parts: Vec<f64> = data
        .par_iter()
        .zip(zetas)
        .map(|(s, z)| sample_nll(s, model, pairs_, z))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// Dataset NLL with each `ζ_m` taken from joint inference on its unaries,
/// i.e. without access to the ground truth.
pub fn heldout_nll(
    data: &[TrainSample],
    model: &ShapeModel3D,
    pairs_: &PairwiseSet,
    opts: &InferOptions,
) -> Result<f64> {
    check_data(data, model)?;
    let zetas: Vec<DeformParams> = data
        .par_iter()
        .map(|s| infer(&s.unaries, pairs_, model, opts).map(|(_, z, _)| z))
        .collect::<Result<_>>()?;
    dataset_nll(data, model, pairs_, &zetas)
}

/// NLL value and summed pair-factor gradient over the dataset.
fn dataset_gradient(
    data: &[TrainSample],
    model: &ShapeModel3D,
    pairs_: &PairwiseSet,
    zetas: &[DeformParams],
) -> Result<(f64, Vec<Matrix2<f64>>)> {
    let parts: Vec<NllGradients> = data
        .par_iter()
        .zip(zetas)
        .map(|(s, z)| nll_gradients(&s.y_gt, &s.unaries, pairs_, model, z))
        .collect::<Result<_>>()?;
    let mut grad = vec![Matrix2::zeros(); pairs_.factors().len()];
    let mut value = 0.0;
    for g in &parts {
        value += g.value;
        for (acc, d) in grad.iter_mut().zip(&g.d_pair_factors) {
            *acc += d;
        }
    }
    Ok((value, grad))
}

fn stage1_weights(pairs_: &PairwiseSet) -> PairwiseSet {
    if pairs_.is_all_zero() {
        PairwiseSet::scaled_identity(pairs_.num_landmarks(), 1.0).expect("unit scale is valid")
    } else {
        pairs_.clone()
    }
}

/// Refits `ζ_m` to the conditional mean. A refit that would raise the
/// sample's NLL is discarded so the training objective never increases.
fn stage1(
    data: &[TrainSample],
    model: &ShapeModel3D,
    pairs_: &PairwiseSet,
    zetas: &[DeformParams],
    opts: &TrainOptions,
) -> Result<Vec<DeformParams>> {
    let weights = stage1_weights(pairs_);
    data.par_iter()
        .zip(zetas)
        .map(|(s, z)| {
            let mut zeta = z.clone();
            let mut current = sample_nll(s, model, pairs_, &zeta)?;
            for _ in 0..opts.stage1_iters {
                let e = conditional_gaussian(&s.unaries, pairs_, model, &zeta)?.mean;
                let (cand, _) = fit_deform_params(&e, &weights, model, &zeta, &opts.fit)?;
                let value = sample_nll(s, model, pairs_, &cand)?;
                if value <= current {
                    zeta = cand;
                    current = value;
                }
            }
            Ok(zeta)
        })
        .collect()
}

fn min_eigenvalue(pairs_: &PairwiseSet, rng: &mut ChaCha8Rng, count: usize) -> f64 {
    let total = pairs_.factors().len();
    sample(rng, total, count.min(total))
        .into_iter()
        .map(|k| {
            let l = &pairs_.factors()[k];
            (l * l.transpose()).symmetric_eigenvalues().min()
        })
        .fold(f64::INFINITY, f64::min)
}

fn failure(reason: String, last: &PairwiseSet) -> Error {
    Error::TrainingFailure {
        reason,
        last_finite: Box::new(last.clone()),
    }
}

/// Learns the pair factors. `init_pairs = None` starts from
/// `C_ij = 0.01 · I`.
///
/// Starting from all-zero factors leaves them at zero: the factor gradient
/// is `(A + Aᵀ) L`, which vanishes at `L = 0`.
pub fn train_crf(
    data: &[TrainSample],
    model: &ShapeModel3D,
    init_pairs: Option<&PairwiseSet>,
    opts: &TrainOptions,
) -> Result<(PairwiseSet, Vec<DeformParams>, TrainReport)> {
    opts.validate()?;
    if data.is_empty() {
        return Err(invalid("training needs at least one sample"));
    }
    let n = check_data(data, model)?;
    let mut pairs_ = match init_pairs {
        Some(p) if p.num_landmarks() != n => {
            return Err(invalid(format!(
                "initial pairs have N={}, data has N={n}",
                p.num_landmarks()
            )))
        }
        Some(p) => p.clone(),
        None => PairwiseSet::scaled_identity(n, INIT_PAIR_SCALE)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let weights = stage1_weights(&pairs_);
    let mut zetas: Vec<DeformParams> = data
        .par_iter()
        .map(|s| {
            let mu = s.unaries.stacked_means();
            let init = cold_start(&mu, model)?;
            fit_deform_params(&mu, &weights, model, &init, &opts.fit).map(|(z, _)| z)
        })
        .collect::<Result<_>>()?;

    let initial_nll = dataset_nll(data, model, &pairs_, &zetas)?;
    if !initial_nll.is_finite() {
        return Err(failure(format!("initial NLL is {initial_nll}"), &pairs_));
    }
    info!(
        "training {} samples, N={n}, initial NLL {initial_nll:.6}",
        data.len()
    );

    let mut report = TrainReport {
        initial_nll,
        epochs: Vec::new(),
        converged: false,
        psd_checks: 0,
        psd_min_eigenvalue: f64::INFINITY,
    };
    let mut lr = opts.learning_rate;
    let mut history = vec![initial_nll];

    for outer in 0..opts.max_outer {
        zetas = stage1(data, model, &pairs_, &zetas, opts)?;

        let (mut value, mut grad) = dataset_gradient(data, model, &pairs_, &zetas)?;
        if !value.is_finite() {
            return Err(failure(
                format!("NLL became {value} at outer iteration {outer}"),
                &pairs_,
            ));
        }
        let (mut accepted, mut rejected) = (0, 0);
        'steps: for _ in 0..opts.stage3_steps {
            let mut halvings = 0;
            loop {
                let cand = pairs_.descend(&grad, lr);
                let cand_value = dataset_nll(data, model, &cand, &zetas);
                match cand_value {
                    Ok(v) if v.is_finite() && v <= value => {
                        pairs_ = cand;
                        lr *= opts.lr_growth;
                        accepted += 1;
                        let next = dataset_gradient(data, model, &pairs_, &zetas)?;
                        value = next.0;
                        grad = next.1;
                        break;
                    }
                    _ => {
                        lr *= 0.5;
                        rejected += 1;
                        halvings += 1;
                        if halvings > opts.max_halvings {
                            break 'steps;
                        }
                    }
                }
            }
        }

        if opts.psd_checks > 0 {
            let m = min_eigenvalue(&pairs_, &mut rng, opts.psd_checks);
            report.psd_checks += opts.psd_checks.min(pairs_.factors().len());
            report.psd_min_eigenvalue = report.psd_min_eigenvalue.min(m);
            if m < -1e-12 {
                return Err(failure(
                    format!("pair matrix lost PSD (eigenvalue {m:e})"),
                    &pairs_,
                ));
            }
        }

        debug!("outer {outer}: NLL {value:.9} lr {lr:e} accepted {accepted} rejected {rejected}");
        report.epochs.push(EpochRecord {
            outer,
            nll: value,
            learning_rate: lr,
            accepted_steps: accepted,
            rejected_steps: rejected,
        });
        history.push(value);

        if history.len() > opts.patience {
            let past = history[history.len() - 1 - opts.patience];
            if (past - value) <= opts.rel_tol * past.abs() {
                report.converged = true;
                break;
            }
        }
    }
    info!(
        "training finished after {} outer iterations, NLL {:.6}",
        report.epochs.len(),
        history.last().unwrap()
    );
    Ok((pairs_, zetas, report))
}
