#![allow(dead_code)]

use landmark_crf::{PairOffsets, PairwiseSet, UnaryPrediction};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub unaries: UnaryPrediction,
    pub pairs: PairwiseSet,
    pub offsets: PairOffsets,
    pub y_gt: DVector<f64>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SPD matrix with eigenvalues in `[lo, hi]` and a random orientation.
pub fn random_spd(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Matrix2<f64> {
    let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let r = Matrix2::new(t.cos(), -t.sin(), t.sin(), t.cos());
    let d = Matrix2::new(rng.random_range(lo..hi), 0.0, 0.0, rng.random_range(lo..hi));
    let m = r * d * r.transpose();
    (m + m.transpose()) * 0.5
}

pub fn random_factor(rng: &mut ChaCha8Rng) -> Matrix2<f64> {
    Matrix2::new(
        rng.random_range(0.2..1.5),
        0.0,
        rng.random_range(-0.8..0.8),
        rng.random_range(0.2..1.5),
    )
}

pub fn random_vec2(rng: &mut ChaCha8Rng, s: f64) -> Vector2<f64> {
    Vector2::new(rng.random_range(-s..s), rng.random_range(-s..s))
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> Instance {
    let means = (0..n).map(|_| random_vec2(rng, 1.0)).collect();
    let covs = (0..n).map(|_| random_spd(rng, 0.3, 2.0)).collect();
    let unaries = UnaryPrediction::new(means, covs).unwrap();
    let m = n * (n - 1) / 2;
    let pairs = PairwiseSet::from_factors(n, (0..m).map(|_| random_factor(rng)).collect()).unwrap();
    let offsets = PairOffsets::new(n, (0..m).map(|_| random_vec2(rng, 1.0)).collect()).unwrap();
    let y_gt = DVector::from_iterator(2 * n, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)));
    Instance {
        unaries,
        pairs,
        offsets,
        y_gt,
    }
}

/// Precision and right-hand side assembled directly from the quadratic
/// energy: unary blocks plus `Dᵀ C D` for each pair, with `D` the 2×2N
/// difference selector `y_i − y_j`.
pub fn dense_oracle(inst: &Instance) -> (DMatrix<f64>, DVector<f64>) {
    let n = inst.unaries.len();
    let mut lam = DMatrix::zeros(2 * n, 2 * n);
    let mut b = DVector::zeros(2 * n);
    for i in 0..n {
        let p = inst.unaries.covariances()[i].try_inverse().unwrap();
        let mu = inst.unaries.means()[i];
        let pm = p * mu;
        for a in 0..2 {
            b[2 * i + a] += pm[a];
            for c in 0..2 {
                lam[(2 * i + a, 2 * i + c)] += p[(a, c)];
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let c = inst.pairs.matrix(i, j);
            let mut d = DMatrix::zeros(2, 2 * n);
            d[(0, 2 * i)] = 1.0;
            d[(1, 2 * i + 1)] = 1.0;
            d[(0, 2 * j)] = -1.0;
            d[(1, 2 * j + 1)] = -1.0;
            let cd = DMatrix::from_column_slice(2, 2, c.as_slice()) * &d;
            lam += d.transpose() * &cd;
            let mu = inst.offsets.get(i, j);
            let cm = DVector::from_column_slice((c * mu).as_slice());
            b += d.transpose() * cm;
        }
    }
    (lam, b)
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn nll_of(u: &UnaryPrediction, p: &PairwiseSet, o: &PairOffsets, y: &DVector<f64>) -> f64 {
    let cg = landmark_crf::crf::conditional_gaussian_with_offsets(u, p, o).unwrap();
    landmark_crf::crf::nll(y, &cg).unwrap()
}

/// Error of one analytic entry against a central difference, relative to
/// the larger magnitude (floored at `floor`).
fn rel(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Largest relative error per parameter block (means, inverse covariances,
/// pair factors, offsets) between `nll_gradients_with_offsets` and central
/// differences with step `h`.
pub fn gradient_errors(inst: &Instance, h: f64, floor: f64) -> [f64; 4] {
    let Instance {
        unaries,
        pairs,
        offsets,
        y_gt,
    } = inst;
    let g = landmark_crf::crf::nll_gradients_with_offsets(y_gt, unaries, pairs, offsets).unwrap();
    let n = unaries.len();
    let mut errs = [0.0f64; 4];

    for i in 0..n {
        for a in 0..2 {
            let f = |d: f64| {
                let mut m = unaries.means().to_vec();
                m[i][a] += d;
                let u = UnaryPrediction::new(m, unaries.covariances().to_vec()).unwrap();
                nll_of(&u, pairs, offsets, y_gt)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            errs[0] = errs[0].max(rel(g.d_means[i][a], fd, floor));
        }
    }

    for i in 0..n {
        for (a, c) in [(0, 0), (1, 1), (0, 1)] {
            let f = |d: f64| {
                let mut p = unaries.precisions().to_vec();
                p[i][(a, c)] += d;
                if a != c {
                    p[i][(c, a)] += d;
                }
                let covs = p
                    .iter()
                    .map(|m| m.try_inverse().unwrap())
                    .map(|m| (m + m.transpose()) * 0.5)
                    .collect();
                let u = UnaryPrediction::new(unaries.means().to_vec(), covs).unwrap();
                nll_of(&u, pairs, offsets, y_gt)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let gi = g.d_inv_covariances[i];
            let analytic = if a == c {
                gi[(a, c)]
            } else {
                gi[(a, c)] + gi[(c, a)]
            };
            errs[1] = errs[1].max(rel(analytic, fd, floor));
        }
    }

    for k in 0..pairs.factors().len() {
        for (a, c) in [(0, 0), (1, 0), (1, 1)] {
            let f = |d: f64| {
                let mut fs = pairs.factors().to_vec();
                fs[k][(a, c)] += d;
                let p = PairwiseSet::from_factors(n, fs).unwrap();
                nll_of(unaries, &p, offsets, y_gt)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            errs[2] = errs[2].max(rel(g.d_pair_factors[k][(a, c)], fd, floor));
        }
        assert_eq!(g.d_pair_factors[k][(0, 1)], 0.0);
    }

    for k in 0..offsets.as_slice().len() {
        for a in 0..2 {
            let f = |d: f64| {
                let mut os = offsets.as_slice().to_vec();
                os[k][a] += d;
                let o = PairOffsets::new(n, os).unwrap();
                nll_of(unaries, pairs, &o, y_gt)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            errs[3] = errs[3].max(rel(g.d_offsets[k][a], fd, floor));
        }
    }
    errs
}
