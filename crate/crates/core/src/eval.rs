//! Landmark accuracy metrics: bbox-normalized mean error, cumulative error
//! distribution, its normalized area, and failure rate.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::write_atomic;

/// Errors above this NME count as failures.
pub const DEFAULT_THRESHOLD: f64 = 0.07;
pub const DEFAULT_GRID_MAX: f64 = 0.07;
pub const DEFAULT_GRID_STEPS: usize = 701;

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Tight box around `points`.
    pub fn enclosing(points: &[Vector2<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("cannot bound an empty point set"));
        }
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Ok(Self {
            x: lo.x,
            y: lo.y,
            w: hi.x - lo.x,
            h: hi.y - lo.y,
        })
    }
}

/// Mean point-to-point error normalized by `√(bbox_w · bbox_h)`.
pub fn nme(pred: &DVector<f64>, gt: &DVector<f64>, bbox_w: f64, bbox_h: f64) -> Result<f64> {
    if !(bbox_w > 0.0 && bbox_h > 0.0) {
        return Err(invalid(format!(
            "bbox must be positive, got {bbox_w}x{bbox_h}"
        )));
    }
    if pred.len() != gt.len() || !pred.len().is_multiple_of(2) || pred.is_empty() {
        return Err(invalid(format!(
            "prediction length {} and ground-truth length {} must match and be even",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() / 2;
    let total: f64 = (0..n)
        .map(|i| {
            let dx = pred[2 * i] - gt[2 * i];
            let dy = pred[2 * i + 1] - gt[2 * i + 1];
            dx.hypot(dy)
        })
        .sum();
    Ok(total / n as f64 / (bbox_w * bbox_h).sqrt())
}

/// Fraction of `nmes` at or below each of `grid_steps` evenly spaced
/// thresholds on `[0, grid_max]`.
pub fn ced(nmes: &[f64], grid_max: f64, grid_steps: usize) -> Result<Vec<(f64, f64)>> {
    if nmes.is_empty() {
        return Err(invalid("CED needs at least one error value"));
    }
    if grid_steps < 2 || !(grid_max > 0.0) {
        return Err(invalid(
            "CED grid needs at least 2 steps and a positive maximum",
        ));
    }
    let mut sorted = nmes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    Ok((0..grid_steps)
        .map(|k| {
            let t = grid_max * k as f64 / (grid_steps - 1) as f64;
            let count = sorted.partition_point(|e| *e <= t);
            (t, count as f64 / m)
        })
        .collect())
}

/// Trapezoidal area under `curve` on `[0, threshold]`, divided by
/// `threshold`. A threshold between grid points interpolates the last
/// segment linearly.
pub fn auc(curve: &[(f64, f64)], threshold: f64) -> Result<f64> {
    let (first, last) = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) if curve.len() >= 2 => (f.0, l.0),
        _ => return Err(invalid("curve needs at least two points")),
    };
    if !(threshold > first && threshold <= last) {
        return Err(invalid(format!(
            "threshold {threshold} outside curve range ({first}, {last}]"
        )));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((t0, f0), (t1, f1)) = (w[0], w[1]);
        if t0 >= threshold {
            break;
        }
        if t1 <= threshold {
            area += 0.5 * (f0 + f1) * (t1 - t0);
        } else {
            let ft = f0 + (f1 - f0) * (threshold - t0) / (t1 - t0);
            area += 0.5 * (f0 + ft) * (threshold - t0);
        }
    }
    Ok(area / (threshold - first))
}

/// Fraction of errors strictly above `threshold`.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> Result<f64> {
    if nmes.is_empty() {
        return Err(invalid("failure rate needs at least one error value"));
    }
    Ok(nmes.iter().filter(|e| **e > threshold).count() as f64 / nmes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample_nme: Vec<f64>,
    pub mean_nme: f64,
    pub auc: f64,
    pub failure_rate: f64,
    pub ced: Vec<(f64, f64)>,
    pub threshold: f64,
}

impl EvalReport {
    pub fn from_nmes(
        nmes: Vec<f64>,
        threshold: f64,
        grid_max: f64,
        grid_steps: usize,
    ) -> Result<Self> {
        let curve = ced(&nmes, grid_max, grid_steps)?;
        let auc = auc(&curve, threshold)?;
        let failure_rate = failure_rate(&nmes, threshold)?;
        let mean_nme = nmes.iter().sum::<f64>() / nmes.len() as f64;
        Ok(Self {
            per_sample_nme: nmes,
            mean_nme,
            auc,
            failure_rate,
            ced: curve,
            threshold,
        })
    }

    /// Two-column `threshold,fraction` CSV with a header row.
    pub fn ced_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in &self.ced {
            writeln!(s, "{t},{f}").unwrap();
        }
        s
    }

    pub fn write_ced_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.ced_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nme_examples() {
        let gt = DVector::from_vec(vec![10.0, 20.0, 30.0, 40.0, 50.0, 5.0]);
        assert_eq!(nme(&gt, &gt, 100.0, 100.0).unwrap(), 0.0);
        let pred = gt.map(|v| v) + DVector::from_vec(vec![3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(nme(&pred, &gt, 100.0, 100.0).unwrap(), 0.05);
        assert!(nme(&pred, &gt, 0.0, 100.0).is_err());
        assert!(nme(&pred, &gt, 100.0, -1.0).is_err());
    }

    #[test]
    fn nme_mixed_offsets_match_direct_sum() {
        let gt = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let pred = DVector::from_vec(vec![0.1, 0.0, 1.0, 0.7]);
        let expect = (0.1 + 0.3) / 2.0 / (2.0f64 * 8.0).sqrt();
        assert!((nme(&pred, &gt, 2.0, 8.0).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn ced_examples() {
        let c = ced(&[0.0; 5], 0.07, 701).unwrap();
        assert!(c.iter().all(|(_, f)| *f == 1.0));
        let c = ced(&[0.05, 0.08], 0.07, 701).unwrap();
        assert_eq!(c.last().unwrap(), &(0.07, 0.5));
        assert!(ced(&[], 0.07, 701).is_err());
        assert!(ced(&[0.1], 0.07, 1).is_err());
    }

    #[test]
    fn ced_matches_counting_oracle() {
        let nmes: Vec<f64> = (0..97).map(|i| ((i * 37) % 101) as f64 / 1000.0).collect();
        let c = ced(&nmes, 0.07, 71).unwrap();
        for (t, f) in c {
            let count = nmes.iter().filter(|e| **e <= t).count();
            assert_eq!(f, count as f64 / nmes.len() as f64);
        }
    }

    #[test]
    fn auc_examples() {
        let c = ced(&[0.0, 0.0], 0.07, 701).unwrap();
        assert!((auc(&c, 0.07).unwrap() - 1.0).abs() < 1e-12);
        let c = ced(&[0.2, 0.3], 0.07, 701).unwrap();
        assert_eq!(auc(&c, 0.07).unwrap(), 0.0);
        let c = ced(&[0.035], 0.07, 7001).unwrap();
        assert!((auc(&c, 0.07).unwrap() - 0.5).abs() < 2e-4);
        assert!(auc(&c, 0.08).is_err());
    }

    #[test]
    fn auc_at_interior_threshold() {
        // step at 0.02 on [0, 0.04]: area 0.02 plus half a grid cell for the ramp
        let c = ced(&[0.02], 0.07, 701).unwrap();
        let a = auc(&c, 0.04).unwrap();
        assert!((a - (0.02 + 0.5e-4) / 0.04).abs() < 1e-9);
    }

    #[test]
    fn failure_rate_examples() {
        assert_eq!(failure_rate(&[0.01, 0.02], DEFAULT_THRESHOLD).unwrap(), 0.0);
        assert_eq!(failure_rate(&[0.05, 0.08], DEFAULT_THRESHOLD).unwrap(), 0.5);
        assert_eq!(DEFAULT_THRESHOLD, 0.07);
        assert!(failure_rate(&[], 0.07).is_err());
    }

    #[test]
    fn report_is_self_consistent() {
        let nmes = vec![0.01, 0.03, 0.07, 0.09];
        let r = EvalReport::from_nmes(nmes.clone(), 0.07, 0.07, 701).unwrap();
        assert_eq!(r.failure_rate, 1.0 - r.ced.last().unwrap().1);
        assert!((r.auc - auc(&r.ced, 0.07).unwrap()).abs() < 1e-12);
        let csv = r.ced_csv();
        assert_eq!(csv.lines().count(), 702);
        assert!(csv.starts_with("threshold,fraction\n0,0\n"));
    }

    #[test]
    fn bbox_encloses_points() {
        let b = BBox::enclosing(&[Vector2::new(0.2, 0.9), Vector2::new(0.5, 0.1)]).unwrap();
        assert_eq!(
            b,
            BBox {
                x: 0.2,
                y: 0.1,
                w: 0.3,
                h: 0.8
            }
        );
    }

    proptest! {
        #[test]
        fn auc_is_permutation_invariant(mut v in prop::collection::vec(0.0f64..0.1, 1..30), seed in any::<u64>()) {
            let a = auc(&ced(&v, 0.07, 701).unwrap(), 0.07).unwrap();
            let k = (seed as usize) % v.len();
            v.rotate_left(k);
            v.reverse();
            let b = auc(&ced(&v, 0.07, 701).unwrap(), 0.07).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ced_is_monotone(v in prop::collection::vec(0.0f64..0.1, 1..30)) {
            let c = ced(&v, 0.07, 101).unwrap();
            prop_assert!(c.windows(2).all(|w| w[0].1 <= w[1].1));
        }

        #[test]
        fn nme_is_scale_consistent(
            pts in prop::collection::vec(-1.0f64..1.0, 8),
            off in prop::collection::vec(-0.1f64..0.1, 8),
            s in 0.1f64..10.0,
        ) {
            let gt = DVector::from_vec(pts);
            let pred = &gt + DVector::from_vec(off);
            let a = nme(&pred, &gt, 0.5, 0.8).unwrap();
            let b = nme(&(pred * s), &(gt * s), 0.5 * s, 0.8 * s).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-12));
        }
    }
}
