//! Unary predictions: Gaussian moments of landmark heatmaps, and a synthetic
//! sample generator that stands in for a trained detector.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{stack, UnaryPrediction};
use crate::error::{invalid, Error, Result};
use crate::eval::BBox;
use crate::io::{io_err, write_atomic};
use crate::model::{project_shape, DeformParams, ShapeModel3D};
use crate::training::TrainSample;

/// One probability map, row-major with `width` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("heatmap dimensions must be positive"));
        }
        if values.len() != width * height {
            return Err(invalid(format!(
                "heatmap has {} values, expected {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("heatmap values must be finite and non-negative"));
        }
        if !values.iter().any(|v| *v > 0.0) {
            return Err(invalid("heatmap has no positive value"));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Value at column `k`, row `l`.
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[l * self.width + k]
    }
}

/// Mean and covariance of a heatmap in normalized coordinates, with pixel
/// `(k, l)` centered at `((k + 0.5)/W, (l + 0.5)/H)`. `floor · I` is added
/// to the covariance.
pub fn moments_from_heatmap(h: &Heatmap, floor: f64) -> Result<(Vector2<f64>, Matrix2<f64>)> {
    if !(floor >= 0.0) {
        return Err(invalid("covariance floor must be non-negative"));
    }
    let total: f64 = h.values.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("heatmap has zero mass"));
    }
    let center = |k: usize, l: usize| {
        Vector2::new(
            (k as f64 + 0.5) / h.width as f64,
            (l as f64 + 0.5) / h.height as f64,
        )
    };
    let mut mu = Vector2::zeros();
    for l in 0..h.height {
        for k in 0..h.width {
            mu += center(k, l) * (h.get(k, l) / total);
        }
    }
    let mut sigma = Matrix2::zeros();
    for l in 0..h.height {
        for k in 0..h.width {
            let d = center(k, l) - mu;
            sigma += d * d.transpose() * (h.get(k, l) / total);
        }
    }
    sigma[(1, 0)] = sigma[(0, 1)];
    Ok((mu, sigma + Matrix2::identity() * floor))
}

const HEATMAP_MAGIC: &[u8; 4] = b"HMAP";

/// Reads a stacked heatmap file: `"HMAP"`, then little-endian `u32` count,
/// width and height, then `count · height · width` little-endian `f32`.
pub fn read_heatmaps(path: &Path) -> Result<Vec<Heatmap>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[0..4] != HEATMAP_MAGIC {
        return Err(bad("missing HMAP header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, w, h) = (word(4), word(8), word(12));
    let expected = n
        .checked_mul(w)
        .and_then(|x| x.checked_mul(h))
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(16))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {n} maps of {w}x{h}, found {}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    floats
        .chunks(w * h)
        .take(n)
        .enumerate()
        .map(|(i, vals)| {
            Heatmap::new(w, h, vals.to_vec()).map_err(|e| bad(format!("map {i}: {e}")))
        })
        .collect()
}

pub fn write_heatmaps(path: &Path, maps: &[Heatmap]) -> Result<()> {
    let (w, h) = maps.first().map(|m| (m.width, m.height)).unwrap_or((0, 0));
    if maps.iter().any(|m| m.width != w || m.height != h) {
        return Err(invalid("all heatmaps in a file must share dimensions"));
    }
    let mut out = Vec::with_capacity(16 + 4 * maps.len() * w * h);
    out.extend_from_slice(HEATMAP_MAGIC);
    for v in [maps.len(), w, h] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in maps {
        for v in &m.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

/// Parameters of the synthetic sample generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    /// Std of the unary mean noise; also sets `Σ_i = noise_sigma² I`.
    pub noise_sigma: f64,
    /// Fraction of landmarks per sample that get corrupted.
    pub corrupt_fraction: f64,
    /// Length of the offset added to a corrupted landmark's mean.
    pub corrupt_bias: f64,
    /// Multiplier applied to a corrupted landmark's covariance.
    pub corrupt_cov_scale: f64,
    pub seed: u64,
    pub pitch_range: [f64; 2],
    pub yaw_range: [f64; 2],
    pub roll_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub q_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_samples: 10,
            noise_sigma: 0.02,
            corrupt_fraction: 0.0,
            corrupt_bias: 0.15,
            corrupt_cov_scale: 100.0,
            seed: 0,
            pitch_range: [-0.3, 0.3],
            yaw_range: [-1.0, 1.0],
            roll_range: [-0.3, 0.3],
            scale_range: [0.8, 1.3],
            q_sigma: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        for (name, r) in [
            ("pitch_range", &self.pitch_range),
            ("yaw_range", &self.yaw_range),
            ("roll_range", &self.roll_range),
            ("scale_range", &self.scale_range),
        ] {
            if !ordered(r) {
                return Err(invalid(format!(
                    "{name} must be an ordered finite interval"
                )));
            }
        }
        if !(self.scale_range[0] > 0.0) {
            return Err(invalid("scale_range must be positive"));
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(invalid("corrupt_fraction must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.q_sigma >= 0.0 && self.corrupt_bias >= 0.0) {
            return Err(invalid(
                "noise_sigma, q_sigma and corrupt_bias must be non-negative",
            ));
        }
        if !(self.corrupt_cov_scale >= 1.0) {
            return Err(invalid("corrupt_cov_scale must be at least 1"));
        }
        Ok(())
    }
}

/// One generated sample with its generating parameters.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample: TrainSample,
    pub zeta: DeformParams,
    pub bbox: BBox,
    /// Indices of corrupted landmarks.
    pub corrupted: Vec<usize>,
}

const MAX_PLACEMENT_RETRIES: usize = 100;

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Sample id for index `i`.
pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

fn generate_one(model: &ShapeModel3D, spec: &SynthSpec, index: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n = model.num_landmarks();
    let center = Vector2::new(0.5, 0.5);

    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let q_dist = Normal::new(0.0, spec.q_sigma.max(0.0)).map_err(|e| invalid(e.to_string()))?;
        let zeta = DeformParams {
            sx: uniform(&mut rng, spec.scale_range),
            sy: uniform(&mut rng, spec.scale_range),
            pitch: uniform(&mut rng, spec.pitch_range),
            yaw: uniform(&mut rng, spec.yaw_range),
            roll: uniform(&mut rng, spec.roll_range),
            q: (0..model.num_bases())
                .map(|_| q_dist.sample(&mut rng))
                .collect(),
        };
        let pts: Vec<Vector2<f64>> = project_shape(model, &zeta)?
            .iter()
            .map(|p| p + center)
            .collect();
        if pts
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y))
        {
            placed = Some((zeta, pts));
            break;
        }
    }
    let (zeta, gt) = placed.ok_or_else(|| {
        invalid(format!(
            "sample {index}: landmarks left the unit square in {MAX_PLACEMENT_RETRIES} draws"
        ))
    })?;

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let var = spec.noise_sigma * spec.noise_sigma;
    let mut means: Vec<Vector2<f64>> = gt
        .iter()
        .map(|p| p + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
        .collect();
    let mut covs = vec![Matrix2::identity() * var; n];

    let n_bad = (spec.corrupt_fraction * n as f64).round() as usize;
    let mut corrupted = sample(&mut rng, n, n_bad.min(n)).into_vec();
    corrupted.sort_unstable();
    for &i in &corrupted {
        let theta = rng.random_range(0.0..2.0 * PI);
        means[i] += Vector2::new(theta.cos(), theta.sin()) * spec.corrupt_bias;
        covs[i] *= spec.corrupt_cov_scale;
    }

    let unaries = UnaryPrediction::with_floor(means, covs)?;
    let bbox = BBox::enclosing(&gt)?;
    Ok(SynthSample {
        sample: TrainSample {
            id: sample_id(index),
            unaries,
            y_gt: stack(&gt),
        },
        zeta,
        bbox,
        corrupted,
    })
}

/// Generates `spec.num_samples` samples. Each sample draws from its own
/// PRNG stream derived from `(seed, index)`, so output is independent of
/// thread count.
pub fn synth_generate(model: &ShapeModel3D, spec: &SynthSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    (0..spec.num_samples)
        .into_par_iter()
        .map(|i| generate_one(model, spec, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Heatmap {
        let mut v = Vec::with_capacity(w * h);
        for l in 0..h {
            for k in 0..w {
                v.push(f(k, l));
            }
        }
        Heatmap::new(w, h, v).unwrap()
    }

    #[test]
    fn single_spike() {
        let h = map(8, 4, |k, l| if (k, l) == (5, 2) { 3.0 } else { 0.0 });
        let (mu, s) = moments_from_heatmap(&h, 1e-8).unwrap();
        assert_eq!(mu, Vector2::new(5.5 / 8.0, 2.5 / 4.0));
        assert!((s - Matrix2::identity() * 1e-8).amax() < 1e-20);
    }

    #[test]
    fn uniform_two_by_two() {
        let h = map(2, 2, |_, _| 1.0);
        let (mu, s) = moments_from_heatmap(&h, 1e-8).unwrap();
        assert_eq!(mu, Vector2::new(0.5, 0.5));
        assert!((s - Matrix2::identity() * (0.0625 + 1e-8)).amax() < 1e-15);
    }

    #[test]
    fn gaussian_blob_second_moment() {
        let (w, sig) = (64usize, 5.0f64);
        let c = 31.5;
        let h = map(w, w, |k, l| {
            let (dx, dy) = (k as f64 - c, l as f64 - c);
            (-(dx * dx + dy * dy) / (2.0 * sig * sig)).exp()
        });
        let (mu, s) = moments_from_heatmap(&h, 1e-8).unwrap();
        let expect = (sig / w as f64).powi(2);
        assert!((mu - Vector2::new(0.5, 0.5)).amax() < 1e-12);
        assert!((s[(0, 0)] / expect - 1.0).abs() < 0.05);
        assert!((s[(1, 1)] / expect - 1.0).abs() < 0.05);
        assert!(s[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(Heatmap::new(2, 2, vec![0.0; 4]).is_err());
        assert!(Heatmap::new(2, 2, vec![1.0, -1.0, 0.0, 0.0]).is_err());
        assert!(Heatmap::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn moments_are_scale_invariant() {
        let h = map(7, 5, |k, l| ((k * 3 + l * 5) % 7) as f64);
        let h2 = map(7, 5, |k, l| 2.5 * ((k * 3 + l * 5) % 7) as f64);
        let (a, sa) = moments_from_heatmap(&h, 1e-8).unwrap();
        let (b, sb) = moments_from_heatmap(&h2, 1e-8).unwrap();
        assert!((a - b).amax() < 1e-14 && (sa - sb).amax() < 1e-14);
    }

    #[test]
    fn heatmap_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.bin");
        let maps = vec![
            map(3, 2, |k, l| (k + l) as f64 + 0.5),
            map(3, 2, |k, _| k as f64),
        ];
        write_heatmaps(&p, &maps).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"HMAP");
        assert_eq!(bytes.len(), 16 + 2 * 6 * 4);
        assert_eq!(read_heatmaps(&p).unwrap(), maps);
        std::fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_heatmaps(&p).is_err());
    }

    fn model() -> ShapeModel3D {
        ShapeModel3D::synthetic(12, 4, crate::model::DEFAULT_MODEL_EXTENT, 9).unwrap()
    }

    #[test]
    fn noiseless_means_equal_ground_truth() {
        let spec = SynthSpec {
            num_samples: 5,
            noise_sigma: 0.0,
            seed: 3,
            q_sigma: 0.05,
            ..SynthSpec::default()
        };
        for s in synth_generate(&model(), &spec).unwrap() {
            assert_eq!(s.sample.unaries.stacked_means(), s.sample.y_gt);
            assert!(s.corrupted.is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            num_samples: 6,
            seed: 42,
            corrupt_fraction: 0.2,
            q_sigma: 0.05,
            ..SynthSpec::default()
        };
        let a = synth_generate(&model(), &spec).unwrap();
        let b = synth_generate(&model(), &spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample.unaries, y.sample.unaries);
            assert_eq!(x.sample.y_gt, y.sample.y_gt);
            assert_eq!(x.zeta, y.zeta);
            assert_eq!(x.corrupted, y.corrupted);
        }
    }

    #[test]
    fn unary_noise_has_requested_spread() {
        let spec = SynthSpec {
            num_samples: 84,
            noise_sigma: 0.02,
            seed: 1,
            ..SynthSpec::default()
        };
        let mut devs = Vec::new();
        for s in synth_generate(&model(), &spec).unwrap() {
            let d = s.sample.unaries.stacked_means() - &s.sample.y_gt;
            devs.extend(d.iter().copied());
        }
        // 84 samples x 12 landmarks ≈ 1000 landmarks, 2 coordinates each
        let std = (devs.iter().map(|v| v * v).sum::<f64>() / devs.len() as f64).sqrt();
        assert!((std / 0.02 - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn corruption_moves_and_inflates() {
        let spec = SynthSpec {
            num_samples: 3,
            noise_sigma: 0.0,
            corrupt_fraction: 0.25,
            seed: 5,
            ..SynthSpec::default()
        };
        for s in synth_generate(&model(), &spec).unwrap() {
            assert_eq!(s.corrupted.len(), 3);
            for &i in &s.corrupted {
                let d = s.sample.unaries.means()[i]
                    - Vector2::new(s.sample.y_gt[2 * i], s.sample.y_gt[2 * i + 1]);
                assert!((d.norm() - 0.15).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ground_truth_stays_in_unit_square() {
        let spec = SynthSpec {
            num_samples: 20,
            seed: 8,
            ..SynthSpec::default()
        };
        for s in synth_generate(&model(), &spec).unwrap() {
            assert!(s.sample.y_gt.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.bbox.w > 0.0 && s.bbox.h > 0.0);
        }
        let huge = SynthSpec {
            num_samples: 1,
            scale_range: [20.0, 30.0],
            ..SynthSpec::default()
        };
        assert!(synth_generate(&model(), &huge).is_err());
    }
}
