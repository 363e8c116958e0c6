//! Dataset directory layout.
//!
//! ```text
//! manifest.json        {"n", "samples": [id...], "spec"?}
//! <id>.unary.json      unary prediction
//! <id>.gt.json         {"n", "landmarks": [[x, y]...], "bbox"}
//! <id>.zeta.json       generating deformable parameters (synthetic data)
//! ```
//!
//! Prediction directories hold one `<id>.pred.json` per sample.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::crf::{stack, unstack, UnaryPrediction};
use crate::error::{invalid, Error, Result};
use crate::eval::BBox;
use crate::io::{read_json, write_json};
use crate::model::DeformParams;
use crate::training::TrainSample;
use crate::unary::{SynthSample, SynthSpec};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub samples: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SynthSpec>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let m: Manifest = read_json(&path)?;
        for id in &m.samples {
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return Err(Error::Format {
                    path,
                    message: format!("invalid sample id {id:?}"),
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n: usize,
    pub landmarks: Vec<[f64; 2]>,
    pub bbox: BBox,
}

impl GroundTruth {
    pub fn new(y: &DVector<f64>, bbox: BBox) -> Self {
        let landmarks: Vec<[f64; 2]> = unstack(y).iter().map(|p| [p.x, p.y]).collect();
        Self {
            n: landmarks.len(),
            landmarks,
            bbox,
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        stack(
            &self
                .landmarks
                .iter()
                .map(|p| Vector2::new(p[0], p[1]))
                .collect::<Vec<_>>(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let gt: GroundTruth = read_json(path)?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if gt.landmarks.len() != gt.n {
            return Err(bad(format!(
                "\"n\" is {} but {} landmarks listed",
                gt.n,
                gt.landmarks.len()
            )));
        }
        if gt.landmarks.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite landmark coordinate".into()));
        }
        Ok(gt)
    }
}

/// Per-sample prediction written by inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub landmarks: Vec<[f64; 2]>,
    pub zeta: Option<DeformParams>,
    pub iters: usize,
    pub converged: bool,
    /// Energy at the end of each iteration.
    pub energy_trace: Vec<f64>,
}

impl Prediction {
    pub fn stacked(&self) -> DVector<f64> {
        stack(
            &self
                .landmarks
                .iter()
                .map(|p| Vector2::new(p[0], p[1]))
                .collect::<Vec<_>>(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn to_pairs(y: &DVector<f64>) -> Vec<[f64; 2]> {
    unstack(y).iter().map(|p| [p.x, p.y]).collect()
}

pub fn unary_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.unary.json"))
}

pub fn gt_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.gt.json"))
}

pub fn zeta_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.zeta.json"))
}

pub fn pred_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.pred.json"))
}

/// Writes every sample's files, then the manifest last.
pub fn write_synthetic(dir: &Path, samples: &[SynthSample], spec: &SynthSpec) -> Result<()> {
    let n = samples.first().map(|s| s.sample.unaries.len()).unwrap_or(0);
    for s in samples {
        let id = &s.sample.id;
        s.sample.unaries.save(&unary_path(dir, id))?;
        write_json(&gt_path(dir, id), &GroundTruth::new(&s.sample.y_gt, s.bbox))?;
        s.zeta.save(&zeta_path(dir, id))?;
    }
    let manifest = Manifest {
        n,
        samples: samples.iter().map(|s| s.sample.id.clone()).collect(),
        spec: Some(spec.clone()),
    };
    manifest.save(dir)
}

/// Loads one sample's unaries and ground truth.
pub fn load_sample(dir: &Path, id: &str, n: usize) -> Result<(TrainSample, BBox)> {
    let unaries = UnaryPrediction::load(&unary_path(dir, id))?;
    let gt_file = gt_path(dir, id);
    let gt = GroundTruth::load(&gt_file)?;
    if unaries.len() != n || gt.n != n {
        return Err(invalid(format!(
            "sample {id}: expected N={n}, unary has {}, ground truth has {}",
            unaries.len(),
            gt.n
        )));
    }
    Ok((
        TrainSample {
            id: id.to_string(),
            unaries,
            y_gt: gt.stacked(),
        },
        gt.bbox,
    ))
}

/// Loads all samples listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(TrainSample, BBox)>> {
    let m = Manifest::load(dir)?;
    m.samples
        .iter()
        .map(|id| load_sample(dir, id, m.n))
        .collect()
}
