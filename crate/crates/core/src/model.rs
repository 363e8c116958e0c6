//! 3D deformable shape model, deformable parameters and the weak-perspective
//! expected offset between two landmarks.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::pairs;

/// RMS pairwise distance that synthetic mean shapes are normalized to. At
/// unit scale a projected shape then spans roughly a third of the unit crop.
pub const DEFAULT_MODEL_EXTENT: f64 = 0.25;

/// Mean 3D shape plus linear deformation bases.
///
/// The mean is kept centered and every basis has unit Frobenius norm; the
/// coefficients in [`DeformParams::q`] carry the magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel3D {
    mean: Vec<Vector3<f64>>,
    bases: Vec<Vec<Vector3<f64>>>,
}

impl ShapeModel3D {
    /// Builds a model, centering the mean and normalizing each basis.
    pub fn new(mean: Vec<Vector3<f64>>, bases: Vec<Vec<Vector3<f64>>>) -> Result<Self> {
        let n = mean.len();
        if n < 2 {
            return Err(invalid(format!(
                "shape model needs N >= 2 landmarks, got {n}"
            )));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !mean.iter().all(finite) {
            return Err(invalid("shape model mean contains non-finite values"));
        }
        let centroid = mean.iter().sum::<Vector3<f64>>() / n as f64;
        let mean = mean.into_iter().map(|p| p - centroid).collect();

        let mut normalized = Vec::with_capacity(bases.len());
        for (k, basis) in bases.into_iter().enumerate() {
            if basis.len() != n {
                return Err(invalid(format!(
                    "basis {k} has {} rows, expected {n}",
                    basis.len()
                )));
            }
            if !basis.iter().all(finite) {
                return Err(invalid(format!("basis {k} contains non-finite values")));
            }
            let norm = basis.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(invalid(format!("basis {k} is identically zero")));
            }
            normalized.push(basis.into_iter().map(|v| v / norm).collect());
        }
        Ok(Self {
            mean,
            bases: normalized,
        })
    }

    /// Random model for tests and experiments: Gaussian mean shape (flatter
    /// in depth), bases from Gram-Schmidt orthonormalized Gaussians with the
    /// translation component removed. The mean is scaled to `extent` RMS
    /// pairwise distance.
    pub fn synthetic(n: usize, k: usize, extent: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(invalid("synthetic model needs N >= 2"));
        }
        if k + 3 > 3 * n {
            return Err(invalid(format!(
                "cannot build {k} independent bases for N={n}"
            )));
        }
        if !(extent > 0.0) {
            return Err(invalid("model extent must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let mean: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(gauss(), gauss(), 0.6 * gauss()))
            .collect();

        let mut bases: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(k);
        while bases.len() < k {
            let mut b: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(gauss(), gauss(), gauss()))
                .collect();
            let c = b.iter().sum::<Vector3<f64>>() / n as f64;
            b.iter_mut().for_each(|v| *v -= c);
            for prev in &bases {
                let dot: f64 = b.iter().zip(prev).map(|(x, y)| x.dot(y)).sum();
                b.iter_mut().zip(prev).for_each(|(x, y)| *x -= y * dot);
            }
            let norm = b.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            b.iter_mut().for_each(|v| *v /= norm);
            bases.push(b);
        }
        let mut model = Self::new(mean, bases)?;
        let rms = model.rms_pair_distance();
        model.mean.iter_mut().for_each(|p| *p *= extent / rms);
        Ok(model)
    }

    pub fn num_landmarks(&self) -> usize {
        self.mean.len()
    }

    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    pub fn mean_shape(&self) -> &[Vector3<f64>] {
        &self.mean
    }

    pub fn bases(&self) -> &[Vec<Vector3<f64>>] {
        &self.bases
    }

    /// RMS distance over all landmark pairs of the mean shape.
    pub fn rms_pair_distance(&self) -> f64 {
        let n = self.num_landmarks();
        let sum: f64 = pairs::pairs(n)
            .map(|(i, j)| (self.mean[i] - self.mean[j]).norm_squared())
            .sum();
        (sum / pairs::pair_count(n) as f64).sqrt()
    }

    /// Returns a copy with `t` added to every mean-shape row, bypassing the
    /// centering applied by [`ShapeModel3D::new`].
    pub fn translated(&self, t: Vector3<f64>) -> Self {
        Self {
            mean: self.mean.iter().map(|p| p + t).collect(),
            bases: self.bases.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ShapeModelFile = io::read_json(path)?;
        file.into_model().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &ShapeModelFile::from(self))
    }
}

/// On-disk form: `{"n", "k", "mean": [[x,y,z]], "bases": [[[x,y,z]]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeModelFile {
    pub n: usize,
    pub k: usize,
    pub mean: Vec<[f64; 3]>,
    pub bases: Vec<Vec<[f64; 3]>>,
}

impl ShapeModelFile {
    pub fn into_model(self) -> Result<ShapeModel3D> {
        if self.mean.len() != self.n {
            return Err(invalid(format!(
                "\"n\" is {} but \"mean\" has {} rows",
                self.n,
                self.mean.len()
            )));
        }
        if self.bases.len() != self.k {
            return Err(invalid(format!(
                "\"k\" is {} but \"bases\" has {} entries",
                self.k,
                self.bases.len()
            )));
        }
        let v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
        ShapeModel3D::new(
            self.mean.iter().map(v).collect(),
            self.bases
                .iter()
                .map(|b| b.iter().map(v).collect())
                .collect(),
        )
    }
}

impl From<&ShapeModel3D> for ShapeModelFile {
    fn from(m: &ShapeModel3D) -> Self {
        let a = |p: &Vector3<f64>| [p.x, p.y, p.z];
        Self {
            n: m.num_landmarks(),
            k: m.num_bases(),
            mean: m.mean.iter().map(a).collect(),
            bases: m.bases.iter().map(|b| b.iter().map(a).collect()).collect(),
        }
    }
}

/// Deformable parameters: anisotropic scale, pitch/yaw/roll and shape
/// coefficients. Serializes to the `{"sx","sy","pitch","yaw","roll","q"}`
/// parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformParams {
    pub sx: f64,
    pub sy: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub q: Vec<f64>,
}

impl DeformParams {
    /// Unit scale, zero rotation, zero shape coefficients.
    pub fn identity(k: usize) -> Self {
        Self {
            sx: 1.0,
            sy: 1.0,
            pitch: 0.0,
            yaw: 0.0,
            roll: 0.0,
            q: vec![0.0; k],
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.sx > 0.0 && self.sy > 0.0) || !self.sx.is_finite() || !self.sy.is_finite() {
            return Err(invalid(format!(
                "scales must be positive and finite (sx={}, sy={})",
                self.sx, self.sy
            )));
        }
        if ![self.pitch, self.yaw, self.roll]
            .iter()
            .all(|a| a.is_finite())
        {
            return Err(invalid("rotation angles must be finite"));
        }
        if self.q.len() != k {
            return Err(invalid(format!(
                "q has {} coefficients, model has {k} bases",
                self.q.len()
            )));
        }
        if !self.q.iter().all(|x| x.is_finite()) {
            return Err(invalid("shape coefficients must be finite"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        rotation_from_euler(self.pitch, self.yaw, self.roll)
    }

    /// Wraps the angles into (−π, π].
    pub fn canonicalized(mut self) -> Self {
        self.pitch = wrap_angle(self.pitch);
        self.yaw = wrap_angle(self.yaw);
        self.roll = wrap_angle(self.roll);
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Maps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rotation `R = R_z(roll) · R_y(yaw) · R_x(pitch)` (right-handed axes).
pub fn rotation_from_euler(pitch: f64, yaw: f64, roll: f64) -> Result<Matrix3<f64>> {
    if !(pitch.is_finite() && yaw.is_finite() && roll.is_finite()) {
        return Err(invalid("euler angles must be finite"));
    }
    let (s1, c1) = pitch.sin_cos();
    let (s2, c2) = yaw.sin_cos();
    let (s3, c3) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c1, -s1, 0.0, s1, c1);
    let ry = Matrix3::new(c2, 0.0, s2, 0.0, 1.0, 0.0, -s2, 0.0, c2);
    let rz = Matrix3::new(c3, -s3, 0.0, s3, c3, 0.0, 0.0, 0.0, 1.0);
    Ok(rz * ry * rx)
}

/// Mean shape deformed by `q`: row i is `mean[i] + Σ_k q_k · bases[k][i]`.
pub fn shape_instance(model: &ShapeModel3D, q: &[f64]) -> Result<Vec<Vector3<f64>>> {
    if q.len() != model.num_bases() {
        return Err(invalid(format!(
            "q has {} coefficients, model has {} bases",
            q.len(),
            model.num_bases()
        )));
    }
    Ok((0..model.num_landmarks())
        .map(|i| instance_row(model, q, i))
        .collect())
}

fn instance_row(model: &ShapeModel3D, q: &[f64], i: usize) -> Vector3<f64> {
    let mut p = model.mean[i];
    for (qk, basis) in q.iter().zip(&model.bases) {
        p += basis[i] * *qk;
    }
    p
}

/// Weak-perspective projection of a 3D offset: first two rows of `S R Δ`.
fn project_offset(rot: &Matrix3<f64>, sx: f64, sy: f64, delta: &Vector3<f64>) -> Vector2<f64> {
    let v = rot * delta;
    Vector2::new(sx * v.x, sy * v.y)
}

/// Expected 2D offset `μ_ij(ζ)` between landmarks `i` and `j`.
pub fn expected_offset(
    model: &ShapeModel3D,
    zeta: &DeformParams,
    i: usize,
    j: usize,
) -> Result<Vector2<f64>> {
    let n = model.num_landmarks();
    if i == j {
        return Err(invalid(format!("expected_offset needs i != j (got {i})")));
    }
    if i >= n || j >= n {
        return Err(invalid(format!(
            "landmark index out of range ({i}, {j}) for N={n}"
        )));
    }
    zeta.validate(model.num_bases())?;
    let rot = zeta.rotation()?;
    let delta = instance_row(model, &zeta.q, i) - instance_row(model, &zeta.q, j);
    Ok(project_offset(&rot, zeta.sx, zeta.sy, &delta))
}

/// `μ_ij(ζ)` for every pair `i < j`, in [`pairs::pairs`] order.
pub fn all_expected_offsets(
    model: &ShapeModel3D,
    zeta: &DeformParams,
) -> Result<Vec<Vector2<f64>>> {
    zeta.validate(model.num_bases())?;
    let rot = zeta.rotation()?;
    let inst = shape_instance(model, &zeta.q)?;
    Ok(pairs::pairs(model.num_landmarks())
        .map(|(i, j)| project_offset(&rot, zeta.sx, zeta.sy, &(inst[i] - inst[j])))
        .collect())
}

/// Projected (2D) shape instance, centered on the origin.
pub fn project_shape(model: &ShapeModel3D, zeta: &DeformParams) -> Result<Vec<Vector2<f64>>> {
    zeta.validate(model.num_bases())?;
    let rot = zeta.rotation()?;
    let inst = shape_instance(model, &zeta.q)?;
    let c = inst.iter().sum::<Vector3<f64>>() / inst.len() as f64;
    Ok(inst
        .iter()
        .map(|p| project_offset(&rot, zeta.sx, zeta.sy, &(p - c)))
        .collect())
}
