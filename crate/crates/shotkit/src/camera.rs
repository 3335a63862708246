//! Pinhole camera poses, Plücker ray maps, and trajectory error metrics.
//!
//! Extrinsics are stored in the camera-to-world convention: `rotation` maps
//! camera-frame vectors into the world frame and `translation` is the camera
//! center in world coordinates. A pixel `(u, v)` back-projects to the ray
//! direction `normalize(R · K⁻¹ · [u, v, 1]ᵀ)`, and the ray through the
//! camera center `o` is encoded by the Plücker 6-vector `(o × d, d)`.
//!
//! Trajectory errors follow the conventions documented on [`rot_err`] and
//! [`trans_err`]: geodesic rotation angle, and L2 distance between
//! translations after per-trajectory max-norm scaling. Both are stated here
//! so reported numbers are reproducible.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Tolerance for the orthonormality check on rotation matrices.
///
/// Loose enough for poses estimated by upstream tools, tight enough to
/// reject matrices that are not rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1 (deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },
    #[error("pixel ({u}, {v}) outside image {width}x{height}")]
    PixelOutOfRange {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("grid size {h}x{w} must have h >= 1 and w >= 1")]
    EmptyGrid { h: usize, w: usize },
    #[error("trajectory frame {frame_index}: {source}")]
    TrajectoryFrame {
        frame_index: u32,
        source: Box<GeometryError>,
    },
    #[error("duplicate frame_index {0} in trajectory")]
    DuplicateFrame(u32),
    #[error("trajectory sequences must be nonempty and of equal length (got {estimated} vs {ground_truth})")]
    SequenceMismatch {
        estimated: usize,
        ground_truth: usize,
    },
    #[error("trajectory file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pinhole intrinsics `K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0) || !(fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width < 1 || height < 1 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be at least 1x1 (got {width}x{height})"
            )));
        }
        if !fx.is_finite() || !fy.is_finite() || !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(
                "intrinsics must be finite".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Camera-to-world extrinsics: orthonormal `rotation` (det +1) and the
/// camera center `translation` in world units.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    /// Validates orthonormality and determinant to [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let deviation = rotation_deviation(&rotation);
        if !deviation.is_finite() || deviation > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation { deviation });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Camera center in world coordinates.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Row-major flattening of the 3x4 matrix `[R | t]`, the conditioning
    /// input layout.
    pub fn flatten(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }
}

/// Max absolute deviation of `RᵀR` from identity plus the determinant gap.
fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r;
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[(i, j)] - target).abs());
        }
    }
    dev.max((r.determinant() - 1.0).abs())
}

/// Intrinsics plus extrinsics for one video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub frame_index: u32,
}

/// Where inside a grid cell the pixel coordinate is sampled when building a
/// ray map on a grid coarser than the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSampling {
    /// Cell `(i, j)` samples `(j·width/w, i·height/h)`.
    #[default]
    TopLeft,
    /// Cell `(i, j)` samples `((j+0.5)·width/w, (i+0.5)·height/h)`.
    Center,
}

/// Per-frame `h×w` grid of Plücker ray coordinates.
///
/// Each cell holds `(o × d, d)`: the moment of the ray about the origin
/// followed by its unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerMap {
    h: usize,
    w: usize,
    data: Vec<[f64; 6]>,
}

impl PluckerMap {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64; 6] {
        &self.data[i * self.w + j]
    }

    pub fn cells(&self) -> &[[f64; 6]] {
        &self.data
    }

    /// Rank-3 tensor view `[h, w, 6]`.
    pub fn to_tensor(&self) -> crate::Tensor {
        let mut data = Vec::with_capacity(self.h * self.w * 6);
        for cell in &self.data {
            data.extend_from_slice(cell);
        }
        crate::Tensor::new(vec![self.h, self.w, 6], data).expect("cell count matches shape")
    }
}

/// Unit ray direction through pixel `(u, v)`: `normalize(R · K⁻¹ · [u, v, 1]ᵀ)`.
///
/// `u` is the column coordinate and `v` the row coordinate; both may be
/// fractional but must lie inside the image.
pub fn ray_direction(pose: &CameraPose, u: f64, v: f64) -> Result<Vector3<f64>, GeometryError> {
    let k = &pose.intrinsics;
    if !(u >= 0.0) || u >= k.width as f64 || !(v >= 0.0) || v >= k.height as f64 {
        return Err(GeometryError::PixelOutOfRange {
            u,
            v,
            width: k.width,
            height: k.height,
        });
    }
    let cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let world = pose.extrinsics.rotation() * cam;
    Ok(world.normalize())
}

/// Plücker ray map on an `h×w` grid with top-left cell sampling.
pub fn plucker_map(pose: &CameraPose, h: usize, w: usize) -> Result<PluckerMap, GeometryError> {
    plucker_map_with(pose, h, w, GridSampling::TopLeft)
}

/// Plücker ray map with an explicit cell sampling rule.
pub fn plucker_map_with(
    pose: &CameraPose,
    h: usize,
    w: usize,
    sampling: GridSampling,
) -> Result<PluckerMap, GeometryError> {
    if h < 1 || w < 1 {
        return Err(GeometryError::EmptyGrid { h, w });
    }
    let width = pose.intrinsics.width as f64;
    let height = pose.intrinsics.height as f64;
    let origin = *pose.extrinsics.translation();
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = match sampling {
                GridSampling::TopLeft => (j as f64 * width / w as f64, i as f64 * height / h as f64),
                GridSampling::Center => (
                    (j as f64 + 0.5) * width / w as f64,
                    (i as f64 + 0.5) * height / h as f64,
                ),
            };
            let d = ray_direction(pose, u, v)?;
            let m = origin.cross(&d);
            data.push([m[0], m[1], m[2], d[0], d[1], d[2]]);
        }
    }
    Ok(PluckerMap { h, w, data })
}

/// Pose of `target` expressed in the `reference` camera frame:
/// `R_rel = R_refᵀ · R_tgt`, `t_rel = R_refᵀ · (t_tgt − t_ref)`.
pub fn relative_pose(
    reference: &CameraExtrinsics,
    target: &CameraExtrinsics,
) -> Result<CameraExtrinsics, GeometryError> {
    let r_ref_t = reference.rotation().transpose();
    let rotation = r_ref_t * target.rotation();
    let translation = r_ref_t * (target.translation() - reference.translation());
    CameraExtrinsics::new(rotation, translation)
}

/// Mean geodesic rotation angle between two equal-length pose sequences,
/// in radians: `arccos(clamp((tr(R_gtᵀ · R_est) − 1) / 2, −1, 1))` per frame.
pub fn rot_err(
    estimated: &[CameraExtrinsics],
    ground_truth: &[CameraExtrinsics],
) -> Result<f64, GeometryError> {
    check_sequences(estimated, ground_truth)?;
    let mut sum = 0.0;
    for (est, gt) in estimated.iter().zip(ground_truth) {
        let trace = (gt.rotation().transpose() * est.rotation()).trace();
        let cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
        sum += cos.acos();
    }
    Ok(sum / estimated.len() as f64)
}

/// Mean L2 distance between scale-normalized translations.
///
/// Each trajectory is divided by its own maximum translation norm before
/// comparison, making the metric invariant to global scale; a trajectory
/// whose translations are all zero is left unscaled.
pub fn trans_err(
    estimated: &[CameraExtrinsics],
    ground_truth: &[CameraExtrinsics],
) -> Result<f64, GeometryError> {
    check_sequences(estimated, ground_truth)?;
    let scale = |seq: &[CameraExtrinsics]| {
        let max = seq
            .iter()
            .map(|e| e.translation().norm())
            .fold(0.0_f64, f64::max);
        if max > 0.0 {
            max
        } else {
            1.0
        }
    };
    let s_est = scale(estimated);
    let s_gt = scale(ground_truth);
    let mut sum = 0.0;
    for (est, gt) in estimated.iter().zip(ground_truth) {
        sum += (est.translation() / s_est - gt.translation() / s_gt).norm();
    }
    Ok(sum / estimated.len() as f64)
}

fn check_sequences(
    estimated: &[CameraExtrinsics],
    ground_truth: &[CameraExtrinsics],
) -> Result<(), GeometryError> {
    if estimated.is_empty() || estimated.len() != ground_truth.len() {
        return Err(GeometryError::SequenceMismatch {
            estimated: estimated.len(),
            ground_truth: ground_truth.len(),
        });
    }
    Ok(())
}

// --- trajectory file ------------------------------------------------------

/// One frame of a camera trajectory file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryFrame {
    pub frame_index: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 3x3 camera-to-world rotation.
    pub rotation: [f64; 9],
    /// Camera center in world coordinates.
    pub translation: [f64; 3],
}

/// Camera trajectory file: `{"frames": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryFile {
    pub frames: Vec<TrajectoryFrame>,
}

impl TrajectoryFile {
    pub fn from_poses(poses: &[CameraPose]) -> Self {
        let frames = poses
            .iter()
            .map(|p| {
                let r = p.extrinsics.rotation();
                let t = p.extrinsics.translation();
                TrajectoryFrame {
                    frame_index: p.frame_index,
                    fx: p.intrinsics.fx,
                    fy: p.intrinsics.fy,
                    cx: p.intrinsics.cx,
                    cy: p.intrinsics.cy,
                    width: p.intrinsics.width,
                    height: p.intrinsics.height,
                    rotation: [
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                    ],
                    translation: [t[0], t[1], t[2]],
                }
            })
            .collect();
        Self { frames }
    }

    /// Validate every frame and convert to poses. A rotation failing the
    /// orthonormality check reports the offending frame.
    pub fn into_poses(self) -> Result<Vec<CameraPose>, GeometryError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut poses = Vec::with_capacity(self.frames.len());
        for f in self.frames {
            if !seen.insert(f.frame_index) {
                return Err(GeometryError::DuplicateFrame(f.frame_index));
            }
            let wrap = |source: GeometryError| GeometryError::TrajectoryFrame {
                frame_index: f.frame_index,
                source: Box::new(source),
            };
            let intrinsics =
                CameraIntrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height).map_err(wrap)?;
            let rotation = Matrix3::from_row_slice(&f.rotation);
            let translation = Vector3::from_column_slice(&f.translation);
            let extrinsics = CameraExtrinsics::new(rotation, translation).map_err(wrap)?;
            poses.push(CameraPose {
                intrinsics,
                extrinsics,
                frame_index: f.frame_index,
            });
        }
        Ok(poses)
    }
}

pub fn load_trajectory<P: AsRef<Path>>(path: P) -> Result<Vec<CameraPose>, GeometryError> {
    let reader = BufReader::new(File::open(path)?);
    let file: TrajectoryFile =
        serde_json::from_reader(reader).map_err(|e| GeometryError::Parse(e.to_string()))?;
    file.into_poses()
}

pub fn save_trajectory<P: AsRef<Path>>(path: P, poses: &[CameraPose]) -> Result<(), GeometryError> {
    let file = TrajectoryFile::from_poses(poses);
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &file).map_err(|e| GeometryError::Parse(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
