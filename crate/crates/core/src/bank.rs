//! Pose banks: collections of plausible body poses (and optionally matching
//! shape coefficients) that synthetic training pairs are drawn from. A bank
//! can be generated procedurally or loaded from a binary file.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::UnitSphere;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::model::ShapeParams;
use crate::rng;
use crate::rot::PoseParams;

const BANK_MAGIC: &[u8; 4] = b"BFKP";
const BANK_VERSION: u64 = 1;

/// Maximum per-joint rotation magnitude for procedural poses (rad). Large
/// enough to bend limbs visibly, small enough that the toy body stays free
/// of gross self-intersection.
pub const SYNTH_POSE_MAX_ANGLE: f64 = 0.4;

/// A non-empty set of poses, stored as per-joint axis-angle vectors, with
/// optional per-pose shape coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBank {
    pub poses: Vec<Vec<Vector3<f64>>>,
    pub shapes: Option<Vec<ShapeParams>>,
}

impl PoseBank {
    pub fn new(poses: Vec<Vec<Vector3<f64>>>, shapes: Option<Vec<ShapeParams>>) -> Result<Self> {
        let bank = PoseBank { poses, shapes };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn n_joints(&self) -> usize {
        self.poses.first().map_or(0, |p| p.len())
    }

    pub fn pose_params(&self, index: usize) -> PoseParams {
        PoseParams::AxisAngle(self.poses[index].clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::data("pose bank is empty".to_string()));
        }
        let k = self.poses[0].len();
        if k == 0 {
            return Err(Error::data("pose bank has zero joints per pose".to_string()));
        }
        for (i, p) in self.poses.iter().enumerate() {
            if p.len() != k {
                return Err(Error::data(format!(
                    "pose {i} has {} joints, expected {k}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(Error::data(format!("pose {i} contains non-finite values")));
            }
        }
        if let Some(shapes) = &self.shapes {
            if shapes.len() != self.poses.len() {
                return Err(Error::data(format!(
                    "bank has {} poses but {} shapes",
                    self.poses.len(),
                    shapes.len()
                )));
            }
            let b = shapes[0].beta.len();
            for (i, s) in shapes.iter().enumerate() {
                if s.beta.len() != b {
                    return Err(Error::data(format!(
                        "shape {i} has {} coefficients, expected {b}",
                        s.beta.len()
                    )));
                }
                if s.beta.iter().any(|c| !c.is_finite()) {
                    return Err(Error::data(format!("shape {i} contains non-finite values")));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let k = self.n_joints();
        let (has_shapes, b) = match &self.shapes {
            Some(s) => (1u64, s[0].beta.len()),
            None => (0u64, 0),
        };
        let mut w = ByteWriter::new();
        w.write_magic(BANK_MAGIC);
        w.write_u64(BANK_VERSION);
        w.write_u64(self.poses.len() as u64);
        w.write_u64(k as u64);
        w.write_u64(has_shapes);
        w.write_u64(b as u64);
        for pose in &self.poses {
            for v in pose {
                w.write_f64(v.x);
                w.write_f64(v.y);
                w.write_f64(v.z);
            }
        }
        if let Some(shapes) = &self.shapes {
            for s in shapes {
                w.write_f64_slice(&s.beta);
            }
        }
        w.to_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::from_file(path)?;
        r.expect_magic(BANK_MAGIC)?;
        let version = r.read_u64("format version")?;
        if version != BANK_VERSION {
            return Err(Error::data(format!(
                "unsupported pose bank version {version} (expected {BANK_VERSION})"
            )));
        }
        let count = r.read_count("pose count", 1 << 24)?;
        let k = r.read_count("joint count", 1 << 12)?;
        let has_shapes = r.read_u64("shape flag")?;
        if has_shapes > 1 {
            return Err(Error::data(format!("shape flag must be 0 or 1, got {has_shapes}")));
        }
        let b = r.read_count("shape coefficient count", 1 << 12)?;
        let mut poses = Vec::with_capacity(count);
        for _ in 0..count {
            let flat = r.read_f64_vec(k * 3, "pose axis-angle data")?;
            poses.push(
                flat.chunks_exact(3)
                    .map(|c| Vector3::new(c[0], c[1], c[2]))
                    .collect(),
            );
        }
        let shapes = if has_shapes == 1 {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                out.push(ShapeParams {
                    beta: r.read_f64_vec(b, "shape coefficient data")?,
                });
            }
            Some(out)
        } else {
            None
        };
        r.expect_eof()?;
        PoseBank::new(poses, shapes)
    }
}

/// Procedural pose bank: each pose gets a uniform yaw at the root and, per
/// remaining joint, a uniformly random axis with magnitude uniform in
/// [0, SYNTH_POSE_MAX_ANGLE].
pub fn synthetic_pose_bank(seed: u64, count: usize, n_joints: usize) -> Result<PoseBank> {
    synthetic_bank_impl(seed, count, n_joints, None)
}

/// Same as [`synthetic_pose_bank`] but also draws per-pose shape
/// coefficients from N(0, shape_sigma²).
pub fn synthetic_pose_bank_with_shapes(
    seed: u64,
    count: usize,
    n_joints: usize,
    n_shape_coeffs: usize,
    shape_sigma: f64,
) -> Result<PoseBank> {
    if n_shape_coeffs == 0 || !(shape_sigma >= 0.0) || !shape_sigma.is_finite() {
        return Err(Error::parameter(format!(
            "bank shapes need a positive coefficient count and non-negative sigma \
             (got {n_shape_coeffs}, {shape_sigma})"
        )));
    }
    synthetic_bank_impl(seed, count, n_joints, Some((n_shape_coeffs, shape_sigma)))
}

fn synthetic_bank_impl(
    seed: u64,
    count: usize,
    n_joints: usize,
    shape: Option<(usize, f64)>,
) -> Result<PoseBank> {
    if count == 0 || n_joints == 0 {
        return Err(Error::parameter(format!(
            "pose bank needs at least one pose and one joint (got {count}, {n_joints})"
        )));
    }
    let mut poses = Vec::with_capacity(count);
    let mut shapes = shape.map(|_| Vec::with_capacity(count));
    for i in 0..count {
        let mut rng = rng::stream(seed, i as u64);
        let mut pose = Vec::with_capacity(n_joints);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        pose.push(Vector3::new(0.0, yaw, 0.0));
        for _ in 1..n_joints {
            let dir: [f64; 3] = rng.sample(UnitSphere);
            let mag = rng.gen_range(0.0..=SYNTH_POSE_MAX_ANGLE);
            pose.push(Vector3::new(dir[0], dir[1], dir[2]) * mag);
        }
        poses.push(pose);
        if let (Some(list), Some((b, sigma))) = (shapes.as_mut(), shape) {
            let beta = (0..b)
                .map(|_| sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            list.push(ShapeParams { beta });
        }
    }
    PoseBank::new(poses, shapes)
}
