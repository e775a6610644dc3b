//! Synthetic training-pair generation: draw a pose from a bank, shape
//! coefficients from either the bank or the shape-augmentation normal, and a
//! camera translation; run skinning; render the proxy representation
//! (silhouette + keypoint heatmaps); optionally corrupt the input channels.
//! Targets always stay clean.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::augment::{augment_pr, augment_shape, body_part_masks, PrAugConfig, ShapeAugConfig};
use crate::bank::PoseBank;
use crate::camera::{perspective_project, PerspectiveCamera};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::model::{lbs_forward, BodyModel, ShapeParams};
use crate::pr::{assemble_pr, joint_heatmaps, ProxyRepresentation};
use crate::raster::rasterize_hard;
use crate::rng;
use crate::rot::PoseParams;

const DATASET_MAGIC: &[u8; 4] = b"BFKD";
const DATASET_VERSION: u64 = 1;

/// How many fresh camera translations to try when a draw puts body
/// geometry at non-positive camera depth.
const CAMERA_RETRY_LIMIT: usize = 16;

/// Camera sampling: intrinsics and rotation are fixed; the translation is
/// drawn uniformly from a box around `translation_mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSamplingConfig {
    pub base: PerspectiveCamera,
    pub translation_mean: Vector3<f64>,
    pub translation_half_range: Vector3<f64>,
}

impl CameraSamplingConfig {
    /// Square image of the given size; body roughly centered ~2.5 units in
    /// front of the camera with mild positional variation.
    pub fn default_for_size(size: usize) -> Self {
        CameraSamplingConfig {
            base: PerspectiveCamera::default_for_size(size),
            translation_mean: Vector3::new(0.0, -0.2, 2.5),
            translation_half_range: Vector3::new(0.05, 0.05, 0.3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.fx <= 0.0 || self.base.fy <= 0.0 {
            return Err(Error::parameter(format!(
                "camera focal lengths must be positive (got {}, {})",
                self.base.fx, self.base.fy
            )));
        }
        let ok = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
        if !ok(&self.translation_mean)
            || !ok(&self.translation_half_range)
            || self.translation_half_range.iter().any(|&c| c < 0.0)
        {
            return Err(Error::parameter(
                "camera translation mean/half-range must be finite with non-negative ranges"
                    .to_string(),
            ));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> PerspectiveCamera {
        let mut t = self.translation_mean;
        for i in 0..3 {
            let h = self.translation_half_range[i];
            t[i] += rng.gen_range(-h..=h);
        }
        self.base.clone().with_translation(t)
    }
}

/// Full generation configuration. `shape_aug = None` means shapes come from
/// the bank (which then must carry them); `pr_aug = None` leaves inputs
/// clean.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub heatmap_sigma: f64,
    pub camera: CameraSamplingConfig,
    pub shape_aug: Option<ShapeAugConfig>,
    pub pr_aug: Option<PrAugConfig>,
}

impl SynthConfig {
    pub fn default_for_size(size: usize, n_shape_coeffs: usize) -> Self {
        SynthConfig {
            height: size,
            width: size,
            heatmap_sigma: (size as f64 / 32.0).max(2.0),
            camera: CameraSamplingConfig::default_for_size(size),
            shape_aug: Some(ShapeAugConfig::default_for(n_shape_coeffs)),
            pr_aug: Some(PrAugConfig::default_for_size(size, size)),
        }
    }

    pub fn validate(&self, bank: &PoseBank) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::parameter("image size must be positive".to_string()));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(Error::parameter(format!(
                "heatmap sigma must be positive, got {}",
                self.heatmap_sigma
            )));
        }
        self.camera.validate()?;
        match (&self.shape_aug, &bank.shapes) {
            (Some(cfg), Some(shapes)) => cfg.check_against_bank(shapes)?,
            (Some(cfg), None) => cfg.validate()?,
            (None, Some(_)) => {}
            (None, None) => {
                return Err(Error::parameter(
                    "no shape source: shape augmentation is disabled and the pose bank \
                     carries no shapes"
                        .to_string(),
                ))
            }
        }
        if let Some(cfg) = &self.pr_aug {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// One supervised example: corrupted (or clean) input channels plus clean
/// regression targets and the camera that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: ProxyRepresentation,
    pub target_pose: Vec<Vector3<f64>>,
    pub target_shape: ShapeParams,
    pub target_vertices: Vec<Vector3<f64>>,
    pub target_joints3d: Vec<Vector3<f64>>,
    pub target_joints2d: Vec<Vector2<f64>>,
    pub camera_translation: Vector3<f64>,
}

/// Draws one pair using the supplied RNG. The caller is responsible for
/// having validated `cfg` against the bank.
pub fn sample_training_pair(
    model: &BodyModel,
    bank: &PoseBank,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    if bank.n_joints() != model.n_joints() {
        return Err(Error::parameter(format!(
            "pose bank has {} joints per pose but the model has {}",
            bank.n_joints(),
            model.n_joints()
        )));
    }
    let index = rng.gen_range(0..bank.len());
    let pose = bank.poses[index].clone();
    let shape = match (&cfg.shape_aug, &bank.shapes) {
        (Some(aug), _) => augment_shape(aug, rng),
        (None, Some(shapes)) => shapes[index].clone(),
        (None, None) => {
            return Err(Error::parameter(
                "no shape source for sampling".to_string(),
            ))
        }
    };

    let lbs = lbs_forward(model, &shape, &PoseParams::AxisAngle(pose.clone()))?;

    // A sampled translation can place geometry behind the image plane;
    // retry with fresh draws before giving up.
    let mut projected = None;
    for attempt in 0..CAMERA_RETRY_LIMIT {
        let cam = cfg.camera.sample(rng);
        match perspective_project(&lbs.vertices, &cam) {
            Ok(v2d) => {
                projected = Some((cam, v2d));
                break;
            }
            Err(_) if attempt + 1 < CAMERA_RETRY_LIMIT => continue,
            Err(e) => {
                return Err(Error::numeric(format!(
                    "camera sampling kept placing the body at non-positive depth \
                     ({CAMERA_RETRY_LIMIT} attempts): {e}"
                )))
            }
        }
    }
    let (camera, verts2d) = projected.expect("loop either breaks or returns");

    let kp3d: Vec<Vector3<f64>> = model
        .keypoint_map
        .iter()
        .map(|&j| lbs.joints3d[j as usize])
        .collect();
    let joints2d = perspective_project(&kp3d, &camera)?;

    let silhouette = rasterize_hard(&verts2d, &model.faces, cfg.height, cfg.width)?;
    let heatmaps = joint_heatmaps(&joints2d, cfg.height, cfg.width, cfg.heatmap_sigma)?;
    let clean = assemble_pr(silhouette, heatmaps, cfg.height, cfg.width)?;

    let input = match &cfg.pr_aug {
        Some(aug) => {
            let masks = body_part_masks(model, &verts2d, cfg.height, cfg.width)?;
            augment_pr(&clean, &joints2d, cfg.heatmap_sigma, aug, &masks, rng)?
        }
        None => clean,
    };

    Ok(TrainingPair {
        input,
        target_pose: pose,
        target_shape: shape,
        target_vertices: lbs.vertices,
        target_joints3d: lbs.joints3d,
        target_joints2d: joints2d,
        camera_translation: camera.translation,
    })
}

/// A generated dataset. All pairs share one image size and per-field
/// dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub pairs: Vec<TrainingPair>,
}

/// Generates `count` pairs. Pair `i` draws from its own RNG stream of
/// `seed`, so any subset of indices regenerates identically regardless of
/// batch size or order.
pub fn generate_dataset(
    model: &BodyModel,
    bank: &PoseBank,
    cfg: &SynthConfig,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::parameter("dataset needs at least one pair".to_string()));
    }
    cfg.validate(bank)?;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = rng::stream(seed, i as u64);
        pairs.push(sample_training_pair(model, bank, cfg, &mut rng)?);
    }
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        pairs,
    })
}

impl Dataset {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let first = self
            .pairs
            .first()
            .ok_or_else(|| Error::data("dataset is empty".to_string()))?;
        Ok((
            first.input.n_keypoints(),
            first.target_vertices.len(),
            first.target_pose.len(),
            first.target_shape.beta.len(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (l, n, k, b) = self.dims()?;
        let mut w = ByteWriter::new();
        w.write_magic(DATASET_MAGIC);
        w.write_u64(DATASET_VERSION);
        for v in [self.pairs.len(), self.height, self.width, l, n, k, b] {
            w.write_u64(v as u64);
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.input.height != self.height
                || p.input.width != self.width
                || p.input.n_keypoints() != l
                || p.target_vertices.len() != n
                || p.target_pose.len() != k
                || p.target_joints3d.len() != k
                || p.target_joints2d.len() != l
                || p.target_shape.beta.len() != b
            {
                return Err(Error::data(format!("pair {i} has inconsistent dimensions")));
            }
            w.write_f64_slice(&p.input.silhouette);
            w.write_f64_slice(&p.input.heatmaps);
            for v in &p.target_pose {
                w.write_f64_slice(v.as_slice());
            }
            w.write_f64_slice(&p.target_shape.beta);
            for v in &p.target_vertices {
                w.write_f64_slice(v.as_slice());
            }
            for v in &p.target_joints3d {
                w.write_f64_slice(v.as_slice());
            }
            for v in &p.target_joints2d {
                w.write_f64_slice(v.as_slice());
            }
            w.write_f64_slice(p.camera_translation.as_slice());
        }
        w.to_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::from_file(path)?;
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.read_u64("format version")?;
        if version != DATASET_VERSION {
            return Err(Error::data(format!(
                "unsupported dataset version {version} (expected {DATASET_VERSION})"
            )));
        }
        let count = r.read_count("pair count", 1 << 24)?;
        let height = r.read_count("image height", 1 << 16)?;
        let width = r.read_count("image width", 1 << 16)?;
        let l = r.read_count("keypoint count", 1 << 12)?;
        let n = r.read_count("vertex count", 1 << 24)?;
        let k = r.read_count("joint count", 1 << 12)?;
        let b = r.read_count("shape coefficient count", 1 << 12)?;
        let read_vec3s = |r: &mut ByteReader, count: usize, what: &str| -> Result<Vec<Vector3<f64>>> {
            Ok(r.read_f64_vec(count * 3, what)?
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect())
        };
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let silhouette = r.read_f64_vec(height * width, "silhouette data")?;
            let heatmaps = r.read_f64_vec(l * height * width, "heatmap data")?;
            let input = assemble_pr(silhouette, heatmaps, height, width)?;
            let target_pose = read_vec3s(&mut r, k, "pose data")?;
            let target_shape = ShapeParams {
                beta: r.read_f64_vec(b, "shape data")?,
            };
            let target_vertices = read_vec3s(&mut r, n, "vertex data")?;
            let target_joints3d = read_vec3s(&mut r, k, "joint data")?;
            let j2d_flat = r.read_f64_vec(l * 2, "keypoint data")?;
            let target_joints2d = j2d_flat
                .chunks_exact(2)
                .map(|c| Vector2::new(c[0], c[1]))
                .collect();
            let t = r.read_f64_vec(3, "camera translation")?;
            pairs.push(TrainingPair {
                input,
                target_pose,
                target_shape,
                target_vertices,
                target_joints3d,
                target_joints2d,
                camera_translation: Vector3::new(t[0], t[1], t[2]),
            });
        }
        r.expect_eof()?;
        Ok(Dataset {
            height,
            width,
            pairs,
        })
    }
}
