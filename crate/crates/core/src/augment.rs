//! Training-time augmentation.
//!
//! Shape augmentation replaces the shape coefficients of a sampled pair with
//! a draw from a configured normal, widening the shape distribution beyond
//! what the pose bank provides. Proxy-representation augmentation corrupts
//! the *input* channels only (jittered keypoints, noisy silhouette edges,
//! removed body parts, occluding boxes) while regression targets stay clean,
//! teaching the regressor to tolerate imperfect upstream detections.
//!
//! Every operation draws from a caller-supplied RNG in a fixed order, so a
//! fixed seed reproduces augmentations exactly.

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{BodyModel, ShapeParams};
use crate::pr::{assemble_pr, joint_heatmaps, ProxyRepresentation};
use crate::raster::rasterize_hard;

/// Per-coefficient normal for shape augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAugConfig {
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl ShapeAugConfig {
    /// Default: zero-mean, σ = 1.5 per coefficient.
    pub fn default_for(b: usize) -> Self {
        ShapeAugConfig {
            means: vec![0.0; b],
            sigmas: vec![1.5; b],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.sigmas.len() || self.means.is_empty() {
            return Err(Error::parameter(format!(
                "shape augmentation has {} means but {} sigmas",
                self.means.len(),
                self.sigmas.len()
            )));
        }
        for (i, s) in self.sigmas.iter().enumerate() {
            if !(*s >= 0.0) || !s.is_finite() {
                return Err(Error::parameter(format!(
                    "shape augmentation sigma[{i}] = {s} is not a non-negative number"
                )));
            }
        }
        Ok(())
    }

    /// Shape augmentation only widens the training distribution if its σ
    /// exceeds the spread already present in the bank; checked when a
    /// generation config is assembled against a bank that carries shapes.
    pub fn check_against_bank(&self, bank_shapes: &[ShapeParams]) -> Result<()> {
        self.validate()?;
        if bank_shapes.is_empty() {
            return Ok(());
        }
        let b = self.sigmas.len();
        for coeff in 0..b {
            let vals: Vec<f64> = bank_shapes
                .iter()
                .map(|s| s.beta.get(coeff).copied().unwrap_or(0.0))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let std = var.sqrt();
            if self.sigmas[coeff] <= std {
                return Err(Error::parameter(format!(
                    "shape augmentation sigma[{coeff}] = {} does not exceed the bank's \
                     empirical std {std:.4}",
                    self.sigmas[coeff]
                )));
            }
        }
        Ok(())
    }
}

/// Draws β from the configured normal.
pub fn augment_shape(cfg: &ShapeAugConfig, rng: &mut ChaCha8Rng) -> ShapeParams {
    let beta = cfg
        .means
        .iter()
        .zip(cfg.sigmas.iter())
        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ShapeParams { beta }
}

/// Corruption parameters for proxy-representation augmentation. Pixel
/// quantities are in image pixels at the configured resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PrAugConfig {
    /// Uniform per-coordinate keypoint jitter bound (px).
    pub joint_jitter_max: f64,
    /// Per-round flip probability for silhouette boundary pixels.
    pub edge_noise_probability: f64,
    /// Number of flip rounds = ceil(amplitude); bounds how deep edge noise
    /// can reach (px).
    pub edge_noise_amplitude: f64,
    /// Probability of deleting each body part.
    pub part_removal_probability: f64,
    /// Probability of each candidate occluding box appearing.
    pub occlusion_box_probability: f64,
    /// Box side range (px).
    pub box_size_range: (f64, f64),
    /// Candidate boxes per image.
    pub boxes_per_image_max: usize,
}

impl PrAugConfig {
    /// Defaults stated at 256×256, scaled linearly to the working size:
    /// jitter 8 px, edge flips at p = 0.5 within 2 px, part removal 0.1,
    /// boxes at p = 0.3 sized 48–96 px.
    pub fn default_for_size(height: usize, width: usize) -> Self {
        let s = height.max(width) as f64 / 256.0;
        PrAugConfig {
            joint_jitter_max: 8.0 * s,
            edge_noise_probability: 0.5,
            edge_noise_amplitude: (2.0 * s).max(1.0),
            part_removal_probability: 0.1,
            occlusion_box_probability: 0.3,
            box_size_range: (48.0 * s, 96.0 * s),
            boxes_per_image_max: 2,
        }
    }

    /// A configuration that leaves inputs untouched.
    pub fn disabled() -> Self {
        PrAugConfig {
            joint_jitter_max: 0.0,
            edge_noise_probability: 0.0,
            edge_noise_amplitude: 0.0,
            part_removal_probability: 0.0,
            occlusion_box_probability: 0.0,
            box_size_range: (0.0, 0.0),
            boxes_per_image_max: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("edge_noise_probability", self.edge_noise_probability),
            ("part_removal_probability", self.part_removal_probability),
            ("occlusion_box_probability", self.occlusion_box_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::parameter(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        if !(self.joint_jitter_max >= 0.0) || !(self.edge_noise_amplitude >= 0.0) {
            return Err(Error::parameter(
                "jitter and edge amplitude must be non-negative".to_string(),
            ));
        }
        if self.box_size_range.0 > self.box_size_range.1 || self.box_size_range.0 < 0.0 {
            return Err(Error::parameter(format!(
                "invalid box size range {:?}",
                self.box_size_range
            )));
        }
        Ok(())
    }
}

/// Uniform per-coordinate jitter within ±max.
pub fn jitter_joints(
    joints2d: &[Vector2<f64>],
    max: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vector2<f64>> {
    joints2d
        .iter()
        .map(|j| {
            Vector2::new(
                j.x + rng.gen_range(-max..=max),
                j.y + rng.gen_range(-max..=max),
            )
        })
        .collect()
}

fn assert_binary(s: &[f64]) -> Result<()> {
    if s.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::parameter(
            "silhouette corruption requires a binary image".to_string(),
        ));
    }
    Ok(())
}

/// Flips boundary pixels with probability `probability`, for
/// ceil(amplitude) rounds. Each round recomputes the boundary (pixels whose
/// 4-neighborhood mixes values) and applies all of that round's flips
/// simultaneously, so noise creeps at most one pixel per round and pixels
/// farther than the amplitude from the original boundary are untouched.
pub fn perturb_silhouette_edges(
    silhouette: &[f64],
    height: usize,
    width: usize,
    probability: f64,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    assert_binary(silhouette)?;
    if silhouette.len() != height * width {
        return Err(Error::parameter("silhouette does not match image size".to_string()));
    }
    let mut s = silhouette.to_vec();
    if probability <= 0.0 || amplitude <= 0.0 {
        return Ok(s);
    }
    let rounds = amplitude.ceil() as usize;
    for _ in 0..rounds {
        let mut flips = Vec::new();
        for py in 0..height {
            for px in 0..width {
                let idx = py * width + px;
                let v = s[idx];
                let mixed = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (py as i64 + dy, px as i64 + dx);
                    ny >= 0
                        && nx >= 0
                        && ny < height as i64
                        && nx < width as i64
                        && s[ny as usize * width + nx as usize] != v
                });
                if mixed && rng.gen_bool(probability) {
                    flips.push(idx);
                }
            }
        }
        for idx in flips {
            s[idx] = 1.0 - s[idx];
        }
    }
    Ok(s)
}

/// Deletes each part (zeroes the silhouette under its mask) independently
/// with the given probability.
pub fn remove_body_parts(
    silhouette: &[f64],
    part_masks: &[Vec<f64>],
    probability: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    assert_binary(silhouette)?;
    let mut s = silhouette.to_vec();
    for mask in part_masks {
        if mask.len() != s.len() {
            return Err(Error::parameter(
                "part mask does not match silhouette size".to_string(),
            ));
        }
        if probability > 0.0 && rng.gen_bool(probability) {
            for (v, m) in s.iter_mut().zip(mask.iter()) {
                if *m > 0.5 {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(s)
}

/// Zeroes up to `boxes_per_image_max` axis-aligned boxes, each appearing
/// with the configured probability at a uniform position and size.
pub fn add_occluding_boxes(
    silhouette: &[f64],
    height: usize,
    width: usize,
    cfg: &PrAugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    assert_binary(silhouette)?;
    let mut s = silhouette.to_vec();
    for _ in 0..cfg.boxes_per_image_max {
        if cfg.occlusion_box_probability <= 0.0 || !rng.gen_bool(cfg.occlusion_box_probability) {
            continue;
        }
        let (lo, hi) = cfg.box_size_range;
        let bw = rng.gen_range(lo..=hi);
        let bh = rng.gen_range(lo..=hi);
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let (x0, x1) = (cx - bw / 2.0, cx + bw / 2.0);
        let (y0, y1) = (cy - bh / 2.0, cy + bh / 2.0);
        for py in 0..height {
            let y = py as f64 + 0.5;
            if y < y0 || y > y1 {
                continue;
            }
            for px in 0..width {
                let x = px as f64 + 0.5;
                if x >= x0 && x <= x1 {
                    s[py * width + px] = 0.0;
                }
            }
        }
    }
    Ok(s)
}

/// Full input corruption: jitters keypoints and regenerates the heatmap
/// channels from the jittered positions, then perturbs silhouette edges,
/// removes parts, and stamps occluding boxes. Targets are untouched — the
/// caller keeps the clean labels.
pub fn augment_pr(
    pr: &ProxyRepresentation,
    joints2d: &[Vector2<f64>],
    heatmap_sigma: f64,
    cfg: &PrAugConfig,
    part_masks: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<ProxyRepresentation> {
    cfg.validate()?;
    pr.validate()?;
    if joints2d.len() != pr.n_keypoints() {
        return Err(Error::parameter(format!(
            "{} keypoints given but the representation has {} heatmap channels",
            joints2d.len(),
            pr.n_keypoints()
        )));
    }
    let jittered = jitter_joints(joints2d, cfg.joint_jitter_max, rng);
    let heatmaps = joint_heatmaps(&jittered, pr.height, pr.width, heatmap_sigma)?;
    let sil = perturb_silhouette_edges(
        &pr.silhouette,
        pr.height,
        pr.width,
        cfg.edge_noise_probability,
        cfg.edge_noise_amplitude,
        rng,
    )?;
    let sil = remove_body_parts(&sil, part_masks, cfg.part_removal_probability, rng)?;
    let sil = add_occluding_boxes(&sil, pr.height, pr.width, cfg, rng)?;
    assemble_pr(sil, heatmaps, pr.height, pr.width)
}

/// Binary mask per body part. A vertex belongs to the joint with its
/// largest skinning weight; a face belongs to a part when all three of its
/// vertices do. Joints whose faces project to nothing still yield their
/// (empty) mask only if they own faces; joints owning no faces are skipped.
pub fn body_part_masks(
    model: &BodyModel,
    vertices2d: &[Vector2<f64>],
    height: usize,
    width: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = model.n_vertices();
    if vertices2d.len() != n {
        return Err(Error::parameter(format!(
            "{} projected vertices but the model has {n}",
            vertices2d.len()
        )));
    }
    let k = model.n_joints();
    let owner: Vec<usize> = (0..n)
        .map(|i| {
            let row = &model.skinning_weights[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut masks = Vec::new();
    for joint in 0..k {
        let faces: Vec<[u32; 3]> = model
            .faces
            .iter()
            .filter(|f| f.iter().all(|&v| owner[v as usize] == joint))
            .copied()
            .collect();
        if faces.is_empty() {
            continue;
        }
        masks.push(rasterize_hard(vertices2d, &faces, height, width)?);
    }
    Ok(masks)
}
