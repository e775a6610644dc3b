//! Multi-frame body fitting: one shared shape, per-frame poses and camera
//! translations, optimized jointly against 2D keypoints and silhouettes.
//!
//! The objective is a weighted sum of six terms: confidence-weighted 2D
//! keypoint reprojection, L1 silhouette overlap against a soft render, a
//! hinge angle prior, a Gaussian-mixture pose prior, an L2 shape prior, and
//! a pull toward the per-frame initial pose. The last term is what keeps a
//! fit from "leaning into" an over-large target silhouette: without it the
//! cheapest way to cover extra pixels is to pitch the body toward the
//! camera, with it the extra coverage has to come from shape.
//!
//! Poses are optimized in the 6D rotation encoding (the decode is continuous,
//! so gradient steps never fall off a chart boundary) and converted back to
//! axis-angle for output. All per-frame terms are averaged over frames, so
//! lambda settings transfer between problems of different lengths.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::Serialize;

use crate::camera::{perspective_project, perspective_project_vjp, PerspectiveCamera};
use crate::config::KvReader;
use crate::diff::{AdamConfig, AdamState, ParamVector, ScalarFunction};
use crate::error::{Error, Result};
use crate::gmm::DiagonalGmm;
use crate::io::{ByteReader, ByteWriter};
use crate::model::{lbs_forward_cached, lbs_backward, BodyModel, ShapeParams};
use crate::pr::{read_pgm, write_pgm};
use crate::raster::{rasterize_soft, rasterize_soft_vjp};
use crate::rot::{
    log_map, log_map_vjp, matrix_to_rot6d, rot6d_to_matrix, rot6d_to_matrix_vjp, PoseParams,
    Rotation6D,
};

const FIT_RESULT_MAGIC: &[u8; 4] = b"BFKF";
const FIT_RESULT_VERSION: u64 = 1;

/// One observed frame: a binary silhouette, 2D keypoints with per-keypoint
/// confidences, and the pose/translation the optimizer starts from.
#[derive(Debug, Clone)]
pub struct FitFrame {
    /// Row-major H·W mask, values exactly 0 or 1.
    pub target_silhouette: Vec<f64>,
    /// One target per model keypoint, in pixels.
    pub target_joints2d: Vec<Vector2<f64>>,
    /// Per-keypoint weights in [0, 1]; zero drops a keypoint from the fit.
    pub confidences: Vec<f64>,
    pub init_pose: PoseParams,
    pub init_translation: Vector3<f64>,
}

/// A full fitting task: the frames, the (shared) camera intrinsics and
/// extrinsic rotation, image dimensions, and an optional starting shape.
/// The camera's own translation is ignored — each frame optimizes its own.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub frames: Vec<FitFrame>,
    pub camera: PerspectiveCamera,
    pub height: usize,
    pub width: usize,
    pub init_shape: Option<ShapeParams>,
}

/// One penalized hinge: rotating `joint` about `axis` (0 = x, 1 = y, 2 = z)
/// in the direction of `sign` costs exp(sign·angle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hinge {
    pub joint: usize,
    pub axis: usize,
    pub sign: f64,
}

/// Hinge set for the 24-joint humanoid skeleton: knees (joints 4, 5) may not
/// hyperextend, elbows (18, 19) may not bend backward. Axis and sign follow
/// the toy skeleton's rest orientation, where legs hang along −y (knee
/// flexion is +x) and arms extend along ±x (elbow flexion is −y/+y).
pub fn humanoid_hinges() -> Vec<Hinge> {
    vec![
        Hinge { joint: 4, axis: 0, sign: -1.0 },
        Hinge { joint: 5, axis: 0, sign: -1.0 },
        Hinge { joint: 18, axis: 1, sign: 1.0 },
        Hinge { joint: 19, axis: 1, sign: -1.0 },
    ]
}

/// Term weights of the fitting objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitLambdas {
    pub joints2d: f64,
    pub silhouette: f64,
    pub angle: f64,
    pub pose_prior: f64,
    pub shape_prior: f64,
    pub init_pose: f64,
}

impl Default for FitLambdas {
    /// Defaults tuned so every term lands at the same order of magnitude on
    /// the synthetic recovery problem; the silhouette term needs the large
    /// weight because its per-pixel L1 is normalized by the full image area.
    fn default() -> Self {
        FitLambdas {
            joints2d: 1.0,
            silhouette: 100.0,
            angle: 0.1,
            pose_prior: 0.01,
            shape_prior: 0.005,
            init_pose: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub lambdas: FitLambdas,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the running-best energy has decreased by less than
    /// `rel_tol · max(1, |E|)` over the last `patience` iterations.
    pub rel_tol: f64,
    pub patience: usize,
    /// Soft-rasterizer sharpness (squared pixels).
    pub tau: f64,
    pub hinges: Vec<Hinge>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambdas: FitLambdas::default(),
            learning_rate: 0.01,
            max_iters: 500,
            rel_tol: 1e-6,
            patience: 10,
            // The soft render unions per-face coverage, so large tau dilates
            // the silhouette by the stacked face tails and an L1 fit against
            // a binary mask then prefers a too-thin body. 0.1 px² keeps that
            // dilation under half a pixel while leaving a usable gradient
            // band around the boundary.
            tau: 0.1,
            hinges: Vec::new(),
        }
    }
}

impl FitConfig {
    /// Defaults for a given model: the humanoid skeleton gets its hinge set,
    /// other topologies start with none.
    pub fn default_for(model: &BodyModel) -> Self {
        let mut cfg = FitConfig::default();
        if model.n_joints() == 24 {
            cfg.hinges = humanoid_hinges();
        }
        cfg
    }

    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        let l = [
            self.lambdas.joints2d,
            self.lambdas.silhouette,
            self.lambdas.angle,
            self.lambdas.pose_prior,
            self.lambdas.shape_prior,
            self.lambdas.init_pose,
        ];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::parameter(format!("lambdas must be finite and ≥ 0, got {l:?}")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_iters == 0 || self.patience == 0 {
            return Err(Error::parameter(
                "max_iters and patience must be at least 1".to_string(),
            ));
        }
        if !(self.tau > 0.0) {
            return Err(Error::parameter(format!("tau must be positive, got {}", self.tau)));
        }
        for (i, h) in self.hinges.iter().enumerate() {
            if h.joint >= model.n_joints() || h.axis > 2 || h.sign.abs() != 1.0 {
                return Err(Error::parameter(format!(
                    "hinge {i} is invalid: joint {}, axis {}, sign {} (model has {} joints)",
                    h.joint,
                    h.axis,
                    h.sign,
                    model.n_joints()
                )));
            }
        }
        Ok(())
    }
}

impl FitProblem {
    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::parameter("fit problem has no frames".to_string()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::parameter("image dimensions must be positive".to_string()));
        }
        if !(self.camera.fx > 0.0) || !(self.camera.fy > 0.0) {
            return Err(Error::parameter("camera focal lengths must be positive".to_string()));
        }
        if let Some(shape) = &self.init_shape {
            if shape.beta.len() != model.n_shape_coeffs() {
                return Err(Error::parameter(format!(
                    "initial shape has {} coefficients, model expects {}",
                    shape.beta.len(),
                    model.n_shape_coeffs()
                )));
            }
        }
        let l = model.n_keypoints();
        for (n, frame) in self.frames.iter().enumerate() {
            if frame.target_silhouette.len() != self.height * self.width {
                return Err(Error::parameter(format!(
                    "frame {n}: silhouette has {} pixels, expected {}×{}",
                    frame.target_silhouette.len(),
                    self.height,
                    self.width
                )));
            }
            if frame.target_silhouette.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::data(format!(
                    "frame {n}: target silhouette is not binary"
                )));
            }
            if frame.target_joints2d.len() != l || frame.confidences.len() != l {
                return Err(Error::parameter(format!(
                    "frame {n}: {} targets / {} confidences, model has {l} keypoints",
                    frame.target_joints2d.len(),
                    frame.confidences.len()
                )));
            }
            if frame.confidences.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(Error::parameter(format!(
                    "frame {n}: confidences must lie in [0, 1]"
                )));
            }
            if frame.init_pose.joint_count() != model.n_joints() {
                return Err(Error::parameter(format!(
                    "frame {n}: initial pose has {} joints, model has {}",
                    frame.init_pose.joint_count(),
                    model.n_joints()
                )));
            }
            if !frame.init_translation.iter().all(|v| v.is_finite()) {
                return Err(Error::parameter(format!(
                    "frame {n}: initial translation is not finite"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted values of the six energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyTerms {
    pub joints2d: f64,
    pub silhouette: f64,
    pub angle: f64,
    pub pose_prior: f64,
    pub shape_prior: f64,
    pub init_pose: f64,
}

impl EnergyTerms {
    pub fn zeros() -> Self {
        EnergyTerms {
            joints2d: 0.0,
            silhouette: 0.0,
            angle: 0.0,
            pose_prior: 0.0,
            shape_prior: 0.0,
            init_pose: 0.0,
        }
    }

    pub fn weighted_total(&self, lambdas: &FitLambdas) -> f64 {
        lambdas.joints2d * self.joints2d
            + lambdas.silhouette * self.silhouette
            + lambdas.angle * self.angle
            + lambdas.pose_prior * self.pose_prior
            + lambdas.shape_prior * self.shape_prior
            + lambdas.init_pose * self.init_pose
    }

    fn as_array(&self) -> [f64; 6] {
        [
            self.joints2d,
            self.silhouette,
            self.angle,
            self.pose_prior,
            self.shape_prior,
            self.init_pose,
        ]
    }

    fn from_array(a: [f64; 6]) -> Self {
        EnergyTerms {
            joints2d: a[0],
            silhouette: a[1],
            angle: a[2],
            pose_prior: a[3],
            shape_prior: a[4],
            init_pose: a[5],
        }
    }
}

// ---------------------------------------------------------------------------
// Standalone single-frame energies. These are the reference definitions; the
// optimizer uses a fused path that shares the skinning forward pass between
// the keypoint and silhouette terms, and a recomposition test pins the two
// implementations together.
// ---------------------------------------------------------------------------

/// Confidence-weighted squared keypoint reprojection error, averaged over
/// keypoints: `Σ_l w_l ‖project(j_l + t) − target_l‖² / L`.
pub fn joint_energy(
    model: &BodyModel,
    shape: &ShapeParams,
    rotations: &[Matrix3<f64>],
    translation: &Vector3<f64>,
    camera: &PerspectiveCamera,
    targets: &[Vector2<f64>],
    confidences: &[f64],
) -> Result<f64> {
    let l = model.n_keypoints();
    if targets.len() != l || confidences.len() != l {
        return Err(Error::parameter(format!(
            "{} targets / {} confidences for {l} keypoints",
            targets.len(),
            confidences.len()
        )));
    }
    let (lbs, _) = lbs_forward_cached(model, shape, rotations)?;
    let cam = PerspectiveCamera {
        translation: *translation,
        ..camera.clone()
    };
    let kp3d: Vec<Vector3<f64>> = model.keypoint_map.iter().map(|&j| lbs.joints3d[j]).collect();
    let uv = perspective_project(&kp3d, &cam)?;
    let sum: f64 = uv
        .iter()
        .zip(targets.iter().zip(confidences.iter()))
        .map(|(p, (t, w))| w * (p - t).norm_squared())
        .sum();
    Ok(sum / l as f64)
}

/// L1 distance between the soft render and the target mask, normalized by
/// the pixel count.
pub fn silhouette_energy(
    model: &BodyModel,
    shape: &ShapeParams,
    rotations: &[Matrix3<f64>],
    translation: &Vector3<f64>,
    camera: &PerspectiveCamera,
    target: &[f64],
    height: usize,
    width: usize,
    tau: f64,
) -> Result<f64> {
    if target.len() != height * width {
        return Err(Error::parameter(format!(
            "target mask has {} pixels, expected {height}×{width}",
            target.len()
        )));
    }
    let (lbs, _) = lbs_forward_cached(model, shape, rotations)?;
    let cam = PerspectiveCamera {
        translation: *translation,
        ..camera.clone()
    };
    let verts2d = perspective_project(&lbs.vertices, &cam)?;
    let soft = rasterize_soft(&verts2d, &model.faces, height, width, tau)?;
    let sum: f64 = soft.iter().zip(target.iter()).map(|(s, t)| (s - t).abs()).sum();
    Ok(sum / (height * width) as f64)
}

/// Mean over hinges of exp(sign · angle-about-axis); empty hinge sets cost 0.
pub fn angle_prior_energy(rotations: &[Matrix3<f64>], hinges: &[Hinge]) -> f64 {
    if hinges.is_empty() {
        return 0.0;
    }
    let sum: f64 = hinges
        .iter()
        .map(|h| (h.sign * log_map(&rotations[h.joint])[h.axis]).exp())
        .sum();
    sum / hinges.len() as f64
}

/// Negative log-likelihood of the non-root rotations under the mixture prior.
pub fn gmm_prior_energy(rotations: &[Matrix3<f64>], prior: &DiagonalGmm) -> Result<f64> {
    prior.nll(&rotation_feature(rotations))
}

/// `‖β‖²`.
pub fn shape_prior_energy(shape: &ShapeParams) -> f64 {
    shape.beta.iter().map(|b| b * b).sum()
}

/// Squared distance between flattened rotation sets, normalized by the 9K
/// entries (216 for the 24-joint skeleton). The root is included: anchoring
/// global orientation is this term's whole purpose.
pub fn init_pose_energy(rotations: &[Matrix3<f64>], init: &[Matrix3<f64>]) -> Result<f64> {
    if rotations.len() != init.len() || rotations.is_empty() {
        return Err(Error::parameter(format!(
            "rotation sets have {} and {} entries",
            rotations.len(),
            init.len()
        )));
    }
    let sum: f64 = rotations
        .iter()
        .zip(init.iter())
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / (9 * rotations.len()) as f64)
}

/// Flattened non-root rotations, row-major per joint: the pose-prior feature.
fn rotation_feature(rotations: &[Matrix3<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * rotations.len().saturating_sub(1));
    for m in &rotations[1..] {
        for r in 0..3 {
            for c in 0..3 {
                out.push(m[(r, c)]);
            }
        }
    }
    out
}

fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pose_segment(n: usize) -> String {
    format!("pose6d_{n}")
}

fn trans_segment(n: usize) -> String {
    format!("trans_{n}")
}

/// The fitting objective over a [`ParamVector`] with segments `beta`,
/// `pose6d_n`, `trans_n`. There is exactly one `beta` segment however many
/// frames the problem has — the shared-shape constraint is structural, not
/// penalized.
pub struct FitObjective<'a> {
    model: &'a BodyModel,
    problem: &'a FitProblem,
    cfg: &'a FitConfig,
    prior: &'a DiagonalGmm,
    /// Flattened (row-major, 9K) initial rotations per frame.
    init_flat: Vec<Vec<f64>>,
}

impl<'a> FitObjective<'a> {
    pub fn new(
        model: &'a BodyModel,
        problem: &'a FitProblem,
        cfg: &'a FitConfig,
        prior: &'a DiagonalGmm,
    ) -> Result<Self> {
        problem.validate(model)?;
        cfg.validate(model)?;
        if cfg.lambdas.pose_prior != 0.0 {
            prior.validate()?;
            let want = 9 * (model.n_joints() - 1);
            if prior.dim() != want {
                return Err(Error::parameter(format!(
                    "pose prior has dimension {}, model's non-root rotations need {want}",
                    prior.dim()
                )));
            }
        }
        let mut init_flat = Vec::with_capacity(problem.frames.len());
        for frame in &problem.frames {
            let mats = frame.init_pose.to_matrices()?;
            let mut flat = Vec::with_capacity(9 * mats.len());
            for m in &mats {
                for r in 0..3 {
                    for c in 0..3 {
                        flat.push(m[(r, c)]);
                    }
                }
            }
            init_flat.push(flat);
        }
        Ok(FitObjective {
            model,
            problem,
            cfg,
            prior,
            init_flat,
        })
    }

    /// Parameter vector at the problem's initialization.
    pub fn initial_params(&self) -> Result<ParamVector> {
        let b = self.model.n_shape_coeffs();
        let mut params = ParamVector::new();
        let beta = match &self.problem.init_shape {
            Some(s) => s.beta.clone(),
            None => vec![0.0; b],
        };
        params.push_segment("beta", &beta)?;
        for (n, frame) in self.problem.frames.iter().enumerate() {
            let mats = frame.init_pose.to_matrices()?;
            let mut p6 = Vec::with_capacity(6 * mats.len());
            for m in &mats {
                p6.extend_from_slice(&matrix_to_rot6d(m)?.0);
            }
            params.push_segment(&pose_segment(n), &p6)?;
            params.push_segment(
                &trans_segment(n),
                &[
                    frame.init_translation.x,
                    frame.init_translation.y,
                    frame.init_translation.z,
                ],
            )?;
        }
        Ok(params)
    }

    /// Unweighted term values at `params`, all terms computed regardless of
    /// their weights.
    pub fn terms(&self, params: &ParamVector) -> Result<EnergyTerms> {
        Ok(self.eval(params, false, true)?.0)
    }

    /// Decodes one frame's pose segment.
    fn frame_rotations(&self, params: &ParamVector, n: usize) -> Result<(Vec<Rotation6D>, Vec<Matrix3<f64>>)> {
        let p6 = params.segment(&pose_segment(n))?;
        let mut r6 = Vec::with_capacity(p6.len() / 6);
        let mut rots = Vec::with_capacity(p6.len() / 6);
        for c in p6.chunks(6) {
            let r = Rotation6D([c[0], c[1], c[2], c[3], c[4], c[5]]);
            rots.push(rot6d_to_matrix(&r)?);
            r6.push(r);
        }
        Ok((r6, rots))
    }

    /// Shared forward (+ optional reverse) pass. `force_all` computes terms
    /// whose weight is zero (for reporting); the gradient always covers
    /// exactly the weighted objective.
    fn eval(
        &self,
        params: &ParamVector,
        want_grad: bool,
        force_all: bool,
    ) -> Result<(EnergyTerms, Option<ParamVector>)> {
        let model = self.model;
        let lam = &self.cfg.lambdas;
        let k = model.n_joints();
        let (h, w) = (self.problem.height, self.problem.width);
        let n_frames = self.problem.frames.len() as f64;
        let shape = ShapeParams {
            beta: params.segment("beta")?.to_vec(),
        };
        let mut terms = EnergyTerms::zeros();
        let mut grad = if want_grad { Some(params.zeros_like()) } else { None };

        if force_all || lam.shape_prior != 0.0 {
            terms.shape_prior = shape_prior_energy(&shape);
        }
        if let Some(g) = grad.as_mut() {
            if lam.shape_prior != 0.0 {
                for (gb, &bv) in g.segment_mut("beta")?.iter_mut().zip(shape.beta.iter()) {
                    *gb += lam.shape_prior * 2.0 * bv;
                }
            }
        }

        for (n, frame) in self.problem.frames.iter().enumerate() {
            let (r6, rots) = self.frame_rotations(params, n)?;
            let ts = params.segment(&trans_segment(n))?;
            let cam = PerspectiveCamera {
                translation: Vector3::new(ts[0], ts[1], ts[2]),
                ..self.problem.camera.clone()
            };
            // dL/d(local rotation matrix), accumulated across every term
            // before a single decode-vjp per joint.
            let mut d_rots = vec![Matrix3::<f64>::zeros(); k];
            let mut d_trans = Vector3::<f64>::zeros();

            let need_joints = force_all || lam.joints2d != 0.0;
            let need_sil = force_all || lam.silhouette != 0.0;
            if need_joints || need_sil {
                let (lbs, cache) = lbs_forward_cached(model, &shape, &rots)?;
                let mut d_joints3d = vec![Vector3::<f64>::zeros(); k];
                let mut d_vertices: Vec<Vector3<f64>> = Vec::new();
                let mut any_lbs_grad = false;

                if need_joints {
                    let l = model.n_keypoints() as f64;
                    let kp3d: Vec<Vector3<f64>> =
                        model.keypoint_map.iter().map(|&j| lbs.joints3d[j]).collect();
                    let uv = perspective_project(&kp3d, &cam)?;
                    let mut e = 0.0;
                    let mut d_uv = vec![Vector2::<f64>::zeros(); uv.len()];
                    for (i, p) in uv.iter().enumerate() {
                        let diff = p - frame.target_joints2d[i];
                        e += frame.confidences[i] * diff.norm_squared();
                        if want_grad && lam.joints2d != 0.0 {
                            d_uv[i] =
                                (lam.joints2d * frame.confidences[i] * 2.0 / (l * n_frames)) * diff;
                        }
                    }
                    terms.joints2d += e / (l * n_frames);
                    if want_grad && lam.joints2d != 0.0 {
                        let (d_kp, d_t) = perspective_project_vjp(&kp3d, &cam, &d_uv)?;
                        for (i, &j) in model.keypoint_map.iter().enumerate() {
                            d_joints3d[j] += d_kp[i];
                        }
                        d_trans += d_t;
                        any_lbs_grad = true;
                    }
                }

                if need_sil {
                    let wh = (h * w) as f64;
                    let verts2d = perspective_project(&lbs.vertices, &cam)?;
                    let soft = rasterize_soft(&verts2d, &model.faces, h, w, self.cfg.tau)?;
                    let mut e = 0.0;
                    let mut d_soft = vec![0.0; soft.len()];
                    for (i, s) in soft.iter().enumerate() {
                        let d = s - frame.target_silhouette[i];
                        e += d.abs();
                        if want_grad && lam.silhouette != 0.0 {
                            d_soft[i] = lam.silhouette * l1_sign(d) / (wh * n_frames);
                        }
                    }
                    terms.silhouette += e / (wh * n_frames);
                    if want_grad && lam.silhouette != 0.0 {
                        let d_v2 =
                            rasterize_soft_vjp(&verts2d, &model.faces, h, w, self.cfg.tau, &d_soft)?;
                        let (d_v3, d_t) = perspective_project_vjp(&lbs.vertices, &cam, &d_v2)?;
                        d_vertices = d_v3;
                        d_trans += d_t;
                        any_lbs_grad = true;
                    }
                }

                if want_grad && any_lbs_grad {
                    let lbs_grads = lbs_backward(model, &cache, &d_vertices, &d_joints3d)?;
                    if let Some(g) = grad.as_mut() {
                        for (gb, db) in g.segment_mut("beta")?.iter_mut().zip(lbs_grads.d_beta) {
                            *gb += db;
                        }
                    }
                    for (acc, d) in d_rots.iter_mut().zip(lbs_grads.d_rotations) {
                        *acc += d;
                    }
                }
            }

            if (force_all || lam.angle != 0.0) && !self.cfg.hinges.is_empty() {
                let nh = self.cfg.hinges.len() as f64;
                let mut e = 0.0;
                for hinge in &self.cfg.hinges {
                    let v = log_map(&rots[hinge.joint]);
                    let term = (hinge.sign * v[hinge.axis]).exp();
                    e += term;
                    if want_grad && lam.angle != 0.0 {
                        let mut d_v = Vector3::zeros();
                        d_v[hinge.axis] = lam.angle * term * hinge.sign / (nh * n_frames);
                        d_rots[hinge.joint] += log_map_vjp(&rots[hinge.joint], &d_v);
                    }
                }
                terms.angle += e / (nh * n_frames);
            }

            if force_all || lam.pose_prior != 0.0 {
                let feature = rotation_feature(&rots);
                if want_grad && lam.pose_prior != 0.0 {
                    let (nll, d_feat) = self.prior.nll_grad(&feature)?;
                    terms.pose_prior += nll / n_frames;
                    for j in 1..k {
                        for r in 0..3 {
                            for c in 0..3 {
                                d_rots[j][(r, c)] +=
                                    lam.pose_prior * d_feat[(j - 1) * 9 + r * 3 + c] / n_frames;
                            }
                        }
                    }
                } else {
                    terms.pose_prior += self.prior.nll(&feature)? / n_frames;
                }
            }

            if force_all || lam.init_pose != 0.0 {
                let denom = (9 * k) as f64;
                let init = &self.init_flat[n];
                let mut e = 0.0;
                for j in 0..k {
                    for r in 0..3 {
                        for c in 0..3 {
                            let d = rots[j][(r, c)] - init[j * 9 + r * 3 + c];
                            e += d * d;
                            if want_grad && lam.init_pose != 0.0 {
                                d_rots[j][(r, c)] +=
                                    lam.init_pose * 2.0 * d / (denom * n_frames);
                            }
                        }
                    }
                }
                terms.init_pose += e / (denom * n_frames);
            }

            if let Some(g) = grad.as_mut() {
                let pose_grad = g.segment_mut(&pose_segment(n))?;
                for (j, d) in d_rots.iter().enumerate() {
                    if *d != Matrix3::zeros() {
                        let d6 = rot6d_to_matrix_vjp(&r6[j], d)?;
                        for (slot, v) in pose_grad[j * 6..(j + 1) * 6].iter_mut().zip(d6) {
                            *slot += v;
                        }
                    }
                }
                let tg = g.segment_mut(&trans_segment(n))?;
                tg[0] += d_trans.x;
                tg[1] += d_trans.y;
                tg[2] += d_trans.z;
            }
        }

        Ok((terms, grad))
    }
}

impl ScalarFunction for FitObjective<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        let (terms, _) = self.eval(params, false, false)?;
        Ok(terms.weighted_total(&self.cfg.lambdas))
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (terms, grad) = self.eval(params, true, false)?;
        Ok((terms.weighted_total(&self.cfg.lambdas), grad.unwrap()))
    }
}

/// Outcome of a multi-frame fit: the parameters of the best-energy iterate,
/// their energy breakdown, and the full per-iteration energy trace.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub shape: ShapeParams,
    /// Axis-angle per joint, one entry per frame.
    pub poses: Vec<Vec<Vector3<f64>>>,
    pub translations: Vec<Vector3<f64>>,
    /// Weighted total at the returned parameters.
    pub energy: f64,
    /// Unweighted term values at the returned parameters.
    pub terms: EnergyTerms,
    /// Iterations actually run (= trace length).
    pub iterations: usize,
    /// True when the tolerance rule stopped the fit before `max_iters`.
    pub converged: bool,
    /// Weighted total per iteration, evaluated before each step.
    pub trace: Vec<f64>,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    n_frames: usize,
    iterations: usize,
    converged: bool,
    energy: f64,
    terms: &'a EnergyTerms,
}

impl FitResult {
    pub fn n_frames(&self) -> usize {
        self.poses.len()
    }

    pub fn pose_params(&self, n: usize) -> PoseParams {
        PoseParams::AxisAngle(self.poses[n].clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.write_magic(FIT_RESULT_MAGIC);
        w.write_u64(FIT_RESULT_VERSION);
        w.write_u64(self.poses.len() as u64);
        w.write_u64(self.shape.beta.len() as u64);
        w.write_u64(self.poses.first().map_or(0, |p| p.len()) as u64);
        w.write_f64_slice(&self.shape.beta);
        for (pose, t) in self.poses.iter().zip(self.translations.iter()) {
            for aa in pose {
                w.write_f64(aa.x);
                w.write_f64(aa.y);
                w.write_f64(aa.z);
            }
            w.write_f64(t.x);
            w.write_f64(t.y);
            w.write_f64(t.z);
        }
        w.write_f64(self.energy);
        w.write_f64_slice(&self.terms.as_array());
        w.write_u64(self.iterations as u64);
        w.write_u64(self.converged as u64);
        w.write_u64(self.trace.len() as u64);
        w.write_f64_slice(&self.trace);
        w.to_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::from_file(path)?;
        r.expect_magic(FIT_RESULT_MAGIC)?;
        let version = r.read_u64("version")?;
        if version != FIT_RESULT_VERSION {
            return Err(Error::data(format!(
                "unsupported fit result version {version}"
            )));
        }
        let n = r.read_count("frame count", 1 << 20)?;
        let b = r.read_count("shape coefficient count", 1 << 16)?;
        let k = r.read_count("joint count", 1 << 12)?;
        if n == 0 || k == 0 {
            return Err(Error::data("fit result has no frames or no joints".to_string()));
        }
        let beta = r.read_f64_vec(b, "shape coefficients")?;
        let mut poses = Vec::with_capacity(n);
        let mut translations = Vec::with_capacity(n);
        for _ in 0..n {
            let vals = r.read_f64_vec(3 * k, "pose")?;
            poses.push(
                vals.chunks(3)
                    .map(|c| Vector3::new(c[0], c[1], c[2]))
                    .collect(),
            );
            let t = r.read_f64_vec(3, "translation")?;
            translations.push(Vector3::new(t[0], t[1], t[2]));
        }
        let energy = r.read_f64("energy")?;
        let t = r.read_f64_vec(6, "energy terms")?;
        let terms = EnergyTerms::from_array([t[0], t[1], t[2], t[3], t[4], t[5]]);
        let iterations = r.read_count("iteration count", 1 << 32)?;
        let converged = match r.read_u64("converged flag")? {
            0 => false,
            1 => true,
            v => return Err(Error::data(format!("converged flag must be 0 or 1, got {v}"))),
        };
        let trace_len = r.read_count("trace length", 1 << 32)?;
        let trace = r.read_f64_vec(trace_len, "trace")?;
        r.expect_eof()?;
        Ok(FitResult {
            shape: ShapeParams { beta },
            poses,
            translations,
            energy,
            terms,
            iterations,
            converged,
            trace,
        })
    }

    pub fn summary_json(&self) -> String {
        let summary = FitSummary {
            n_frames: self.n_frames(),
            iterations: self.iterations,
            converged: self.converged,
            energy: self.energy,
            terms: &self.terms,
        };
        // Plain data with no maps; serialization cannot fail.
        serde_json::to_string_pretty(&summary).expect("fit summary serialization")
    }

    pub fn save_summary(&self, path: &Path) -> Result<Self> {
        std::fs::write(path, self.summary_json()).map_err(|e| Error::io(path, e))?;
        Ok(self.clone())
    }
}

/// Jointly optimizes one shared shape plus per-frame poses (6D encoding) and
/// camera translations with Adam. The returned parameters are those of the
/// lowest-energy iterate, so the final energy never exceeds the initial one;
/// the fit stops early once the running best has improved by less than
/// `rel_tol · max(1, |E|)` over `patience` iterations.
pub fn fit_multiframe(
    model: &BodyModel,
    problem: &FitProblem,
    cfg: &FitConfig,
    prior: &DiagonalGmm,
) -> Result<FitResult> {
    let objective = FitObjective::new(model, problem, cfg, prior)?;
    let mut params = objective.initial_params()?;
    let mut adam = AdamState::new(params.len(), AdamConfig::with_learning_rate(cfg.learning_rate))?;

    let mut trace = Vec::new();
    let mut best_trace: Vec<f64> = Vec::new();
    let mut best_energy = f64::INFINITY;
    let mut best_params = params.clone();
    let mut converged = false;

    for it in 0..cfg.max_iters {
        let (value, grad) = crate::diff::gradient(&objective, &params).map_err(|e| {
            Error::numeric(format!(
                "fit aborted at iteration {it} ({} energies recorded): {e}",
                trace.len()
            ))
        })?;
        trace.push(value);
        if value < best_energy {
            best_energy = value;
            best_params = params.clone();
        }
        best_trace.push(best_energy);
        if it >= cfg.patience {
            let then = best_trace[it - cfg.patience];
            if then - best_energy <= cfg.rel_tol * then.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        adam.step(&mut params, &grad)?;
    }

    let terms = objective.terms(&best_params)?;
    let k = model.n_joints();
    let mut poses = Vec::with_capacity(problem.frames.len());
    let mut translations = Vec::with_capacity(problem.frames.len());
    for n in 0..problem.frames.len() {
        let (_, rots) = objective.frame_rotations(&best_params, n)?;
        poses.push((0..k).map(|j| log_map(&rots[j])).collect());
        let ts = best_params.segment(&trans_segment(n))?;
        translations.push(Vector3::new(ts[0], ts[1], ts[2]));
    }
    Ok(FitResult {
        shape: ShapeParams {
            beta: best_params.segment("beta")?.to_vec(),
        },
        poses,
        translations,
        energy: best_energy,
        terms,
        iterations: trace.len(),
        converged,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Problem-directory I/O. A fit problem on disk is a directory of per-frame
// files plus one camera file:
//   frame_000_sil.pgm     binary silhouette
//   frame_000_joints.txt  L lines "x y confidence"
//   frame_000_init.txt    K lines "rx ry rz" (axis-angle), then "tx ty tz"
//   camera.cfg            fx/fy/cx/cy/width/height as key = value
//   init_beta.txt         optional whitespace-separated shape coefficients
// ---------------------------------------------------------------------------

fn frame_file(dir: &Path, index: usize, suffix: &str) -> std::path::PathBuf {
    dir.join(format!("frame_{index:03}_{suffix}"))
}

fn parse_float_rows(path: &Path, per_row: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != per_row {
            return Err(Error::data(format!(
                "{}: line {} has {} fields, expected {per_row}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(per_row);
        for f in fields {
            row.push(f.parse::<f64>().map_err(|_| {
                Error::data(format!(
                    "{}: line {}: '{f}' is not a number",
                    path.display(),
                    lineno + 1
                ))
            })?);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads a fit problem from `dir`. Frames are numbered consecutively from
/// `frame_000_*`; the camera has the default y-down extrinsic rotation and
/// the intrinsics from `camera.cfg`.
pub fn load_fit_problem(dir: &Path) -> Result<FitProblem> {
    let cam_path = dir.join("camera.cfg");
    let mut kv = KvReader::new(crate::config::parse_kv_file(&cam_path)?);
    let fx = kv.require_f64("fx")?;
    let fy = kv.require_f64("fy")?;
    let cx = kv.require_f64("cx")?;
    let cy = kv.require_f64("cy")?;
    let width = kv.require_usize("width")?;
    let height = kv.require_usize("height")?;
    kv.finish()
        .map_err(|e| Error::parameter(format!("{}: {e}", cam_path.display())))?;
    let camera = PerspectiveCamera {
        fx,
        fy,
        cx,
        cy,
        ..PerspectiveCamera::default_for_size(width)
    };

    let mut frames = Vec::new();
    loop {
        let sil_path = frame_file(dir, frames.len(), "sil.pgm");
        if !sil_path.exists() {
            break;
        }
        let (sil, ph, pw) = read_pgm(&sil_path)?;
        if ph != height || pw != width {
            return Err(Error::data(format!(
                "{}: image is {ph}×{pw}, camera.cfg says {height}×{width}",
                sil_path.display()
            )));
        }
        if sil.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data(format!(
                "{}: silhouette is not binary",
                sil_path.display()
            )));
        }

        let joints_path = frame_file(dir, frames.len(), "joints.txt");
        let rows = parse_float_rows(&joints_path, 3)?;
        let target_joints2d: Vec<Vector2<f64>> =
            rows.iter().map(|r| Vector2::new(r[0], r[1])).collect();
        let confidences: Vec<f64> = rows.iter().map(|r| r[2]).collect();

        let init_path = frame_file(dir, frames.len(), "init.txt");
        let rows = parse_float_rows(&init_path, 3)?;
        if rows.len() < 2 {
            return Err(Error::data(format!(
                "{}: needs at least one joint line plus the translation line",
                init_path.display()
            )));
        }
        let (pose_rows, trans_row) = rows.split_at(rows.len() - 1);
        let init_pose = PoseParams::AxisAngle(
            pose_rows
                .iter()
                .map(|r| Vector3::new(r[0], r[1], r[2]))
                .collect(),
        );
        let t = &trans_row[0];
        frames.push(FitFrame {
            target_silhouette: sil,
            target_joints2d,
            confidences,
            init_pose,
            init_translation: Vector3::new(t[0], t[1], t[2]),
        });
    }
    if frames.is_empty() {
        return Err(Error::data(format!(
            "{}: no frame_000_sil.pgm found",
            dir.display()
        )));
    }

    let beta_path = dir.join("init_beta.txt");
    let init_shape = if beta_path.exists() {
        let text = std::fs::read_to_string(&beta_path).map_err(|e| Error::io(&beta_path, e))?;
        let mut beta = Vec::new();
        for tok in text.split_whitespace() {
            beta.push(tok.parse::<f64>().map_err(|_| {
                Error::data(format!("{}: '{tok}' is not a number", beta_path.display()))
            })?);
        }
        Some(ShapeParams { beta })
    } else {
        None
    };

    Ok(FitProblem {
        frames,
        camera,
        height,
        width,
        init_shape,
    })
}

/// Writes a fit problem as a problem directory (see [`load_fit_problem`]).
/// Only the default extrinsic rotation can be represented on disk.
pub fn save_fit_problem(dir: &Path, problem: &FitProblem) -> Result<()> {
    let default_rot = PerspectiveCamera::default_for_size(problem.width).rotation;
    if problem.camera.rotation != default_rot {
        return Err(Error::parameter(
            "problem directories only support the default camera rotation".to_string(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam = &problem.camera;
    let cam_text = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n",
        cam.fx, cam.fy, cam.cx, cam.cy, problem.width, problem.height
    );
    let cam_path = dir.join("camera.cfg");
    std::fs::write(&cam_path, cam_text).map_err(|e| Error::io(&cam_path, e))?;

    for (n, frame) in problem.frames.iter().enumerate() {
        write_pgm(
            frame_file(dir, n, "sil.pgm"),
            &frame.target_silhouette,
            problem.height,
            problem.width,
        )?;

        let mut joints = String::new();
        for (p, c) in frame.target_joints2d.iter().zip(frame.confidences.iter()) {
            writeln!(joints, "{} {} {}", p.x, p.y, c).expect("string write");
        }
        let joints_path = frame_file(dir, n, "joints.txt");
        std::fs::write(&joints_path, joints).map_err(|e| Error::io(&joints_path, e))?;

        let mats = frame.init_pose.to_matrices()?;
        let mut init = String::new();
        for m in &mats {
            let aa = log_map(m);
            writeln!(init, "{} {} {}", aa.x, aa.y, aa.z).expect("string write");
        }
        let t = frame.init_translation;
        writeln!(init, "{} {} {}", t.x, t.y, t.z).expect("string write");
        let init_path = frame_file(dir, n, "init.txt");
        std::fs::write(&init_path, init).map_err(|e| Error::io(&init_path, e))?;
    }

    if let Some(shape) = &problem.init_shape {
        let text = shape
            .beta
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        let beta_path = dir.join("init_beta.txt");
        std::fs::write(&beta_path, text + "\n").map_err(|e| Error::io(&beta_path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::StandardNormal;
    use tempfile::tempdir;

    use super::*;
    use crate::diff::finite_difference;
    use crate::gmm::{fit_pose_prior, EmConfig};
    use crate::metrics::pve_t;
    use crate::model::{generate_toy_model, lbs_forward, neutral_mesh};
    use crate::rng::seeded;
    use crate::rot::axis_angle_to_matrix;

    /// A prior that is valid for any feature length it is asked about:
    /// single broad component centered at the identity feature.
    fn broad_prior(k: usize) -> DiagonalGmm {
        let dim = 9 * (k - 1);
        let mut mean = vec![0.0; dim];
        for j in 0..(k - 1) {
            for d in 0..3 {
                mean[j * 9 + d * 3 + d] = 1.0;
            }
        }
        DiagonalGmm {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![vec![4.0; dim]],
        }
    }

    struct Setup {
        model: BodyModel,
        problem: FitProblem,
        truth_shape: ShapeParams,
        truth_poses: Vec<PoseParams>,
        truth_trans: Vec<Vector3<f64>>,
    }

    /// Renders `n_frames` frames of a chain body from known parameters and
    /// packages them as a fit problem initialized at the truth.
    fn rendered_setup(
        seed: u64,
        n_frames: usize,
        size: usize,
        truth_beta: &[f64],
        pose_scale: f64,
        depth: f64,
    ) -> Setup {
        let model = generate_toy_model(seed, 72, 4, truth_beta.len(), 3).unwrap();
        let camera = PerspectiveCamera::default_for_size(size);
        let truth_shape = ShapeParams {
            beta: truth_beta.to_vec(),
        };
        let mut rng = seeded(seed ^ 0x5f17);
        let mut frames = Vec::new();
        let mut truth_poses = Vec::new();
        let mut truth_trans = Vec::new();
        for n in 0..n_frames {
            let aa: Vec<Vector3<f64>> = (0..model.n_joints())
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ) * pose_scale
                })
                .collect();
            let pose = PoseParams::AxisAngle(aa);
            // Spread the frames in depth: a single view cannot separate a
            // height change from a depth change, several at different
            // ranges can.
            let t = Vector3::new(0.02 * n as f64, -0.01 * n as f64, depth + 0.2 * n as f64);
            let lbs = lbs_forward(&model, &truth_shape, &pose).unwrap();
            let cam_n = PerspectiveCamera {
                translation: t,
                ..camera.clone()
            };
            let kp3d: Vec<Vector3<f64>> =
                model.keypoint_map.iter().map(|&j| lbs.joints3d[j]).collect();
            let joints2d = perspective_project(&kp3d, &cam_n).unwrap();
            let verts2d = perspective_project(&lbs.vertices, &cam_n).unwrap();
            // Thresholding the soft render keeps the target binary while
            // placing the silhouette term's optimum at the generating
            // parameters; a hard-raster target sits inside the soft union's
            // dilated boundary and biases the fit thin.
            let sil: Vec<f64> = rasterize_soft(&verts2d, &model.faces, size, size, 0.1)
                .unwrap()
                .iter()
                .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
                .collect();
            frames.push(FitFrame {
                target_silhouette: sil,
                target_joints2d: joints2d,
                confidences: vec![1.0; model.n_keypoints()],
                init_pose: pose.clone(),
                init_translation: t,
            });
            truth_poses.push(pose);
            truth_trans.push(t);
        }
        let problem = FitProblem {
            frames,
            camera,
            height: size,
            width: size,
            init_shape: Some(truth_shape.clone()),
        };
        Setup {
            model,
            problem,
            truth_shape,
            truth_poses,
            truth_trans,
        }
    }

    #[test]
    fn joint_energy_worked_example() {
        // One keypoint, unit confidence: an offset of (3, 4) px scores 25.
        let model = generate_toy_model(5, 60, 2, 2, 1).unwrap();
        let shape = ShapeParams::zeros(2);
        let rots = PoseParams::identity(2).to_matrices().unwrap();
        let t = Vector3::new(0.0, 0.0, 2.5);
        let cam = PerspectiveCamera::default_for_size(64);
        let lbs = lbs_forward(&model, &shape, &PoseParams::identity(2)).unwrap();
        let cam_t = PerspectiveCamera {
            translation: t,
            ..cam.clone()
        };
        let kp3d = vec![lbs.joints3d[model.keypoint_map[0]]];
        let uv = perspective_project(&kp3d, &cam_t).unwrap();

        let exact = joint_energy(&model, &shape, &rots, &t, &cam, &uv, &[1.0]).unwrap();
        assert!(exact.abs() < 1e-18, "matching targets score {exact}");

        let offset = vec![uv[0] + Vector2::new(3.0, 4.0)];
        let e = joint_energy(&model, &shape, &rots, &t, &cam, &offset, &[1.0]).unwrap();
        assert!((e - 25.0).abs() < 1e-12, "offset (3,4) scores {e}");

        let zero_conf = joint_energy(&model, &shape, &rots, &t, &cam, &offset, &[0.0]).unwrap();
        assert_eq!(zero_conf, 0.0);
    }

    #[test]
    fn init_pose_energy_worked_examples() {
        let id = Matrix3::identity();
        let half_turn_z = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::PI));
        // K=1: ‖diag(1,1,1) − diag(−1,−1,1)‖² / 9 = 8/9.
        let e = init_pose_energy(&[id], &[half_turn_z]).unwrap();
        assert!((e - 8.0 / 9.0).abs() < 1e-12, "{e}");
        // Identical sets score zero.
        assert_eq!(init_pose_energy(&[half_turn_z], &[half_turn_z]).unwrap(), 0.0);
        // K=24: denominator is 216, so one flipped joint scores 8/216.
        let mut rots = vec![id; 24];
        rots[7] = half_turn_z;
        let e = init_pose_energy(&rots, &vec![id; 24]).unwrap();
        assert!((e - 8.0 / 216.0).abs() < 1e-12, "{e}");
        assert!(init_pose_energy(&rots, &[id]).is_err());
    }

    #[test]
    fn angle_prior_worked_examples() {
        let hinge = Hinge {
            joint: 1,
            axis: 0,
            sign: -1.0,
        };
        let id = vec![Matrix3::identity(); 2];
        assert!((angle_prior_energy(&id, &[hinge]) - 1.0).abs() < 1e-15);
        assert_eq!(angle_prior_energy(&id, &[]), 0.0);

        // 1 rad in the natural (unpenalized) direction costs exp(−1).
        let mut natural = id.clone();
        natural[1] = axis_angle_to_matrix(&Vector3::new(1.0, 0.0, 0.0));
        let e = angle_prior_energy(&natural, &[hinge]);
        assert!((e - (-1.0f64).exp()).abs() < 1e-12, "{e}");

        // Strictly increasing as the unnatural bend grows.
        let mut prev = angle_prior_energy(&id, &[hinge]);
        for step in 1..=10 {
            let mut rots = id.clone();
            rots[1] = axis_angle_to_matrix(&Vector3::new(-0.1 * step as f64, 0.0, 0.0));
            let e = angle_prior_energy(&rots, &[hinge]);
            assert!(e > prev, "energy must grow with unnatural bend: {e} vs {prev}");
            prev = e;
        }
    }

    #[test]
    fn shape_prior_worked_examples() {
        assert_eq!(shape_prior_energy(&ShapeParams::zeros(5)), 0.0);
        let e = shape_prior_energy(&ShapeParams {
            beta: vec![3.0, 4.0, 0.0],
        });
        assert!((e - 25.0).abs() < 1e-15);
    }

    #[test]
    fn objective_matches_manual_term_recomposition() {
        let setup = rendered_setup(11, 2, 24, &[0.2, -0.1], 0.1, 2.6);
        let model = &setup.model;
        let bank = crate::bank::synthetic_pose_bank(3, 40, model.n_joints()).unwrap();
        let (prior, _) = fit_pose_prior(&bank, &EmConfig::new(2, 21)).unwrap();
        let mut cfg = FitConfig::default_for(model);
        cfg.hinges = vec![Hinge {
            joint: 2,
            axis: 1,
            sign: 1.0,
        }];
        let objective = FitObjective::new(model, &setup.problem, &cfg, &prior).unwrap();
        let mut params = objective.initial_params().unwrap();
        // Nudge away from the exact init so every term is nontrivial.
        let mut rng = seeded(99);
        for v in params.values_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }

        let total = objective.value(&params).unwrap();
        let terms = objective.terms(&params).unwrap();
        assert!((total - terms.weighted_total(&cfg.lambdas)).abs() < 1e-12);

        // Rebuild each term from the standalone definitions.
        let shape = ShapeParams {
            beta: params.segment("beta").unwrap().to_vec(),
        };
        let n = setup.problem.frames.len() as f64;
        let mut manual = EnergyTerms::zeros();
        manual.shape_prior = shape_prior_energy(&shape);
        for (i, frame) in setup.problem.frames.iter().enumerate() {
            let p6 = params.segment(&pose_segment(i)).unwrap();
            let rots: Vec<Matrix3<f64>> = p6
                .chunks(6)
                .map(|c| rot6d_to_matrix(&Rotation6D([c[0], c[1], c[2], c[3], c[4], c[5]])).unwrap())
                .collect();
            let ts = params.segment(&trans_segment(i)).unwrap();
            let t = Vector3::new(ts[0], ts[1], ts[2]);
            manual.joints2d += joint_energy(
                model,
                &shape,
                &rots,
                &t,
                &setup.problem.camera,
                &frame.target_joints2d,
                &frame.confidences,
            )
            .unwrap()
                / n;
            manual.silhouette += silhouette_energy(
                model,
                &shape,
                &rots,
                &t,
                &setup.problem.camera,
                &frame.target_silhouette,
                24,
                24,
                cfg.tau,
            )
            .unwrap()
                / n;
            manual.angle += angle_prior_energy(&rots, &cfg.hinges) / n;
            manual.pose_prior += gmm_prior_energy(&rots, &prior).unwrap() / n;
            let init_rots = frame.init_pose.to_matrices().unwrap();
            manual.init_pose += init_pose_energy(&rots, &init_rots).unwrap() / n;
        }
        for (got, want) in terms.as_array().iter().zip(manual.as_array()) {
            assert!((got - want).abs() < 1e-12, "term mismatch: {got} vs {want}");
        }
    }

    #[test]
    fn every_term_gradient_matches_finite_differences() {
        let setup = rendered_setup(17, 2, 24, &[0.15, -0.2], 0.12, 2.6);
        let model = &setup.model;
        let bank = crate::bank::synthetic_pose_bank(5, 40, model.n_joints()).unwrap();
        let (prior, _) = fit_pose_prior(&bank, &EmConfig::new(2, 23)).unwrap();

        let zero = FitLambdas {
            joints2d: 0.0,
            silhouette: 0.0,
            angle: 0.0,
            pose_prior: 0.0,
            shape_prior: 0.0,
            init_pose: 0.0,
        };
        // Per-term floor on coordinates that must carry signal: the shape
        // prior touches only the two beta entries, the others spread wider.
        let configs: Vec<(&str, FitLambdas, usize)> = vec![
            ("joints2d", FitLambdas { joints2d: 1.0, ..zero }, 20),
            ("silhouette", FitLambdas { silhouette: 1.0, ..zero }, 20),
            ("angle", FitLambdas { angle: 1.0, ..zero }, 6),
            ("pose_prior", FitLambdas { pose_prior: 1.0, ..zero }, 20),
            ("shape_prior", FitLambdas { shape_prior: 1.0, ..zero }, 2),
            ("init_pose", FitLambdas { init_pose: 1.0, ..zero }, 20),
            ("combined", FitLambdas::default(), 30),
        ];

        for (name, lambdas, min_checked) in configs {
            let mut cfg = FitConfig::default();
            cfg.lambdas = lambdas;
            // Central differences need a smooth landscape; at the sharp
            // default tau the sigmoid's curvature dominates the step error.
            // The analytic gradient itself does not depend on this choice.
            cfg.tau = 0.5;
            cfg.hinges = vec![
                Hinge { joint: 1, axis: 0, sign: 1.0 },
                Hinge { joint: 3, axis: 2, sign: -1.0 },
            ];
            let objective = FitObjective::new(model, &setup.problem, &cfg, &prior).unwrap();
            let mut params = objective.initial_params().unwrap();
            let mut rng = seeded(1234);
            for v in params.values_mut() {
                *v += rng.gen_range(-0.03..0.03);
            }

            let (_, analytic) = objective.value_and_grad(&params).unwrap();
            let fd = finite_difference(&objective, &params, 1e-6).unwrap();
            let mut checked = 0;
            for i in 0..params.len() {
                let a = analytic.values()[i];
                let f = fd.values()[i];
                if a.abs() <= 1e-6 && f.abs() <= 1e-6 {
                    continue;
                }
                let rel = (a - f).abs() / a.abs().max(f.abs());
                assert!(
                    rel < 1e-4,
                    "term '{name}', segment '{}' component {i}: analytic {a:.9e} vs fd {f:.9e} (rel {rel:.2e})",
                    params.segment_of_index(i),
                );
                checked += 1;
            }
            assert!(
                checked >= min_checked,
                "term '{name}': only {checked} active coordinates, expected ≥ {min_checked}"
            );
        }
    }

    #[test]
    fn fit_initialized_at_truth_stays_there() {
        let setup = rendered_setup(23, 2, 32, &[0.2, -0.15], 0.1, 2.6);
        let mut cfg = FitConfig::default_for(&setup.model);
        // Keep only the terms whose minimum sits exactly at the truth: the
        // keypoint and init-pose energies are zero there with zero gradient.
        // The silhouette term is off because its soft boundary band never
        // matches a binary target exactly, so the truth is merely near its
        // minimum, not stationary; priors that pull away from the rendered
        // truth are off for the same reason.
        cfg.lambdas = FitLambdas {
            silhouette: 0.0,
            angle: 0.0,
            pose_prior: 0.0,
            shape_prior: 0.0,
            ..FitLambdas::default()
        };
        cfg.max_iters = 50;
        let prior = broad_prior(setup.model.n_joints());
        let result = fit_multiframe(&setup.model, &setup.problem, &cfg, &prior).unwrap();

        for (got, want) in result.shape.beta.iter().zip(setup.truth_shape.beta.iter()) {
            assert!(
                (got - want).abs() < 1e-3,
                "beta moved from {want} to {got} when initialized at truth"
            );
        }
        assert!(result.energy <= result.trace[0] + 1e-12, "final exceeds initial");
        // Running best is non-increasing by construction; spot-check trace bookkeeping.
        assert_eq!(result.iterations, result.trace.len());
        assert!(result.n_frames() == 2 && result.shape.beta.len() == 2);
    }

    #[test]
    fn fit_recovers_from_perturbed_initialization() {
        // Three frames with distinct poses: a per-frame pose can absorb a
        // height error in any single view, but not consistently across
        // views that share the shape.
        let setup = rendered_setup(31, 3, 48, &[0.25, -0.2], 0.25, 2.6);
        let model = &setup.model;
        let mut rng = seeded(77);
        let mut problem = setup.problem.clone();
        // Perturb the initial shape and poses; targets stay at the truth.
        let init_beta: Vec<f64> = setup
            .truth_shape
            .beta
            .iter()
            .map(|b| b + 0.35 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        problem.init_shape = Some(ShapeParams {
            beta: init_beta.clone(),
        });
        for (frame, pose) in problem.frames.iter_mut().zip(&setup.truth_poses) {
            let PoseParams::AxisAngle(aa) = pose else { unreachable!() };
            let jittered: Vec<Vector3<f64>> = aa
                .iter()
                .map(|v| {
                    let d = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    v + 0.05 * d
                })
                .collect();
            frame.init_pose = PoseParams::AxisAngle(jittered);
            frame.init_translation += Vector3::new(
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
            );
        }

        let mut cfg = FitConfig::default_for(model);
        cfg.lambdas.pose_prior = 0.0; // no humanoid prior for the chain body
        cfg.lambdas.angle = 0.0;
        // The chain silhouette is thin enough that slight bends can mimic a
        // height change; the pose initialization is trusted (it sits near
        // the truth), so anchor it hard and make the shape explain the rest.
        cfg.lambdas.init_pose = 1.0;
        // The default silhouette weight assumes a body-scale mask; on this
        // thin chain the soft boundary band is a large fraction of the whole
        // silhouette, so the same weight lets residual boundary blur
        // overpower the exact keypoint term. Keep the silhouette strong
        // enough to determine the radial coefficient (invisible to the
        // on-axis keypoints) without drowning the rest.
        cfg.lambdas.silhouette = 10.0;
        let prior = broad_prior(model.n_joints());
        let result = fit_multiframe(model, &problem, &cfg, &prior).unwrap();

        // Plain PVE-T: a β perturbation of this two-coefficient body is
        // nearly a pure rescaling, which the scale-corrected metric would
        // cancel and leave nothing to measure.
        let truth_mesh = neutral_mesh(model, &setup.truth_shape).unwrap();
        let init_mesh = neutral_mesh(model, &ShapeParams { beta: init_beta.clone() }).unwrap();
        let fit_mesh = neutral_mesh(model, &result.shape).unwrap();
        let init_err = pve_t(&init_mesh, &truth_mesh).unwrap();
        let fit_err = pve_t(&fit_mesh, &truth_mesh).unwrap();
        assert!(
            fit_err < 0.4 * init_err,
            "shape error {fit_err:.2} mm did not improve on init {init_err:.2} mm"
        );
        assert!(result.energy <= result.trace[0]);
    }

    #[test]
    fn init_pose_term_anchors_root_to_initialization() {
        // The anchor is a trust knob on the pose initialization: at the
        // default weight it only regularizes directions the images leave
        // free, cranked up it holds the pose against them. Render frames
        // whose images say the root leans 0.2 rad away from the given
        // initialization and check that the term, when trusted, keeps the
        // root home — and that without it the fit follows the images.
        let size = 40;
        let model = generate_toy_model(41, 72, 4, 2, 3).unwrap();
        let camera = PerspectiveCamera::default_for_size(size);
        let shape = ShapeParams { beta: vec![0.15, 0.1] };
        let mut aa = vec![Vector3::zeros(); 4];
        aa[0] = Vector3::new(0.2, 0.0, 0.0);
        let truth_pose = PoseParams::AxisAngle(aa);
        let t = Vector3::new(0.0, 0.0, 3.3);
        let lbs = lbs_forward(&model, &shape, &truth_pose).unwrap();

        let cam_t = PerspectiveCamera { translation: t, ..camera.clone() };
        let kp3d: Vec<Vector3<f64>> =
            model.keypoint_map.iter().map(|&j| lbs.joints3d[j]).collect();
        let joints2d = perspective_project(&kp3d, &cam_t).unwrap();
        let verts2d = perspective_project(&lbs.vertices, &cam_t).unwrap();
        let sil: Vec<f64> = rasterize_soft(&verts2d, &model.faces, size, size, 0.1)
            .unwrap()
            .iter()
            .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
            .collect();

        let problem = FitProblem {
            frames: vec![FitFrame {
                target_silhouette: sil,
                target_joints2d: joints2d,
                confidences: vec![1.0; model.n_keypoints()],
                init_pose: PoseParams::identity(4),
                init_translation: t,
            }],
            camera,
            height: size,
            width: size,
            init_shape: Some(shape.clone()),
        };

        let root_drift_with = |init_pose: f64| {
            let mut cfg = FitConfig::default_for(&model);
            cfg.lambdas.pose_prior = 0.0;
            cfg.lambdas.angle = 0.0;
            cfg.lambdas.init_pose = init_pose;
            cfg.max_iters = 200;
            let prior = broad_prior(model.n_joints());
            let result = fit_multiframe(&model, &problem, &cfg, &prior).unwrap();
            let root_fit = axis_angle_to_matrix(&result.poses[0][0]);
            let cos = ((root_fit.transpose() * Matrix3::identity()).trace() - 1.0) * 0.5;
            cos.clamp(-1.0, 1.0).acos()
        };

        // The anchor energy is normalized by all 9K rotation entries while
        // the keypoint term is in squared pixels, so holding the root against
        // a multi-pixel data pull takes a weight in the thousands; trusting
        // the initialization that much is exactly what the knob expresses.
        let drift_free = root_drift_with(0.0);
        let drift_anchored = root_drift_with(5000.0);
        assert!(
            drift_free > 0.1,
            "without the anchor the fit should follow the images, root moved only {drift_free:.3} rad"
        );
        assert!(
            drift_anchored < 0.5 * drift_free,
            "anchor left root drift at {drift_anchored:.3} rad vs {drift_free:.3} rad free"
        );
    }

    #[test]
    fn shared_shape_is_structural() {
        let setup = rendered_setup(47, 3, 24, &[0.1, 0.1], 0.05, 2.6);
        let prior = broad_prior(setup.model.n_joints());
        let cfg = FitConfig::default_for(&setup.model);
        let mut cfg = cfg;
        cfg.lambdas.pose_prior = 0.0;
        let objective = FitObjective::new(&setup.model, &setup.problem, &cfg, &prior).unwrap();
        let params = objective.initial_params().unwrap();
        let names: Vec<&str> = params.segment_names().collect();
        assert_eq!(
            names,
            vec![
                "beta", "pose6d_0", "trans_0", "pose6d_1", "trans_1", "pose6d_2", "trans_2"
            ],
        );
        assert_eq!(params.segment("beta").unwrap().len(), 2);
    }

    #[test]
    fn problem_directory_round_trip() {
        let setup = rendered_setup(53, 2, 24, &[0.2, -0.1], 0.1, 2.6);
        let dir = tempdir().unwrap();
        save_fit_problem(dir.path(), &setup.problem).unwrap();
        let loaded = load_fit_problem(dir.path()).unwrap();

        assert_eq!(loaded.frames.len(), 2);
        assert_eq!(loaded.height, 24);
        assert_eq!(loaded.width, 24);
        assert_eq!(loaded.camera.fx, setup.problem.camera.fx);
        assert_eq!(loaded.init_shape, setup.problem.init_shape);
        for (a, b) in loaded.frames.iter().zip(setup.problem.frames.iter()) {
            assert_eq!(a.target_silhouette, b.target_silhouette);
            assert_eq!(a.target_joints2d, b.target_joints2d);
            assert_eq!(a.confidences, b.confidences);
            assert_eq!(a.init_translation, b.init_translation);
            // Poses pass through a matrix → axis-angle → matrix round trip.
            let ma = a.init_pose.to_matrices().unwrap();
            let mb = b.init_pose.to_matrices().unwrap();
            for (x, y) in ma.iter().zip(mb.iter()) {
                assert!((x - y).norm() < 1e-12);
            }
        }
        assert!(load_fit_problem(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn camera_config_rejects_unknown_keys() {
        let setup = rendered_setup(59, 1, 24, &[0.0, 0.0], 0.0, 2.6);
        let dir = tempdir().unwrap();
        save_fit_problem(dir.path(), &setup.problem).unwrap();
        let cam_path = dir.path().join("camera.cfg");
        let mut text = std::fs::read_to_string(&cam_path).unwrap();
        text.push_str("zoom = 2\n");
        std::fs::write(&cam_path, text).unwrap();
        let err = load_fit_problem(dir.path()).unwrap_err();
        assert!(err.to_string().contains("'zoom'"), "{err}");
    }

    #[test]
    fn fit_result_round_trip_and_summary() {
        let result = FitResult {
            shape: ShapeParams {
                beta: vec![0.3, -0.2],
            },
            poses: vec![
                vec![Vector3::new(0.1, 0.0, -0.2); 4],
                vec![Vector3::new(0.0, 0.3, 0.0); 4],
            ],
            translations: vec![Vector3::new(0.0, 0.0, 2.5), Vector3::new(0.1, 0.0, 2.6)],
            energy: 1.25,
            terms: EnergyTerms {
                joints2d: 0.5,
                silhouette: 0.002,
                angle: 1.0,
                pose_prior: -3.0,
                shape_prior: 0.13,
                init_pose: 0.01,
            },
            iterations: 42,
            converged: true,
            trace: vec![2.0, 1.5, 1.25],
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("fit.bfkf");
        result.save(&path).unwrap();
        let loaded = FitResult::load(&path).unwrap();
        assert_eq!(loaded.shape, result.shape);
        assert_eq!(loaded.poses, result.poses);
        assert_eq!(loaded.translations, result.translations);
        assert_eq!(loaded.energy, result.energy);
        assert_eq!(loaded.terms, result.terms);
        assert_eq!(loaded.iterations, 42);
        assert!(loaded.converged);
        assert_eq!(loaded.trace, result.trace);

        let json = result.summary_json();
        assert!(json.contains("\"iterations\": 42"), "{json}");
        assert!(json.contains("\"silhouette\""), "{json}");

        // Truncation points at the failing byte.
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bfkf");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(FitResult::load(&cut).is_err());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let setup = rendered_setup(61, 1, 24, &[0.0, 0.0], 0.0, 2.6);
        let model = &setup.model;
        let prior = broad_prior(model.n_joints());
        let cfg = FitConfig::default();

        let mut bad = setup.problem.clone();
        bad.frames[0].confidences[0] = 1.5;
        assert!(FitObjective::new(model, &bad, &cfg, &prior).is_err());

        let mut bad = setup.problem.clone();
        bad.frames[0].target_silhouette[0] = 0.5;
        let err = bad.validate(model).unwrap_err();
        assert!(err.to_string().contains("binary"), "{err}");
        assert!(FitObjective::new(model, &bad, &cfg, &prior).is_err());

        let mut bad_cfg = FitConfig::default();
        bad_cfg.hinges = vec![Hinge { joint: 99, axis: 0, sign: 1.0 }];
        assert!(FitObjective::new(model, &setup.problem, &bad_cfg, &prior).is_err());

        // Prior dimension must match the model's non-root rotation count.
        let mut cfg_prior = FitConfig::default();
        cfg_prior.lambdas.pose_prior = 0.01;
        let wrong_prior = broad_prior(3);
        assert!(FitObjective::new(model, &setup.problem, &cfg_prior, &wrong_prior).is_err());
    }
}
