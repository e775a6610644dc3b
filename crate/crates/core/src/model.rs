//! Parametric body model: linear blend shapes over a template mesh, a joint
//! regressor, and linear blend skinning over a kinematic tree.
//!
//! The deformation pipeline is
//!
//! 1. shaped rest mesh: `v_i = template_i + Σ_b β_b · D_{i,b}`
//! 2. rest joints: `j = J · v` (regressor rows are convex-ish weights)
//! 3. world transforms composed root-to-leaf from per-joint rotations
//! 4. skinned vertex: `v'_i = Σ_k w_ik · (A_k (v_i − j_k) + t_k)`
//! 5. posed joints: `joints3d = J · v'`
//!
//! Step 4 is evaluated in the algebraically equal delta form
//! `v'_i = v_i + Σ_k w_ik ((A_k − I) v_i + s_k)` with `s_k = t_k − A_k j_k`
//! (equal because skinning rows sum to 1). In this form the identity pose
//! reproduces the rest mesh bit-for-bit, which the direct form does not.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::rng::seeded;
use crate::rot::PoseParams;
use rand::Rng;

const MODEL_MAGIC: &[u8; 4] = b"BFKM";
const MODEL_VERSION: u64 = 1;

/// Row sums of skinning and regressor matrices may deviate from 1 by this
/// much before validation rejects the model.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// A body model instance. Fields are public for read access; mutation that
/// breaks the invariants below will surface as an error from [`BodyModel::validate`],
/// which runs on every load.
///
/// Invariants: `parents[0]` is `None` and `parents[k] < k` otherwise (joints
/// are topologically ordered); skinning rows are non-negative and sum to 1;
/// regressor rows sum to 1; face indices are in range; keypoint entries are
/// joint indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    /// Rest positions, meters, y-up. N entries.
    pub template_vertices: Vec<Vector3<f64>>,
    /// Per-vertex shape displacement basis, layout `[(i·3 + coord)·B + b]`.
    pub shape_dirs: Vec<f64>,
    /// Skinning weights, row-major per vertex: `[i·K + k]`.
    pub skinning_weights: Vec<f64>,
    /// Joint regressor, row-major per joint: `[k·N + i]`.
    pub joint_regressor: Vec<f64>,
    /// Kinematic tree; `parents[k] < k` for non-root joints.
    pub parents: Vec<Option<usize>>,
    /// Triangles as vertex index triples.
    pub faces: Vec<[u32; 3]>,
    /// Which joints act as 2D keypoints, in keypoint order.
    pub keypoint_map: Vec<usize>,
}

/// Shape coefficients β.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(b: usize) -> Self {
        ShapeParams { beta: vec![0.0; b] }
    }
}

/// Posed mesh and joints produced by [`lbs_forward`].
#[derive(Debug, Clone)]
pub struct LbsOutput {
    pub vertices: Vec<Vector3<f64>>,
    pub joints3d: Vec<Vector3<f64>>,
}

/// Forward intermediates retained for [`lbs_backward`].
#[derive(Debug, Clone)]
pub struct LbsCache {
    pub(crate) shaped: Vec<Vector3<f64>>,
    pub(crate) rest_joints: Vec<Vector3<f64>>,
    pub(crate) world_rots: Vec<Matrix3<f64>>,
    pub(crate) world_shifts: Vec<Vector3<f64>>, // s_k = t_k − A_k j_k
}

/// Gradients of a scalar loss with respect to the LBS inputs.
#[derive(Debug, Clone)]
pub struct LbsGrads {
    pub d_beta: Vec<f64>,
    pub d_rotations: Vec<Matrix3<f64>>,
}

impl BodyModel {
    pub fn n_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_shape_coeffs(&self) -> usize {
        let n3 = self.template_vertices.len() * 3;
        if n3 == 0 {
            0
        } else {
            self.shape_dirs.len() / n3
        }
    }

    pub fn n_keypoints(&self) -> usize {
        self.keypoint_map.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    #[inline]
    pub fn shape_dir(&self, vertex: usize, coord: usize, b: usize) -> f64 {
        self.shape_dirs[(vertex * 3 + coord) * self.n_shape_coeffs() + b]
    }

    #[inline]
    pub fn skin_weight(&self, vertex: usize, joint: usize) -> f64 {
        self.skinning_weights[vertex * self.n_joints() + joint]
    }

    /// Audits every structural invariant; run automatically on load.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices();
        let k = self.n_joints();
        if n == 0 || k == 0 {
            return Err(Error::data("model has no vertices or no joints".to_string()));
        }
        if self.shape_dirs.len() % (n * 3) != 0 {
            return Err(Error::data(format!(
                "shape_dirs length {} is not a multiple of 3N = {}",
                self.shape_dirs.len(),
                3 * n
            )));
        }
        if self.skinning_weights.len() != n * k {
            return Err(Error::data(format!(
                "skinning matrix has {} entries, expected N·K = {}",
                self.skinning_weights.len(),
                n * k
            )));
        }
        if self.joint_regressor.len() != k * n {
            return Err(Error::data(format!(
                "joint regressor has {} entries, expected K·N = {}",
                self.joint_regressor.len(),
                k * n
            )));
        }
        match self.parents.first() {
            Some(None) => {}
            _ => return Err(Error::data("joint 0 must be the root".to_string())),
        }
        for (idx, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(parent) if *parent < idx => {}
                Some(parent) => {
                    return Err(Error::data(format!(
                        "joint {idx} has parent {parent}, which is not earlier in the order"
                    )))
                }
                None => {
                    return Err(Error::data(format!("joint {idx} has no parent but is not the root")))
                }
            }
        }
        for i in 0..n {
            let row = &self.skinning_weights[i * k..(i + 1) * k];
            let mut sum = 0.0;
            for &w in row {
                if !(w >= 0.0) {
                    return Err(Error::data(format!(
                        "skinning weight for vertex {i} is negative or NaN: {w}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::data(format!(
                    "skinning row {i} sums to {sum:.12}, expected 1"
                )));
            }
        }
        for j in 0..k {
            let row = &self.joint_regressor[j * n..(j + 1) * n];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::data(format!(
                    "joint regressor row {j} sums to {sum:.12}, expected 1"
                )));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v as usize >= n {
                    return Err(Error::data(format!(
                        "face {fi} references vertex {v}, but model has {n} vertices"
                    )));
                }
            }
        }
        if self.keypoint_map.is_empty() || self.keypoint_map.len() > k {
            return Err(Error::data(format!(
                "keypoint map has {} entries, expected 1..=K = {k}",
                self.keypoint_map.len()
            )));
        }
        for (li, &j) in self.keypoint_map.iter().enumerate() {
            if j >= k {
                return Err(Error::data(format!(
                    "keypoint {li} maps to joint {j}, but model has {k} joints"
                )));
            }
        }
        if self.shape_dirs.iter().any(|v| !v.is_finite())
            || self.template_vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite() || !v.z.is_finite())
        {
            return Err(Error::data("model contains non-finite values".to_string()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = ByteWriter::new();
        w.write_magic(MODEL_MAGIC);
        w.write_u64(MODEL_VERSION);
        let (n, k, b, l, f) = (
            self.n_vertices() as u64,
            self.n_joints() as u64,
            self.n_shape_coeffs() as u64,
            self.n_keypoints() as u64,
            self.n_faces() as u64,
        );
        for v in [n, k, b, l, f] {
            w.write_u64(v);
        }
        for v in &self.template_vertices {
            w.write_f64_slice(&[v.x, v.y, v.z]);
        }
        w.write_f64_slice(&self.shape_dirs);
        w.write_f64_slice(&self.skinning_weights);
        w.write_f64_slice(&self.joint_regressor);
        for p in &self.parents {
            w.write_f64(match p {
                Some(i) => *i as f64,
                None => -1.0,
            });
        }
        for face in &self.faces {
            w.write_f64_slice(&[face[0] as f64, face[1] as f64, face[2] as f64]);
        }
        for &j in &self.keypoint_map {
            w.write_f64(j as f64);
        }
        w.to_file(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut r = ByteReader::from_file(path)?;
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.read_u64("version")?;
        if version != MODEL_VERSION {
            return Err(Error::data(format!(
                "unsupported model version {version} (supported: {MODEL_VERSION})"
            )));
        }
        let n = r.read_count("vertex", 100_000_000)?;
        let k = r.read_count("joint", 1_000_000)?;
        let b = r.read_count("shape coeff", 1_000_000)?;
        let l = r.read_count("keypoint", 1_000_000)?;
        let f = r.read_count("face", 100_000_000)?;

        let tv = r.read_f64_vec(n * 3, "template vertices")?;
        let template_vertices = tv
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        let shape_dirs = r.read_f64_vec(n * 3 * b, "shape dirs")?;
        let skinning_weights = r.read_f64_vec(n * k, "skinning weights")?;
        let joint_regressor = r.read_f64_vec(k * n, "joint regressor")?;
        let parents_raw = r.read_f64_vec(k, "parents")?;
        let mut parents = Vec::with_capacity(k);
        for (i, &p) in parents_raw.iter().enumerate() {
            if p == -1.0 {
                parents.push(None);
            } else if p >= 0.0 && p.fract() == 0.0 && (p as usize) < k {
                parents.push(Some(p as usize));
            } else {
                return Err(Error::data(format!("joint {i} has invalid parent value {p}")));
            }
        }
        let faces_raw = r.read_f64_vec(f * 3, "faces")?;
        let mut faces = Vec::with_capacity(f);
        for c in faces_raw.chunks_exact(3) {
            let mut tri = [0u32; 3];
            for (slot, &v) in tri.iter_mut().zip(c.iter()) {
                if v < 0.0 || v.fract() != 0.0 || v >= u32::MAX as f64 {
                    return Err(Error::data(format!("invalid face vertex index {v}")));
                }
                *slot = v as u32;
            }
            faces.push(tri);
        }
        let kp_raw = r.read_f64_vec(l, "keypoint map")?;
        let mut keypoint_map = Vec::with_capacity(l);
        for &v in &kp_raw {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::data(format!("invalid keypoint joint index {v}")));
            }
            keypoint_map.push(v as usize);
        }
        r.expect_eof()?;

        let model = BodyModel {
            template_vertices,
            shape_dirs,
            skinning_weights,
            joint_regressor,
            parents,
            faces,
            keypoint_map,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Rest mesh for shape β with no pose: step 1 of the pipeline only.
pub fn neutral_mesh(model: &BodyModel, shape: &ShapeParams) -> Result<Vec<Vector3<f64>>> {
    let b = model.n_shape_coeffs();
    if shape.beta.len() != b {
        return Err(Error::parameter(format!(
            "shape has {} coefficients, model expects {b}",
            shape.beta.len()
        )));
    }
    let n = model.n_vertices();
    let mut out = model.template_vertices.clone();
    for i in 0..n {
        for c in 0..3 {
            let mut d = 0.0;
            let base = (i * 3 + c) * b;
            for (bi, &beta) in shape.beta.iter().enumerate() {
                d += beta * model.shape_dirs[base + bi];
            }
            out[i][c] += d;
        }
    }
    Ok(out)
}

/// Applies the joint regressor to a vertex set.
pub fn regress_joints(model: &BodyModel, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
    let n = model.n_vertices();
    if vertices.len() != n {
        return Err(Error::parameter(format!(
            "vertex count {} does not match model N = {n}",
            vertices.len()
        )));
    }
    let k = model.n_joints();
    let mut joints = vec![Vector3::zeros(); k];
    for j in 0..k {
        let row = &model.joint_regressor[j * n..(j + 1) * n];
        let mut acc = Vector3::zeros();
        for (i, &w) in row.iter().enumerate() {
            if w != 0.0 {
                acc += w * vertices[i];
            }
        }
        joints[j] = acc;
    }
    Ok(joints)
}

/// Poses the model: full pipeline from (β, θ) to skinned vertices and joints.
pub fn lbs_forward(model: &BodyModel, shape: &ShapeParams, pose: &PoseParams) -> Result<LbsOutput> {
    let rots = check_pose(model, pose)?;
    let (out, _) = lbs_forward_cached(model, shape, &rots)?;
    Ok(out)
}

fn check_pose(model: &BodyModel, pose: &PoseParams) -> Result<Vec<Matrix3<f64>>> {
    if pose.joint_count() != model.n_joints() {
        return Err(Error::parameter(format!(
            "pose has {} joints, model expects {}",
            pose.joint_count(),
            model.n_joints()
        )));
    }
    pose.to_matrices()
}

/// LBS forward pass on already-decoded rotation matrices, returning the
/// cache needed by [`lbs_backward`].
pub fn lbs_forward_cached(
    model: &BodyModel,
    shape: &ShapeParams,
    rotations: &[Matrix3<f64>],
) -> Result<(LbsOutput, LbsCache)> {
    let k = model.n_joints();
    if rotations.len() != k {
        return Err(Error::parameter(format!(
            "got {} rotations, model expects {k}",
            rotations.len()
        )));
    }
    let shaped = neutral_mesh(model, shape)?;
    let rest_joints = regress_joints(model, &shaped)?;

    let mut world_rots = vec![Matrix3::identity(); k];
    let mut world_shifts = vec![Vector3::zeros(); k];
    for j in 0..k {
        match model.parents[j] {
            None => {
                world_rots[j] = rotations[j];
                // Root pivot: t_0 = j_0, so s_0 = j_0 − A_0 j_0.
                world_shifts[j] = rest_joints[j] - world_rots[j] * rest_joints[j];
            }
            Some(p) => {
                world_rots[j] = world_rots[p] * rotations[j];
                // t_j = A_p j_j + s_p; s_j = t_j − A_j j_j.
                let t = world_rots[p] * rest_joints[j] + world_shifts[p];
                world_shifts[j] = t - world_rots[j] * rest_joints[j];
            }
        }
    }

    let n = model.n_vertices();
    let mut vertices = Vec::with_capacity(n);
    for i in 0..n {
        let v = shaped[i];
        let mut out = v;
        let row = &model.skinning_weights[i * k..(i + 1) * k];
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                out += w * ((world_rots[j] * v - v) + world_shifts[j]);
            }
        }
        vertices.push(out);
    }
    let joints3d = regress_joints(model, &vertices)?;
    Ok((
        LbsOutput { vertices, joints3d },
        LbsCache {
            shaped,
            rest_joints,
            world_rots,
            world_shifts,
        },
    ))
}

/// Reverse-mode pass through the full LBS pipeline.
///
/// `d_vertices` / `d_joints3d` are dL/d(output); either may be empty to mean
/// zero. Returns dL/dβ and dL/d(local rotation matrices); the caller chains
/// the latter through its rotation parameterization.
pub fn lbs_backward(
    model: &BodyModel,
    cache: &LbsCache,
    d_vertices: &[Vector3<f64>],
    d_joints3d: &[Vector3<f64>],
) -> Result<LbsGrads> {
    let n = model.n_vertices();
    let k = model.n_joints();
    let b = model.n_shape_coeffs();
    if !d_vertices.is_empty() && d_vertices.len() != n {
        return Err(Error::parameter(format!(
            "d_vertices has {} entries, expected {n}",
            d_vertices.len()
        )));
    }
    if !d_joints3d.is_empty() && d_joints3d.len() != k {
        return Err(Error::parameter(format!(
            "d_joints3d has {} entries, expected {k}",
            d_joints3d.len()
        )));
    }

    // joints3d = J · v': fold the joint gradient into the vertex gradient.
    let mut d_skinned = vec![Vector3::zeros(); n];
    if !d_vertices.is_empty() {
        d_skinned.copy_from_slice(d_vertices);
    }
    if !d_joints3d.is_empty() {
        for j in 0..k {
            let g = d_joints3d[j];
            if g == Vector3::zeros() {
                continue;
            }
            let row = &model.joint_regressor[j * n..(j + 1) * n];
            for (i, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    d_skinned[i] += w * g;
                }
            }
        }
    }

    // Skinning: v'_i = v_i + Σ_j w_ij ((A_j − I) v_i + s_j).
    let mut d_shaped = vec![Vector3::zeros(); n];
    let mut d_world_rot = vec![Matrix3::zeros(); k];
    let mut d_shift = vec![Vector3::zeros(); k];
    for i in 0..n {
        let g = d_skinned[i];
        let v = cache.shaped[i];
        let mut acc = g;
        let row = &model.skinning_weights[i * k..(i + 1) * k];
        for (j, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let wg = w * g;
            d_world_rot[j] += wg * v.transpose();
            d_shift[j] += wg;
            acc += w * (cache.world_rots[j].transpose() * g - g);
        }
        d_shaped[i] = acc;
    }

    // Transform composition, reversed leaf-to-root. Children carry higher
    // indices than parents, so a descending scan sees every joint after all
    // of its children have deposited their contributions.
    let mut d_rest_joints = vec![Vector3::zeros(); k];
    let mut d_world_trans = vec![Vector3::zeros(); k];
    let mut d_local = vec![Matrix3::zeros(); k];
    for j in (0..k).rev() {
        // s_j = t_j − A_j j_j.
        d_world_trans[j] += d_shift[j];
        d_world_rot[j] -= d_shift[j] * cache.rest_joints[j].transpose();
        d_rest_joints[j] -= cache.world_rots[j].transpose() * d_shift[j];

        match model.parents[j] {
            None => {
                // t_0 = j_0; A_0 = R_0.
                d_rest_joints[j] += d_world_trans[j];
                d_local[j] = d_world_rot[j];
            }
            Some(p) => {
                // t_j = A_p j_j + s_p.
                let dt = d_world_trans[j];
                d_world_rot[p] += dt * cache.rest_joints[j].transpose();
                d_rest_joints[j] += cache.world_rots[p].transpose() * dt;
                d_shift[p] += dt;
                // A_j = A_p R_j.
                let local = cache.world_rots[p].transpose() * cache.world_rots[j];
                let d_a_j = d_world_rot[j];
                d_local[j] = cache.world_rots[p].transpose() * d_a_j;
                d_world_rot[p] += d_a_j * local.transpose();
            }
        }
    }

    // j = J · shaped.
    for j in 0..k {
        let g = d_rest_joints[j];
        if g == Vector3::zeros() {
            continue;
        }
        let row = &model.joint_regressor[j * n..(j + 1) * n];
        for (i, &w) in row.iter().enumerate() {
            if w != 0.0 {
                d_shaped[i] += w * g;
            }
        }
    }

    // shaped = template + D β.
    let mut d_beta = vec![0.0; b];
    for i in 0..n {
        let g = d_shaped[i];
        for c in 0..3 {
            let gc = g[c];
            if gc == 0.0 {
                continue;
            }
            let base = (i * 3 + c) * b;
            for (bi, slot) in d_beta.iter_mut().enumerate() {
                *slot += gc * model.shape_dirs[base + bi];
            }
        }
    }

    Ok(LbsGrads {
        d_beta,
        d_rotations: d_local,
    })
}

// --- Toy model generation -------------------------------------------------

/// One capsule of the toy body: a tube of vertex rings from `p0` to `p1`,
/// skinned to `owner` (blending into `blend_in` at the `p0` end and
/// `blend_out` at the `p1` end).
struct Segment {
    owner: usize,
    p0: Vector3<f64>,
    p1: Vector3<f64>,
    radius: f64,
    blend_in: Option<usize>,
    blend_out: Option<usize>,
}

const RING: usize = 6;

/// SMPL-style 24-joint humanoid: parent indices per joint.
const HUMANOID_PARENTS: [i32; 24] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

fn humanoid_joint_positions() -> Vec<Vector3<f64>> {
    [
        (0.00, 0.00, 0.00),   // 0 pelvis
        (0.09, -0.06, 0.00),  // 1 left hip
        (-0.09, -0.06, 0.00), // 2 right hip
        (0.00, 0.11, 0.00),   // 3 lower spine
        (0.10, -0.48, 0.00),  // 4 left knee
        (-0.10, -0.48, 0.00), // 5 right knee
        (0.00, 0.23, 0.00),   // 6 mid spine
        (0.10, -0.87, 0.00),  // 7 left ankle
        (-0.10, -0.87, 0.00), // 8 right ankle
        (0.00, 0.33, 0.00),   // 9 upper spine
        (0.11, -0.93, 0.08),  // 10 left foot
        (-0.11, -0.93, 0.08), // 11 right foot
        (0.00, 0.46, 0.00),   // 12 neck
        (0.07, 0.40, 0.00),   // 13 left collar
        (-0.07, 0.40, 0.00),  // 14 right collar
        (0.00, 0.56, 0.00),   // 15 head
        (0.17, 0.42, 0.00),   // 16 left shoulder
        (-0.17, 0.42, 0.00),  // 17 right shoulder
        (0.43, 0.42, 0.00),   // 18 left elbow
        (-0.43, 0.42, 0.00),  // 19 right elbow
        (0.68, 0.42, 0.00),   // 20 left wrist
        (-0.68, 0.42, 0.00),  // 21 right wrist
        (0.76, 0.42, 0.00),   // 22 left hand
        (-0.76, 0.42, 0.00),  // 23 right hand
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z))
    .collect()
}

/// Capsule radius for the bone ending at `child`.
fn humanoid_bone_radius(child: usize) -> f64 {
    match child {
        1 | 2 | 3 => 0.10,
        6 | 9 => 0.095,
        12 => 0.05,
        13 | 14 => 0.055,
        15 => 0.065,
        4 | 5 => 0.062,
        7 | 8 => 0.052,
        10 | 11 => 0.045,
        16 | 17 => 0.055,
        18 | 19 => 0.048,
        20 | 21 => 0.042,
        22 | 23 => 0.038,
        _ => 0.05,
    }
}

/// Default keypoint order: head/neck first, then arms, hips, legs, torso.
const HUMANOID_KEYPOINT_ORDER: [usize; 24] = [
    15, 12, 16, 17, 18, 19, 20, 21, 1, 2, 4, 5, 7, 8, 0, 6, 9, 3, 10, 11, 13, 14, 22, 23,
];

fn build_segments(
    parents: &[Option<usize>],
    positions: &[Vector3<f64>],
    humanoid: bool,
) -> Vec<Segment> {
    let k = parents.len();
    let mut segments = Vec::new();
    let mut is_leaf = vec![true; k];
    for p in parents.iter().flatten() {
        is_leaf[*p] = false;
    }
    for child in 1..k {
        let p = parents[child].unwrap();
        let radius = if humanoid {
            humanoid_bone_radius(child)
        } else {
            0.08
        };
        segments.push(Segment {
            owner: p,
            p0: positions[p],
            p1: positions[child],
            radius,
            blend_in: parents[p],
            blend_out: Some(child),
        });
    }
    // Leaves get a stub capsule so every joint owns geometry.
    for j in (0..k).filter(|j| is_leaf[*j]) {
        let (dir, len, radius) = if humanoid {
            match j {
                15 => (Vector3::new(0.0, 1.0, 0.0), 0.16, 0.085),
                10 => (Vector3::new(0.0, 0.0, 1.0), 0.09, 0.04),
                11 => (Vector3::new(0.0, 0.0, 1.0), 0.09, 0.04),
                22 => (Vector3::new(1.0, 0.0, 0.0), 0.08, 0.038),
                23 => (Vector3::new(-1.0, 0.0, 0.0), 0.08, 0.038),
                _ => (Vector3::new(0.0, 1.0, 0.0), 0.08, 0.05),
            }
        } else {
            (Vector3::new(0.0, 1.0, 0.0), 0.1, 0.08)
        };
        segments.push(Segment {
            owner: j,
            p0: positions[j],
            p1: positions[j] + dir * len,
            radius,
            blend_in: parents[j],
            blend_out: None,
        });
    }
    segments
}

/// Generates a deterministic toy body model.
///
/// For `k == 24` the kinematic tree is a humanoid (two legs, two arms, a
/// spine chain and head); other joint counts produce a vertical chain. The
/// mesh is a union of capsule tubes, one or more per joint, so every joint
/// drives visible geometry. Shape direction 0 inflates the body radially,
/// direction 1 scales height, and higher directions are smooth low-frequency
/// displacement fields. Vertex positions carry a small seeded jitter, so
/// different seeds give different templates over the same topology.
///
/// Requires `n ≥ 3k`, `k ≥ 2`, `b ≥ 1`, `1 ≤ l ≤ k`.
pub fn generate_toy_model(seed: u64, n: usize, k: usize, b: usize, l: usize) -> Result<BodyModel> {
    if k < 2 {
        return Err(Error::parameter(format!("need at least 2 joints, got {k}")));
    }
    if n < 3 * k {
        return Err(Error::parameter(format!(
            "need at least 3 vertices per joint (n ≥ {}), got n = {n}",
            3 * k
        )));
    }
    if b < 1 {
        return Err(Error::parameter("need at least one shape direction".to_string()));
    }
    if l < 1 || l > k {
        return Err(Error::parameter(format!(
            "keypoint count must satisfy 1 ≤ l ≤ k, got l = {l}, k = {k}"
        )));
    }

    let humanoid = k == 24;
    let (parents, positions): (Vec<Option<usize>>, Vec<Vector3<f64>>) = if humanoid {
        (
            HUMANOID_PARENTS
                .iter()
                .map(|&p| if p < 0 { None } else { Some(p as usize) })
                .collect(),
            humanoid_joint_positions(),
        )
    } else {
        let parents = (0..k)
            .map(|j| if j == 0 { None } else { Some(j - 1) })
            .collect();
        let positions = (0..k)
            .map(|j| Vector3::new(0.0, -0.85 + 1.7 * j as f64 / (k - 1) as f64, 0.0))
            .collect();
        (parents, positions)
    };

    let mut rng = seeded(seed);
    let segments = build_segments(&parents, &positions, humanoid);
    let s = segments.len();

    let mut template = Vec::with_capacity(n);
    let mut radial_dirs = Vec::with_capacity(n); // for shape direction 0
    let mut skin_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut ring0_of_joint: Vec<Vec<usize>> = vec![Vec::new(); k];

    if n >= 12 * s {
        // Capsule mode: full rings of RING vertices along every segment.
        let total_rings = n / RING;
        let leftover = n % RING;
        let mut rings_per_seg = vec![2usize; s];
        for extra in 0..(total_rings - 2 * s) {
            rings_per_seg[extra % s] += 1;
        }
        for (si, seg) in segments.iter().enumerate() {
            let rings = rings_per_seg[si];
            let axis = seg.p1 - seg.p0;
            let u = axis.normalize();
            let mut e1 = u.cross(&Vector3::y());
            if e1.norm() < 1e-6 {
                e1 = u.cross(&Vector3::x());
            }
            let e1 = e1.normalize();
            let e2 = u.cross(&e1);
            let base_index = template.len();
            for r in 0..rings {
                let t = r as f64 / (rings - 1) as f64;
                let center = seg.p0 + t * axis;
                for vi in 0..RING {
                    let phi = 2.0 * std::f64::consts::PI * vi as f64 / RING as f64 + 0.15 * r as f64;
                    let radial = phi.cos() * e1 + phi.sin() * e2;
                    let jitter = Vector3::new(
                        rng.gen_range(-0.002..0.002),
                        rng.gen_range(-0.002..0.002),
                        rng.gen_range(-0.002..0.002),
                    );
                    template.push(center + seg.radius * radial + jitter);
                    radial_dirs.push(radial);
                    // Dyadic blend fractions keep each row summing to exactly 1.
                    let weights = if r == 0 {
                        match seg.blend_in {
                            Some(p) => vec![(seg.owner, 0.75), (p, 0.25)],
                            None => vec![(seg.owner, 1.0)],
                        }
                    } else if r == rings - 1 {
                        match seg.blend_out {
                            Some(c) => vec![(seg.owner, 0.5), (c, 0.5)],
                            None => vec![(seg.owner, 1.0)],
                        }
                    } else {
                        vec![(seg.owner, 1.0)]
                    };
                    skin_rows.push(weights);
                }
            }
            if ring0_of_joint[seg.owner].is_empty() {
                ring0_of_joint[seg.owner] = (base_index..base_index + RING).collect();
            }
            // Tube walls.
            let idx = |r: usize, v: usize| (base_index + r * RING + v) as u32;
            for r in 0..rings - 1 {
                for v in 0..RING {
                    let vn = (v + 1) % RING;
                    faces.push([idx(r, v), idx(r, vn), idx(r + 1, vn)]);
                    faces.push([idx(r, v), idx(r + 1, vn), idx(r + 1, v)]);
                }
            }
            // End caps: fans over each boundary ring.
            for v in 1..RING - 1 {
                faces.push([idx(0, 0), idx(0, v), idx(0, v + 1)]);
                faces.push([idx(rings - 1, 0), idx(rings - 1, v), idx(rings - 1, v + 1)]);
            }
        }
        // Any vertices left over by ring granularity sit on the last
        // segment's axis; they join no faces but keep N exact.
        let seg = segments.last().unwrap();
        for extra in 0..leftover {
            let t = (extra + 1) as f64 / (leftover + 1) as f64;
            template.push(seg.p0 + t * (seg.p1 - seg.p0));
            radial_dirs.push(Vector3::zeros());
            skin_rows.push(vec![(seg.owner, 1.0)]);
        }
    } else {
        // Sparse mode: a small vertex fan per joint; valid but crude.
        let mut counts = vec![n / k; k];
        for extra in 0..(n % k) {
            counts[extra] += 1;
        }
        for (j, &count) in counts.iter().enumerate() {
            let base_index = template.len();
            for vi in 0..count {
                let phi = 2.0 * std::f64::consts::PI * vi as f64 / count as f64;
                let radial = Vector3::new(phi.cos(), 0.0, phi.sin());
                template.push(positions[j] + 0.04 * radial);
                radial_dirs.push(radial);
                skin_rows.push(vec![(j, 1.0)]);
            }
            ring0_of_joint[j] = (base_index..base_index + count).collect();
            for v in 1..count - 1 {
                faces.push([
                    base_index as u32,
                    (base_index + v) as u32,
                    (base_index + v + 1) as u32,
                ]);
            }
        }
    }
    debug_assert_eq!(template.len(), n);

    // Dense matrices from the sparse construction rows.
    let mut skinning_weights = vec![0.0; n * k];
    for (i, row) in skin_rows.iter().enumerate() {
        for &(j, w) in row {
            skinning_weights[i * k + j] += w;
        }
    }
    let mut joint_regressor = vec![0.0; k * n];
    for j in 0..k {
        let ring = &ring0_of_joint[j];
        if ring.is_empty() {
            return Err(Error::numeric(format!(
                "toy generator left joint {j} with no regressor support"
            )));
        }
        let w = 1.0 / ring.len() as f64;
        for &i in ring {
            joint_regressor[j * n + i] = w;
        }
    }

    // Shape directions.
    let y_min = template.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
    let y_max = template.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
    let y_mid = 0.5 * (y_min + y_max);
    let mut shape_dirs = vec![0.0; n * 3 * b];
    {
        let mut set = |i: usize, c: usize, bi: usize, v: f64| {
            shape_dirs[(i * 3 + c) * b + bi] = v;
        };
        for i in 0..n {
            let d0 = radial_dirs[i] * 0.018;
            set(i, 0, 0, d0.x);
            set(i, 1, 0, d0.y);
            set(i, 2, 0, d0.z);
            if b >= 2 {
                set(i, 1, 1, (template[i].y - y_mid) * 0.06);
            }
        }
        // Directions 2+ modulate girth along height at seeded frequencies.
        // Radial fields keep every coefficient visible in a silhouette from
        // any viewpoint — a random 3D axis could hide one along the camera's
        // depth axis — and 0.03 units is about a pixel at the desk-scale
        // cameras; much below that a direction vanishes from rendered
        // evidence entirely.
        for bi in 2..b {
            let omega = rng.gen_range(2.0..6.0);
            let phase = rng.gen_range(0.0..(2.0 * std::f64::consts::PI));
            for i in 0..n {
                let amp = 0.03 * (omega * template[i].y + phase).sin();
                let d = radial_dirs[i] * amp;
                set(i, 0, bi, d.x);
                set(i, 1, bi, d.y);
                set(i, 2, bi, d.z);
            }
        }
    }

    let keypoint_map: Vec<usize> = if humanoid {
        HUMANOID_KEYPOINT_ORDER[..l].to_vec()
    } else {
        (0..l).collect()
    };

    let model = BodyModel {
        template_vertices: template,
        shape_dirs,
        skinning_weights,
        joint_regressor,
        parents,
        faces,
        keypoint_map,
    };
    model.validate()?;
    Ok(model)
}

/// The default desk-scale body: 900 vertices, 24 joints, 10 shape
/// coefficients, 17 keypoints.
pub fn toy_model_default(seed: u64) -> BodyModel {
    generate_toy_model(seed, 900, 24, 10, 17).expect("default toy model parameters are valid")
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix4;
    use rand::Rng;

    use super::*;
    use crate::rot::axis_angle_to_matrix;

    fn random_pose(rng: &mut impl Rng, k: usize, scale: f64) -> Vec<Matrix3<f64>> {
        (0..k)
            .map(|_| {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ) * scale;
                axis_angle_to_matrix(&v)
            })
            .collect()
    }

    fn random_beta(rng: &mut impl Rng, b: usize) -> ShapeParams {
        ShapeParams {
            beta: (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        }
    }

    /// Independent skinning oracle: per joint, build the 4×4 world transform
    /// by explicit matrix products, then transform each vertex by the
    /// weighted sum of per-joint affines in homogeneous coordinates.
    fn oracle_lbs(
        model: &BodyModel,
        shape: &ShapeParams,
        rotations: &[Matrix3<f64>],
    ) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let shaped = neutral_mesh(model, shape).unwrap();
        let joints = regress_joints(model, &shaped).unwrap();
        let k = model.n_joints();

        let trans = |v: Vector3<f64>| {
            let mut m = Matrix4::identity();
            m[(0, 3)] = v.x;
            m[(1, 3)] = v.y;
            m[(2, 3)] = v.z;
            m
        };
        let rot4 = |r: &Matrix3<f64>| {
            let mut m = Matrix4::identity();
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = r[(i, j)];
                }
            }
            m
        };

        let mut world = vec![Matrix4::identity(); k];
        for j in 0..k {
            world[j] = match model.parents[j] {
                None => trans(joints[j]) * rot4(&rotations[j]),
                Some(p) => world[p] * trans(joints[j] - joints[p]) * rot4(&rotations[j]),
            };
        }
        let skin_mats: Vec<Matrix4<f64>> =
            (0..k).map(|j| world[j] * trans(-joints[j])).collect();

        let verts: Vec<Vector3<f64>> = shaped
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let h = nalgebra::Vector4::new(v.x, v.y, v.z, 1.0);
                let mut acc = nalgebra::Vector4::zeros();
                for j in 0..k {
                    let w = model.skin_weight(i, j);
                    if w != 0.0 {
                        acc += w * (skin_mats[j] * h);
                    }
                }
                Vector3::new(acc.x, acc.y, acc.z)
            })
            .collect();
        let joints3d = regress_joints(model, &verts).unwrap();
        (verts, joints3d)
    }

    #[test]
    fn default_model_has_documented_shape() {
        let m = toy_model_default(7);
        assert_eq!(m.n_vertices(), 900);
        assert_eq!(m.n_joints(), 24);
        assert_eq!(m.n_shape_coeffs(), 10);
        assert_eq!(m.n_keypoints(), 17);
        assert!(m.n_faces() > 900, "expected a closed-ish mesh, got {} faces", m.n_faces());
        m.validate().unwrap();
    }

    #[test]
    fn different_seeds_give_different_templates() {
        let a = toy_model_default(7);
        let b = toy_model_default(8);
        assert_ne!(a.template_vertices, b.template_vertices);
        // Same seed reproduces bit-for-bit.
        let a2 = toy_model_default(7);
        assert_eq!(a.template_vertices, a2.template_vertices);
        assert_eq!(a.shape_dirs, a2.shape_dirs);
    }

    #[test]
    fn identity_pose_reproduces_template_exactly() {
        let m = toy_model_default(3);
        let out = lbs_forward(
            &m,
            &ShapeParams::zeros(10),
            &PoseParams::identity(24),
        )
        .unwrap();
        for (a, b) in out.vertices.iter().zip(m.template_vertices.iter()) {
            assert_eq!(a, b, "identity pose must be bit-exact");
        }
    }

    #[test]
    fn blend_shapes_are_linear_in_beta() {
        let m = toy_model_default(5);
        let mut rng = crate::rng::seeded(40);
        let b1 = random_beta(&mut rng, 10);
        let b2 = random_beta(&mut rng, 10);
        let sum = ShapeParams {
            beta: b1.beta.iter().zip(&b2.beta).map(|(a, b)| a + b).collect(),
        };
        let m1 = neutral_mesh(&m, &b1).unwrap();
        let m2 = neutral_mesh(&m, &b2).unwrap();
        let ms = neutral_mesh(&m, &sum).unwrap();
        for i in 0..m.n_vertices() {
            let lhs = ms[i] - m.template_vertices[i];
            let rhs = (m1[i] - m.template_vertices[i]) + (m2[i] - m.template_vertices[i]);
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_matches_homogeneous_transform_oracle() {
        let m = toy_model_default(11);
        let mut rng = crate::rng::seeded(41);
        for _ in 0..10 {
            let shape = random_beta(&mut rng, 10);
            let rots = random_pose(&mut rng, 24, 1.5);
            let (out, _) = lbs_forward_cached(&m, &shape, &rots).unwrap();
            let (ov, oj) = oracle_lbs(&m, &shape, &rots);
            for (a, b) in out.vertices.iter().zip(ov.iter()) {
                assert!((a - b).norm() < 1e-9, "vertex mismatch {:.3e}", (a - b).norm());
            }
            for (a, b) in out.joints3d.iter().zip(oj.iter()) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn root_rotation_is_rigid_about_root_joint() {
        let m = toy_model_default(13);
        let shape = ShapeParams::zeros(10);
        let r = axis_angle_to_matrix(&Vector3::new(0.3, 1.1, -0.4));
        let mut rots = vec![Matrix3::identity(); 24];
        rots[0] = r;
        let (out, cache) = lbs_forward_cached(&m, &shape, &rots).unwrap();
        let j0 = cache.rest_joints[0];
        for (v_in, v_out) in m.template_vertices.iter().zip(out.vertices.iter()) {
            let want = r * (v_in - j0) + j0;
            assert!((v_out - want).norm() < 1e-12);
        }
    }

    #[test]
    fn posed_joints_are_regressed_from_posed_vertices() {
        let m = toy_model_default(17);
        let mut rng = crate::rng::seeded(42);
        let shape = random_beta(&mut rng, 10);
        let rots = random_pose(&mut rng, 24, 1.0);
        let (out, _) = lbs_forward_cached(&m, &shape, &rots).unwrap();
        let again = regress_joints(&m, &out.vertices).unwrap();
        for (a, b) in out.joints3d.iter().zip(again.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn chain_and_sparse_topologies_validate() {
        // Capsule mode, non-humanoid joint count.
        generate_toy_model(1, 120, 5, 3, 4).unwrap().validate().unwrap();
        // Sparse fallback: n below the capsule threshold.
        let sparse = generate_toy_model(1, 80, 24, 2, 10).unwrap();
        sparse.validate().unwrap();
        assert_eq!(sparse.n_vertices(), 80);
    }

    #[test]
    fn invalid_generator_arguments_are_rejected() {
        assert!(generate_toy_model(1, 10, 24, 10, 17).is_err()); // n < 3k
        assert!(generate_toy_model(1, 100, 1, 10, 1).is_err()); // k < 2
        assert!(generate_toy_model(1, 100, 4, 0, 2).is_err()); // b = 0
        assert!(generate_toy_model(1, 100, 4, 2, 5).is_err()); // l > k
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let m = toy_model_default(1);
        assert!(neutral_mesh(&m, &ShapeParams::zeros(3)).is_err());
        assert!(lbs_forward(&m, &ShapeParams::zeros(10), &PoseParams::identity(7)).is_err());
        assert!(regress_joints(&m, &[]).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bfkm");
        let m = toy_model_default(23);
        m.save(&path).unwrap();
        let loaded = BodyModel::load(&path).unwrap();
        assert_eq!(m, loaded);
        let bytes1 = std::fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corrupt_model_files_are_rejected_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bfkm");
        let m = generate_toy_model(2, 120, 5, 2, 3).unwrap();
        m.save(&path).unwrap();

        // Bad magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = BodyModel::load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        // Truncation.
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = BodyModel::load(&path).unwrap_err().to_string();
        assert!(err.contains("offset"), "{err}");
    }

    #[test]
    fn loader_rejects_broken_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bfkm");
        let mut m = generate_toy_model(2, 120, 5, 2, 3).unwrap();
        m.skinning_weights[0] += 0.5; // row no longer sums to 1
        m.save(&path).unwrap();
        let err = BodyModel::load(&path).unwrap_err().to_string();
        assert!(err.contains("sums to"), "{err}");
    }

    #[test]
    fn lbs_backward_matches_finite_differences() {
        let m = generate_toy_model(3, 120, 5, 3, 4).unwrap();
        let mut rng = crate::rng::seeded(43);
        let shape = random_beta(&mut rng, 3);
        let rots = random_pose(&mut rng, 5, 1.2);

        // Random linear functional of the outputs.
        let cv: Vec<Vector3<f64>> = (0..m.n_vertices())
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let cj: Vec<Vector3<f64>> = (0..5)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let f = |shape: &ShapeParams, rots: &[Matrix3<f64>]| -> f64 {
            let (out, _) = lbs_forward_cached(&m, shape, rots).unwrap();
            let mut s = 0.0;
            for (c, v) in cv.iter().zip(out.vertices.iter()) {
                s += c.dot(v);
            }
            for (c, j) in cj.iter().zip(out.joints3d.iter()) {
                s += c.dot(j);
            }
            s
        };

        let (_, cache) = lbs_forward_cached(&m, &shape, &rots).unwrap();
        let grads = lbs_backward(&m, &cache, &cv, &cj).unwrap();

        let h = 1e-6;
        for bi in 0..3 {
            let mut plus = shape.clone();
            let mut minus = shape.clone();
            plus.beta[bi] += h;
            minus.beta[bi] -= h;
            let fd = (f(&plus, &rots) - f(&minus, &rots)) / (2.0 * h);
            let denom = fd.abs().max(grads.d_beta[bi].abs()).max(1e-6);
            assert!(
                (fd - grads.d_beta[bi]).abs() / denom < 1e-5,
                "beta[{bi}]: fd {fd:.9} analytic {:.9}",
                grads.d_beta[bi]
            );
        }
        for j in 0..5 {
            for r in 0..3 {
                for c in 0..3 {
                    let mut plus = rots.clone();
                    let mut minus = rots.clone();
                    plus[j][(r, c)] += h;
                    minus[j][(r, c)] -= h;
                    let fd = (f(&shape, &plus) - f(&shape, &minus)) / (2.0 * h);
                    let got = grads.d_rotations[j][(r, c)];
                    let denom = fd.abs().max(got.abs()).max(1e-6);
                    assert!(
                        (fd - got).abs() / denom < 1e-5,
                        "rot {j} entry ({r},{c}): fd {fd:.9} analytic {got:.9}"
                    );
                }
            }
        }
    }
}
