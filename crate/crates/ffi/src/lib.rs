//! C bindings for the body-model toolkit.
//!
//! Conventions: every function returns a [`BfStatus`]; `BF_STATUS_OK` means
//! the out-parameters were written. On failure a thread-local message is
//! set, readable via [`bf_last_error_message`]. The model is an opaque
//! handle created by `bf_model_generate`/`bf_model_load` and released with
//! `bf_model_free`. Buffers are caller-allocated; their required sizes come
//! from the `bf_model_*_count` getters or are fixed by the function (3 for
//! an axis-angle, 9 for a row-major 3×3 matrix, 6 for the two-column
//! rotation encoding). Matrices and point arrays are row-major `f64`.
//! Panics are caught at the boundary and reported as `BF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};

use bodyfit::camera::{perspective_project, weak_perspective_project, PerspectiveCamera, WeakPerspectiveCamera};
use bodyfit::error::Error;
use bodyfit::metrics::{mpjpe_pa, pve_t_sc, silhouette_miou};
use bodyfit::model::{generate_toy_model, lbs_forward, neutral_mesh, BodyModel, ShapeParams};
use bodyfit::pr::joint_heatmaps;
use bodyfit::raster::{rasterize_hard, rasterize_soft};
use bodyfit::rot::{axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix, PoseParams, Rotation6D};

/// Result of every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(non_camel_case_types)]
pub enum BfStatus {
    /// Success; out-parameters are valid.
    BF_STATUS_OK = 0,
    /// An argument violated a precondition.
    BF_STATUS_PARAMETER = 2,
    /// Malformed or inconsistent data (including I/O failures).
    BF_STATUS_DATA = 3,
    /// A numeric failure (non-finite value, degenerate geometry).
    BF_STATUS_NUMERIC = 4,
    /// An internal panic was caught at the boundary.
    BF_STATUS_PANIC = 5,
    /// A required pointer argument was null.
    BF_STATUS_NULL = 6,
}

use BfStatus::*;

/// Opaque body model handle.
pub struct BfModel {
    inner: BodyModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes removed");
    });
}

fn status_of(e: &Error) -> BfStatus {
    match e {
        Error::Parameter(_) => BF_STATUS_PARAMETER,
        Error::Data(_) | Error::Io { .. } => BF_STATUS_DATA,
        Error::Numeric(_) => BF_STATUS_NUMERIC,
    }
}

fn fail(e: Error) -> BfStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null_arg(name: &str) -> BfStatus {
    set_error(&format!("argument '{name}' is null"));
    BF_STATUS_NULL
}

/// Runs `f` with panics converted to `BF_STATUS_PANIC`.
fn guarded(f: impl FnOnce() -> BfStatus) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            BF_STATUS_PANIC
        }
    }
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, BfStatus> {
    if ptr.is_null() {
        return Err(null_arg("path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(BF_STATUS_PARAMETER)
        }
    }
}

/// Returns the message for the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Generates a deterministic toy model. `out` receives an owned handle.
#[no_mangle]
pub extern "C" fn bf_model_generate(
    seed: u64,
    vertices: usize,
    joints: usize,
    shape_coeffs: usize,
    keypoints: usize,
    out: *mut *mut BfModel,
) -> BfStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        match generate_toy_model(seed, vertices, joints, shape_coeffs, keypoints) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(BfModel { inner })) };
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Loads a model file, auditing every structural invariant.
#[no_mangle]
pub unsafe extern "C" fn bf_model_load(path: *const c_char, out: *mut *mut BfModel) -> BfStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match BodyModel::load(&path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BfModel { inner }));
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn bf_model_save(model: *const BfModel, path: *const c_char) -> BfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        let path = match path_from(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match model.inner.save(&path) {
            Ok(()) => BF_STATUS_OK,
            Err(e) => fail(e),
        }
    })
}

/// Releases a handle returned by `bf_model_generate` or `bf_model_load`.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bf_model_free(model: *mut BfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of mesh vertices N. Returns 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_vertex_count(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_vertices())
}

/// Number of joints K. Returns 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_joint_count(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_joints())
}

/// Number of shape coefficients B. Returns 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_shape_coeff_count(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_shape_coeffs())
}

/// Number of 2D keypoints L. Returns 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_keypoint_count(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_keypoints())
}

/// Number of triangles F. Returns 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn bf_model_face_count(model: *const BfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_faces())
}

/// Copies the triangle index list into `out` (3·F entries, vertex indices).
#[no_mangle]
pub unsafe extern "C" fn bf_model_faces(
    model: *const BfModel,
    out: *mut u32,
    out_len: usize,
) -> BfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        if out.is_null() {
            return null_arg("out");
        }
        let needed = 3 * model.inner.n_faces();
        if out_len != needed {
            return fail(Error::parameter(format!(
                "face buffer holds {out_len} indices, need {needed}"
            )));
        }
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (chunk, face) in dst.chunks_exact_mut(3).zip(&model.inner.faces) {
            chunk.copy_from_slice(face);
        }
        BF_STATUS_OK
    })
}

/// Copies the keypoint→joint map into `out` (L entries).
#[no_mangle]
pub unsafe extern "C" fn bf_model_keypoint_map(
    model: *const BfModel,
    out: *mut usize,
    out_len: usize,
) -> BfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        if out.is_null() {
            return null_arg("out");
        }
        if out_len != model.inner.n_keypoints() {
            return fail(Error::parameter(format!(
                "keypoint buffer holds {out_len} entries, need {}",
                model.inner.n_keypoints()
            )));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&model.inner.keypoint_map);
        BF_STATUS_OK
    })
}

unsafe fn shape_from(beta: *const f64, beta_len: usize) -> Result<ShapeParams, BfStatus> {
    if beta.is_null() && beta_len > 0 {
        return Err(null_arg("beta"));
    }
    let beta = if beta_len == 0 {
        Vec::new()
    } else {
        std::slice::from_raw_parts(beta, beta_len).to_vec()
    };
    Ok(ShapeParams { beta })
}

/// Poses and skins the model. `pose_axis_angle` holds 3·K values (one
/// axis-angle per joint), `out_vertices` 3·N, and `out_joints` — which may
/// be null — 3·K posed joint positions.
#[no_mangle]
pub unsafe extern "C" fn bf_lbs_forward(
    model: *const BfModel,
    beta: *const f64,
    beta_len: usize,
    pose_axis_angle: *const f64,
    pose_len: usize,
    out_vertices: *mut f64,
    out_vertices_len: usize,
    out_joints: *mut f64,
    out_joints_len: usize,
) -> BfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        if pose_axis_angle.is_null() {
            return null_arg("pose_axis_angle");
        }
        if out_vertices.is_null() {
            return null_arg("out_vertices");
        }
        let k = model.inner.n_joints();
        let n = model.inner.n_vertices();
        if pose_len != 3 * k {
            return fail(Error::parameter(format!(
                "pose has {pose_len} values, need 3K = {}",
                3 * k
            )));
        }
        if out_vertices_len != 3 * n {
            return fail(Error::parameter(format!(
                "vertex buffer holds {out_vertices_len} values, need 3N = {}",
                3 * n
            )));
        }
        if !out_joints.is_null() && out_joints_len != 3 * k {
            return fail(Error::parameter(format!(
                "joint buffer holds {out_joints_len} values, need 3K = {}",
                3 * k
            )));
        }
        let shape = match shape_from(beta, beta_len) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let aa: Vec<Vector3<f64>> = std::slice::from_raw_parts(pose_axis_angle, pose_len)
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        match lbs_forward(&model.inner, &shape, &PoseParams::AxisAngle(aa)) {
            Ok(lbs) => {
                let dst = std::slice::from_raw_parts_mut(out_vertices, out_vertices_len);
                for (chunk, v) in dst.chunks_exact_mut(3).zip(&lbs.vertices) {
                    chunk.copy_from_slice(&[v.x, v.y, v.z]);
                }
                if !out_joints.is_null() {
                    let dst = std::slice::from_raw_parts_mut(out_joints, out_joints_len);
                    for (chunk, j) in dst.chunks_exact_mut(3).zip(&lbs.joints3d) {
                        chunk.copy_from_slice(&[j.x, j.y, j.z]);
                    }
                }
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the unposed shaped mesh (3·N values).
#[no_mangle]
pub unsafe extern "C" fn bf_neutral_mesh(
    model: *const BfModel,
    beta: *const f64,
    beta_len: usize,
    out_vertices: *mut f64,
    out_vertices_len: usize,
) -> BfStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return null_arg("model");
        };
        if out_vertices.is_null() {
            return null_arg("out_vertices");
        }
        if out_vertices_len != 3 * model.inner.n_vertices() {
            return fail(Error::parameter(format!(
                "vertex buffer holds {out_vertices_len} values, need 3N = {}",
                3 * model.inner.n_vertices()
            )));
        }
        let shape = match shape_from(beta, beta_len) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match neutral_mesh(&model.inner, &shape) {
            Ok(vertices) => {
                let dst = std::slice::from_raw_parts_mut(out_vertices, out_vertices_len);
                for (chunk, v) in dst.chunks_exact_mut(3).zip(&vertices) {
                    chunk.copy_from_slice(&[v.x, v.y, v.z]);
                }
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Exponential map: 3 axis-angle values to a row-major 3×3 rotation.
#[no_mangle]
pub unsafe extern "C" fn bf_axis_angle_to_matrix(
    axis_angle: *const f64,
    out_matrix: *mut f64,
) -> BfStatus {
    guarded(|| {
        if axis_angle.is_null() {
            return null_arg("axis_angle");
        }
        if out_matrix.is_null() {
            return null_arg("out_matrix");
        }
        let aa = std::slice::from_raw_parts(axis_angle, 3);
        let m = axis_angle_to_matrix(&Vector3::new(aa[0], aa[1], aa[2]));
        let dst = std::slice::from_raw_parts_mut(out_matrix, 9);
        for r in 0..3 {
            for c in 0..3 {
                dst[r * 3 + c] = m[(r, c)];
            }
        }
        BF_STATUS_OK
    })
}

unsafe fn matrix_from(ptr: *const f64) -> Matrix3<f64> {
    let m = std::slice::from_raw_parts(ptr, 9);
    Matrix3::new(m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8])
}

/// Logarithm map: row-major 3×3 rotation to 3 axis-angle values.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_to_axis_angle(
    matrix: *const f64,
    out_axis_angle: *mut f64,
) -> BfStatus {
    guarded(|| {
        if matrix.is_null() {
            return null_arg("matrix");
        }
        if out_axis_angle.is_null() {
            return null_arg("out_axis_angle");
        }
        let m = matrix_from(matrix);
        if !m.iter().all(|v| v.is_finite()) {
            return fail(Error::numeric("rotation matrix has non-finite entries"));
        }
        let aa = Rotation3::from_matrix_unchecked(m).scaled_axis();
        std::slice::from_raw_parts_mut(out_axis_angle, 3).copy_from_slice(&[aa.x, aa.y, aa.z]);
        BF_STATUS_OK
    })
}

/// Gram-Schmidt decode: 6 values (two stacked column vectors) to a
/// row-major rotation matrix.
#[no_mangle]
pub unsafe extern "C" fn bf_rot6d_to_matrix(rot6d: *const f64, out_matrix: *mut f64) -> BfStatus {
    guarded(|| {
        if rot6d.is_null() {
            return null_arg("rot6d");
        }
        if out_matrix.is_null() {
            return null_arg("out_matrix");
        }
        let r = std::slice::from_raw_parts(rot6d, 6);
        let enc = Rotation6D([r[0], r[1], r[2], r[3], r[4], r[5]]);
        match rot6d_to_matrix(&enc) {
            Ok(m) => {
                let dst = std::slice::from_raw_parts_mut(out_matrix, 9);
                for row in 0..3 {
                    for col in 0..3 {
                        dst[row * 3 + col] = m[(row, col)];
                    }
                }
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Truncation encode: row-major rotation matrix to the 6-value encoding.
#[no_mangle]
pub unsafe extern "C" fn bf_matrix_to_rot6d(matrix: *const f64, out_rot6d: *mut f64) -> BfStatus {
    guarded(|| {
        if matrix.is_null() {
            return null_arg("matrix");
        }
        if out_rot6d.is_null() {
            return null_arg("out_rot6d");
        }
        match matrix_to_rot6d(&matrix_from(matrix)) {
            Ok(enc) => {
                std::slice::from_raw_parts_mut(out_rot6d, 6).copy_from_slice(&enc.0);
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Pinhole projection of `n` 3D points (row-major x,y,z) to pixel
/// coordinates (row-major u,v). `rotation` is a row-major 3×3 matrix and
/// `translation` 3 values; points must land in front of the camera.
#[no_mangle]
pub unsafe extern "C" fn bf_perspective_project(
    points: *const f64,
    n_points: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: *const f64,
    translation: *const f64,
    out_pixels: *mut f64,
) -> BfStatus {
    guarded(|| {
        if points.is_null() && n_points > 0 {
            return null_arg("points");
        }
        if rotation.is_null() {
            return null_arg("rotation");
        }
        if translation.is_null() {
            return null_arg("translation");
        }
        if out_pixels.is_null() && n_points > 0 {
            return null_arg("out_pixels");
        }
        let pts: Vec<Vector3<f64>> = std::slice::from_raw_parts(points, 3 * n_points)
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        let t = std::slice::from_raw_parts(translation, 3);
        let cam = PerspectiveCamera {
            fx,
            fy,
            cx,
            cy,
            rotation: matrix_from(rotation),
            translation: Vector3::new(t[0], t[1], t[2]),
        };
        match perspective_project(&pts, &cam) {
            Ok(projected) => {
                let dst = std::slice::from_raw_parts_mut(out_pixels, 2 * n_points);
                for (chunk, p) in dst.chunks_exact_mut(2).zip(&projected) {
                    chunk.copy_from_slice(&[p.x, p.y]);
                }
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Scaled-orthographic projection of `n` 3D points into an image of the
/// given size.
#[no_mangle]
pub unsafe extern "C" fn bf_weak_perspective_project(
    points: *const f64,
    n_points: usize,
    scale: f64,
    translation_x: f64,
    translation_y: f64,
    width: usize,
    height: usize,
    out_pixels: *mut f64,
) -> BfStatus {
    guarded(|| {
        if points.is_null() && n_points > 0 {
            return null_arg("points");
        }
        if out_pixels.is_null() && n_points > 0 {
            return null_arg("out_pixels");
        }
        let pts: Vec<Vector3<f64>> = std::slice::from_raw_parts(points, 3 * n_points)
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        let cam = WeakPerspectiveCamera {
            scale,
            translation: Vector2::new(translation_x, translation_y),
        };
        let projected = weak_perspective_project(&pts, &cam, width, height);
        let dst = std::slice::from_raw_parts_mut(out_pixels, 2 * n_points);
        for (chunk, p) in dst.chunks_exact_mut(2).zip(&projected) {
            chunk.copy_from_slice(&[p.x, p.y]);
        }
        BF_STATUS_OK
    })
}

unsafe fn mesh2d_from(
    vertices: *const f64,
    n_vertices: usize,
    faces: *const u32,
    n_faces: usize,
) -> Result<(Vec<Vector2<f64>>, Vec<[u32; 3]>), BfStatus> {
    if vertices.is_null() && n_vertices > 0 {
        return Err(null_arg("vertices"));
    }
    if faces.is_null() && n_faces > 0 {
        return Err(null_arg("faces"));
    }
    let verts = std::slice::from_raw_parts(vertices, 2 * n_vertices)
        .chunks_exact(2)
        .map(|c| Vector2::new(c[0], c[1]))
        .collect();
    let faces = std::slice::from_raw_parts(faces, 3 * n_faces)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((verts, faces))
}

/// Binary center-in-triangle rasterization. `vertices` holds 2·n pixel
/// coordinates, `faces` 3·f indices; `out` receives height·width values in
/// row-major order.
#[no_mangle]
pub unsafe extern "C" fn bf_rasterize_hard(
    vertices: *const f64,
    n_vertices: usize,
    faces: *const u32,
    n_faces: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> BfStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if out_len != height * width {
            return fail(Error::parameter(format!(
                "output buffer holds {out_len} values, need {}",
                height * width
            )));
        }
        let (verts, faces) = match mesh2d_from(vertices, n_vertices, faces, n_faces) {
            Ok(v) => v,
            Err(status) => return status,
        };
        match rasterize_hard(&verts, &faces, height, width) {
            Ok(sil) => {
                std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&sil);
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Differentiable sigmoid-of-distance rasterization with temperature `tau`.
#[no_mangle]
pub unsafe extern "C" fn bf_rasterize_soft(
    vertices: *const f64,
    n_vertices: usize,
    faces: *const u32,
    n_faces: usize,
    height: usize,
    width: usize,
    tau: f64,
    out: *mut f64,
    out_len: usize,
) -> BfStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if out_len != height * width {
            return fail(Error::parameter(format!(
                "output buffer holds {out_len} values, need {}",
                height * width
            )));
        }
        let (verts, faces) = match mesh2d_from(vertices, n_vertices, faces, n_faces) {
            Ok(v) => v,
            Err(status) => return status,
        };
        match rasterize_soft(&verts, &faces, height, width, tau) {
            Ok(sil) => {
                std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&sil);
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Per-keypoint Gaussian heatmaps. `points` holds 2·l pixel coordinates;
/// `out` receives l·height·width values, keypoint-major.
#[no_mangle]
pub unsafe extern "C" fn bf_joint_heatmaps(
    points: *const f64,
    n_points: usize,
    height: usize,
    width: usize,
    sigma: f64,
    out: *mut f64,
    out_len: usize,
) -> BfStatus {
    guarded(|| {
        if points.is_null() && n_points > 0 {
            return null_arg("points");
        }
        if out.is_null() && out_len > 0 {
            return null_arg("out");
        }
        if out_len != n_points * height * width {
            return fail(Error::parameter(format!(
                "output buffer holds {out_len} values, need {}",
                n_points * height * width
            )));
        }
        let pts: Vec<Vector2<f64>> = std::slice::from_raw_parts(points, 2 * n_points)
            .chunks_exact(2)
            .map(|c| Vector2::new(c[0], c[1]))
            .collect();
        match joint_heatmaps(&pts, height, width, sigma) {
            Ok(maps) => {
                std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&maps);
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn points3_from(ptr: *const f64, n: usize, name: &str) -> Result<Vec<Vector3<f64>>, BfStatus> {
    if ptr.is_null() && n > 0 {
        return Err(null_arg(name));
    }
    Ok(std::slice::from_raw_parts(ptr, 3 * n)
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect())
}

/// Mean per-joint position error (mm) after rigid alignment of `predicted`
/// onto `target` (both 3·n values).
#[no_mangle]
pub unsafe extern "C" fn bf_mpjpe_pa(
    predicted: *const f64,
    target: *const f64,
    n_points: usize,
    out_mm: *mut f64,
) -> BfStatus {
    guarded(|| {
        if out_mm.is_null() {
            return null_arg("out_mm");
        }
        let (p, t) = match (
            points3_from(predicted, n_points, "predicted"),
            points3_from(target, n_points, "target"),
        ) {
            (Ok(p), Ok(t)) => (p, t),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match mpjpe_pa(&p, &t) {
            Ok(v) => {
                *out_mm = v;
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Scale-corrected mean per-vertex error (mm) between two neutral meshes
/// (both 3·n values).
#[no_mangle]
pub unsafe extern "C" fn bf_pve_t_sc(
    predicted: *const f64,
    target: *const f64,
    n_points: usize,
    out_mm: *mut f64,
) -> BfStatus {
    guarded(|| {
        if out_mm.is_null() {
            return null_arg("out_mm");
        }
        let (p, t) = match (
            points3_from(predicted, n_points, "predicted"),
            points3_from(target, n_points, "target"),
        ) {
            (Ok(p), Ok(t)) => (p, t),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match pve_t_sc(&p, &t) {
            Ok(v) => {
                *out_mm = v;
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Intersection-over-union of two masks (values above 0.5 count as
/// foreground; two empty masks score 1).
#[no_mangle]
pub unsafe extern "C" fn bf_silhouette_miou(
    mask_a: *const f64,
    mask_b: *const f64,
    len: usize,
    out_miou: *mut f64,
) -> BfStatus {
    guarded(|| {
        if mask_a.is_null() || mask_b.is_null() {
            return null_arg(if mask_a.is_null() { "mask_a" } else { "mask_b" });
        }
        if out_miou.is_null() {
            return null_arg("out_miou");
        }
        let a = std::slice::from_raw_parts(mask_a, len);
        let b = std::slice::from_raw_parts(mask_b, len);
        match silhouette_miou(a, b) {
            Ok(v) => {
                *out_miou = v;
                BF_STATUS_OK
            }
            Err(e) => fail(e),
        }
    })
}
