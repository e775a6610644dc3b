//! Perspective and weak-perspective projection.
//!
//! The model is y-up; the default camera looks down +z of the model frame
//! with image y growing downward, i.e. extrinsic rotation diag(1, −1, −1).
//! A camera-frame point (x, y, z) with z > 0 maps to pixel coordinates
//! `u = fx·x/z + cx`, `v = fy·y/z + cy`, where (u, v) measure continuous
//! pixel positions (pixel (0,0) covers [0,1)² with center (0.5, 0.5)).

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera: intrinsics plus a rigid extrinsic transform applied as
/// `p_cam = R·p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PerspectiveCamera {
    /// Default viewing setup for a square image of side `s` pixels: focal
    /// length 1.35·s (a person ~1.8 m tall fills most of the frame at ~2.5 m
    /// depth), principal point at the center, y-down extrinsic.
    pub fn default_for_size(s: usize) -> Self {
        let sf = s as f64;
        PerspectiveCamera {
            fx: 1.35 * sf,
            fy: 1.35 * sf,
            cx: sf / 2.0,
            cy: sf / 2.0,
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
            translation: Vector3::zeros(),
        }
    }

    pub fn with_translation(mut self, t: Vector3<f64>) -> Self {
        self.translation = t;
        self
    }

    #[inline]
    pub fn to_camera_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Minimum depth accepted by the perspective divide.
const MIN_DEPTH: f64 = 1e-9;

/// Projects points through the camera. Errors (naming the offending point)
/// if any point lands at or behind the image plane.
pub fn perspective_project(
    points: &[Vector3<f64>],
    cam: &PerspectiveCamera,
) -> Result<Vec<Vector2<f64>>> {
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let pc = cam.to_camera_frame(p);
        if pc.z < MIN_DEPTH {
            return Err(Error::numeric(format!(
                "point {i} has non-positive camera depth {:.6e}",
                pc.z
            )));
        }
        out.push(Vector2::new(
            cam.fx * pc.x / pc.z + cam.cx,
            cam.fy * pc.y / pc.z + cam.cy,
        ));
    }
    Ok(out)
}

/// Reverse-mode derivative of [`perspective_project`]: given dL/d(uv) per
/// point, returns dL/d(point) in the model frame and the accumulated
/// dL/d(translation).
pub fn perspective_project_vjp(
    points: &[Vector3<f64>],
    cam: &PerspectiveCamera,
    d_uv: &[Vector2<f64>],
) -> Result<(Vec<Vector3<f64>>, Vector3<f64>)> {
    if points.len() != d_uv.len() {
        return Err(Error::parameter(format!(
            "{} points but {} gradients",
            points.len(),
            d_uv.len()
        )));
    }
    let rt = cam.rotation.transpose();
    let mut d_points = Vec::with_capacity(points.len());
    let mut d_t = Vector3::zeros();
    for (i, (p, g)) in points.iter().zip(d_uv.iter()).enumerate() {
        let pc = cam.to_camera_frame(p);
        if pc.z < MIN_DEPTH {
            return Err(Error::numeric(format!(
                "point {i} has non-positive camera depth {:.6e}",
                pc.z
            )));
        }
        let inv_z = 1.0 / pc.z;
        // u = fx x/z + cx, v = fy y/z + cy.
        let d_pc = Vector3::new(
            cam.fx * inv_z * g.x,
            cam.fy * inv_z * g.y,
            -(cam.fx * pc.x * g.x + cam.fy * pc.y * g.y) * inv_z * inv_z,
        );
        d_t += d_pc;
        d_points.push(rt * d_pc);
    }
    Ok((d_points, d_t))
}

/// Weak-perspective camera predicted by the regressor: a uniform scale and
/// an in-plane translation in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: Vector2<f64>,
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, tx: f64, ty: f64) -> Self {
        WeakPerspectiveCamera {
            scale,
            translation: Vector2::new(tx, ty),
        }
    }
}

/// Orthographic projection with scale and translation:
/// `p = s·(x + t̂x, y + t̂y)` in normalized coordinates where the image spans
/// [−1, 1]², then mapped to pixels with y flipped (model y-up, image y-down):
/// `u = (1 + p_x)·w/2`, `v = (1 − p_y)·h/2`.
pub fn weak_perspective_project(
    points: &[Vector3<f64>],
    cam: &WeakPerspectiveCamera,
    width: usize,
    height: usize,
) -> Vec<Vector2<f64>> {
    let (w2, h2) = (width as f64 / 2.0, height as f64 / 2.0);
    points
        .iter()
        .map(|p| {
            let px = cam.scale * (p.x + cam.translation.x);
            let py = cam.scale * (p.y + cam.translation.y);
            Vector2::new((1.0 + px) * w2, (1.0 - py) * h2)
        })
        .collect()
}

/// Gradients of [`weak_perspective_project`] with respect to the 3D points
/// (x and y components; depth does not enter) and the camera parameters.
pub struct WeakPerspectiveGrads {
    pub d_points: Vec<Vector3<f64>>,
    pub d_scale: f64,
    pub d_translation: Vector2<f64>,
}

pub fn weak_perspective_project_vjp(
    points: &[Vector3<f64>],
    cam: &WeakPerspectiveCamera,
    width: usize,
    height: usize,
    d_uv: &[Vector2<f64>],
) -> Result<WeakPerspectiveGrads> {
    if points.len() != d_uv.len() {
        return Err(Error::parameter(format!(
            "{} points but {} gradients",
            points.len(),
            d_uv.len()
        )));
    }
    let (w2, h2) = (width as f64 / 2.0, height as f64 / 2.0);
    let mut d_points = Vec::with_capacity(points.len());
    let mut d_scale = 0.0;
    let mut d_translation = Vector2::zeros();
    for (p, g) in points.iter().zip(d_uv.iter()) {
        // du/dpx = w/2, dv/dpy = −h/2.
        let d_px = g.x * w2;
        let d_py = -g.y * h2;
        d_scale += d_px * (p.x + cam.translation.x) + d_py * (p.y + cam.translation.y);
        d_translation.x += d_px * cam.scale;
        d_translation.y += d_py * cam.scale;
        d_points.push(Vector3::new(d_px * cam.scale, d_py * cam.scale, 0.0));
    }
    Ok(WeakPerspectiveGrads {
        d_points,
        d_scale,
        d_translation,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    #[test]
    fn worked_perspective_example() {
        // fx = fy = 500, cx = cy = 128, identity extrinsics:
        // (0.1, 0, 1) → (500·0.1 + 128, 128) = (178, 128).
        let cam = PerspectiveCamera {
            fx: 500.0,
            fy: 500.0,
            cx: 128.0,
            cy: 128.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        };
        let uv = perspective_project(&[Vector3::new(0.1, 0.0, 1.0)], &cam).unwrap();
        assert_eq!(uv[0], Vector2::new(178.0, 128.0));
    }

    #[test]
    fn points_behind_camera_are_rejected_by_index() {
        let cam = PerspectiveCamera::default_for_size(256);
        // Default extrinsic maps model +z to camera −z; translation 0 puts
        // this point exactly behind the camera.
        let pts = [Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, 0.0, 1.0)];
        let err = perspective_project(&pts, &cam).unwrap_err().to_string();
        assert!(err.contains("point 1"), "{err}");
    }

    #[test]
    fn projection_scales_inversely_with_depth() {
        let cam = PerspectiveCamera {
            fx: 300.0,
            fy: 300.0,
            cx: 100.0,
            cy: 100.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        };
        let near = perspective_project(&[Vector3::new(0.2, 0.1, 1.0)], &cam).unwrap()[0];
        let far = perspective_project(&[Vector3::new(0.2, 0.1, 2.0)], &cam).unwrap()[0];
        assert!((near.x - 100.0) / (far.x - 100.0) - 2.0 < 1e-12);
        assert!((near.y - 100.0) / (far.y - 100.0) - 2.0 < 1e-12);
    }

    #[test]
    fn perspective_vjp_matches_finite_differences() {
        let mut rng = seeded(51);
        let cam = PerspectiveCamera::default_for_size(128)
            .with_translation(Vector3::new(0.0, -0.2, 2.5));
        let pts: Vec<Vector3<f64>> = (0..5)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.3..0.3),
                )
            })
            .collect();
        let g: Vec<Vector2<f64>> = (0..5)
            .map(|_| Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let f = |pts: &[Vector3<f64>], cam: &PerspectiveCamera| -> f64 {
            perspective_project(pts, cam)
                .unwrap()
                .iter()
                .zip(g.iter())
                .map(|(uv, gi)| uv.dot(gi))
                .sum()
        };
        let (d_pts, d_t) = perspective_project_vjp(&pts, &cam, &g).unwrap();
        let h = 1e-6;
        for i in 0..pts.len() {
            for c in 0..3 {
                let mut plus = pts.clone();
                let mut minus = pts.clone();
                plus[i][c] += h;
                minus[i][c] -= h;
                let fd = (f(&plus, &cam) - f(&minus, &cam)) / (2.0 * h);
                assert!(
                    (fd - d_pts[i][c]).abs() / fd.abs().max(1.0) < 1e-6,
                    "point {i} coord {c}: {fd} vs {}",
                    d_pts[i][c]
                );
            }
        }
        for c in 0..3 {
            let mut plus = cam.clone();
            let mut minus = cam.clone();
            plus.translation[c] += h;
            minus.translation[c] -= h;
            let fd = (f(&pts, &plus) - f(&pts, &minus)) / (2.0 * h);
            assert!((fd - d_t[c]).abs() / fd.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn weak_perspective_identity_maps_center_to_center() {
        let cam = WeakPerspectiveCamera::new(1.0, 0.0, 0.0);
        let uv = weak_perspective_project(&[Vector3::zeros()], &cam, 256, 256);
        assert_eq!(uv[0], Vector2::new(128.0, 128.0));
        // Model +y (up) maps to smaller v (up in the image).
        let up = weak_perspective_project(&[Vector3::new(0.0, 0.5, 0.0)], &cam, 256, 256);
        assert!(up[0].y < 128.0);
    }

    #[test]
    fn weak_perspective_vjp_matches_finite_differences() {
        let mut rng = seeded(52);
        let cam = WeakPerspectiveCamera::new(0.9, 0.05, -0.1);
        let pts: Vec<Vector3<f64>> = (0..4)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.5..0.5),
                )
            })
            .collect();
        let g: Vec<Vector2<f64>> = (0..4)
            .map(|_| Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let f = |pts: &[Vector3<f64>], cam: &WeakPerspectiveCamera| -> f64 {
            weak_perspective_project(pts, cam, 64, 64)
                .iter()
                .zip(g.iter())
                .map(|(uv, gi)| uv.dot(gi))
                .sum()
        };
        let grads = weak_perspective_project_vjp(&pts, &cam, 64, 64, &g).unwrap();
        let h = 1e-6;
        for i in 0..pts.len() {
            for c in 0..2 {
                let mut plus = pts.clone();
                let mut minus = pts.clone();
                plus[i][c] += h;
                minus[i][c] -= h;
                let fd = (f(&plus, &cam) - f(&minus, &cam)) / (2.0 * h);
                assert!((fd - grads.d_points[i][c]).abs() < 1e-6);
            }
        }
        let fd_s = {
            let mut plus = cam;
            let mut minus = cam;
            plus.scale += h;
            minus.scale -= h;
            (f(&pts, &plus) - f(&pts, &minus)) / (2.0 * h)
        };
        assert!((fd_s - grads.d_scale).abs() / fd_s.abs().max(1.0) < 1e-6);
        for c in 0..2 {
            let mut plus = cam;
            let mut minus = cam;
            plus.translation[c] += h;
            minus.translation[c] -= h;
            let fd = (f(&pts, &plus) - f(&pts, &minus)) / (2.0 * h);
            assert!((fd - grads.d_translation[c]).abs() / fd.abs().max(1.0) < 1e-6);
        }
    }
}
