//! Silhouette rasterization.
//!
//! Both rasterizers consume projected 2D vertices and triangle indices and
//! produce a row-major `height × width` image. Pixel (px, py) is sampled at
//! its center (px + 0.5, py + 0.5).
//!
//! The hard rasterizer is exact point-in-triangle coverage with inclusive
//! boundaries. The soft rasterizer is its differentiable relaxation: each
//! face contributes an occupancy `σ(−d/τ)` of the signed distance `d` from
//! the pixel center to the face (negative inside), and pixels combine faces
//! by the probabilistic union
//!
//! `V(p) = 1 − Π_f (1 − σ(−d_f(p)/τ)) = 1 − Π_f σ(d_f(p)/τ)`.
//!
//! As τ → 0 the relaxation approaches hard coverage at pixels away from
//! *face* boundaries. Near an edge interior to the silhouette (two adjacent
//! faces each half-covering) the union form recovers 1 only when some other
//! face covers the pixel deeply — true for the multiply-covered projections
//! of closed meshes at small τ, but not for flat single-layer fans.
//!
//! Pixels far outside a face contribute factors exponentially close to 1, so
//! each face only visits a band around its bounding box. To keep the result
//! C¹ in the vertex positions (finite differences must match the analytic
//! gradient), the factor is not truncated at the band edge: between 8τ and
//! 10τ it is blended to exactly 1 by a smoothstep, and beyond 10τ it is
//! exactly 1 and the pixel is skipped.

use nalgebra::Vector2;

use crate::error::{Error, Result};

/// Band edges for the soft factor, in units of τ. Between `BAND_INNER` and
/// `BAND_OUTER` the factor ramps smoothly from σ(d/τ) to exactly 1;
/// σ(BAND_INNER) differs from 1 by ~3.4e-4, so the ramp perturbs values by
/// less than that.
const BAND_INNER: f64 = 8.0;
const BAND_OUTER: f64 = 10.0;

#[inline]
fn edge_fn(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Inclusive point-in-triangle test: all three edge functions share a sign,
/// with zeros (points on an edge or vertex) counting as inside.
#[inline]
pub fn point_in_triangle(
    p: &Vector2<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
    c: &Vector2<f64>,
) -> bool {
    let e1 = edge_fn(a, b, p);
    let e2 = edge_fn(b, c, p);
    let e3 = edge_fn(c, a, p);
    (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
}

fn check_mesh(vertices: &[Vector2<f64>], faces: &[[u32; 3]]) -> Result<()> {
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v as usize >= vertices.len() {
                return Err(Error::parameter(format!(
                    "face {fi} references vertex {v}, but only {} vertices given",
                    vertices.len()
                )));
            }
        }
    }
    for (i, v) in vertices.iter().enumerate() {
        if !v.x.is_finite() || !v.y.is_finite() {
            return Err(Error::numeric(format!("vertex {i} is not finite: {v:?}")));
        }
    }
    Ok(())
}

/// Pixel-range of a bbox `[min, max]` expanded by `pad`, clamped to the
/// image. Returns None when the expanded box misses the image entirely.
fn pixel_range(
    min: f64,
    max: f64,
    pad: f64,
    limit: usize,
) -> Option<(usize, usize)> {
    let lo = (min - pad - 0.5).floor();
    let hi = (max + pad - 0.5).ceil();
    if hi < 0.0 || lo > (limit - 1) as f64 {
        return None;
    }
    Some((lo.max(0.0) as usize, (hi.min((limit - 1) as f64)) as usize))
}

/// Binary coverage rasterization. A pixel is 1 iff its center lies in (or
/// on the boundary of) at least one non-degenerate face.
pub fn rasterize_hard(
    vertices: &[Vector2<f64>],
    faces: &[[u32; 3]],
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    check_mesh(vertices, faces)?;
    let mut out = vec![0.0; height * width];
    for f in faces {
        let (a, b, c) = (
            vertices[f[0] as usize],
            vertices[f[1] as usize],
            vertices[f[2] as usize],
        );
        if edge_fn(&a, &b, &c) == 0.0 {
            continue; // zero-area face covers nothing
        }
        let (xmin, xmax) = (a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x));
        let (ymin, ymax) = (a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
        let Some((px0, px1)) = pixel_range(xmin, xmax, 0.0, width) else {
            continue;
        };
        let Some((py0, py1)) = pixel_range(ymin, ymax, 0.0, height) else {
            continue;
        };
        for py in py0..=py1 {
            let row = py * width;
            for px in px0..=px1 {
                if out[row + px] == 1.0 {
                    continue;
                }
                let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                if point_in_triangle(&p, &a, &b, &c) {
                    out[row + px] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-face free-space factor at normalized distance `x = d/τ`, with the
/// smoothstep blend to 1 across the outer band.
#[inline]
fn band_factor(x: f64) -> f64 {
    if x >= BAND_OUTER {
        1.0
    } else if x <= BAND_INNER {
        sigmoid(x)
    } else {
        let u = (x - BAND_INNER) / (BAND_OUTER - BAND_INNER);
        let s = 1.0 - u * u * (3.0 - 2.0 * u);
        1.0 - (1.0 - sigmoid(x)) * s
    }
}

/// Derivative of [`band_factor`].
#[inline]
fn band_factor_dx(x: f64) -> f64 {
    if x >= BAND_OUTER {
        0.0
    } else if x <= BAND_INNER {
        let s = sigmoid(x);
        s * (1.0 - s)
    } else {
        let u = (x - BAND_INNER) / (BAND_OUTER - BAND_INNER);
        let s = 1.0 - u * u * (3.0 - 2.0 * u);
        let ds = -6.0 * u * (1.0 - u) / (BAND_OUTER - BAND_INNER);
        let sg = sigmoid(x);
        sg * (1.0 - sg) * s - (1.0 - sg) * ds
    }
}

/// Signed distance from `p` to the triangle: Euclidean distance to the
/// nearest edge, negated when `p` is inside. Also returns, per endpoint of
/// that nearest edge, which face vertices it touches and ∂d/∂(vertex).
struct SignedDist {
    d: f64,
    // (vertex slot in the face, gradient) for the two nearest-edge endpoints.
    grads: [(usize, Vector2<f64>); 2],
}

fn signed_distance(
    p: &Vector2<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
    c: &Vector2<f64>,
) -> SignedDist {
    let verts = [a, b, c];
    let edges = [(0usize, 1usize), (1, 2), (2, 0)];
    let mut best = f64::INFINITY;
    let mut best_edge = 0;
    let mut best_t = 0.0;
    let mut best_q = Vector2::zeros();
    for (ei, &(i0, i1)) in edges.iter().enumerate() {
        let v0 = verts[i0];
        let v1 = verts[i1];
        let e = v1 - v0;
        let len2 = e.dot(&e);
        let t = if len2 > 0.0 {
            ((p - v0).dot(&e) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = v0 + t * e;
        let dist2 = (p - q).norm_squared();
        if dist2 < best {
            best = dist2;
            best_edge = ei;
            best_t = t;
            best_q = q;
        }
    }
    let u = best.sqrt();
    let sign = if point_in_triangle(p, a, b, c) { -1.0 } else { 1.0 };
    let (i0, i1) = edges[best_edge];
    if u < 1e-12 {
        // On the boundary: the distance kink; a zero gradient is the
        // measure-zero subgradient choice.
        return SignedDist {
            d: 0.0,
            grads: [(i0, Vector2::zeros()), (i1, Vector2::zeros())],
        };
    }
    // Envelope theorem: t is either clamped or stationary, so it can be held
    // fixed when differentiating u = ‖p − (v0 + t(v1 − v0))‖.
    let n = (best_q - p) / u;
    SignedDist {
        d: sign * u,
        grads: [
            (i0, sign * (1.0 - best_t) * n),
            (i1, sign * best_t * n),
        ],
    }
}

/// Soft rasterization forward pass; returns per-pixel values in [0, 1].
pub fn rasterize_soft(
    vertices: &[Vector2<f64>],
    faces: &[[u32; 3]],
    height: usize,
    width: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    Ok(soft_products(vertices, faces, height, width, tau)?
        .into_iter()
        .map(|p| 1.0 - p)
        .collect())
}

/// Per-pixel free-space products Π_f σ(d_f/τ); the soft value is 1 − product.
fn soft_products(
    vertices: &[Vector2<f64>],
    faces: &[[u32; 3]],
    height: usize,
    width: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    check_mesh(vertices, faces)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::parameter(format!("temperature must be positive, got {tau}")));
    }
    let pad = BAND_OUTER * tau;
    let mut products = vec![1.0; height * width];
    for f in faces {
        let (a, b, c) = (
            vertices[f[0] as usize],
            vertices[f[1] as usize],
            vertices[f[2] as usize],
        );
        if edge_fn(&a, &b, &c) == 0.0 {
            continue;
        }
        let (xmin, xmax) = (a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x));
        let (ymin, ymax) = (a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
        let Some((px0, px1)) = pixel_range(xmin, xmax, pad, width) else {
            continue;
        };
        let Some((py0, py1)) = pixel_range(ymin, ymax, pad, height) else {
            continue;
        };
        for py in py0..=py1 {
            let row = py * width;
            for px in px0..=px1 {
                let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let sd = signed_distance(&p, &a, &b, &c);
                let x = sd.d / tau;
                if x >= BAND_OUTER {
                    continue;
                }
                products[row + px] *= band_factor(x);
            }
        }
    }
    Ok(products)
}

/// Reverse-mode derivative of [`rasterize_soft`]: given dL/d(pixel values),
/// returns dL/d(vertex positions). Recomputes the forward products.
pub fn rasterize_soft_vjp(
    vertices: &[Vector2<f64>],
    faces: &[[u32; 3]],
    height: usize,
    width: usize,
    tau: f64,
    d_values: &[f64],
) -> Result<Vec<Vector2<f64>>> {
    if d_values.len() != height * width {
        return Err(Error::parameter(format!(
            "gradient image has {} entries, expected {}",
            d_values.len(),
            height * width
        )));
    }
    let products = soft_products(vertices, faces, height, width, tau)?;
    let pad = BAND_OUTER * tau;
    let mut d_verts = vec![Vector2::zeros(); vertices.len()];
    for f in faces {
        let (a, b, c) = (
            vertices[f[0] as usize],
            vertices[f[1] as usize],
            vertices[f[2] as usize],
        );
        if edge_fn(&a, &b, &c) == 0.0 {
            continue;
        }
        let (xmin, xmax) = (a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x));
        let (ymin, ymax) = (a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
        let Some((px0, px1)) = pixel_range(xmin, xmax, pad, width) else {
            continue;
        };
        let Some((py0, py1)) = pixel_range(ymin, ymax, pad, height) else {
            continue;
        };
        for py in py0..=py1 {
            let row = py * width;
            for px in px0..=px1 {
                let g = d_values[row + px];
                let prod = products[row + px];
                // A zero product means some factor underflowed to exactly 0;
                // every factor's partial is then 0 too.
                if g == 0.0 || prod == 0.0 {
                    continue;
                }
                let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let sd = signed_distance(&p, &a, &b, &c);
                let x = sd.d / tau;
                if x >= BAND_OUTER {
                    continue;
                }
                let factor = band_factor(x);
                // V = 1 − Π, ∂V/∂factor_f = −Π/factor_f (factor_f > 0 here
                // since the full product is nonzero).
                let d_factor = -g * prod / factor;
                let d_d = d_factor * band_factor_dx(x) / tau;
                for (slot, grad) in sd.grads {
                    d_verts[f[slot] as usize] += d_d * grad;
                }
            }
        }
    }
    Ok(d_verts)
}
