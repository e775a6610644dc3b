//! Evaluation metrics for body estimation: Procrustes-aligned joint error,
//! scale-corrected per-vertex error on the neutral pose, and silhouette
//! intersection-over-union. Linear units are meters in, millimeters out.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use std::path::Path;

use crate::error::{Error, Result};

/// Similarity-Procrustes alignment of `source` onto `target`: the rotation
/// (det +1), scale, and translation minimizing Σ‖s·R·p + t − q‖². Returns
/// the transformed source points.
///
/// Needs at least three points and a source cloud of rank ≥ 2 (not all
/// collinear/coincident), otherwise the rotation is not determined.
pub fn procrustes_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    if source.len() != target.len() {
        return Err(Error::parameter(format!(
            "point sets have {} and {} entries",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::parameter(format!(
            "alignment needs at least 3 points, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let s_mean: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / n;
    let t_mean: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut s_norm_sq = 0.0;
    for (p, q) in source.iter().zip(target.iter()) {
        let ps = p - s_mean;
        let qs = q - t_mean;
        cov += qs * ps.transpose(); // target ⊗ source
        s_norm_sq += ps.norm_squared();
    }
    if s_norm_sq < 1e-18 {
        return Err(Error::numeric(
            "alignment source points are all coincident".to_string(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::numeric("SVD did not produce U".to_string()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::numeric("SVD did not produce V".to_string()))?;
    let mut sing = svd.singular_values;
    let max_sv = sing.iter().cloned().fold(0.0, f64::max);
    let rank = sing.iter().filter(|&&s| s > 1e-12 * max_sv.max(1e-300)).count();
    if rank < 2 {
        return Err(Error::numeric(format!(
            "alignment sources are degenerate (cross-covariance rank {rank})"
        )));
    }

    // R = U Vᵀ, with the smallest singular direction flipped when the
    // determinant would be negative — the closest proper rotation.
    let mut u = u;
    if (u * v_t).determinant() < 0.0 {
        let imin = (0..3)
            .min_by(|&a, &b| sing[a].partial_cmp(&sing[b]).expect("finite"))
            .expect("three values");
        for r in 0..3 {
            u[(r, imin)] = -u[(r, imin)];
        }
        sing[imin] = -sing[imin];
    }
    let rotation = u * v_t;
    let scale = sing.iter().sum::<f64>() / s_norm_sq;

    Ok(source
        .iter()
        .map(|p| scale * (rotation * (p - s_mean)) + t_mean)
        .collect())
}

/// Mean per-joint position error (millimeters) after Procrustes alignment.
pub fn mpjpe_pa(predicted: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<f64> {
    let aligned = procrustes_align(predicted, target)?;
    let mean = aligned
        .iter()
        .zip(target.iter())
        .map(|(a, t)| (a - t).norm())
        .sum::<f64>()
        / aligned.len() as f64;
    Ok(1000.0 * mean)
}

/// Mean per-vertex error (millimeters) between two equally-indexed vertex
/// sets, with no alignment or scale correction.
pub fn pve_t(predicted: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::parameter(format!(
            "vertex sets have {} and {} entries",
            predicted.len(),
            target.len()
        )));
    }
    let mean = predicted
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t).norm())
        .sum::<f64>()
        / predicted.len() as f64;
    Ok(1000.0 * mean)
}

/// Mean per-vertex error (millimeters) between two neutral-pose meshes
/// after centering and optimal uniform scale correction
/// `s* = ⟨v̂, v⟩ / ⟨v̂, v̂⟩` applied to the prediction.
pub fn pve_t_sc(predicted: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::parameter(format!(
            "vertex sets have {} and {} entries",
            predicted.len(),
            target.len()
        )));
    }
    let n = predicted.len() as f64;
    let p_mean: Vector3<f64> = predicted.iter().sum::<Vector3<f64>>() / n;
    let t_mean: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n;
    let mut dot = 0.0;
    let mut p_sq = 0.0;
    for (p, t) in predicted.iter().zip(target.iter()) {
        let pc = p - p_mean;
        let tc = t - t_mean;
        dot += pc.dot(&tc);
        p_sq += pc.norm_squared();
    }
    if p_sq < 1e-18 {
        return Err(Error::numeric(
            "scale correction: predicted vertices are all coincident".to_string(),
        ));
    }
    let scale = dot / p_sq;
    let mean = predicted
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (scale * (p - p_mean) - (t - t_mean)).norm())
        .sum::<f64>()
        / n;
    Ok(1000.0 * mean)
}

/// Intersection over union of two masks (values above 0.5 count as
/// foreground). Two empty masks agree perfectly: 1.
pub fn silhouette_miou(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::parameter(format!(
            "masks have {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        let fa = *x > 0.5;
        let fb = *y > 0.5;
        if fa && fb {
            inter += 1;
        }
        if fa || fb {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub mpjpe_pa_mm: f64,
    pub pve_t_sc_mm: f64,
    pub miou: f64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "n_samples,mpjpe_pa_mm,pve_t_sc_mm,miou"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.n_samples, self.mpjpe_pa_mm, self.pve_t_sc_mm, self.miou
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::rot::axis_angle_to_matrix;
    use rand::Rng;

    fn random_cloud(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn similarity_transformed(
        points: &[Vector3<f64>],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Vec<Vector3<f64>> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let rot = axis_angle_to_matrix(&axis);
        let scale = rng.gen_range(0.3..3.0);
        let t = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        );
        points.iter().map(|p| scale * (rot * p) + t).collect()
    }

    #[test]
    fn alignment_undoes_any_similarity_transform() {
        let mut rng = seeded(50);
        for _ in 0..50 {
            let target = random_cloud(&mut rng, 17);
            let source = similarity_transformed(&target, &mut rng);
            let aligned = procrustes_align(&source, &target).unwrap();
            for (a, t) in aligned.iter().zip(target.iter()) {
                assert!((a - t).norm() < 1e-9, "residual {}", (a - t).norm());
            }
            assert!(mpjpe_pa(&source, &target).unwrap() < 1e-6);
        }
    }

    #[test]
    fn alignment_refuses_reflections() {
        let mut rng = seeded(51);
        let target = random_cloud(&mut rng, 20);
        let mirrored: Vec<Vector3<f64>> =
            target.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        // A reflection is not a rotation; residual error must remain.
        let err = mpjpe_pa(&mirrored, &target).unwrap();
        assert!(err > 1.0, "reflection absorbed: {err} mm");
    }

    #[test]
    fn joint_error_reports_millimeters() {
        let mut rng = seeded(52);
        let target = random_cloud(&mut rng, 17);
        // Perturb a copy by exactly 1 mm per joint in random directions;
        // alignment can only shrink it, and not to zero.
        let pred: Vec<Vector3<f64>> = target
            .iter()
            .map(|p| {
                let d = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalize();
                p + 0.001 * d
            })
            .collect();
        let err = mpjpe_pa(&pred, &target).unwrap();
        assert!(err > 0.2 && err <= 1.0 + 1e-9, "{err} mm");
    }

    #[test]
    fn degenerate_point_sets_are_rejected() {
        let coincident = vec![Vector3::new(1.0, 2.0, 3.0); 5];
        let mut rng = seeded(53);
        let target = random_cloud(&mut rng, 5);
        assert!(procrustes_align(&coincident, &target).is_err());
        let collinear: Vec<Vector3<f64>> =
            (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(procrustes_align(&collinear, &target).is_err());
        assert!(procrustes_align(&target[..2], &target[..2]).is_err());
    }

    #[test]
    fn vertex_error_is_scale_and_translation_corrected() {
        let mut rng = seeded(54);
        let target = random_cloud(&mut rng, 100);
        let scaled_shifted: Vec<Vector3<f64>> = target
            .iter()
            .map(|p| 1.7 * p + Vector3::new(3.0, -2.0, 0.5))
            .collect();
        assert!(pve_t_sc(&scaled_shifted, &target).unwrap() < 1e-9);
        // But a rotation is NOT corrected for.
        let rot = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, 0.8));
        let rotated: Vec<Vector3<f64>> = target.iter().map(|p| rot * p).collect();
        assert!(pve_t_sc(&rotated, &target).unwrap() > 10.0);
    }

    #[test]
    fn plain_vertex_error_applies_no_correction() {
        let mut rng = seeded(56);
        let target = random_cloud(&mut rng, 80);
        assert_eq!(pve_t(&target, &target).unwrap(), 0.0);
        // A uniform 2 mm shift reads as exactly 2 mm; the corrected metric
        // cancels it.
        let shifted: Vec<Vector3<f64>> = target
            .iter()
            .map(|p| p + Vector3::new(0.002, 0.0, 0.0))
            .collect();
        assert!((pve_t(&shifted, &target).unwrap() - 2.0).abs() < 1e-12);
        assert!(pve_t_sc(&shifted, &target).unwrap() < 1e-9);
        assert!(pve_t(&target[..3], &target).is_err());
    }

    #[test]
    fn optimal_scale_beats_nearby_scales() {
        let mut rng = seeded(55);
        let target = random_cloud(&mut rng, 60);
        let pred: Vec<Vector3<f64>> = target
            .iter()
            .map(|p| 2.0 * p + 0.01 * random_cloud(&mut rng, 1)[0])
            .collect();
        let best = pve_t_sc(&pred, &target).unwrap();
        for s in [0.45, 0.48, 0.52, 0.55] {
            let rescaled: Vec<Vector3<f64>> = pred.iter().map(|p| s * p).collect();
            // pve of manually rescaled prediction (scale correction then
            // re-optimizes, so equality holds): the optimum is scale
            // invariant.
            let err = pve_t_sc(&rescaled, &target).unwrap();
            assert!((err - best).abs() < 1e-9, "scale {s}: {err} vs {best}");
        }
    }

    #[test]
    fn miou_worked_example() {
        // Two 2×2 squares on a 4×4 grid overlapping in one column:
        // intersection 2, union 6.
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        for y in 0..2 {
            for x in 0..2 {
                a[y * 4 + x] = 1.0;
                b[y * 4 + x + 1] = 1.0;
            }
        }
        let got = silhouette_miou(&a, &b).unwrap();
        assert!((got - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn miou_edge_cases() {
        let empty = vec![0.0; 9];
        let full = vec![1.0; 9];
        assert_eq!(silhouette_miou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(silhouette_miou(&full, &full).unwrap(), 1.0);
        assert_eq!(silhouette_miou(&empty, &full).unwrap(), 0.0);
        let mut half = vec![0.0; 9];
        for v in half.iter_mut().take(3) {
            *v = 1.0;
        }
        assert!((silhouette_miou(&half, &full).unwrap() - 3.0 / 9.0).abs() < 1e-15);
        assert!(silhouette_miou(&empty, &[0.0; 4]).is_err());
    }

    #[test]
    fn report_serializes_to_json_and_csv() {
        let report = MetricsReport {
            n_samples: 12,
            mpjpe_pa_mm: 34.5,
            pve_t_sc_mm: 12.25,
            miou: 0.875,
        };
        let json = report.to_json();
        assert!(json.contains("\"mpjpe_pa_mm\": 34.5"), "{json}");
        assert!(json.contains("\"n_samples\": 12"), "{json}");
        assert_eq!(report.to_csv_row(), "12,34.5,12.25,0.875");
        assert_eq!(
            MetricsReport::csv_header().split(',').count(),
            report.to_csv_row().split(',').count()
        );
    }
}
