#ifndef BODYFIT_H
#define BODYFIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every API call.
 */
typedef enum BfStatus {
  /**
   * Success; out-parameters are valid.
   */
  BF_STATUS_OK = 0,
  /**
   * An argument violated a precondition.
   */
  BF_STATUS_PARAMETER = 2,
  /**
   * Malformed or inconsistent data (including I/O failures).
   */
  BF_STATUS_DATA = 3,
  /**
   * A numeric failure (non-finite value, degenerate geometry).
   */
  BF_STATUS_NUMERIC = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  BF_STATUS_PANIC = 5,
  /**
   * A required pointer argument was null.
   */
  BF_STATUS_NULL = 6,
} BfStatus;

/**
 * Opaque body model handle.
 */
typedef struct BfModel BfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the message for the most recent failure on this thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *bf_last_error_message(void);

/**
 * Generates a deterministic toy model. `out` receives an owned handle.
 */
enum BfStatus bf_model_generate(uint64_t seed,
                                uintptr_t vertices,
                                uintptr_t joints,
                                uintptr_t shape_coeffs,
                                uintptr_t keypoints,
                                struct BfModel **out);

/**
 * Loads a model file, auditing every structural invariant.
 */
enum BfStatus bf_model_load(const char *path, struct BfModel **out);

enum BfStatus bf_model_save(const struct BfModel *model, const char *path);

/**
 * Releases a handle returned by `bf_model_generate` or `bf_model_load`.
 * Null is ignored.
 */
void bf_model_free(struct BfModel *model);

/**
 * Number of mesh vertices N. Returns 0 for a null handle.
 */
uintptr_t bf_model_vertex_count(const struct BfModel *model);

/**
 * Number of joints K. Returns 0 for a null handle.
 */
uintptr_t bf_model_joint_count(const struct BfModel *model);

/**
 * Number of shape coefficients B. Returns 0 for a null handle.
 */
uintptr_t bf_model_shape_coeff_count(const struct BfModel *model);

/**
 * Number of 2D keypoints L. Returns 0 for a null handle.
 */
uintptr_t bf_model_keypoint_count(const struct BfModel *model);

/**
 * Number of triangles F. Returns 0 for a null handle.
 */
uintptr_t bf_model_face_count(const struct BfModel *model);

/**
 * Copies the triangle index list into `out` (3·F entries, vertex indices).
 */
enum BfStatus bf_model_faces(const struct BfModel *model, uint32_t *out, uintptr_t out_len);

/**
 * Copies the keypoint→joint map into `out` (L entries).
 */
enum BfStatus bf_model_keypoint_map(const struct BfModel *model, uintptr_t *out, uintptr_t out_len);

/**
 * Poses and skins the model. `pose_axis_angle` holds 3·K values (one
 * axis-angle per joint), `out_vertices` 3·N, and `out_joints` — which may
 * be null — 3·K posed joint positions.
 */
enum BfStatus bf_lbs_forward(const struct BfModel *model,
                             const double *beta,
                             uintptr_t beta_len,
                             const double *pose_axis_angle,
                             uintptr_t pose_len,
                             double *out_vertices,
                             uintptr_t out_vertices_len,
                             double *out_joints,
                             uintptr_t out_joints_len);

/**
 * Writes the unposed shaped mesh (3·N values).
 */
enum BfStatus bf_neutral_mesh(const struct BfModel *model,
                              const double *beta,
                              uintptr_t beta_len,
                              double *out_vertices,
                              uintptr_t out_vertices_len);

/**
 * Exponential map: 3 axis-angle values to a row-major 3×3 rotation.
 */
enum BfStatus bf_axis_angle_to_matrix(const double *axis_angle, double *out_matrix);

/**
 * Logarithm map: row-major 3×3 rotation to 3 axis-angle values.
 */
enum BfStatus bf_matrix_to_axis_angle(const double *matrix, double *out_axis_angle);

/**
 * Gram-Schmidt decode: 6 values (two stacked column vectors) to a
 * row-major rotation matrix.
 */
enum BfStatus bf_rot6d_to_matrix(const double *rot6d, double *out_matrix);

/**
 * Truncation encode: row-major rotation matrix to the 6-value encoding.
 */
enum BfStatus bf_matrix_to_rot6d(const double *matrix, double *out_rot6d);

/**
 * Pinhole projection of `n` 3D points (row-major x,y,z) to pixel
 * coordinates (row-major u,v). `rotation` is a row-major 3×3 matrix and
 * `translation` 3 values; points must land in front of the camera.
 */
enum BfStatus bf_perspective_project(const double *points,
                                     uintptr_t n_points,
                                     double fx,
                                     double fy,
                                     double cx,
                                     double cy,
                                     const double *rotation,
                                     const double *translation,
                                     double *out_pixels);

/**
 * Scaled-orthographic projection of `n` 3D points into an image of the
 * given size.
 */
enum BfStatus bf_weak_perspective_project(const double *points,
                                          uintptr_t n_points,
                                          double scale,
                                          double translation_x,
                                          double translation_y,
                                          uintptr_t width,
                                          uintptr_t height,
                                          double *out_pixels);

/**
 * Binary center-in-triangle rasterization. `vertices` holds 2·n pixel
 * coordinates, `faces` 3·f indices; `out` receives height·width values in
 * row-major order.
 */
enum BfStatus bf_rasterize_hard(const double *vertices,
                                uintptr_t n_vertices,
                                const uint32_t *faces,
                                uintptr_t n_faces,
                                uintptr_t height,
                                uintptr_t width,
                                double *out,
                                uintptr_t out_len);

/**
 * Differentiable sigmoid-of-distance rasterization with temperature `tau`.
 */
enum BfStatus bf_rasterize_soft(const double *vertices,
                                uintptr_t n_vertices,
                                const uint32_t *faces,
                                uintptr_t n_faces,
                                uintptr_t height,
                                uintptr_t width,
                                double tau,
                                double *out,
                                uintptr_t out_len);

/**
 * Per-keypoint Gaussian heatmaps. `points` holds 2·l pixel coordinates;
 * `out` receives l·height·width values, keypoint-major.
 */
enum BfStatus bf_joint_heatmaps(const double *points,
                                uintptr_t n_points,
                                uintptr_t height,
                                uintptr_t width,
                                double sigma,
                                double *out,
                                uintptr_t out_len);

/**
 * Mean per-joint position error (mm) after rigid alignment of `predicted`
 * onto `target` (both 3·n values).
 */
enum BfStatus bf_mpjpe_pa(const double *predicted,
                          const double *target,
                          uintptr_t n_points,
                          double *out_mm);

/**
 * Scale-corrected mean per-vertex error (mm) between two neutral meshes
 * (both 3·n values).
 */
enum BfStatus bf_pve_t_sc(const double *predicted,
                          const double *target,
                          uintptr_t n_points,
                          double *out_mm);

/**
 * Intersection-over-union of two masks (values above 0.5 count as
 * foreground; two empty masks score 1).
 */
enum BfStatus bf_silhouette_miou(const double *mask_a,
                                 const double *mask_b,
                                 uintptr_t len,
                                 double *out_miou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BODYFIT_H */
