#pragma once

// Training objective. Image-shaped tensors are N x H x W (x C); masks are 1 on valid pixels.

#include <map>
#include <string>

#include <json.hpp>

#include "zipmap/heads.hpp"
#include "zipmap/synthdata.hpp"

namespace zipmap {

inline constexpr double kDepthAlpha = 0.2;
inline constexpr double kCameraWeight = 5.0;
inline constexpr double kColorWeight = 10.0;

// Exact minimiser of sum_k |s a_k - b_k| / z_k over every valid coordinate (three per
// point): the weighted median of b_k / a_k with weights |a_k| / z_k. Ties go to the smaller
// ratio; terms with |a_k| < 1e-12 are constant and dropped. Clamped to >= 1e-6.
// pred and gt are (.. x 3) point sets, gt_z and mask have one entry per point.
template <typename T>
double roe_scale(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& gt_z, const Tensor<T>& mask);

// mean over valid points of ||s p - p*||_1 / (3 z*), with s held constant.
template <typename T>
Tensor<T> point_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, T s_hat);

// mean over valid pixels of conf * |s D - D*| - alpha * log conf.
template <typename T>
Tensor<T> depth_loss(const Tensor<T>& depth, const Tensor<T>& conf, const Tensor<T>& gt_depth, T s_hat,
                     const Tensor<T>& mask, T alpha = T(kDepthAlpha));

// mean over views of the L1 distance between 9-vectors, predicted translation scaled by s.
template <typename T>
Tensor<T> camera_loss(const Tensor<T>& pred, const Tensor<T>& gt, T s_hat);

// Predicted cameras moved into the gt world by `align` (pred world -> gt world), with
// translations rescaled to gt units. Differentiable in `pred`; `align` is a constant.
template <typename T>
Tensor<T> align_cameras(const Tensor<T>& pred, const Similarity<double>& align);

// Similarity taking the predicted world onto the gt world: rotation from the chordal mean
// of R_gt^T R_pred over views, scale from the ratio of camera-center spreads (1 when the
// predicted centers coincide), translation from the center means. Exact whenever the
// prediction is a similarity transform of the gt. Needs at least 2 views.
template <typename T>
Similarity<double> camera_alignment(const Tensor<T>& pred, const Tensor<T>& gt);

// Reference-free camera loss: camera_loss(align_cameras(pred, A), gt, 1) with A the
// (detached) camera alignment. Invariant to global similarities of the prediction.
template <typename T>
Tensor<T> camera_loss_refless(const Tensor<T>& pred, const Tensor<T>& gt);

// mean over valid interior pixels of arccos(n . n*), normals from the cross product of the
// right and down edges. `valid_pixels`, when given, receives the number of pixels used;
// zero valid pixels yields a zero loss.
template <typename T>
Tensor<T> normal_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, T eps = T(1e-12),
                      Index* valid_pixels = nullptr);

// mean over valid forward differences (x and y pooled) of conf * |d(s D) - d D*|, the
// confidence taken at the difference's first pixel.
template <typename T>
Tensor<T> depth_grad_loss(const Tensor<T>& depth, const Tensor<T>& conf, const Tensor<T>& gt_depth, T s_hat,
                          const Tensor<T>& mask);

template <typename T>
struct QueryLoss {
  Tensor<T> color;
  Tensor<T> depth;
};

// color = 10 * MSE over all pixels; depth = depth_loss with unit scale on the mask.
template <typename T>
QueryLoss<T> query_losses(const Tensor<T>& rgb, const Tensor<T>& depth, const Tensor<T>& conf,
                          const Tensor<T>& gt_rgb, const Tensor<T>& gt_depth, const Tensor<T>& mask);

// Re-expresses a bundle in view 0's camera frame and divides translations and depths by
// the mean norm of all valid points in that frame. The divisor is multiplied into
// bundle.scale. The geometry descriptor stays in the generator's frame.
SceneBundle normalize_ground_truth(const SceneBundle& bundle);

// Ground truth for one training example.
template <typename T>
struct Batch {
  Tensor<T> images;   // N x H x W x 3
  Tensor<T> depth;    // N x H x W
  Tensor<T> mask;     // N x H x W
  Tensor<T> points;   // N x H x W x 3, local camera frame
  Tensor<T> cameras;  // N x 9
  // Query targets (M may be 0).
  Tensor<T> query_raymaps;  // M x H x W x 9
  Tensor<T> query_rgb;      // M x H x W x 3
  Tensor<T> query_depth;    // M x H x W
  Tensor<T> query_mask;     // M x H x W
  Index views() const { return images.defined() ? images.dim(0) : 0; }
  Index query_views() const { return query_raymaps.defined() ? query_raymaps.dim(0) : 0; }
};

enum class ScaleMode {
  kMeanPointNorm,     // mean norm of valid input points in the reference frame
  kMaxCameraDistance  // largest distance of an input camera center to the reference origin
};

// Training example from a raw bundle: everything is expressed in the first input view's
// frame and divided by the scale chosen by `mode`. Query views become raymap targets.
template <typename T>
Batch<T> make_batch(const SceneBundle& bundle, const std::vector<Index>& inputs,
                    const std::vector<Index>& queries = {}, ScaleMode mode = ScaleMode::kMeanPointNorm);

struct LossOptions {
  bool reference_view = true;  // false: camera_loss_refless
  bool query = false;
  bool normal = true;
  bool depth_grad = true;
  double normal_eps = 1e-12;
};

template <typename T>
struct LossReport {
  Tensor<T> total;
  std::map<std::string, double> components;
  double scale_hat = 1.0;
  nlohmann::json to_json() const;
};

template <typename T>
LossReport<T> compute_losses(const Prediction<T>& pred, const Batch<T>& batch, const LossOptions& options);

}  // namespace zipmap
