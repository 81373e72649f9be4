#pragma once

// Evaluation metrics: trajectory errors, pose AUC, chamfer with ICP, aligned depth errors.

#include <map>
#include <vector>

#include <json.hpp>

#include "zipmap/geometry.hpp"

namespace zipmap {

using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3>;

// Geodesic angle of R_a^T R_b in degrees, computed from quaternions so that identical
// rotations give exactly zero.
double rotation_error_deg(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b);

struct TrajectoryReport {
  double ate_rmse = 0;   // after Sim(3) alignment of camera centers
  double rpe_trans = 0;  // consecutive pairs, scale-aligned
  double rpe_rot = 0;    // degrees
  nlohmann::json to_json() const;
};

// Umeyama on camera centers (whole-pose alignment when the centers are degenerate). RPE
// compares relative poses T_{i+1} T_i^-1 of consecutive views, so it depends on view order.
TrajectoryReport ate_rpe(const std::vector<Camerad>& pred, const std::vector<Camerad>& gt);

// Per ordered pair (i, j), i != j: max of the relative rotation error and the angle
// between relative translation directions, in degrees.
std::vector<double> pairwise_pose_errors(const std::vector<Camerad>& pred, const std::vector<Camerad>& gt);

// AUC@tau = 100 * mean over integer t in [1, tau] of the fraction of errors < t.
std::map<int, double> pose_auc_from_errors(const std::vector<double>& errors, const std::vector<int>& thresholds);
std::map<int, double> pose_auc(const std::vector<Camerad>& pred, const std::vector<Camerad>& gt,
                               const std::vector<int>& thresholds = {5, 15, 30});

// Static 3D kd-tree over the rows of a point matrix.
class KdTree {
 public:
  explicit KdTree(PointMatrix points);
  struct Hit {
    Index index = -1;
    double distance = 0;
  };
  // Nearest point; ties resolve to the lowest index.
  Hit nearest(const Eigen::Vector3d& q) const;
  Index size() const { return points_.rows(); }

 private:
  struct Node {
    Index point = -1;
    int axis = 0;
    Index left = -1, right = -1;
  };
  Index build(std::vector<Index>& idx, std::size_t lo, std::size_t hi, int depth);
  void search(Index node, const Eigen::Vector3d& q, Hit& best, double& best_sq) const;

  PointMatrix points_;
  std::vector<Node> nodes_;
  Index root_ = -1;
};

// O(n m) oracle with the same tie rule.
KdTree::Hit brute_force_nearest(const PointMatrix& points, const Eigen::Vector3d& q);

struct PointCloudReport {
  double acc_mean = 0, acc_median = 0;
  double comp_mean = 0, comp_median = 0;
  double nc_mean = 1, nc_median = 1;
  nlohmann::json to_json() const;
};

struct ChamferOptions {
  int icp_iters = 10;
  // Rows of pred and gt correspond: start ICP from their Umeyama similarity.
  bool corresponding = false;
};

// Point-to-point rigid ICP (an iteration is kept only if it lowers the RMS nearest-neighbor
// distance), then Acc = pred->gt and Comp = gt->pred nearest distances. NC averages
// |n_pred . n_gt| over both directions, evaluated as 1 - |n_p -+ n_g|^2 / 2 on unit normals.
PointCloudReport chamfer_metrics(const PointMatrix& pred, const PointMatrix& pred_normals, const PointMatrix& gt,
                                 const PointMatrix& gt_normals, const ChamferOptions& options = {});

enum class DepthAlign { kScale, kScaleShift };

struct DepthReport {
  double abs_rel = 0;
  double delta = 1;              // fraction with max(D/D*, D*/D) < 1.25
  Index excluded_pixels = 0;     // masked pixels with non-positive gt
  nlohmann::json to_json() const;
};

// pred, gt, mask: N x H x W. Scale mode: s = median(D* / D); scale-shift: least squares
// (s, b) of s D + b against D*. per_sequence fits one alignment over all views, otherwise
// each view is aligned and scored separately and the scores are averaged.
DepthReport depth_metrics(const Tensor<double>& pred, const Tensor<double>& gt, const Tensor<double>& mask,
                          DepthAlign mode, bool per_sequence);

}  // namespace zipmap
