#include "zipmap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace zipmap {
namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

// Angle between two vectors via atan2 of the half-difference, exact at zero.
double unit_angle(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return 2.0 * std::atan2((a - b).norm(), (a + b).norm());
}

double direction_angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double na = a.norm(), nb = b.norm();
  if (na < 1e-12 && nb < 1e-12) return 0.0;
  if (na < 1e-12 || nb < 1e-12) return 90.0;
  return unit_angle(a / na, b / nb) * kDeg;
}

struct RelativePose {
  Eigen::Quaterniond rotation;
  Eigen::Vector3d translation;
};

// T_b T_a^-1 for world-to-camera poses.
RelativePose relative(const Camerad& a, const Camerad& b) {
  RelativePose r;
  r.rotation = b.rotation * a.rotation.conjugate();
  r.translation = b.translation - r.rotation * a.translation;
  return r;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void check_pair(const std::vector<Camerad>& pred, const std::vector<Camerad>& gt, const char* what) {
  if (pred.size() != gt.size())
    throw UsageError(std::string(what) + ": " + std::to_string(pred.size()) + " predicted vs " +
                     std::to_string(gt.size()) + " gt cameras");
  if (pred.size() < 2) throw UsageError(std::string(what) + ": needs at least 2 views");
}

double rms_distance(const PointMatrix& a, const PointMatrix& b) {
  return std::sqrt((a - b).rowwise().squaredNorm().mean());
}

}  // namespace

double rotation_error_deg(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b) {
  const Eigen::Vector4d u = a.coeffs().normalized(), v = b.coeffs().normalized();
  // q and -q are the same rotation; the rotation angle is twice the quaternion angle.
  const double d = std::min((u - v).norm(), (u + v).norm());
  const double s = std::max((u - v).norm(), (u + v).norm());
  return 4.0 * std::atan2(d, s) * kDeg;
}

nlohmann::json TrajectoryReport::to_json() const {
  return {{"ate_rmse", ate_rmse}, {"rpe_trans", rpe_trans}, {"rpe_rot", rpe_rot}};
}

TrajectoryReport ate_rpe(const std::vector<Camerad>& pred, const std::vector<Camerad>& gt) {
  check_pair(pred, gt, "ate_rpe");
  const Index n = static_cast<Index>(pred.size());
  PointMatrix cp(n, 3), cg(n, 3);
  for (Index i = 0; i < n; ++i) {
    cp.row(i) = pred[i].center().transpose();
    cg.row(i) = gt[i].center().transpose();
  }
  Similarity<double> align;
  try {
    align = umeyama_align<double>(cp, cg, true);
  } catch (const DegenerateInputError&) {
    align = align_camera_sets(pred, gt);
  }
  // Identity is also a similarity; keep it when it is at least as good.
  if (rms_distance(cp, cg) <= rms_distance(align.apply_rows(cp), cg)) align = Similarity<double>{};

  TrajectoryReport r;
  r.ate_rmse = rms_distance(align.apply_rows(cp), cg);
  for (Index i = 0; i + 1 < n; ++i) {
    const auto p = relative(pred[i], pred[i + 1]);
    const auto g = relative(gt[i], gt[i + 1]);
    r.rpe_trans += (align.scale * p.translation - g.translation).norm();
    r.rpe_rot += rotation_error_deg(p.rotation, g.rotation);
  }
  r.rpe_trans /= static_cast<double>(n - 1);
  r.rpe_rot /= static_cast<double>(n - 1);
  return r;
}

std::vector<double> pairwise_pose_errors(const std::vector<Camerad>& pred, const std::vector<Camerad>& gt) {
  check_pair(pred, gt, "pose_auc");
  std::vector<double> errors;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < pred.size(); ++j) {
      if (i == j) continue;
      const auto p = relative(pred[i], pred[j]);
      const auto g = relative(gt[i], gt[j]);
      errors.push_back(std::max(rotation_error_deg(p.rotation, g.rotation),
                                direction_angle_deg(p.translation, g.translation)));
    }
  return errors;
}

std::map<int, double> pose_auc_from_errors(const std::vector<double>& errors, const std::vector<int>& thresholds) {
  std::map<int, double> out;
  for (int tau : thresholds) {
    if (tau < 1) throw UsageError("pose_auc: thresholds must be positive integers");
    double acc = 0;
    for (int t = 1; t <= tau; ++t) {
      const auto hits = std::count_if(errors.begin(), errors.end(), [t](double e) { return e < t; });
      acc += errors.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(errors.size());
    }
    out[tau] = 100.0 * acc / tau;
  }
  return out;
}

std::map<int, double> pose_auc(const std::vector<Camerad>& pred, const std::vector<Camerad>& gt,
                               const std::vector<int>& thresholds) {
  return pose_auc_from_errors(pairwise_pose_errors(pred, gt), thresholds);
}

// ---- kd-tree ----------------------------------------------------------------------

KdTree::KdTree(PointMatrix points) : points_(std::move(points)) {
  std::vector<Index> idx(static_cast<std::size_t>(points_.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  nodes_.reserve(idx.size());
  root_ = build(idx, 0, idx.size(), 0);
}

Index KdTree::build(std::vector<Index>& idx, std::size_t lo, std::size_t hi, int depth) {
  if (lo >= hi) return -1;
  const int axis = depth % 3;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::nth_element(idx.begin() + static_cast<std::ptrdiff_t>(lo), idx.begin() + static_cast<std::ptrdiff_t>(mid),
                   idx.begin() + static_cast<std::ptrdiff_t>(hi), [&](Index a, Index b) {
                     const double va = points_(a, axis), vb = points_(b, axis);
                     return va < vb || (va == vb && a < b);
                   });
  const Index self = static_cast<Index>(nodes_.size());
  nodes_.push_back({idx[mid], axis, -1, -1});
  const Index left = build(idx, lo, mid, depth + 1);
  const Index right = build(idx, mid + 1, hi, depth + 1);
  nodes_[self].left = left;
  nodes_[self].right = right;
  return self;
}

void KdTree::search(Index node, const Eigen::Vector3d& q, Hit& best, double& best_sq) const {
  if (node < 0) return;
  const Node& nd = nodes_[node];
  const double d_sq = (points_.row(nd.point).transpose() - q).squaredNorm();
  if (d_sq < best_sq || (d_sq == best_sq && nd.point < best.index)) {
    best_sq = d_sq;
    best.index = nd.point;
  }
  const double diff = q(nd.axis) - points_(nd.point, nd.axis);
  const Index near = diff < 0 ? nd.left : nd.right;
  const Index far = diff < 0 ? nd.right : nd.left;
  search(near, q, best, best_sq);
  if (diff * diff <= best_sq) search(far, q, best, best_sq);
}

KdTree::Hit KdTree::nearest(const Eigen::Vector3d& q) const {
  if (root_ < 0) throw UsageError("KdTree: empty point set");
  Hit best;
  double best_sq = std::numeric_limits<double>::infinity();
  search(root_, q, best, best_sq);
  best.distance = std::sqrt(best_sq);
  return best;
}

KdTree::Hit brute_force_nearest(const PointMatrix& points, const Eigen::Vector3d& q) {
  if (points.rows() == 0) throw UsageError("brute_force_nearest: empty point set");
  KdTree::Hit best;
  double best_sq = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < points.rows(); ++i) {
    const double d_sq = (points.row(i).transpose() - q).squaredNorm();
    if (d_sq < best_sq) {
      best_sq = d_sq;
      best.index = i;
    }
  }
  best.distance = std::sqrt(best_sq);
  return best;
}

// ---- chamfer ----------------------------------------------------------------------

nlohmann::json PointCloudReport::to_json() const {
  return {{"acc_mean", acc_mean},   {"acc_median", acc_median}, {"comp_mean", comp_mean},
          {"comp_median", comp_median}, {"nc_mean", nc_mean},   {"nc_median", nc_median}};
}

namespace {

PointMatrix unit_rows(const PointMatrix& n) {
  PointMatrix out = n;
  for (Index i = 0; i < out.rows(); ++i) {
    const double len = out.row(i).norm();
    if (len > 0) out.row(i) /= len;
  }
  return out;
}

struct Matches {
  std::vector<Index> index;
  std::vector<double> distance;
  double rms = 0;
};

Matches match(const KdTree& tree, const PointMatrix& queries) {
  Matches m;
  m.index.resize(static_cast<std::size_t>(queries.rows()));
  m.distance.resize(m.index.size());
  double sq = 0;
  for (Index i = 0; i < queries.rows(); ++i) {
    const auto hit = tree.nearest(queries.row(i).transpose());
    m.index[i] = hit.index;
    m.distance[i] = hit.distance;
    sq += hit.distance * hit.distance;
  }
  m.rms = std::sqrt(sq / static_cast<double>(queries.rows()));
  return m;
}

double normal_consistency(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double d = std::min((a - b).squaredNorm(), (a + b).squaredNorm());
  return std::clamp(1.0 - 0.5 * d, 0.0, 1.0);
}

}  // namespace

PointCloudReport chamfer_metrics(const PointMatrix& pred, const PointMatrix& pred_normals, const PointMatrix& gt,
                                 const PointMatrix& gt_normals, const ChamferOptions& options) {
  if (pred.rows() == 0 || gt.rows() == 0) throw UsageError("chamfer_metrics: point clouds must be non-empty");
  if (pred_normals.rows() != pred.rows() || gt_normals.rows() != gt.rows())
    throw ShapeError("chamfer_metrics: one normal per point required");
  if (options.icp_iters < 0) throw UsageError("chamfer_metrics: icp_iters must be >= 0");

  PointMatrix p = pred;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  auto apply = [&](const Similarity<double>& s) {
    p = s.apply_rows(p);
    rotation = s.rotation * rotation;
  };
  if (options.corresponding && pred.rows() == gt.rows()) {
    try {
      const auto s = umeyama_align<double>(p, gt, true);
      if (rms_distance(s.apply_rows(p), gt) < rms_distance(p, gt)) apply(s);
    } catch (const DegenerateInputError&) {
    }
  }

  const KdTree gt_tree(gt);
  Matches to_gt = match(gt_tree, p);
  for (int it = 0; it < options.icp_iters && to_gt.rms > 0; ++it) {
    PointMatrix target(p.rows(), 3);
    for (Index i = 0; i < p.rows(); ++i) target.row(i) = gt.row(to_gt.index[i]);
    Similarity<double> step;
    try {
      step = umeyama_align<double>(p, target, false);
    } catch (const DegenerateInputError&) {
      break;
    }
    const PointMatrix moved = step.apply_rows(p);
    Matches next = match(gt_tree, moved);
    if (!(next.rms < to_gt.rms)) break;
    p = moved;
    rotation = step.rotation * rotation;
    to_gt = std::move(next);
  }

  const KdTree pred_tree(p);
  const Matches to_pred = match(pred_tree, gt);
  const PointMatrix np = unit_rows(pred_normals * rotation.transpose());
  const PointMatrix ng = unit_rows(gt_normals);
  std::vector<double> nc1(static_cast<std::size_t>(p.rows())), nc2(static_cast<std::size_t>(gt.rows()));
  for (Index i = 0; i < p.rows(); ++i)
    nc1[i] = normal_consistency(np.row(i).transpose(), ng.row(to_gt.index[i]).transpose());
  for (Index i = 0; i < gt.rows(); ++i)
    nc2[i] = normal_consistency(ng.row(i).transpose(), np.row(to_pred.index[i]).transpose());

  PointCloudReport r;
  r.acc_mean = mean(to_gt.distance);
  r.acc_median = median(to_gt.distance);
  r.comp_mean = mean(to_pred.distance);
  r.comp_median = median(to_pred.distance);
  r.nc_mean = 0.5 * (mean(nc1) + mean(nc2));
  r.nc_median = 0.5 * (median(nc1) + median(nc2));
  return r;
}

// ---- depth ------------------------------------------------------------------------

nlohmann::json DepthReport::to_json() const {
  return {{"abs_rel", abs_rel}, {"delta_1_25", delta}, {"excluded_pixels", excluded_pixels}};
}

namespace {

struct DepthSample {
  std::vector<double> pred, gt;
};

struct Scores {
  double abs_rel = 0, delta = 0;
};

Scores score(const DepthSample& s, DepthAlign mode) {
  const std::size_t n = s.pred.size();
  double scale = 1, shift = 0;
  if (mode == DepthAlign::kScale) {
    std::vector<double> ratios;
    for (std::size_t i = 0; i < n; ++i)
      if (s.pred[i] > 0) ratios.push_back(s.gt[i] / s.pred[i]);
    if (ratios.empty()) throw DegenerateInputError("depth_metrics: no positive predicted depth to align");
    scale = median(ratios);
  } else {
    const Eigen::Map<const Eigen::VectorXd> d(s.pred.data(), static_cast<Index>(n));
    const Eigen::Map<const Eigen::VectorXd> g(s.gt.data(), static_cast<Index>(n));
    const double md = d.mean(), mg = g.mean();
    const double var = (d.array() - md).square().sum();
    scale = var > 0 ? ((d.array() - md) * (g.array() - mg)).sum() / var : 0.0;
    shift = mg - scale * md;
  }
  Scores out;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = scale * s.pred[i] + shift, g = s.gt[i];
    out.abs_rel += std::abs(a - g) / g;
    if (a > 0 && std::max(a / g, g / a) < 1.25) out.delta += 1;
  }
  out.abs_rel /= static_cast<double>(n);
  out.delta /= static_cast<double>(n);
  return out;
}

}  // namespace

DepthReport depth_metrics(const Tensor<double>& pred, const Tensor<double>& gt, const Tensor<double>& mask,
                          DepthAlign mode, bool per_sequence) {
  if (pred.shape() != gt.shape() || mask.shape() != gt.shape() || gt.rank() != 3)
    throw ShapeError("depth_metrics: pred, gt and mask must be N x H x W with equal shapes");
  const Index views = gt.dim(0), per_view = gt.dim(1) * gt.dim(2);
  DepthReport report;
  std::vector<DepthSample> samples(static_cast<std::size_t>(views));
  for (Index v = 0; v < views; ++v)
    for (Index i = v * per_view; i < (v + 1) * per_view; ++i) {
      if (!(mask[i] > 0.5)) continue;
      if (!(gt[i] > 0)) {
        ++report.excluded_pixels;
        continue;
      }
      if (!std::isfinite(pred[i])) continue;
      samples[v].pred.push_back(pred[i]);
      samples[v].gt.push_back(gt[i]);
    }
  if (per_sequence) {
    DepthSample all;
    for (const auto& s : samples) {
      all.pred.insert(all.pred.end(), s.pred.begin(), s.pred.end());
      all.gt.insert(all.gt.end(), s.gt.begin(), s.gt.end());
    }
    if (all.pred.empty()) throw DegenerateInputError("depth_metrics: no valid pixels");
    const auto s = score(all, mode);
    report.abs_rel = s.abs_rel;
    report.delta = s.delta;
    return report;
  }
  Index used = 0;
  report.delta = 0;
  for (const auto& sample : samples) {
    if (sample.pred.empty()) continue;
    const auto s = score(sample, mode);
    report.abs_rel += s.abs_rel;
    report.delta += s.delta;
    ++used;
  }
  if (used == 0) throw DegenerateInputError("depth_metrics: no valid pixels");
  report.abs_rel /= static_cast<double>(used);
  report.delta /= static_cast<double>(used);
  return report;
}

}  // namespace zipmap
