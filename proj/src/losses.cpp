#include "zipmap/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zipmap/ops.hpp"

namespace zipmap {
namespace {

template <typename T>
Tensor<T> zero_like_graph(const Tensor<T>& x) {
  return scale(sum(x), T(0));
}

// Flattens a per-pixel tensor to (count x channels) rows.
template <typename T>
Tensor<T> as_rows(const Tensor<T>& x, Index channels) {
  if (x.numel() % channels != 0) throw ShapeError("loss input size is not a multiple of the channel count");
  return reshape(x, Shape{x.numel() / channels, channels});
}

template <typename T>
std::vector<Index> valid_indices(const Tensor<T>& mask) {
  std::vector<Index> out;
  const auto m = mask.data();
  for (Index i = 0; i < static_cast<Index>(m.size()); ++i)
    if (m[i] > T(0.5)) out.push_back(i);
  return out;
}

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch");
}

// Right multiplication by the quaternion r as a 4x4 matrix acting on row vectors.
Eigen::Matrix4d right_multiply(const Eigen::Quaterniond& r) {
  const double w = r.w(), x = r.x(), y = r.y(), z = r.z();
  Eigen::Matrix4d m;
  m << w, x, y, z,
      -x, w, -z, y,
      -y, z, w, -x,
      -z, -y, x, w;
  return m;
}

}  // namespace

template <typename T>
double roe_scale(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& gt_z, const Tensor<T>& mask) {
  require_same(pred.shape(), gt.shape(), "roe_scale");
  if (pred.numel() != 3 * mask.numel() || gt_z.numel() != mask.numel())
    throw ShapeError("roe_scale: points must have three coordinates per mask entry");
  struct Term {
    double ratio, weight;
  };
  std::vector<Term> terms;
  const auto a = pred.data(), b = gt.data(), z = gt_z.data(), m = mask.data();
  for (Index i = 0; i < mask.numel(); ++i) {
    if (!(m[i] > T(0.5))) continue;
    const double zi = z[i];
    if (!(zi > 0)) throw DegenerateInputError("roe_scale: valid pixel with non-positive gt depth");
    for (Index c = 0; c < 3; ++c) {
      const double ai = a[3 * i + c], bi = b[3 * i + c];
      if (std::abs(ai) < 1e-12) continue;
      terms.push_back({bi / ai, std::abs(ai) / zi});
    }
  }
  if (terms.empty()) throw DegenerateInputError("roe_scale: no valid points");
  std::sort(terms.begin(), terms.end(), [](const Term& l, const Term& r) { return l.ratio < r.ratio; });
  double total = 0;
  for (const auto& t : terms) total += t.weight;
  double cum = 0;
  double s = terms.back().ratio;
  for (const auto& t : terms) {
    cum += t.weight;
    if (cum >= 0.5 * total) {
      s = t.ratio;
      break;
    }
  }
  return std::max(s, 1e-6);
}

template <typename T>
Tensor<T> point_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, T s_hat) {
  require_same(pred.shape(), gt.shape(), "point_loss");
  const auto p = as_rows(pred, 3);
  if (p.rows() != mask.numel()) throw ShapeError("point_loss: mask size differs from point count");
  const auto idx = valid_indices(mask);
  if (idx.empty()) return zero_like_graph(pred);
  const auto g = gather_rows(as_rows(gt.detach(), 3), idx);
  std::vector<T> w(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const T z = g[static_cast<Index>(3 * k + 2)];
    if (!(z > T(0))) throw DegenerateInputError("point_loss: valid pixel with non-positive gt depth");
    w[k] = T(1) / (T(3) * z * static_cast<T>(idx.size()));
  }
  const auto diff = abs(sub(scale(gather_rows(p, idx), s_hat), g));
  return sum(mul_col(diff, Tensor<T>(Shape{static_cast<Index>(idx.size())}, std::move(w))));
}

template <typename T>
Tensor<T> depth_loss(const Tensor<T>& depth, const Tensor<T>& conf, const Tensor<T>& gt_depth, T s_hat,
                     const Tensor<T>& mask, T alpha) {
  require_same(depth.shape(), conf.shape(), "depth_loss");
  require_same(depth.shape(), gt_depth.shape(), "depth_loss");
  if (depth.numel() != mask.numel()) throw ShapeError("depth_loss: mask size differs");
  const auto idx = valid_indices(mask);
  if (idx.empty()) return zero_like_graph(add(depth, conf));
  const auto d = gather_rows(as_rows(depth, 1), idx);
  const auto c = gather_rows(as_rows(conf, 1), idx);
  const auto g = gather_rows(as_rows(gt_depth.detach(), 1), idx);
  const auto per_pixel = sub(mul(abs(sub(scale(d, s_hat), g)), c), scale(log(c), alpha));
  return mean(per_pixel);
}

template <typename T>
Tensor<T> camera_loss(const Tensor<T>& pred, const Tensor<T>& gt, T s_hat) {
  require_same(pred.shape(), gt.shape(), "camera_loss");
  if (pred.rank() != 2 || pred.dim(1) != 9) throw ShapeError("camera_loss: cameras must be N x 9");
  const auto scaled =
      concat_cols<T>({slice_cols(pred, 0, 4), scale(slice_cols(pred, 4, 3), s_hat), slice_cols(pred, 7, 2)});
  return scale(sum(abs(sub(scaled, gt.detach()))), T(1) / static_cast<T>(pred.dim(0)));
}

template <typename T>
Tensor<T> align_cameras(const Tensor<T>& pred, const Similarity<double>& align) {
  if (pred.rank() != 2 || pred.dim(1) != 9) throw ShapeError("align_cameras: cameras must be N x 9");
  const Index n = pred.dim(0);
  const Eigen::Quaterniond qa(align.rotation);
  const auto rq = Tensor<T>::from_eigen(right_multiply(qa.conjugate()));
  const auto q = matmul(slice_cols(pred, 0, 4), rq);
  // Sign fix to w >= 0 as a constant per-row factor.
  std::vector<T> sign(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) sign[i] = q[i * 4] < T(0) ? T(-1) : T(1);
  const auto q_fixed = mul_col(q, Tensor<T>(Shape{n}, std::move(sign)));
  std::vector<T> ta(static_cast<std::size_t>(3 * n));
  for (Index i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) ta[3 * i + c] = static_cast<T>(align.translation(c));
  const auto t = sub(scale(slice_cols(pred, 4, 3), static_cast<T>(align.scale)),
                     quat_rotate(q_fixed, Tensor<T>(Shape{n, 3}, std::move(ta))));
  return concat_cols<T>({q_fixed, t, slice_cols(pred, 7, 2)});
}

template <typename T>
Similarity<double> camera_alignment(const Tensor<T>& pred, const Tensor<T>& gt) {
  require_same(pred.shape(), gt.shape(), "camera_alignment");
  if (pred.rank() != 2 || pred.dim(1) != 9) throw ShapeError("camera_alignment: cameras must be N x 9");
  auto poses = [](const Tensor<T>& cams) {
    std::vector<Camerad> out;
    for (Index i = 0; i < cams.dim(0); ++i) {
      const auto row = cams.data().subspan(static_cast<std::size_t>(9 * i), 9);
      Camerad c;
      c.rotation = Eigen::Quaterniond(row[0], row[1], row[2], row[3]).normalized();
      c.translation = Eigen::Vector3d(row[4], row[5], row[6]);
      out.push_back(c);
    }
    return out;
  };
  return align_camera_sets(poses(pred), poses(gt));
}

template <typename T>
Tensor<T> camera_loss_refless(const Tensor<T>& pred, const Tensor<T>& gt) {
  const auto align = camera_alignment(pred, gt);
  return camera_loss(align_cameras(pred, align), gt, T(1));
}

template <typename T>
Tensor<T> normal_loss(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& mask, T eps,
                      Index* valid_pixels) {
  require_same(pred.shape(), gt.shape(), "normal_loss");
  if (pred.rank() != 4 || pred.dim(3) != 3) throw ShapeError("normal_loss: points must be N x H x W x 3");
  const Index n = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
  if (mask.numel() != n * h * w) throw ShapeError("normal_loss: mask size differs");
  const auto m = mask.data();
  const auto g = gt.data();
  auto gt_point = [&](Index i) { return Eigen::Vector3d(g[3 * i], g[3 * i + 1], g[3 * i + 2]); };
  std::vector<Index> base, right, down;
  std::vector<T> gt_normals;
  for (Index v = 0; v < n; ++v)
    for (Index y = 0; y + 1 < h; ++y)
      for (Index x = 0; x + 1 < w; ++x) {
        const Index i = (v * h + y) * w + x;
        if (!(m[i] > T(0.5) && m[i + 1] > T(0.5) && m[i + w] > T(0.5))) continue;
        const Eigen::Vector3d a = gt_point(i);
        const Eigen::Vector3d nrm = (gt_point(i + 1) - a).cross(gt_point(i + w) - a);
        const double len = nrm.norm();
        if (!(len > 1e-12)) continue;
        base.push_back(i);
        right.push_back(i + 1);
        down.push_back(i + w);
        for (int c = 0; c < 3; ++c) gt_normals.push_back(static_cast<T>(nrm(c) / len));
      }
  if (valid_pixels) *valid_pixels = static_cast<Index>(base.size());
  if (base.empty()) return zero_like_graph(pred);
  const auto p = as_rows(pred, 3);
  const auto a = gather_rows(p, base);
  // Cross products of short edges have tiny norms, so the guard must sit far below them.
  const auto normal = l2_normalize(cross3(sub(gather_rows(p, right), a), sub(gather_rows(p, down), a)), T(1e-30));
  const Tensor<T> target(Shape{static_cast<Index>(base.size()), 3}, std::move(gt_normals));
  return mean(arccos_clamped(row_sum(mul(normal, target)), eps));
}

template <typename T>
Tensor<T> depth_grad_loss(const Tensor<T>& depth, const Tensor<T>& conf, const Tensor<T>& gt_depth, T s_hat,
                          const Tensor<T>& mask) {
  require_same(depth.shape(), conf.shape(), "depth_grad_loss");
  require_same(depth.shape(), gt_depth.shape(), "depth_grad_loss");
  if (depth.rank() != 3) throw ShapeError("depth_grad_loss: depth must be N x H x W");
  const Index n = depth.dim(0), h = depth.dim(1), w = depth.dim(2);
  if (mask.numel() != n * h * w) throw ShapeError("depth_grad_loss: mask size differs");
  const auto m = mask.data();
  std::vector<Index> first, second;
  for (Index v = 0; v < n; ++v)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index i = (v * h + y) * w + x;
        if (!(m[i] > T(0.5))) continue;
        if (x + 1 < w && m[i + 1] > T(0.5)) {
          first.push_back(i);
          second.push_back(i + 1);
        }
        if (y + 1 < h && m[i + w] > T(0.5)) {
          first.push_back(i);
          second.push_back(i + w);
        }
      }
  if (first.empty()) return zero_like_graph(add(depth, conf));
  const auto d = as_rows(depth, 1);
  const auto g = as_rows(gt_depth.detach(), 1);
  const auto pred_grad = scale(sub(gather_rows(d, second), gather_rows(d, first)), s_hat);
  const auto gt_grad = sub(gather_rows(g, second), gather_rows(g, first));
  return mean(mul(abs(sub(pred_grad, gt_grad)), gather_rows(as_rows(conf, 1), first)));
}

template <typename T>
QueryLoss<T> query_losses(const Tensor<T>& rgb, const Tensor<T>& depth, const Tensor<T>& conf,
                          const Tensor<T>& gt_rgb, const Tensor<T>& gt_depth, const Tensor<T>& mask) {
  require_same(rgb.shape(), gt_rgb.shape(), "query_losses");
  QueryLoss<T> out;
  out.color = scale(mean(square(sub(rgb, gt_rgb.detach()))), T(kColorWeight));
  out.depth = depth_loss(depth, conf, gt_depth, T(1), mask);
  return out;
}

namespace {

struct Normalized {
  std::vector<Camerad> cameras;  // all selected views, reference frame, divided
  double divisor = 1.0;
};

// Cameras of `inputs` then `queries`, re-expressed in inputs[0]'s frame and divided.
Normalized normalize_views(const SceneBundle& bundle, const std::vector<Index>& inputs,
                           const std::vector<Index>& queries, ScaleMode mode) {
  if (inputs.empty()) throw UsageError("normalization needs at least one input view");
  for (Index v : inputs)
    if (v < 0 || v >= bundle.view_count()) throw UsageError("view index " + std::to_string(v) + " out of range");
  for (Index v : queries)
    if (v < 0 || v >= bundle.view_count()) throw UsageError("view index " + std::to_string(v) + " out of range");
  const Camerad& ref = bundle.views[inputs.front()].camera;
  Normalized out;
  for (Index v : inputs) out.cameras.push_back(relative_camera(ref, bundle.views[v].camera));
  for (Index v : queries) out.cameras.push_back(relative_camera(ref, bundle.views[v].camera));

  if (mode == ScaleMode::kMeanPointNorm) {
    double total = 0;
    Index count = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const View& view = bundle.views[inputs[k]];
      const auto local = unproject(view.depth.cast<double>(), view.camera);
      const auto m = view.mask.data();
      for (Index i = 0; i < view.mask.numel(); ++i) {
        if (!(m[i] > 0.5f)) continue;
        const Eigen::Vector3d x(local[3 * i], local[3 * i + 1], local[3 * i + 2]);
        total += out.cameras[k].camera_to_world(x).norm();
        ++count;
      }
    }
    if (count == 0) throw DegenerateInputError("normalization: no valid pixels in the input views");
    out.divisor = total / static_cast<double>(count);
  } else {
    double best = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) best = std::max(best, out.cameras[k].center().norm());
    if (!(best > 1e-12)) throw DegenerateInputError("normalization: input camera centers coincide");
    out.divisor = best;
  }
  if (!(out.divisor > 1e-12) || !std::isfinite(out.divisor))
    throw DegenerateInputError("normalization: degenerate scene scale");
  for (auto& c : out.cameras) c.translation /= out.divisor;
  return out;
}

Tensor<float> divided(const Tensor<float>& x, double divisor) {
  Tensor<float> out = x.clone();
  for (auto& v : out.mutable_data()) v = static_cast<float>(v / divisor);
  return out;
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  Shape shape = parts.front().shape();
  shape.insert(shape.begin(), static_cast<Index>(parts.size()));
  std::vector<T> data;
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor<T>(shape, std::move(data));
}

}  // namespace

SceneBundle normalize_ground_truth(const SceneBundle& bundle) {
  std::vector<Index> all(static_cast<std::size_t>(bundle.view_count()));
  std::iota(all.begin(), all.end(), Index{0});
  const auto norm = normalize_views(bundle, all, {}, ScaleMode::kMeanPointNorm);
  SceneBundle out = bundle;
  out.scale = bundle.scale * norm.divisor;
  for (std::size_t k = 0; k < all.size(); ++k) {
    out.views[k].camera = norm.cameras[k];
    out.views[k].depth = divided(bundle.views[k].depth, norm.divisor);
  }
  return out;
}

template <typename T>
Batch<T> make_batch(const SceneBundle& bundle, const std::vector<Index>& inputs, const std::vector<Index>& queries,
                    ScaleMode mode) {
  const auto norm = normalize_views(bundle, inputs, queries, mode);
  const Index h = bundle.height, w = bundle.width;
  Batch<T> batch;
  std::vector<Tensor<T>> images, depth, mask, points;
  std::vector<T> cams;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const View& view = bundle.views[inputs[k]];
    const auto d = divided(view.depth, norm.divisor).cast<double>();
    images.push_back(view.image.cast<T>());
    depth.push_back(d.cast<T>());
    mask.push_back(view.mask.cast<T>());
    points.push_back(unproject(d, norm.cameras[k]).template cast<T>());
    for (double x : norm.cameras[k].to_vector()) cams.push_back(static_cast<T>(x));
  }
  batch.images = stack(images);
  batch.depth = stack(depth);
  batch.mask = stack(mask);
  batch.points = stack(points);
  batch.cameras = Tensor<T>(Shape{static_cast<Index>(inputs.size()), 9}, std::move(cams));
  if (!queries.empty()) {
    std::vector<Camerad> qcams(norm.cameras.begin() + static_cast<std::ptrdiff_t>(inputs.size()), norm.cameras.end());
    std::vector<Tensor<T>> rgb, qdepth, qmask;
    for (Index v : queries) {
      const View& view = bundle.views[v];
      rgb.push_back(view.image.cast<T>());
      qdepth.push_back(divided(view.depth, norm.divisor).cast<T>());
      qmask.push_back(view.mask.cast<T>());
    }
    batch.query_raymaps = raymaps_for<T>(qcams, h, w);
    batch.query_rgb = stack(rgb);
    batch.query_depth = stack(qdepth);
    batch.query_mask = stack(qmask);
  }
  return batch;
}

template <typename T>
nlohmann::json LossReport<T>::to_json() const {
  nlohmann::json j = components;
  j["scale_hat"] = scale_hat;
  return j;
}

template <typename T>
LossReport<T> compute_losses(const Prediction<T>& pred, const Batch<T>& batch, const LossOptions& options) {
  if (pred.views != batch.views()) throw ShapeError("compute_losses: prediction and batch view counts differ");
  LossReport<T> report;
  report.scale_hat = roe_scale(pred.points.detach(), batch.points, batch.depth, batch.mask);
  const T s = static_cast<T>(report.scale_hat);

  std::vector<std::pair<std::string, Tensor<T>>> terms;
  terms.emplace_back("point", point_loss(pred.points, batch.points, batch.mask, s));
  terms.emplace_back("depth", depth_loss(pred.depth, pred.conf, batch.depth, s, batch.mask));
  terms.emplace_back("camera", scale(options.reference_view ? camera_loss(pred.cameras, batch.cameras, s)
                                                            : camera_loss_refless(pred.cameras, batch.cameras),
                                     T(kCameraWeight)));
  if (options.normal)
    terms.emplace_back("normal", normal_loss(pred.points, batch.points, batch.mask, static_cast<T>(options.normal_eps)));
  if (options.depth_grad)
    terms.emplace_back("depth_grad", depth_grad_loss(pred.depth, pred.conf, batch.depth, s, batch.mask));
  if (options.query) {
    if (pred.query_views == 0 || batch.query_views() == 0)
      throw UsageError("compute_losses: query loss requested without query views");
    if (pred.query_views != batch.query_views())
      throw ShapeError("compute_losses: prediction and batch query counts differ");
    auto q = query_losses(pred.query_rgb, pred.query_depth, pred.query_conf, batch.query_rgb, batch.query_depth,
                          batch.query_mask);
    terms.emplace_back("query_color", q.color);
    terms.emplace_back("query_depth", q.depth);
  }
  Tensor<T> total = terms.front().second;
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k].second);
  for (const auto& [name, value] : terms) report.components[name] = static_cast<double>(value.item());
  report.total = total;
  report.components["total"] = static_cast<double>(total.item());
  return report;
}

#define ZIPMAP_INSTANTIATE_LOSSES(T)                                                                              \
  template double roe_scale(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> point_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                         \
  template Tensor<T> depth_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, const Tensor<T>&, T);    \
  template Tensor<T> camera_loss(const Tensor<T>&, const Tensor<T>&, T);                                          \
  template Tensor<T> align_cameras(const Tensor<T>&, const Similarity<double>&);                                  \
  template Similarity<double> camera_alignment(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> camera_loss_refless(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> normal_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, Index*);                \
  template Tensor<T> depth_grad_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, const Tensor<T>&);  \
  template QueryLoss<T> query_losses(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                     const Tensor<T>&, const Tensor<T>&);                                         \
  template Batch<T> make_batch(const SceneBundle&, const std::vector<Index>&, const std::vector<Index>&,           \
                               ScaleMode);                                                                        \
  template struct LossReport<T>;                                                                                  \
  template LossReport<T> compute_losses(const Prediction<T>&, const Batch<T>&, const LossOptions&);

ZIPMAP_INSTANTIATE_LOSSES(float)
ZIPMAP_INSTANTIATE_LOSSES(double)

}  // namespace zipmap
