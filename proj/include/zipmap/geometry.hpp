#pragma once

// Pinhole cameras, raymaps, depth/point-map conversion and similarity alignment.
//
// Conventions: extrinsics are world-to-camera (x_cam = R x_world + t); the camera looks
// down +z with x right and y down; focals are normalized by image width/height and the
// principal point sits at the image center; pixel (u, v) has its center at (u + .5, v + .5).

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "zipmap/errors.hpp"
#include "zipmap/tensor.hpp"

namespace zipmap {

template <typename Scalar>
struct Camera {
  using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
  using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

  Eigen::Quaternion<Scalar> rotation = Eigen::Quaternion<Scalar>::Identity();
  Vector3 translation = Vector3::Zero();
  Scalar fx = Scalar(1);
  Scalar fy = Scalar(1);

  static constexpr int kParams = 9;

  Matrix3 rotation_matrix() const { return rotation.toRotationMatrix(); }
  // Camera center in world coordinates, -R^T t.
  Vector3 center() const { return -(rotation_matrix().transpose() * translation); }

  Vector3 world_to_camera(const Vector3& x) const { return rotation * x + translation; }
  Vector3 camera_to_world(const Vector3& x) const { return rotation.conjugate() * (x - translation); }

  // [qw, qx, qy, qz, tx, ty, tz, fx, fy]
  std::array<Scalar, kParams> to_vector() const {
    return {rotation.w(), rotation.x(), rotation.y(), rotation.z(), translation.x(), translation.y(),
            translation.z(), fx, fy};
  }

  // Normalizes the quaternion and fixes its sign to w >= 0; rejects zero quaternions and
  // non-positive focals.
  static Camera from_vector(std::span<const Scalar> v) {
    if (v.size() != kParams) throw ParameterError("camera vector needs 9 entries");
    Camera cam;
    Eigen::Matrix<Scalar, 4, 1> q(v[0], v[1], v[2], v[3]);
    const Scalar n = q.norm();
    if (!(n > Scalar(1e-12)) || !std::isfinite(n)) throw ParameterError("camera quaternion has zero norm");
    q /= n;
    if (q(0) < Scalar(0)) q = -q;
    cam.rotation = Eigen::Quaternion<Scalar>(q(0), q(1), q(2), q(3));
    cam.translation = Vector3(v[4], v[5], v[6]);
    cam.fx = v[7];
    cam.fy = v[8];
    cam.validate();
    return cam;
  }

  void validate() const {
    if (std::abs(rotation.norm() - Scalar(1)) > Scalar(1e-5)) throw ParameterError("camera quaternion is not unit");
    if (rotation.w() < Scalar(0)) throw ParameterError("camera quaternion must have w >= 0");
    if (!(fx > Scalar(0)) || !(fy > Scalar(0))) throw ParameterError("camera focals must be positive");
    if (!translation.allFinite()) throw ParameterError("camera translation is not finite");
  }

  template <typename Other>
  Camera<Other> cast() const {
    Camera<Other> c;
    c.rotation = rotation.template cast<Other>();
    c.translation = translation.template cast<Other>();
    c.fx = static_cast<Other>(fx);
    c.fy = static_cast<Other>(fy);
    return c;
  }

  // Unnormalized ray direction in the camera frame through the center of pixel (u, v);
  // z component is 1.
  Vector3 pixel_direction(Scalar u, Scalar v, Index height, Index width) const {
    if (!(fx > Scalar(0)) || !(fy > Scalar(0))) throw ParameterError("camera focals must be positive");
    const Scalar w = static_cast<Scalar>(width), h = static_cast<Scalar>(height);
    return Vector3((u + Scalar(0.5) - w / 2) / (fx * w), (v + Scalar(0.5) - h / 2) / (fy * h), Scalar(1));
  }
};

using Cameraf = Camera<float>;
using Camerad = Camera<double>;

template <typename Scalar>
Eigen::Quaternion<Scalar> canonical_quaternion(Eigen::Quaternion<Scalar> q) {
  q.normalize();
  if (q.w() < Scalar(0)) q.coeffs() = -q.coeffs();
  return q;
}

// Pose of b expressed relative to a: x_b = R_ab x_a + t_ab in a's camera frame.
template <typename Scalar>
Camera<Scalar> relative_camera(const Camera<Scalar>& a, const Camera<Scalar>& b) {
  Camera<Scalar> rel = b;
  rel.rotation = canonical_quaternion(Eigen::Quaternion<Scalar>(b.rotation * a.rotation.conjugate()));
  rel.translation = b.translation - rel.rotation * a.translation;
  return rel;
}

template <typename Scalar>
Scalar rotation_angle_deg(const Eigen::Matrix<Scalar, 3, 3>& r) {
  const Scalar c = std::clamp((r.trace() - Scalar(1)) / Scalar(2), Scalar(-1), Scalar(1));
  return std::acos(c) * Scalar(180) / std::numbers::pi_v<Scalar>;
}

template <typename Scalar>
Scalar vector_angle_deg(const Eigen::Matrix<Scalar, 3, 1>& a, const Eigen::Matrix<Scalar, 3, 1>& b) {
  const Scalar na = a.norm(), nb = b.norm();
  if (na < Scalar(1e-9) && nb < Scalar(1e-9)) return Scalar(0);
  if (na < Scalar(1e-9) || nb < Scalar(1e-9)) return Scalar(90);
  const Scalar c = std::clamp(a.dot(b) / (na * nb), Scalar(-1), Scalar(1));
  return std::acos(c) * Scalar(180) / std::numbers::pi_v<Scalar>;
}

struct PoseDifference {
  double rot_angle_deg = 0.0;
  double trans_dir_angle_deg = 0.0;
  double trans_norm = 0.0;
};

// Compares two poses: geodesic angle between their rotations, angle between their
// translation directions (0 when both translations vanish, 90 when only one does) and
// the norm of the translation difference.
template <typename Scalar>
PoseDifference relative_pose(const Camera<Scalar>& a, const Camera<Scalar>& b) {
  const Eigen::Matrix<Scalar, 3, 3> r = a.rotation_matrix().transpose() * b.rotation_matrix();
  PoseDifference d;
  d.rot_angle_deg = static_cast<double>(rotation_angle_deg<Scalar>(r));
  d.trans_dir_angle_deg = static_cast<double>(vector_angle_deg<Scalar>(a.translation, b.translation));
  d.trans_norm = static_cast<double>((a.translation - b.translation).norm());
  return d;
}

// H x W x 9 raymap in the world frame: [origin, unit direction, origin x direction].
template <typename T>
Tensor<T> camera_to_raymap(const Camera<T>& cam, Index height, Index width) {
  if (height <= 0 || width <= 0) throw ShapeError("camera_to_raymap: extents must be positive");
  cam.validate();
  Tensor<T> out(Shape{height, width, 9});
  auto data = out.mutable_data();
  const Eigen::Matrix<T, 3, 3> rt = cam.rotation_matrix().transpose();
  const Eigen::Matrix<T, 3, 1> origin = cam.center();
  for (Index v = 0; v < height; ++v) {
    for (Index u = 0; u < width; ++u) {
      const Eigen::Matrix<T, 3, 1> d =
          (rt * cam.pixel_direction(static_cast<T>(u), static_cast<T>(v), height, width)).normalized();
      const Eigen::Matrix<T, 3, 1> m = origin.cross(d);
      T* px = data.data() + (v * width + u) * 9;
      for (int k = 0; k < 3; ++k) {
        px[k] = origin(k);
        px[3 + k] = d(k);
        px[6 + k] = m(k);
      }
    }
  }
  return out;
}

// Depth (z in the camera frame) to an H x W x 3 point map in the camera frame.
template <typename T>
Tensor<T> unproject(const Tensor<T>& depth, const Camera<T>& cam) {
  if (depth.rank() != 2) throw ShapeError("unproject: depth must be H x W");
  if (!(cam.fx > T(0)) || !(cam.fy > T(0))) throw ParameterError("unproject: focal must be positive");
  const Index h = depth.dim(0), w = depth.dim(1);
  Tensor<T> out(Shape{h, w, 3});
  auto data = out.mutable_data();
  for (Index v = 0; v < h; ++v)
    for (Index u = 0; u < w; ++u) {
      const T z = depth[v * w + u];
      const auto dir = cam.pixel_direction(static_cast<T>(u), static_cast<T>(v), h, w);
      for (int k = 0; k < 3; ++k) data[static_cast<std::size_t>((v * w + u) * 3 + k)] = z * dir(k);
    }
  return out;
}

template <typename T>
struct Projection {
  Tensor<T> depth;   // H x W
  Tensor<T> pixels;  // H x W x 2, (u, v) continuous pixel coordinates (centers at .5)
};

// Camera-frame point map back to depth and pixel coordinates.
template <typename T>
Projection<T> project(const Tensor<T>& points, const Camera<T>& cam) {
  if (points.rank() != 3 || points.dim(2) != 3) throw ShapeError("project: points must be H x W x 3");
  if (!(cam.fx > T(0)) || !(cam.fy > T(0))) throw ParameterError("project: focal must be positive");
  const Index h = points.dim(0), w = points.dim(1);
  Projection<T> out{Tensor<T>(Shape{h, w}), Tensor<T>(Shape{h, w, 2})};
  auto depth = out.depth.mutable_data();
  auto pix = out.pixels.mutable_data();
  const T fw = cam.fx * static_cast<T>(w), fh = cam.fy * static_cast<T>(h);
  for (Index i = 0; i < h * w; ++i) {
    const T x = points[i * 3], y = points[i * 3 + 1], z = points[i * 3 + 2];
    depth[static_cast<std::size_t>(i)] = z;
    pix[static_cast<std::size_t>(2 * i)] = fw * x / z + static_cast<T>(w) / 2;
    pix[static_cast<std::size_t>(2 * i + 1)] = fh * y / z + static_cast<T>(h) / 2;
  }
  return out;
}

template <typename Scalar>
struct Similarity {
  Scalar scale = Scalar(1);
  Eigen::Matrix<Scalar, 3, 3> rotation = Eigen::Matrix<Scalar, 3, 3>::Identity();
  Eigen::Matrix<Scalar, 3, 1> translation = Eigen::Matrix<Scalar, 3, 1>::Zero();

  Eigen::Matrix<Scalar, 3, 1> apply(const Eigen::Matrix<Scalar, 3, 1>& x) const {
    return scale * (rotation * x) + translation;
  }
  // Applied to the rows of an N x 3 matrix.
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> apply_rows(const Eigen::Matrix<Scalar, Eigen::Dynamic, 3>& x) const {
    return ((scale * x * rotation.transpose()).rowwise() + translation.transpose()).eval();
  }
};

// Least-squares similarity (or rigid motion) mapping src rows onto dst rows.
template <typename Scalar>
Similarity<Scalar> umeyama_align(const Eigen::Matrix<Scalar, Eigen::Dynamic, 3>& src,
                                 const Eigen::Matrix<Scalar, Eigen::Dynamic, 3>& dst, bool with_scale) {
  using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
  if (src.rows() != dst.rows()) throw ShapeError("umeyama_align: point counts differ");
  const Index n = src.rows();
  if (n < 3) throw DegenerateInputError("umeyama_align: need at least 3 correspondences");
  const Vec3 mu_src = src.colwise().mean().transpose();
  const Vec3 mu_dst = dst.colwise().mean().transpose();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 3> sc = src.rowwise() - mu_src.transpose();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 3> dc = dst.rowwise() - mu_dst.transpose();
  const Scalar var_src = sc.squaredNorm() / static_cast<Scalar>(n);
  const Mat3 cov = dc.transpose() * sc / static_cast<Scalar>(n);

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  const Scalar tol = std::max(sv(0), Scalar(1e-300)) * Scalar(1e-9);
  // A rank-1 covariance means collinear points: rotation about the line is free.
  if (!(var_src > Scalar(0)) || sv(1) <= tol)
    throw DegenerateInputError("umeyama_align: covariance is rank-deficient (collinear or coincident points)");

  Mat3 s = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < Scalar(0)) s(2, 2) = Scalar(-1);
  Similarity<Scalar> out;
  out.rotation = svd.matrixU() * s * svd.matrixV().transpose();
  out.scale = with_scale ? (sv.asDiagonal() * s).trace() / var_src : Scalar(1);
  out.translation = mu_dst - out.scale * out.rotation * mu_src;
  return out;
}

// Similarity taking the world of `src` onto the world of `dst` from whole poses: rotation
// from the chordal mean of R_dst^T R_src, scale from the ratio of camera-center spreads (1
// when the src centers coincide), translation from the center means. Exact when `src` is a
// similarity transform of `dst`; works from 2 views and for collinear centers.
template <typename Scalar>
Similarity<Scalar> align_camera_sets(const std::vector<Camera<Scalar>>& src, const std::vector<Camera<Scalar>>& dst) {
  using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
  using Row3 = Eigen::Matrix<Scalar, 1, 3>;
  if (src.size() != dst.size()) throw ShapeError("align_camera_sets: camera counts differ");
  const Index n = static_cast<Index>(src.size());
  if (n < 2) throw DegenerateInputError("align_camera_sets: needs at least 2 cameras");
  Mat3 acc = Mat3::Zero();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> cs(n, 3), cd(n, 3);
  for (Index i = 0; i < n; ++i) {
    acc += dst[i].rotation_matrix().transpose() * src[i].rotation_matrix();
    cs.row(i) = src[i].center().transpose();
    cd.row(i) = dst[i].center().transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(acc, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < Scalar(0)) d(2, 2) = Scalar(-1);
  Similarity<Scalar> out;
  out.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  const Row3 ms = cs.colwise().mean(), md = cd.colwise().mean();
  const Scalar ss = (cs.rowwise() - ms).squaredNorm(), sd = (cd.rowwise() - md).squaredNorm();
  out.scale = ss > Scalar(1e-18) && sd > Scalar(0) ? std::sqrt(sd / ss) : Scalar(1);
  out.translation = md.transpose() - out.scale * out.rotation * ms.transpose();
  return out;
}

// Cameras re-expressed so that `reference` becomes the identity pose.
template <typename Scalar>
std::vector<Camera<Scalar>> express_in_reference(const std::vector<Camera<Scalar>>& cams,
                                                  const Camera<Scalar>& reference) {
  std::vector<Camera<Scalar>> out;
  out.reserve(cams.size());
  for (const auto& c : cams) out.push_back(relative_camera(reference, c));
  return out;
}

}  // namespace zipmap
