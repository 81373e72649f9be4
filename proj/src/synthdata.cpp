#include "zipmap/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "zipmap/rng.hpp"
#include "zipmap/zten.hpp"

namespace zipmap {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kEps = 1e-9;

Eigen::Vector3d shade(const Eigen::Vector3d& albedo, const Eigen::Vector3d& normal, const Eigen::Vector3d& light) {
  const double lambert = std::max(0.0, normal.dot(light));
  return (albedo * (0.35 + 0.65 * lambert)).cwiseMax(0.0).cwiseMin(1.0);
}

int parity(double v) { return static_cast<int>(std::floor(v)) & 1; }

Eigen::Vector3d object_albedo(const SceneObject& obj, const Eigen::Vector3d& p) {
  if (obj.kind == SceneObject::Kind::kBox) {
    const Eigen::Vector3d q = p / obj.texture_scale;
    return ((parity(q.x()) + parity(q.y()) + parity(q.z())) & 1) ? obj.color_a : obj.color_b;
  }
  const double r = obj.size.x();
  const double s = std::clamp((p.z() - (obj.center.z() - r)) / (2.0 * r), 0.0, 1.0);
  const double stripes = 0.5 + 0.5 * std::sin(std::atan2(p.y() - obj.center.y(), p.x() - obj.center.x()) * 4.0);
  return (1.0 - s) * obj.color_a + s * obj.color_b * (0.6 + 0.4 * stripes);
}

std::optional<RayHit> intersect_box(const SceneObject& obj, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  const Eigen::Vector3d lo = obj.center - obj.size, hi = obj.center + obj.size;
  double t_near = -1e300, t_far = 1e300;
  int axis = -1;
  double sign = 0.0;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d(k)) < 1e-15) {
      if (o(k) < lo(k) || o(k) > hi(k)) return std::nullopt;
      continue;
    }
    double t0 = (lo(k) - o(k)) / d(k), t1 = (hi(k) - o(k)) / d(k);
    double s = -1.0;
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis = k;
      sign = s;
    }
    t_far = std::min(t_far, t1);
  }
  if (axis < 0 || t_near > t_far || t_near <= kEps) return std::nullopt;
  RayHit hit;
  hit.t = t_near;
  hit.point = o + t_near * d;
  hit.normal = Eigen::Vector3d::Zero();
  hit.normal(axis) = sign;
  return hit;
}

std::optional<RayHit> intersect_sphere(const SceneObject& obj, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  const Eigen::Vector3d oc = o - obj.center;
  const double a = d.squaredNorm(), b = oc.dot(d), c = oc.squaredNorm() - obj.size.x() * obj.size.x();
  const double disc = b * b - a * c;
  if (disc < 0) return std::nullopt;
  const double sq = std::sqrt(disc);
  double t = (-b - sq) / a;
  if (t <= kEps) return std::nullopt;
  RayHit hit;
  hit.t = t;
  hit.point = o + t * d;
  hit.normal = (hit.point - obj.center).normalized();
  return hit;
}

Camerad look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double focal) {
  const Eigen::Vector3d f = (target - eye).normalized();
  const Eigen::Vector3d x = f.cross(Eigen::Vector3d::UnitZ()).normalized();
  const Eigen::Vector3d y = f.cross(x);
  Eigen::Matrix3d r;
  r.row(0) = x.transpose();
  r.row(1) = y.transpose();
  r.row(2) = f.transpose();
  Camerad cam;
  cam.rotation = canonical_quaternion(Eigen::Quaterniond(r));
  cam.translation = -(cam.rotation_matrix() * eye);
  cam.fx = cam.fy = focal;
  return cam;
}

Eigen::Vector3d random_color(Rng& rng) { return {rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95)}; }

json vec_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }
Eigen::Vector3d json_vec(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

json geometry_json(const SceneGeometry& g) {
  json objects = json::array();
  for (const auto& o : g.objects) {
    objects.push_back({{"kind", o.kind == SceneObject::Kind::kBox ? "box" : "sphere"},
                       {"center", vec_json(o.center)},
                       {"size", vec_json(o.size)},
                       {"color_a", vec_json(o.color_a)},
                       {"color_b", vec_json(o.color_b)},
                       {"texture_scale", o.texture_scale}});
  }
  return {{"ground_half_size", g.ground_half_size}, {"checker_size", g.checker_size},
          {"ground_a", vec_json(g.ground_a)},        {"ground_b", vec_json(g.ground_b)},
          {"light_dir", vec_json(g.light_dir)},      {"objects", objects}};
}

SceneGeometry geometry_from_json(const json& j) {
  SceneGeometry g;
  g.ground_half_size = j.at("ground_half_size").get<double>();
  g.checker_size = j.at("checker_size").get<double>();
  g.ground_a = json_vec(j.at("ground_a"));
  g.ground_b = json_vec(j.at("ground_b"));
  g.light_dir = json_vec(j.at("light_dir"));
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    const auto kind = o.at("kind").get<std::string>();
    if (kind != "box" && kind != "sphere") throw FormatError("unknown scene object kind '" + kind + "'");
    obj.kind = kind == "box" ? SceneObject::Kind::kBox : SceneObject::Kind::kSphere;
    obj.center = json_vec(o.at("center"));
    obj.size = json_vec(o.at("size"));
    obj.color_a = json_vec(o.at("color_a"));
    obj.color_b = json_vec(o.at("color_b"));
    obj.texture_scale = o.at("texture_scale").get<double>();
    g.objects.push_back(obj);
  }
  return g;
}

std::string view_file(std::size_t index, const char* what) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "view_%03zu_%s.zten", index, what);
  return buf;
}

}  // namespace

std::optional<RayHit> intersect(const SceneGeometry& geometry, const Eigen::Vector3d& origin,
                                const Eigen::Vector3d& dir, double max_t) {
  std::optional<RayHit> best;
  if (std::abs(dir.z()) > 1e-15) {
    const double t = -origin.z() / dir.z();
    if (t > kEps && t < max_t) {
      const Eigen::Vector3d p = origin + t * dir;
      if (std::abs(p.x()) <= geometry.ground_half_size && std::abs(p.y()) <= geometry.ground_half_size) {
        RayHit hit;
        hit.t = t;
        hit.point = p;
        hit.normal = Eigen::Vector3d::UnitZ();
        const int c = (parity(p.x() / geometry.checker_size) + parity(p.y() / geometry.checker_size)) & 1;
        hit.albedo = c ? geometry.ground_a : geometry.ground_b;
        hit.surface = -1;
        best = hit;
      }
    }
  }
  for (std::size_t i = 0; i < geometry.objects.size(); ++i) {
    const auto& obj = geometry.objects[i];
    auto hit = obj.kind == SceneObject::Kind::kBox ? intersect_box(obj, origin, dir) : intersect_sphere(obj, origin, dir);
    if (hit && hit->t < max_t && (!best || hit->t < best->t)) {
      hit->albedo = object_albedo(obj, hit->point);
      hit->surface = static_cast<int>(i);
      best = hit;
    }
  }
  return best;
}

double surface_residual(const SceneGeometry& geometry, const Eigen::Vector3d& p) {
  double best = 1e300;
  if (std::abs(p.x()) <= geometry.ground_half_size + 1e-9 && std::abs(p.y()) <= geometry.ground_half_size + 1e-9)
    best = std::abs(p.z());
  for (const auto& obj : geometry.objects) {
    double d;
    if (obj.kind == SceneObject::Kind::kSphere) {
      d = std::abs((p - obj.center).norm() - obj.size.x());
    } else {
      const Eigen::Vector3d q = (p - obj.center).cwiseAbs() - obj.size;
      d = std::abs(q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0));
    }
    best = std::min(best, d);
  }
  return best;
}

std::optional<double> trace_depth(const SceneGeometry& geometry, const Camerad& cam, double u, double v,
                                  Index height, Index width) {
  const Eigen::Vector3d dir_cam = cam.pixel_direction(u - 0.5, v - 0.5, height, width);
  const Eigen::Vector3d dir = cam.rotation_matrix().transpose() * dir_cam;
  auto hit = intersect(geometry, cam.center(), dir);
  if (!hit) return std::nullopt;
  return hit->t;  // dir_cam.z() == 1, so the ray parameter is the camera-frame depth
}

View render_view(const SceneGeometry& geometry, const Camerad& camera, Index height, Index width) {
  View view;
  view.camera = camera;
  view.image = Tensor<float>(Shape{height, width, 3});
  view.depth = Tensor<float>(Shape{height, width});
  view.mask = Tensor<float>(Shape{height, width});
  auto image = view.image.mutable_data();
  auto depth = view.depth.mutable_data();
  auto mask = view.mask.mutable_data();
  const Eigen::Matrix3d rt = camera.rotation_matrix().transpose();
  const Eigen::Vector3d origin = camera.center();
  const Eigen::Vector3d light = geometry.light_dir.normalized();
  const Eigen::Vector3d sky(0.55, 0.7, 0.9);
  for (Index v = 0; v < height; ++v) {
    for (Index u = 0; u < width; ++u) {
      const std::size_t p = static_cast<std::size_t>(v * width + u);
      const Eigen::Vector3d dir = rt * camera.pixel_direction(static_cast<double>(u), static_cast<double>(v), height, width);
      const auto hit = intersect(geometry, origin, dir);
      Eigen::Vector3d color = sky * (0.8 + 0.2 * static_cast<double>(v) / static_cast<double>(height));
      if (hit) {
        color = shade(hit->albedo, hit->normal, light);
        depth[p] = static_cast<float>(hit->t);
        mask[p] = 1.0f;
      }
      for (int k = 0; k < 3; ++k) image[3 * p + static_cast<std::size_t>(k)] = static_cast<float>(color(k));
    }
  }
  return view;
}

SceneBundle generate_scene(std::uint64_t seed, int n_views, Index height, Index width, int difficulty,
                           const SceneOptions& options) {
  if (n_views < 2) throw UsageError("generate_scene: need at least 2 views, got " + std::to_string(n_views));
  if (height <= 0 || width <= 0) throw ShapeError("generate_scene: extents must be positive");
  if (difficulty < 0 || difficulty > 2) throw UsageError("generate_scene: difficulty must be 0, 1 or 2");

  Rng rng(seed);
  SceneBundle bundle;
  bundle.height = height;
  bundle.width = width;
  bundle.seed = seed;
  bundle.difficulty = difficulty;

  SceneGeometry& g = bundle.geometry;
  g.checker_size = rng.uniform(0.5, 1.0);
  g.ground_a = random_color(rng);
  g.ground_b = 0.4 * random_color(rng);
  g.light_dir = Eigen::Vector3d(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0).normalized();
  const int n_objects = static_cast<int>(rng.uniform_int(options.min_objects, options.max_objects));
  for (int i = 0; i < n_objects; ++i) {
    SceneObject obj;
    obj.kind = rng.uniform() < 0.5 ? SceneObject::Kind::kBox : SceneObject::Kind::kSphere;
    const double radius = std::sqrt(rng.uniform()) * 2.0, angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    if (obj.kind == SceneObject::Kind::kBox) {
      obj.size = Eigen::Vector3d(rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.8));
      obj.center = Eigen::Vector3d(radius * std::cos(angle), radius * std::sin(angle), obj.size.z());
    } else {
      const double r = rng.uniform(0.3, 0.7);
      obj.size = Eigen::Vector3d(r, r, r);
      obj.center = Eigen::Vector3d(radius * std::cos(angle), radius * std::sin(angle), r);
    }
    obj.color_a = random_color(rng);
    obj.color_b = random_color(rng);
    obj.texture_scale = rng.uniform(0.15, 0.4);
    g.objects.push_back(obj);
  }

  const double arc = options.arc_deg[difficulty] * std::numbers::pi / 180.0;
  const double start = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double orbit = rng.uniform(4.0, 5.5), lift = rng.uniform(1.8, 3.0);
  const double focal = rng.uniform(0.85, 1.05);
  const Eigen::Vector3d target(rng.normal(0.0, 0.25), rng.normal(0.0, 0.25), 0.3 + rng.normal(0.0, 0.1));

  for (int i = 0; i < n_views; ++i) {
    const double base = start + arc * (static_cast<double>(i) / static_cast<double>(n_views - 1) - 0.5);
    bool accepted = false;
    for (int attempt = 0; attempt < options.max_retries && !accepted; ++attempt) {
      const double theta = base + rng.normal(0.0, arc / (4.0 * n_views));
      const double r = orbit + rng.uniform(-0.2, 0.2), h = lift + rng.uniform(-0.2, 0.2);
      const Eigen::Vector3d eye(r * std::cos(theta), r * std::sin(theta), h);
      const Eigen::Vector3d aim = target + Eigen::Vector3d(rng.normal(0.0, 0.1), rng.normal(0.0, 0.1), rng.normal(0.0, 0.05));
      View view = render_view(g, look_at(eye, aim, focal), height, width);
      double valid = 0.0;
      for (float m : view.mask.data()) valid += m;
      if (valid >= options.min_valid_fraction * static_cast<double>(height * width)) {
        bundle.views.push_back(std::move(view));
        accepted = true;
      }
    }
    if (!accepted)
      throw GenerationError("generate_scene: view " + std::to_string(i) + " of seed " + std::to_string(seed) +
                            " never reached the minimum valid-pixel fraction");
  }
  return bundle;
}

void save_bundle(const SceneBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);
  json cameras = json::array();
  json views = json::array();
  for (std::size_t i = 0; i < bundle.views.size(); ++i) {
    const auto& v = bundle.views[i];
    const auto vec = v.camera.to_vector();
    cameras.push_back(json(std::vector<double>(vec.begin(), vec.end())));
    views.push_back({{"image", view_file(i, "image")}, {"depth", view_file(i, "depth")}, {"mask", view_file(i, "mask")}});
    save_zten(dir / view_file(i, "image"), v.image);
    save_zten(dir / view_file(i, "depth"), v.depth);
    save_zten(dir / view_file(i, "mask"), v.mask);
  }
  json manifest = {{"format", "zipmap.scene_bundle"},
                   {"schema_version", kSceneBundleSchemaVersion},
                   {"height", bundle.height},
                   {"width", bundle.width},
                   {"n_views", bundle.views.size()},
                   {"seed", bundle.seed},
                   {"difficulty", bundle.difficulty},
                   {"scale", bundle.scale},
                   {"cameras", cameras},
                   {"views", views},
                   {"geometry", geometry_json(bundle.geometry)}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw FormatError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

SceneBundle load_bundle(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("missing file " + manifest_path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (m.value("format", "") != "zipmap.scene_bundle")
    throw FormatError(manifest_path.string() + ": not a scene bundle manifest");
  const int version = m.value("schema_version", -1);
  if (version != kSceneBundleSchemaVersion)
    throw FormatError(manifest_path.string() + ": schema version " + std::to_string(version) + ", expected " +
                      std::to_string(kSceneBundleSchemaVersion));
  SceneBundle bundle;
  try {
    bundle.height = m.at("height").get<Index>();
    bundle.width = m.at("width").get<Index>();
    bundle.seed = m.at("seed").get<std::uint64_t>();
    bundle.difficulty = m.at("difficulty").get<int>();
    bundle.scale = m.at("scale").get<double>();
    bundle.geometry = geometry_from_json(m.at("geometry"));
    const auto& cameras = m.at("cameras");
    const auto& views = m.at("views");
    if (cameras.size() != views.size() || cameras.size() != m.at("n_views").get<std::size_t>())
      throw FormatError(manifest_path.string() + ": camera count does not match view count");
    for (std::size_t i = 0; i < views.size(); ++i) {
      View v;
      const auto vec = cameras.at(i).get<std::vector<double>>();
      v.camera = Camerad::from_vector(vec);
      for (const char* key : {"image", "depth", "mask"}) {
        const fs::path file = dir / views.at(i).at(key).get<std::string>();
        if (!fs::exists(file)) throw FormatError("missing file " + file.string());
      }
      v.image = load_zten<float>(dir / views.at(i).at("image").get<std::string>());
      v.depth = load_zten<float>(dir / views.at(i).at("depth").get<std::string>());
      v.mask = load_zten<float>(dir / views.at(i).at("mask").get<std::string>());
      if (v.image.shape() != Shape{bundle.height, bundle.width, 3} || v.depth.shape() != Shape{bundle.height, bundle.width} ||
          v.mask.shape() != Shape{bundle.height, bundle.width})
        throw FormatError(dir.string() + ": view " + std::to_string(i) + " tensor shape does not match manifest");
      bundle.views.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  return bundle;
}

bool is_bundle_dir(const fs::path& dir) { return fs::is_regular_file(dir / "manifest.json"); }

std::vector<fs::path> list_bundles(const fs::path& root) {
  if (is_bundle_dir(root)) return {root};
  std::vector<fs::path> out;
  if (!fs::is_directory(root)) throw FormatError("not a directory: " + root.string());
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && is_bundle_dir(entry.path())) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace zipmap
