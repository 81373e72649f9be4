#pragma once

// Procedural multi-view scenes rendered by analytic ray casting, and the SceneBundle
// directory format:
//
//   <dir>/manifest.json          format tag, schema version, extents, seed, scale,
//                                cameras as 9-float arrays, per-view file names, geometry
//   <dir>/view_NNN_image.zten    H x W x 3 float RGB in [0, 1]
//   <dir>/view_NNN_depth.zten    H x W float camera-frame z
//   <dir>/view_NNN_mask.zten     H x W float, 1 where depth is valid

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "zipmap/geometry.hpp"

namespace zipmap {

class GenerationError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kSceneBundleSchemaVersion = 1;

struct SceneObject {
  enum class Kind { kBox, kSphere };
  Kind kind = Kind::kBox;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  // Box half extents; for spheres only x() (the radius) is used.
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  Eigen::Vector3d color_a = Eigen::Vector3d::Ones();
  Eigen::Vector3d color_b = Eigen::Vector3d::Zero();
  double texture_scale = 1.0;
};

// Ground is the square |x|, |y| <= ground_half_size in the plane z = 0, checker-textured.
struct SceneGeometry {
  double ground_half_size = 6.0;
  double checker_size = 0.75;
  Eigen::Vector3d ground_a{0.8, 0.8, 0.8};
  Eigen::Vector3d ground_b{0.3, 0.3, 0.3};
  Eigen::Vector3d light_dir{0.3, 0.2, 0.93};
  std::vector<SceneObject> objects;
};

struct RayHit {
  double t = 0.0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  Eigen::Vector3d albedo = Eigen::Vector3d::Zero();
  int surface = -1;  // -1 ground, otherwise object index
};

// Nearest intersection along origin + t * dir with t > 1e-9 and t < max_t.
std::optional<RayHit> intersect(const SceneGeometry& geometry, const Eigen::Vector3d& origin,
                                const Eigen::Vector3d& dir, double max_t = 1e9);

// Signed distance-like residual of a world point to the nearest generating surface (0 on
// the surface). Used as a geometric oracle in tests.
double surface_residual(const SceneGeometry& geometry, const Eigen::Vector3d& point);

// Camera-frame depth seen through continuous pixel coordinate (u, v) (pixel centers at
// integer + .5), or nullopt on a miss.
std::optional<double> trace_depth(const SceneGeometry& geometry, const Camerad& cam, double u, double v,
                                  Index height, Index width);

struct View {
  Tensor<float> image;  // H x W x 3
  Tensor<float> depth;  // H x W
  Tensor<float> mask;   // H x W, 0 or 1
  Camerad camera;
};

struct SceneBundle {
  Index height = 0;
  Index width = 0;
  std::uint64_t seed = 0;
  int difficulty = 0;
  // Global metric scale the geometry was divided by (1 for raw generated scenes).
  double scale = 1.0;
  std::vector<View> views;
  SceneGeometry geometry;

  Index view_count() const { return static_cast<Index>(views.size()); }
};

struct SceneOptions {
  int min_objects = 1;
  int max_objects = 4;
  // Total arc spanned by the camera orbit, in degrees, per difficulty level 0/1/2.
  double arc_deg[3] = {40.0, 90.0, 180.0};
  double min_valid_fraction = 0.3;
  int max_retries = 32;
};

// Ground plane plus 1-4 boxes/spheres, cameras on a jittered orbit arc looking at the
// scene center. Deterministic in `seed`.
SceneBundle generate_scene(std::uint64_t seed, int n_views, Index height, Index width, int difficulty = 0,
                           const SceneOptions& options = {});

// Renders one view of `geometry` from `camera`.
View render_view(const SceneGeometry& geometry, const Camerad& camera, Index height, Index width);

void save_bundle(const SceneBundle& bundle, const std::filesystem::path& dir);
SceneBundle load_bundle(const std::filesystem::path& dir);

// Sorted list of bundle directories under `root` (or `root` itself if it is a bundle).
std::vector<std::filesystem::path> list_bundles(const std::filesystem::path& root);
bool is_bundle_dir(const std::filesystem::path& dir);

}  // namespace zipmap
