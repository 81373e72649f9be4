#pragma once

// Command implementations behind the zipmap tool. Each writes its outputs under an
// output directory with fixed file names.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "zipmap/heads.hpp"
#include "zipmap/synthdata.hpp"
#include "zipmap/trainer.hpp"

namespace zipmap {

// Process exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

// Eigen thread count from ZIPMAP_THREADS; `deterministic` forces one thread.
int configure_threads(bool deterministic);

// ---- gen-data -----------------------------------------------------------------------

struct GenDataOptions {
  std::uint64_t seed = 0;
  int scenes = 1;
  int views = 8;
  Index height = 32;
  Index width = 32;
  int difficulty = 0;
  std::filesystem::path out;
};

// scene_NNNN bundle directories; scene i uses seed splitmix64(seed + i).
std::vector<std::filesystem::path> gen_data(const GenDataOptions& options);

// ---- train / finetune-query ---------------------------------------------------------

// Caps the schedule at `steps` total, truncating stages in order. Zero keeps one empty stage.
TrainConfig with_total_steps(TrainConfig config, std::int64_t steps);

// ---- recon --------------------------------------------------------------------------

struct ReconOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path scene;
  std::filesystem::path out;
  bool streaming = false;
};

// Writes out/pred (prediction bundle with conf.zten and points.zten), out/points.ply and
// out/state (scene state file).
Network<float>::Result recon(const ReconOptions& options);

// N x H x W x 3 input images of a bundle.
Tensor<float> stack_images(const SceneBundle& bundle);

// Predicted world points (local points through camera-to-world) with image colors.
void write_ply(const std::filesystem::path& path, const Prediction<float>& prediction, const Tensor<float>& images);

// ---- query --------------------------------------------------------------------------

// Nine comma or space separated numbers [qw qx qy qz tx ty tz fx fy], or "<bundle dir>#<view>"
// to take a camera from a bundle manifest (e.g. a prediction bundle written by recon).
Camerad parse_camera(const std::string& text);

struct QueryOptions {
  std::filesystem::path state;
  std::string camera;
  std::filesystem::path out;
  std::filesystem::path checkpoint;  // empty: the checkpoint recorded in the state file
};

struct QueryResult {
  Prediction<float> prediction;
  double seconds = 0;
};

QueryResult query(const QueryOptions& options);

// ---- eval ---------------------------------------------------------------------------

enum class Metric { kAte, kAuc, kChamfer, kDepth };

// Comma separated list; unknown names raise UsageError listing the valid ones.
std::vector<Metric> parse_metrics(const std::string& text);

struct EvalOptions {
  std::filesystem::path pred;
  std::filesystem::path gt;
  std::vector<Metric> metrics;
  std::filesystem::path out;
};

// Metrics of one predicted bundle against its ground truth, flattened to name -> value.
std::map<std::string, double> evaluate_sequence(const SceneBundle& pred, const SceneBundle& gt,
                                                const std::vector<Metric>& metrics);

// Pairs bundles under pred and gt in sorted order. Writes out/per_sequence/<name>.json,
// out/aggregate.csv (one row per sequence) and out/summary.json (means). Returns the summary.
nlohmann::json eval(const EvalOptions& options);

// ---- bench --------------------------------------------------------------------------

struct BenchOptions {
  std::vector<Index> views = {8, 16, 32, 64, 128};
  Mixer mode = Mixer::kTTT;
  int repeats = 3;
  int warmups = 2;
  Index size = 32;
  ModelConfig model;
  std::uint64_t seed = 0;
};

struct PolyFit {
  std::vector<double> coefficients;  // constant first
  double r2 = 0;
};

// Least-squares polynomial fit of y on x with R^2.
PolyFit poly_fit(const std::vector<double>& x, const std::vector<double>& y, int degree);

struct BenchReport {
  std::string mode;
  struct Entry {
    Index views = 0;
    double median_seconds = 0;
    std::vector<double> seconds;
    std::uint64_t flops = 0;
  };
  std::vector<Entry> entries;
  PolyFit linear, quadratic;
  nlohmann::json to_json() const;
  std::string to_csv() const;
  // time(last) / time(first)
  double growth() const;
};

// Forward-only reconstruction of random inputs at each view count.
BenchReport bench(const BenchOptions& options);

}  // namespace zipmap
