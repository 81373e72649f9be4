#include "zipmap/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <Eigen/Dense>

#include "zipmap/metrics.hpp"
#include "zipmap/rng.hpp"
#include "zipmap/zten.hpp"

namespace zipmap {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return 2;
  if (dynamic_cast<const ConfigError*>(&e)) return 3;
  if (dynamic_cast<const FormatError*>(&e)) return 4;
  if (dynamic_cast<const ParameterError*>(&e)) return 5;
  if (dynamic_cast<const NumericError*>(&e)) return 6;
  if (dynamic_cast<const DegenerateInputError*>(&e)) return 7;
  if (dynamic_cast<const ShapeError*>(&e)) return 8;
  return 1;
}

int configure_threads(bool deterministic) {
  int threads = Eigen::nbThreads();
  if (const char* env = std::getenv("ZIPMAP_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) throw UsageError("ZIPMAP_THREADS must be a positive integer");
    threads = static_cast<int>(n);
  }
  if (deterministic) threads = 1;
  Eigen::setNbThreads(threads);
  return Eigen::nbThreads();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed: " + path.string());
}

// Rows [first, first + count) of the leading dimension.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, Index first, Index count) {
  const Index per = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  const auto data = x.data();
  return Tensor<T>(shape, std::vector<T>(data.begin() + first * per, data.begin() + (first + count) * per));
}

template <typename T>
Tensor<T> drop_leading(const Tensor<T>& x) {
  Shape shape(x.shape().begin() + 1, x.shape().end());
  return Tensor<T>(shape, std::vector<T>(x.data().begin(), x.data().end()));
}

}  // namespace

// ---- gen-data -----------------------------------------------------------------------

std::vector<fs::path> gen_data(const GenDataOptions& o) {
  if (o.views < 2) throw UsageError("--views must be at least 2");
  if (o.scenes < 1) throw UsageError("--scenes must be at least 1");
  if (o.height < 1 || o.width < 1) throw UsageError("--size must be positive");
  if (o.difficulty < 0 || o.difficulty > 2) throw UsageError("--difficulty must be 0, 1 or 2");
  fs::create_directories(o.out);
  std::vector<fs::path> dirs;
  for (int i = 0; i < o.scenes; ++i) {
    std::ostringstream name;
    name << "scene_" << std::setw(4) << std::setfill('0') << i;
    const auto bundle = generate_scene(splitmix64(o.seed + static_cast<std::uint64_t>(i)), o.views, o.height, o.width,
                                       o.difficulty);
    dirs.push_back(o.out / name.str());
    save_bundle(bundle, dirs.back());
  }
  return dirs;
}

// ---- train --------------------------------------------------------------------------

TrainConfig with_total_steps(TrainConfig config, std::int64_t steps) {
  if (steps < 0) throw UsageError("--steps must be non-negative");
  std::vector<StageConfig> kept;
  std::int64_t remaining = steps;
  for (auto s : config.stages) {
    s.steps = std::min(s.steps, remaining);
    remaining -= s.steps;
    if (s.steps > 0 || kept.empty()) kept.push_back(s);
  }
  if (kept.size() > 1 && kept.front().steps == 0) kept.erase(kept.begin());
  config.stages = kept;
  return config;
}

// ---- recon --------------------------------------------------------------------------

Tensor<float> stack_images(const SceneBundle& bundle) {
  std::vector<float> data;
  for (const auto& v : bundle.views) data.insert(data.end(), v.image.data().begin(), v.image.data().end());
  return Tensor<float>(Shape{bundle.view_count(), bundle.height, bundle.width, 3}, std::move(data));
}

void write_ply(const fs::path& path, const Prediction<float>& p, const Tensor<float>& images) {
  const auto cams = cameras_from_tensor(p.cameras);
  const Index hw = p.height * p.width;
  std::ostringstream body;
  body << std::setprecision(9);
  for (Index i = 0; i < p.views; ++i)
    for (Index k = 0; k < hw; ++k) {
      const Index at = (i * hw + k) * 3;
      const Eigen::Vector3d local(p.points[at], p.points[at + 1], p.points[at + 2]);
      const Eigen::Vector3d x = cams[static_cast<std::size_t>(i)].camera_to_world(local);
      body << static_cast<float>(x.x()) << ' ' << static_cast<float>(x.y()) << ' ' << static_cast<float>(x.z());
      for (int c = 0; c < 3; ++c)
        body << ' ' << static_cast<int>(std::lround(std::clamp(static_cast<double>(images[at + c]), 0.0, 1.0) * 255));
      body << '\n';
    }
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << p.views * hw
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
      << body.str();
  write_text(path, out.str());
}

Network<float>::Result recon(const ReconOptions& o) {
  const auto scene = load_bundle(o.scene);
  const auto net = load_network(o.checkpoint);
  const auto images = stack_images(scene);
  Network<float>::Result result;
  {
    NoGradGuard no_grad;
    result = o.streaming ? net->reconstruct_streaming(images) : net->reconstruct(images);
  }
  const auto& p = result.prediction;
  const auto cams = cameras_from_tensor(p.cameras);

  SceneBundle pred;
  pred.height = scene.height;
  pred.width = scene.width;
  pred.seed = scene.seed;
  pred.difficulty = scene.difficulty;
  for (Index i = 0; i < p.views; ++i) {
    View v;
    v.image = scene.views[static_cast<std::size_t>(i)].image;
    v.depth = drop_leading(slice(p.depth, i, 1));
    v.mask = Tensor<float>(Shape{scene.height, scene.width}, 1.0f);
    v.camera = cams[static_cast<std::size_t>(i)];
    pred.views.push_back(std::move(v));
  }
  fs::create_directories(o.out);
  save_bundle(pred, o.out / "pred");
  save_zten(o.out / "pred" / "conf.zten", p.conf);
  save_zten(o.out / "pred" / "points.zten", p.points);
  save_zten(o.out / "pred" / "cameras.zten", p.cameras);
  write_ply(o.out / "points.ply", p, images);
  const nlohmann::json extra = {{"checkpoint", fs::absolute(o.checkpoint).lexically_normal().string()},
                                {"height", scene.height},
                                {"width", scene.width},
                                {"views", p.views},
                                {"streaming", o.streaming}};
  save_states(o.out / "state", result.states, net->config(), extra);
  return result;
}

// ---- query --------------------------------------------------------------------------

Camerad parse_camera(const std::string& text) {
  const auto hash = text.rfind('#');
  if (hash != std::string::npos) {
    const std::string index_text = text.substr(hash + 1);
    std::size_t used = 0;
    long long index = -1;
    try {
      index = std::stoll(index_text, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != index_text.size()) throw UsageError("camera reference needs <bundle>#<view>: " + text);
    const auto bundle = load_bundle(text.substr(0, hash));
    if (index < 0 || index >= bundle.view_count())
      throw UsageError("camera reference view " + index_text + " out of range (bundle has " +
                       std::to_string(bundle.view_count()) + " views)");
    return bundle.views[static_cast<std::size_t>(index)].camera;
  }
  std::string spaced = text;
  std::replace(spaced.begin(), spaced.end(), ',', ' ');
  std::istringstream in(spaced);
  std::vector<double> v;
  for (std::string token; in >> token;) {
    std::size_t used = 0;
    double x = 0;
    try {
      x = std::stod(token, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != token.size()) throw UsageError("camera value '" + token + "' is not a number");
    v.push_back(x);
  }
  if (v.size() != Camerad::kParams)
    throw UsageError("camera needs 9 numbers [qw qx qy qz tx ty tz fx fy], got " + std::to_string(v.size()));
  return Camerad::from_vector(v);
}

QueryResult query(const QueryOptions& o) {
  ModelConfig state_config;
  nlohmann::json extra;
  const auto states = load_states<float>(o.state, &state_config, &extra);
  fs::path checkpoint = o.checkpoint;
  if (checkpoint.empty()) {
    if (!extra.contains("checkpoint")) throw UsageError("state file records no checkpoint; pass --ckpt");
    checkpoint = extra.at("checkpoint").get<std::string>();
  }
  const auto net = load_network(checkpoint);
  if (net->config().to_json() != state_config.to_json())
    throw ConfigError("state file was written by a different model than " + checkpoint.string());
  const auto camera = parse_camera(o.camera);
  const Index h = extra.value("height", Index{0}), w = extra.value("width", Index{0});
  if (h < 1 || w < 1) throw FormatError(o.state.string() + ": state file lacks the image size");
  const auto raymap = raymaps_for<float>({camera}, h, w);
  QueryResult r;
  {
    NoGradGuard no_grad;
    const auto start = std::chrono::steady_clock::now();
    r.prediction = net->query(states, raymap);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  fs::create_directories(o.out);
  save_zten(o.out / "query_rgb.zten", r.prediction.query_rgb);
  save_zten(o.out / "query_depth.zten", r.prediction.query_depth);
  save_zten(o.out / "query_conf.zten", r.prediction.query_conf);
  const auto vec = camera.to_vector();
  const nlohmann::json report = {{"camera", std::vector<double>(vec.begin(), vec.end())},
                                 {"height", h},
                                 {"width", w},
                                 {"latency_seconds", r.seconds}};
  write_text(o.out / "query.json", report.dump(2) + "\n");
  return r;
}

// ---- eval ---------------------------------------------------------------------------

namespace {

const std::vector<std::pair<std::string, Metric>>& metric_names() {
  static const std::vector<std::pair<std::string, Metric>> names = {
      {"ate", Metric::kAte}, {"auc", Metric::kAuc}, {"chamfer", Metric::kChamfer}, {"depth", Metric::kDepth}};
  return names;
}

std::vector<Camerad> cameras_of(const SceneBundle& b) {
  std::vector<Camerad> out;
  for (const auto& v : b.views) out.push_back(v.camera);
  return out;
}

Tensor<double> stack_field(const SceneBundle& b, Tensor<float> View::*field) {
  std::vector<double> data;
  for (const auto& v : b.views) {
    const auto& t = v.*field;
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor<double>(Shape{b.view_count(), b.height, b.width}, std::move(data));
}

// World points and surface normals at pixels where the pixel and its right and lower
// neighbors are valid in `mask`.
struct SurfaceSamples {
  std::vector<Eigen::Vector3d> points, normals;
};

std::vector<Eigen::Vector3d> world_grid(const View& view, Index h, Index w) {
  const auto local = unproject(view.depth, view.camera.cast<float>());
  std::vector<Eigen::Vector3d> out(static_cast<std::size_t>(h * w));
  for (Index k = 0; k < h * w; ++k)
    out[static_cast<std::size_t>(k)] =
        view.camera.camera_to_world(Eigen::Vector3d(local[3 * k], local[3 * k + 1], local[3 * k + 2]));
  return out;
}

void add_samples(SurfaceSamples& pred, SurfaceSamples& gt, const View& pv, const View& gv, Index h, Index w) {
  const auto pp = world_grid(pv, h, w), gp = world_grid(gv, h, w);
  auto valid = [&](Index v, Index u) { return gv.mask[v * w + u] > 0.5f && gv.depth[v * w + u] > 0; };
  auto normal = [&](const std::vector<Eigen::Vector3d>& g, Index k) {
    return (g[k + 1] - g[k]).cross(g[k + w] - g[k]);
  };
  for (Index v = 0; v + 1 < h; ++v)
    for (Index u = 0; u + 1 < w; ++u) {
      if (!valid(v, u) || !valid(v, u + 1) || !valid(v + 1, u)) continue;
      const Index k = v * w + u;
      const Eigen::Vector3d np = normal(pp, k), ng = normal(gp, k);
      if (np.norm() <= 1e-12 || ng.norm() <= 1e-12 || !pp[k].allFinite()) continue;
      pred.points.push_back(pp[k]);
      pred.normals.push_back(np.normalized());
      gt.points.push_back(gp[k]);
      gt.normals.push_back(ng.normalized());
    }
}

PointMatrix to_matrix(const std::vector<Eigen::Vector3d>& rows) {
  PointMatrix m(static_cast<Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Index>(i)) = rows[i].transpose();
  return m;
}

}  // namespace

std::vector<Metric> parse_metrics(const std::string& text) {
  std::vector<Metric> out;
  std::istringstream in(text);
  for (std::string name; std::getline(in, name, ',');) {
    const auto it = std::find_if(metric_names().begin(), metric_names().end(),
                                 [&](const auto& p) { return p.first == name; });
    if (it == metric_names().end()) {
      std::string valid;
      for (const auto& p : metric_names()) valid += (valid.empty() ? "" : ", ") + p.first;
      throw UsageError("unknown metric '" + name + "'; valid metrics: " + valid);
    }
    if (std::find(out.begin(), out.end(), it->second) == out.end()) out.push_back(it->second);
  }
  if (out.empty()) throw UsageError("--metrics is empty");
  return out;
}

std::map<std::string, double> evaluate_sequence(const SceneBundle& pred, const SceneBundle& gt,
                                                const std::vector<Metric>& metrics) {
  if (pred.view_count() != gt.view_count() || pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("prediction has " + std::to_string(pred.view_count()) + " views at " +
                     std::to_string(pred.height) + "x" + std::to_string(pred.width) + ", ground truth has " +
                     std::to_string(gt.view_count()) + " at " + std::to_string(gt.height) + "x" +
                     std::to_string(gt.width));
  std::map<std::string, double> out;
  const auto pc = cameras_of(pred), gc = cameras_of(gt);
  for (const Metric m : metrics) {
    switch (m) {
      case Metric::kAte: {
        const auto r = ate_rpe(pc, gc);
        out["ate_rmse"] = r.ate_rmse;
        out["rpe_trans"] = r.rpe_trans;
        out["rpe_rot"] = r.rpe_rot;
        break;
      }
      case Metric::kAuc: {
        for (const auto& [tau, auc] : pose_auc(pc, gc)) out["auc" + std::to_string(tau)] = auc;
        break;
      }
      case Metric::kChamfer: {
        SurfaceSamples ps, gs;
        for (std::size_t i = 0; i < pred.views.size(); ++i)
          add_samples(ps, gs, pred.views[i], gt.views[i], gt.height, gt.width);
        if (ps.points.size() < 3) throw DegenerateInputError("chamfer: fewer than 3 valid surface samples");
        ChamferOptions opts;
        opts.corresponding = true;
        const auto r = chamfer_metrics(to_matrix(ps.points), to_matrix(ps.normals), to_matrix(gs.points),
                                       to_matrix(gs.normals), opts);
        out["acc_mean"] = r.acc_mean;
        out["acc_median"] = r.acc_median;
        out["comp_mean"] = r.comp_mean;
        out["comp_median"] = r.comp_median;
        out["nc_mean"] = r.nc_mean;
        out["nc_median"] = r.nc_median;
        break;
      }
      case Metric::kDepth: {
        const auto r = depth_metrics(stack_field(pred, &View::depth), stack_field(gt, &View::depth),
                                     stack_field(gt, &View::mask), DepthAlign::kScale, true);
        out["abs_rel"] = r.abs_rel;
        out["delta"] = r.delta;
        break;
      }
    }
  }
  return out;
}

nlohmann::json eval(const EvalOptions& o) {
  if (o.metrics.empty()) throw UsageError("no metrics requested");
  const auto preds = list_bundles(o.pred), gts = list_bundles(o.gt);
  if (preds.empty()) throw UsageError("no bundles under " + o.pred.string());
  if (preds.size() != gts.size())
    throw UsageError(std::to_string(preds.size()) + " predicted bundles but " + std::to_string(gts.size()) +
                     " ground-truth bundles");
  fs::create_directories(o.out / "per_sequence");
  std::vector<std::string> names;
  std::vector<std::map<std::string, double>> rows;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    names.push_back(gts[i].filename().string());
    rows.push_back(evaluate_sequence(load_bundle(preds[i]), load_bundle(gts[i]), o.metrics));
    nlohmann::json j = rows.back();
    j["sequence"] = names.back();
    j["pred"] = preds[i].string();
    j["gt"] = gts[i].string();
    write_text(o.out / "per_sequence" / (names.back() + ".json"), j.dump(2) + "\n");
  }
  std::ostringstream csv;
  csv << std::setprecision(17) << "sequence";
  for (const auto& [k, v] : rows.front()) csv << ',' << k;
  csv << '\n';
  std::map<std::string, double> mean;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    csv << names[i];
    for (const auto& [k, v] : rows[i]) {
      csv << ',' << v;
      mean[k] += v / static_cast<double>(rows.size());
    }
    csv << '\n';
  }
  write_text(o.out / "aggregate.csv", csv.str());
  const nlohmann::json summary = {{"sequences", rows.size()}, {"mean", mean}};
  write_text(o.out / "summary.json", summary.dump(2) + "\n");
  return summary;
}

// ---- bench --------------------------------------------------------------------------

PolyFit poly_fit(const std::vector<double>& x, const std::vector<double>& y, int degree) {
  const auto n = static_cast<Index>(x.size());
  if (n != static_cast<Index>(y.size()) || n <= degree) throw UsageError("poly_fit: need more points than the degree");
  Eigen::MatrixXd a(n, degree + 1);
  Eigen::VectorXd b(n);
  for (Index i = 0; i < n; ++i) {
    for (int d = 0; d <= degree; ++d) a(i, d) = std::pow(x[static_cast<std::size_t>(i)], d);
    b(i) = y[static_cast<std::size_t>(i)];
  }
  const Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
  const double ss_res = (a * c - b).squaredNorm();
  const double ss_tot = (b.array() - b.mean()).square().sum();
  PolyFit f;
  f.coefficients.assign(c.data(), c.data() + c.size());
  f.r2 = ss_tot > 0 ? 1 - ss_res / ss_tot : (ss_res == 0 ? 1.0 : 0.0);
  return f;
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::json e = nlohmann::json::array();
  for (const auto& x : entries)
    e.push_back({{"views", x.views}, {"median_seconds", x.median_seconds}, {"seconds", x.seconds}, {"flops", x.flops}});
  return {{"mode", mode},
          {"entries", e},
          {"linear", {{"coefficients", linear.coefficients}, {"r2", linear.r2}}},
          {"quadratic", {{"coefficients", quadratic.coefficients}, {"r2", quadratic.r2}}},
          {"growth", growth()}};
}

std::string BenchReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(9) << "mode,views,median_seconds,flops\n";
  for (const auto& x : entries) out << mode << ',' << x.views << ',' << x.median_seconds << ',' << x.flops << '\n';
  return out.str();
}

double BenchReport::growth() const {
  if (entries.size() < 2 || !(entries.front().median_seconds > 0)) return 0;
  return entries.back().median_seconds / entries.front().median_seconds;
}

BenchReport bench(const BenchOptions& o) {
  if (o.views.size() < 3) throw UsageError("--views needs at least 3 counts for the fits");
  if (o.repeats < 1) throw UsageError("--repeats must be at least 1");
  if (o.warmups < 0) throw UsageError("--warmups must be non-negative");
  ModelConfig config = o.model;
  config.mixer = o.mode;
  const Network<float> net(config, o.seed);
  Rng rng(o.seed);
  BenchReport report;
  report.mode = to_string(o.mode);
  NoGradGuard no_grad;
  for (const Index n : o.views) {
    if (n < 1) throw UsageError("--views entries must be positive");
    const auto images = rng.uniform_tensor<float>(Shape{n, o.size, o.size, 3}, 0.0, 1.0);
    BenchReport::Entry e;
    e.views = n;
    for (int i = 0; i < o.warmups; ++i) net.reconstruct(images);
    {
      FlopCounter counter;
      net.reconstruct(images);
      e.flops = counter.flops();
    }
    for (int i = 0; i < o.repeats; ++i) {
      const auto start = std::chrono::steady_clock::now();
      net.reconstruct(images);
      e.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    auto sorted = e.seconds;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    e.median_seconds = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    report.entries.push_back(std::move(e));
  }
  std::vector<double> x, y;
  for (const auto& e : report.entries) {
    x.push_back(static_cast<double>(e.views));
    y.push_back(e.median_seconds);
  }
  report.linear = poly_fit(x, y, 1);
  report.quadratic = poly_fit(x, y, 2);
  return report;
}

}  // namespace zipmap
