// Acceptance suite: one line per criterion, non-zero exit if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/SVD>

#include "zipmap/cli.hpp"
#include "zipmap/linalg.hpp"
#include "zipmap/losses.hpp"
#include "zipmap/metrics.hpp"
#include "zipmap/ops.hpp"
#include "zipmap/rng.hpp"
#include "zipmap/trainer.hpp"
#include "zipmap/zten.hpp"

#ifndef ZIPMAP_SOURCE_DIR
#define ZIPMAP_SOURCE_DIR "."
#endif

namespace fs = std::filesystem;
using namespace zipmap;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("zipmap_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---- 1: gradient oracles ------------------------------------------------------------

using Inputs = std::vector<Tensor<double>>;
using LossFn = std::function<Tensor<double>(const Inputs&)>;

// Coordinates to leave out of the comparison (those sitting on a kink of the loss).
using SkipFn = std::function<bool(std::size_t input, Index k)>;

// max |analytic - central difference| over all inputs, relative to the largest |FD| entry.
double gradient_error(const LossFn& fn, Inputs inputs, const SkipFn& skip = {}, double h = 1e-6) {
  for (auto& t : inputs) {
    t = t.detach();
    t.set_requires_grad(true);
  }
  fn(inputs).backward();
  double diff = 0, scale = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> analytic(inputs[i].grad().begin(), inputs[i].grad().end());
    if (analytic.empty()) analytic.assign(static_cast<std::size_t>(inputs[i].numel()), 0.0);
    auto probe = [&](const Tensor<double>& x) {
      auto args = inputs;
      for (auto& a : args) a = a.detach();
      args[i] = x;
      return fn(args).item();
    };
    const auto numeric = finite_difference_grad<double>(probe, inputs[i].detach(), h);
    for (Index k = 0; k < numeric.numel(); ++k) {
      if (skip && skip(i, k)) continue;
      diff = std::max(diff, std::abs(analytic[static_cast<std::size_t>(k)] - numeric[k]));
      scale = std::max(scale, std::abs(numeric[k]));
    }
  }
  return diff / scale;
}

Tensor<double> random_cameras(Rng& rng, Index n) {
  Tensor<double> cams({n, 9});
  auto c = cams.mutable_data();
  for (Index i = 0; i < n; ++i) {
    Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    if (q(0) < 0) q = -q;
    for (int k = 0; k < 4; ++k) c[9 * i + k] = q(k);
    for (int k = 4; k < 7; ++k) c[9 * i + k] = rng.normal(0.0, 2.0);
    c[9 * i + 7] = rng.uniform(0.6, 1.4);
    c[9 * i + 8] = rng.uniform(0.6, 1.4);
  }
  return cams;
}

struct PointInstance {
  Tensor<double> pred, gt, z, mask;
};

PointInstance random_points(Rng& rng, Index n, Index h, Index w) {
  PointInstance s;
  s.pred = rng.normal_tensor<double>({n, h, w, 3});
  s.gt = rng.normal_tensor<double>({n, h, w, 3});
  s.z = Tensor<double>({n, h, w});
  s.mask = Tensor<double>({n, h, w});
  auto g = s.gt.mutable_data();
  auto p = s.pred.mutable_data();
  for (Index i = 0; i < n * h * w; ++i) {
    g[3 * i + 2] = rng.uniform(1.0, 3.0);
    p[3 * i + 2] = std::abs(p[3 * i + 2]) + 0.5;
    s.z.mutable_data()[i] = g[3 * i + 2];
    s.mask.mutable_data()[i] = rng.uniform() < 0.8 ? 1.0 : 0.0;
  }
  s.mask.mutable_data()[0] = 1.0;
  return s;
}

Outcome criterion_gradients() {
  constexpr int kInstances = 20;
  std::map<std::string, double> worst;
  Rng rng(101);
  for (int trial = 0; trial < kInstances; ++trial) {
    const Index n = 1 + trial % 2, h = 3 + trial % 3, w = 4;
    const auto s = random_points(rng, n, h, w);
    const double sh = roe_scale(s.pred, s.gt, s.z, s.mask);
    auto note = [&](const std::string& name, double e) { worst[name] = std::max(worst[name], e); };
    // s_hat is the weighted median of b/a, so one residual is exactly zero: a kink.
    const SkipFn on_kink = [&](std::size_t, Index k) { return std::abs(sh * s.pred[k] - s.gt[k]) < 1e-4; };
    note("point",
         gradient_error([&](const Inputs& in) { return point_loss(in[0], s.gt, s.mask, sh); }, {s.pred}, on_kink));

    const auto gt_depth = rng.uniform_tensor<double>({n, h, w}, 1.0, 3.0);
    const auto depth = rng.uniform_tensor<double>({n, h, w}, 0.5, 3.0);
    const auto log_conf = rng.normal_tensor<double>({n, h, w}, 0.5);
    const double sd = rng.uniform(0.5, 2.0);
    note("depth", gradient_error([&](const Inputs& in) { return depth_loss(in[0], exp(in[1]), gt_depth, sd, s.mask); },
                                 {depth, log_conf}));
    note("depth_grad",
         gradient_error([&](const Inputs& in) { return depth_grad_loss(in[0], exp(in[1]), gt_depth, sd, s.mask); },
                        {depth, log_conf}));
    note("normal", gradient_error([&](const Inputs& in) { return normal_loss(in[0], s.gt, s.mask); }, {s.pred}));

    const Index cams = 2 + trial % 4;
    const auto gt_cams = random_cameras(rng, cams), pred_cams = random_cameras(rng, cams);
    const double sc = rng.uniform(0.5, 2.0);
    note("camera", gradient_error([&](const Inputs& in) { return camera_loss(in[0], gt_cams, sc); }, {pred_cams}));
    // The alignment is a detached constant of the loss, held fixed under perturbation.
    const auto align = camera_alignment(pred_cams, gt_cams);
    note("camera_refless",
         gradient_error([&](const Inputs& in) { return camera_loss(align_cameras(in[0], align), gt_cams, 1.0); },
                        {pred_cams}));

    const auto rgb = rng.uniform_tensor<double>({1, h, w, 3}, 0, 1);
    const auto gt_rgb = rng.uniform_tensor<double>({1, h, w, 3}, 0, 1);
    const auto qd = rng.uniform_tensor<double>({1, h, w}, 0.5, 2.0);
    const auto qgt = rng.uniform_tensor<double>({1, h, w}, 0.5, 2.0);
    const auto qc = rng.normal_tensor<double>({1, h, w}, 0.5);
    const auto qmask = slice_rows(reshape(s.mask, Shape{n, h * w}), 0, 1);
    note("query", gradient_error(
                      [&](const Inputs& in) {
                        const auto q = query_losses(in[0], in[1], exp(in[2]), gt_rgb, qgt, reshape(qmask, Shape{1, h, w}));
                        return add(q.color, q.depth);
                      },
                      {rgb, qd, qc}));

    // Closed-form fast-weight gradient against FD of the virtual objective.
    const Index d = 4 + trial % 3, hid = 2 * d, rows = 1 + trial % 6;
    auto state = initial_fast_state(rng.normal_tensor<double>({hid, d}), rng.normal_tensor<double>({d, hid}),
                                    rng.normal_tensor<double>({hid, d}));
    const auto k = rng.normal_tensor<double>({rows, d}), v = rng.normal_tensor<double>({rows, d});
    const auto eta = rng.uniform_tensor<double>({rows, 1}, 0.01, 1.0);
    const auto g = fast_weight_gradient(state, k, v, eta);
    double ttt = 0;
    for (int m = 0; m < 3; ++m) {
      auto f = [&](const Tensor<double>& x) {
        auto probe = state;
        (m == 0 ? probe.w1 : m == 1 ? probe.w2 : probe.w3) = x;
        return virtual_loss(probe, k, v, eta).item();
      };
      const auto& wm = m == 0 ? state.w1 : m == 1 ? state.w2 : state.w3;
      const auto& gm = m == 0 ? g.g1 : m == 1 ? g.g2 : g.g3;
      const auto numeric = finite_difference_grad<double>(f, wm, 1e-6);
      double diff = 0, scale = 1e-6;
      for (Index i = 0; i < numeric.numel(); ++i) {
        diff = std::max(diff, std::abs(gm[i] - numeric[i]));
        scale = std::max(scale, std::abs(numeric[i]));
      }
      ttt = std::max(ttt, diff / scale);
    }
    note("ttt_virtual", ttt);
  }
  Outcome o;
  o.pass = true;
  std::ostringstream d;
  d << kInstances << " instances each; worst rel err:";
  for (const auto& [name, e] : worst) {
    d << ' ' << name << '=' << fmt(e, 2);
    o.pass = o.pass && e < 1e-4;
  }
  o.detail = d.str();
  return o;
}

// ---- 2: norm preservation -----------------------------------------------------------

Outcome criterion_norms() {
  ModelConfig c;
  c.dim = 16;
  c.fast_hidden = 32;
  c.layers = 2;
  c.patch = 4;
  c.heads = 2;
  c.ffn_hidden = 32;
  const Model<double> model(c, 21);
  Rng rng(22);
  NoGradGuard no_grad;
  auto stream = model.begin_stream();
  double worst = 0;
  Index checked = 0;
  for (int step = 0; step < 100; ++step) {
    model.stream_step(stream, rng.uniform_tensor<double>({1, 16, 16, 3}, 0, 1));
    for (const auto& s : stream.layers) {
      const std::array<const Tensor<double>*, 3> w{&s.w1, &s.w2, &s.w3};
      for (int m = 0; m < 3; ++m) {
        worst = std::max(worst, std::abs(frobenius_norm(*w[static_cast<std::size_t>(m)]).item() -
                                         s.norms[static_cast<std::size_t>(m)].item()));
        ++checked;
      }
    }
  }
  return {worst < 1e-5, "100 streaming updates, " + std::to_string(checked) + " matrix checks, max |norm - stored| = " +
                            fmt(worst, 3) + " (< 1e-5)"};
}

// ---- 3: Newton-Schulz spectrum ------------------------------------------------------

Outcome criterion_newton_schulz() {
  Rng rng(31);
  double lo = 1e300, hi = 0;
  int in_range = 0;
  std::string worst_case;
  constexpr int kMatrices = 200;
  for (int i = 0; i < kMatrices; ++i) {
    const Index r = rng.uniform_int(1, 64), c = rng.uniform_int(1, 64);
    const auto g = rng.normal_tensor<double>({r, c});
    const auto out = newton_schulz_orthonormalize(g);
    const Eigen::MatrixXd m = out.matrix();
    const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
    const double mn = sv.minCoeff(), mx = sv.maxCoeff();
    if (mn >= 0.3 && mx <= 1.3) ++in_range;
    if (mn < lo) {
      const Eigen::VectorXd sg = Eigen::JacobiSVD<Eigen::MatrixXd>(g.matrix()).singularValues();
      worst_case = std::to_string(r) + "x" + std::to_string(c) + " cond " + fmt(sg.maxCoeff() / sg.minCoeff(), 3);
    }
    lo = std::min(lo, mn);
    hi = std::max(hi, mx);
  }
  bool zero_ok = true;
  for (const Shape& shape : {Shape{1, 1}, Shape{5, 3}, Shape{64, 64}}) {
    const auto out = newton_schulz_orthonormalize(Tensor<double>(shape));
    for (double v : out.data()) zero_ok = zero_ok && v == 0.0;
  }
  return {in_range == kMatrices && zero_ok,
          std::to_string(in_range) + "/" + std::to_string(kMatrices) + " in [0.3, 1.3]; singular values span [" +
              fmt(lo) + ", " + fmt(hi) + "], smallest from " + worst_case + "; zero->zero " + (zero_ok ? "yes" : "no")};
}

// ---- 4: ROE exactness ---------------------------------------------------------------

Outcome criterion_roe() {
  Rng rng(41);
  constexpr int kGrid = 1000000;
  const double log_lo = std::log(1e-3), log_hi = std::log(1e3);
  const double step = (log_hi - log_lo) / (kGrid - 1);
  int matched = 0;
  double worst_gap = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index n = 1, h = 2, w = 2 + trial % 3;
    PointInstance s = random_points(rng, n, h, w);
    const double truth = std::exp(rng.uniform(std::log(0.05), std::log(20.0)));
    auto g = s.gt.mutable_data();
    for (Index i = 0; i < s.gt.numel(); ++i) g[i] = truth * s.pred[i] + rng.normal(0.0, 0.3);
    for (Index i = 0; i < s.z.numel(); ++i) {
      g[3 * i + 2] = std::abs(g[3 * i + 2]) + 0.1;
      s.z.mutable_data()[i] = g[3 * i + 2];
    }
    // Weighted residual terms, flattened: |s a_j - b_j| / z_j.
    std::vector<double> a, b, iz;
    for (Index i = 0; i < s.mask.numel(); ++i) {
      if (s.mask[i] < 0.5) continue;
      for (int c = 0; c < 3; ++c) {
        a.push_back(s.pred[3 * i + c]);
        b.push_back(s.gt[3 * i + c]);
        iz.push_back(1.0 / s.z[i]);
      }
    }
    auto objective = [&](double x) {
      double t = 0;
      for (std::size_t j = 0; j < a.size(); ++j) t += std::abs(x * a[j] - b[j]) * iz[j];
      return t;
    };
    double best = 1e300, best_x = 0;
    for (int k = 0; k < kGrid; ++k) {
      const double x = std::exp(log_lo + k * step);
      const double f = objective(x);
      if (f < best) best = f, best_x = x;
    }
    const double solved = roe_scale(s.pred, s.gt, s.z, s.mask);
    const double gap = std::abs(std::log(solved) - std::log(best_x));
    worst_gap = std::max(worst_gap, gap / step);
    // Within one grid cell, or at least as good as the best grid point (flat minima).
    if (gap <= step * (1 + 1e-9) || objective(solved) <= best * (1 + 1e-12)) ++matched;
  }
  double worst_inv = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_points(rng, 2, 4, 5);
    const double base = point_loss(s.pred, s.gt, s.mask, roe_scale(s.pred, s.gt, s.z, s.mask)).item();
    for (double c : {0.1, 1.0, 7.3}) {
      const auto scaled = scale(s.pred, c);
      const double l = point_loss(scaled, s.gt, s.mask, roe_scale(scaled, s.gt, s.z, s.mask)).item();
      worst_inv = std::max(worst_inv, std::abs(l - base));
    }
  }
  return {matched == 100 && worst_inv < 1e-8,
          std::to_string(matched) + "/100 match the 1e6-point log grid (worst offset " + fmt(worst_gap, 3) +
              " cells); scale invariance max |dL| = " + fmt(worst_inv, 3) + " (< 1e-8)"};
}

// ---- 5: streaming consistency and linear update cost --------------------------------

float max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<float>::infinity();
  float m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Outcome criterion_streaming() {
  const Network<float> net(ModelConfig{}, 51);
  Rng rng(52);
  NoGradGuard no_grad;
  const auto image = rng.uniform_tensor<float>({1, 32, 32, 3}, 0, 1);
  const auto bi = net.reconstruct(image);
  const auto st = net.reconstruct_streaming(image);
  float diff = 0;
  for (const auto& [x, y] : {std::pair{&bi.prediction.cameras, &st.prediction.cameras},
                             std::pair{&bi.prediction.depth, &st.prediction.depth},
                             std::pair{&bi.prediction.conf, &st.prediction.conf},
                             std::pair{&bi.prediction.points, &st.prediction.points}})
    diff = std::max(diff, max_abs_diff(*x, *y));
  for (std::size_t l = 0; l < bi.states.size(); ++l) {
    diff = std::max(diff, max_abs_diff(bi.states[l].w1, st.states[l].w1));
    diff = std::max(diff, max_abs_diff(bi.states[l].w2, st.states[l].w2));
    diff = std::max(diff, max_abs_diff(bi.states[l].w3, st.states[l].w3));
  }
  const auto& model = net.backbone();
  auto stream_flops = [&](Index n) {
    FlopCounter counter;
    auto stream = model.begin_stream();
    for (Index i = 0; i < n; ++i) model.stream_step(stream, image);
    return static_cast<double>(counter.flops());
  };
  auto batch_flops = [&](Index n) {
    const auto images = rng.uniform_tensor<float>({n, 32, 32, 3}, 0, 1);
    FlopCounter counter;
    model.forward(images);
    return static_cast<double>(counter.flops());
  };
  // The streamed total is the criterion. The one-chunk pass is printed for context: its
  // Newton-Schulz work per layer does not depend on N, so its ratio approaches 2 from below.
  bool linear = true;
  std::ostringstream ratios, chunk;
  for (const Index n : {4, 8, 16, 32}) {
    const double rs = stream_flops(2 * n) / stream_flops(n);
    linear = linear && rs >= 1.9 && rs <= 2.1;
    ratios << ' ' << n << "->" << 2 * n << ':' << fmt(rs, 4);
    chunk << ' ' << fmt(batch_flops(2 * n) / batch_flops(n), 3);
  }
  return {diff < 1e-6f && linear, "1-view streaming vs bidirectional max |diff| = " + fmt(diff, 3) +
                                      "; streamed FLOP ratios" + ratios.str() + " (in [1.9, 2.1]); one-chunk" +
                                      chunk.str()};
}

// ---- 6: scaling benchmark -----------------------------------------------------------

Outcome criterion_bench() {
  BenchOptions o;
  o.views = {8, 16, 32, 64, 128};
  o.repeats = 3;
  o.warmups = 2;
  o.size = 32;
  o.model = ModelConfig{};
  o.model.dim = 64;
  o.model.layers = 4;
  o.mode = Mixer::kTTT;
  const auto ttt = bench(o);
  o.mode = Mixer::kDenseAttention;
  const auto dense = bench(o);
  const fs::path out = scratch("bench");
  for (const auto* r : {&ttt, &dense}) {
    std::ofstream(out / ("bench_" + r->mode + ".json")) << r->to_json().dump(2) << '\n';
    std::ofstream(out / ("bench_" + r->mode + ".csv")) << r->to_csv();
  }
  const double ratio = dense.growth() / ttt.growth();
  std::ostringstream d;
  d << "ttt R^2 = " << fmt(ttt.linear.r2, 5) << " (> 0.98); time(128)/time(8): ttt " << fmt(ttt.growth(), 4)
    << ", dense-attn " << fmt(dense.growth(), 4) << ", ratio " << fmt(ratio, 4) << " (>= 1.5); ttt medians [s]:";
  for (const auto& e : ttt.entries) d << ' ' << fmt(e.median_seconds, 3);
  return {ttt.linear.r2 > 0.98 && ratio >= 1.5, d.str()};
}

// ---- 7: query latency independent of the view count ---------------------------------

Outcome criterion_query_latency() {
  const Network<float> net(ModelConfig{}, 71);
  Rng rng(72);
  NoGradGuard no_grad;
  const auto small = net.reconstruct(rng.uniform_tensor<float>({4, 32, 32, 3}, 0, 1)).states;
  const auto large = net.reconstruct(rng.uniform_tensor<float>({64, 32, 32, 3}, 0, 1)).states;
  Camerad cam;
  cam.translation = Eigen::Vector3d(0.1, -0.2, 0.3);
  const auto raymap = raymaps_for<float>({cam}, 32, 32);
  auto time_query = [&](const std::vector<FastWeightState<float>>& states) {
    const auto start = Clock::now();
    net.query(states, raymap);
    return seconds_since(start);
  };
  for (int i = 0; i < 5; ++i) time_query(small), time_query(large);
  std::vector<double> ts, tl;
  for (int i = 0; i < 31; ++i) {
    ts.push_back(time_query(small));
    tl.push_back(time_query(large));
  }
  const double ms = median(ts), ml = median(tl);
  const double rel = std::abs(ml - ms) / std::min(ms, ml);
  return {rel < 0.2, "median query latency: 4-view state " + fmt(ms * 1e3) + " ms, 64-view state " + fmt(ml * 1e3) +
                         " ms, difference " + fmt(100 * rel, 3) + "% (< 20%)"};
}

// ---- 8: toy end-to-end training -----------------------------------------------------

std::vector<SceneBundle> make_scenes(std::uint64_t seed, int count) {
  std::vector<SceneBundle> out;
  for (int i = 0; i < count; ++i)
    out.push_back(generate_scene(splitmix64(seed + static_cast<std::uint64_t>(i)), 8, 32, 32));
  return out;
}

struct HeldOutScores {
  double point = 0;
  double rotation_median = 0;
  double abs_rel = 0;
};

HeldOutScores score(const Network<float>& net, const std::vector<SceneBundle>& scenes) {
  HeldOutScores s;
  std::vector<double> rot;
  NoGradGuard no_grad;
  std::vector<Index> all(8);
  std::iota(all.begin(), all.end(), 0);
  for (const auto& scene : scenes) {
    const auto batch = make_batch<float>(scene, all);
    const auto pred = net.reconstruct(batch.images).prediction;
    s.point += compute_losses(pred, batch, LossOptions{}).components.at("point") / static_cast<double>(scenes.size());
    const auto pc = cameras_from_tensor(pred.cameras);
    for (std::size_t i = 0; i < pc.size(); ++i)
      for (std::size_t j = 0; j < pc.size(); ++j) {
        if (i == j) continue;
        const auto& gi = scene.views[i].camera;
        const auto& gj = scene.views[j].camera;
        rot.push_back(rotation_error_deg(Eigen::Quaterniond(pc[j].rotation * pc[i].rotation.conjugate()),
                                         Eigen::Quaterniond(gj.rotation * gi.rotation.conjugate())));
      }
    const Tensor<double> pd(pred.depth.shape(), std::vector<double>(pred.depth.data().begin(), pred.depth.data().end()));
    const Tensor<double> gd(batch.depth.shape(), std::vector<double>(batch.depth.data().begin(), batch.depth.data().end()));
    const Tensor<double> gm(batch.mask.shape(), std::vector<double>(batch.mask.data().begin(), batch.mask.data().end()));
    s.abs_rel += depth_metrics(pd, gd, gm, DepthAlign::kScale, true).abs_rel / static_cast<double>(scenes.size());
  }
  s.rotation_median = median(rot);
  return s;
}

// Constant depth after the same median scale alignment, and random relative rotations.
std::pair<double, double> baselines(const std::vector<SceneBundle>& scenes) {
  double abs_rel = 0;
  for (const auto& scene : scenes) {
    const Index h = scene.height, w = scene.width, n = scene.view_count();
    Tensor<double> pd({n, h, w}, 1.0), gd({n, h, w}), gm({n, h, w});
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < h * w; ++k) {
        gd.mutable_data()[i * h * w + k] = scene.views[static_cast<std::size_t>(i)].depth[k];
        gm.mutable_data()[i * h * w + k] = scene.views[static_cast<std::size_t>(i)].mask[k];
      }
    abs_rel += depth_metrics(pd, gd, gm, DepthAlign::kScale, true).abs_rel / static_cast<double>(scenes.size());
  }
  Rng rng(83);
  std::vector<double> rot;
  for (int i = 0; i < 20000; ++i) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    rot.push_back(rotation_error_deg(q.normalized(), Eigen::Quaterniond::Identity()));
  }
  return {abs_rel, median(rot)};
}

Outcome criterion_training() {
  const auto train = make_scenes(1, 200);
  const auto held = make_scenes(2, 20);
  auto config = with_total_steps(TrainConfig::load(fs::path(ZIPMAP_SOURCE_DIR) / "configs" / "toy.json"), 8000);
  const fs::path out = scratch("training");
  const Network<float> initial(config.model, config.seed);
  const auto before = score(initial, held);
  const auto ckpt = run_training(config, train, out);
  const auto net = load_network(ckpt);
  const auto after = score(*net, held);
  const auto [const_abs_rel, random_rot] = baselines(held);
  const double drop = 1 - after.point / before.point;
  std::ostringstream d;
  d << "held-out point loss " << fmt(before.point) << " -> " << fmt(after.point) << " (drop " << fmt(100 * drop, 3)
    << "%, >= 50%); median rel-rotation error " << fmt(after.rotation_median, 3) << " deg (< 30; random "
    << fmt(random_rot, 3) << ", init " << fmt(before.rotation_median, 3) << "); AbsRel " << fmt(after.abs_rel, 3)
    << " (< 0.5; constant depth " << fmt(const_abs_rel, 3) << ", init " << fmt(before.abs_rel, 3) << ")";
  return {drop >= 0.5 && after.rotation_median < 30 && after.abs_rel < 0.5, d.str()};
}

// ---- 9: metric oracles --------------------------------------------------------------

Outcome criterion_metrics() {
  Rng rng(91);
  std::vector<std::string> failures;
  auto require = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  // Identity cases, exact.
  for (int trial = 0; trial < 10; ++trial) {
    const auto scene = generate_scene(900 + static_cast<std::uint64_t>(trial), 2 + trial % 5, 12, 12);
    std::vector<Camerad> cams;
    for (const auto& v : scene.views) cams.push_back(v.camera);
    const auto t = ate_rpe(cams, cams);
    require(t.ate_rmse == 0 && t.rpe_trans == 0 && t.rpe_rot == 0, "ate/rpe identity");
    for (const auto& [tau, auc] : pose_auc(cams, cams)) require(auc == 100.0, "auc identity");
    for (double e : pairwise_pose_errors(cams, cams)) require(e == 0.0, "pairwise identity");
    const Index n = scene.view_count(), h = scene.height, w = scene.width;
    Tensor<double> d({n, h, w}), m({n, h, w});
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < h * w; ++k) {
        d.mutable_data()[i * h * w + k] = scene.views[static_cast<std::size_t>(i)].depth[k];
        m.mutable_data()[i * h * w + k] = scene.views[static_cast<std::size_t>(i)].mask[k];
      }
    for (const auto mode : {DepthAlign::kScale, DepthAlign::kScaleShift})
      for (const bool per_sequence : {true, false}) {
        const auto r = depth_metrics(d, d, m, mode, per_sequence);
        require(r.abs_rel == 0 && r.delta == 1, "depth identity");
      }
    const auto eval = evaluate_sequence(scene, scene, {Metric::kChamfer});
    require(eval.at("acc_mean") == 0 && eval.at("comp_mean") == 0 && eval.at("nc_mean") == 1, "chamfer identity");
  }
  // Nearest neighbours and chamfer against brute force.
  double dist_err = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = rng.uniform_int(1, 100), m = rng.uniform_int(1, 100);
    PointMatrix a(n, 3), b(m, 3), na(n, 3), nb(m, 3);
    for (Index i = 0; i < n; ++i) a.row(i) = Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal());
    for (Index i = 0; i < m; ++i) b.row(i) = Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal());
    // Duplicates exercise the lowest-index tie rule.
    if (m > 3) b.row(m - 1) = b.row(1);
    for (Index i = 0; i < n; ++i) na.row(i) = a.row(i).normalized();
    for (Index i = 0; i < m; ++i) nb.row(i) = b.row(i).normalized();
    const KdTree tree(b);
    std::vector<double> acc;
    double nc_sum = 0;
    for (Index i = 0; i < n; ++i) {
      const auto hit = tree.nearest(a.row(i).transpose());
      const auto oracle = brute_force_nearest(b, a.row(i).transpose());
      require(hit.index == oracle.index, "kd-tree index");
      dist_err = std::max(dist_err, std::abs(hit.distance - oracle.distance));
      acc.push_back(oracle.distance);
      nc_sum += std::abs(na.row(i).dot(nb.row(oracle.index)));
    }
    const KdTree tree_a(a);
    std::vector<double> comp;
    double nc_sum_b = 0;
    for (Index i = 0; i < m; ++i) {
      const auto oracle = brute_force_nearest(a, b.row(i).transpose());
      comp.push_back(oracle.distance);
      nc_sum_b += std::abs(nb.row(i).dot(na.row(oracle.index)));
    }
    ChamferOptions no_icp;
    no_icp.icp_iters = 0;
    const auto r = chamfer_metrics(a, na, b, nb, no_icp);
    const double acc_mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(n);
    const double comp_mean = std::accumulate(comp.begin(), comp.end(), 0.0) / static_cast<double>(m);
    const double nc = 0.5 * (nc_sum / static_cast<double>(n) + nc_sum_b / static_cast<double>(m));
    dist_err = std::max({dist_err, std::abs(r.acc_mean - acc_mean), std::abs(r.comp_mean - comp_mean),
                         std::abs(r.acc_median - median(acc)), std::abs(r.comp_median - median(comp)),
                         std::abs(r.nc_mean - nc)});
  }
  // AUC from error lists: exact counts.
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> errors;
    const Index n = rng.uniform_int(1, 100);
    for (Index i = 0; i < n; ++i) errors.push_back(std::floor(rng.uniform(0, 40)) + (rng.uniform() < 0.3 ? 0 : 0.5));
    const auto auc = pose_auc_from_errors(errors, {5, 15, 30});
    for (const int tau : {5, 15, 30}) {
      std::int64_t hits = 0;
      for (int t = 1; t <= tau; ++t)
        for (double e : errors) hits += e < t;
      const double oracle = 100.0 * static_cast<double>(hits) / (static_cast<double>(tau) * static_cast<double>(n));
      require(std::abs(auc.at(tau) - oracle) <= 1e-12 * oracle, "auc count");
    }
  }
  // Depth metrics against a direct computation (scale mode, one sequence).
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1, h = 1 + trial % 5, w = 1 + (trial * 7) % 9;
    Tensor<double> pd({n, h, w}), gd({n, h, w}), mask({n, h, w});
    for (Index i = 0; i < h * w; ++i) {
      gd.mutable_data()[i] = rng.uniform(0.5, 4.0);
      pd.mutable_data()[i] = gd[i] * rng.uniform(0.3, 0.9);
      mask.mutable_data()[i] = rng.uniform() < 0.8 ? 1.0 : 0.0;
    }
    mask.mutable_data()[0] = 1.0;
    std::vector<double> ratios;
    for (Index i = 0; i < h * w; ++i)
      if (mask[i] > 0.5) ratios.push_back(gd[i] / pd[i]);
    const double s = median(ratios);
    double abs_rel = 0;
    std::int64_t good = 0;
    for (Index i = 0; i < h * w; ++i) {
      if (mask[i] < 0.5) continue;
      const double p = s * pd[i];
      abs_rel += std::abs(p - gd[i]) / gd[i];
      good += std::max(p / gd[i], gd[i] / p) < 1.25;
    }
    const auto count = static_cast<double>(ratios.size());
    const auto r = depth_metrics(pd, gd, mask, DepthAlign::kScale, true);
    dist_err = std::max(dist_err, std::abs(r.abs_rel - abs_rel / count));
    require(r.delta == static_cast<double>(good) / count, "depth delta count");
  }
  require(dist_err < 1e-9, "distance oracle");
  std::string detail = "identity cases exact, brute-force max abs err " + fmt(dist_err, 3) + " (< 1e-9)";
  if (!failures.empty()) detail += "; failed: " + failures.front() + " (" + std::to_string(failures.size()) + " checks)";
  return {failures.empty(), detail};
}

// ---- 10: serialization --------------------------------------------------------------

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

// Every file under a and b has the same relative path and bytes.
bool same_tree(const fs::path& a, const fs::path& b) {
  std::set<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.insert(fs::relative(e.path(), b));
  if (fa != fb || fa.empty()) return false;
  for (const auto& f : fa)
    if (file_bytes(a / f) != file_bytes(b / f)) return false;
  return true;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin(), [](float x, float y) {
           return std::memcmp(&x, &y, sizeof(float)) == 0;
         });
}

Outcome criterion_serialization() {
  configure_threads(true);
  const fs::path root = scratch("serialization");
  std::vector<std::string> failures;
  auto require = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  // Scene bundle: save, load, save again.
  const auto scene = generate_scene(1001, 4, 16, 16);
  save_bundle(scene, root / "bundle_a");
  save_bundle(load_bundle(root / "bundle_a"), root / "bundle_b");
  require(same_tree(root / "bundle_a", root / "bundle_b"), "bundle");

  // Checkpoint: train, reload into a fresh trainer, save again.
  TrainConfig config = TrainConfig::from_json(
      nlohmann::json::parse(file_bytes(fs::path(ZIPMAP_SOURCE_DIR) / "configs" / "tiny.json")));
  std::vector<SceneBundle> data;
  for (int i = 0; i < 3; ++i) data.push_back(generate_scene(1010 + static_cast<std::uint64_t>(i), 4, 16, 16));
  config = with_total_steps(config, 3);
  const auto ckpt = run_training(config, data, root / "run");
  Trainer reloaded(config, data);
  reloaded.load_checkpoint(ckpt);
  reloaded.save_checkpoint(root / "ckpt_copy");
  require(same_tree(ckpt, root / "ckpt_copy"), "checkpoint");

  // Scene state: recon writes it, reload must give the same tensors and query outputs.
  ReconOptions ro;
  ro.checkpoint = ckpt;
  ro.scene = root / "bundle_a";
  ro.out = root / "recon";
  const auto result = recon(ro);
  ModelConfig mc;
  nlohmann::json extra;
  const auto loaded = load_states<float>(ro.out / "state", &mc, &extra);
  require(loaded.size() == result.states.size(), "state layer count");
  for (std::size_t l = 0; l < std::min(loaded.size(), result.states.size()); ++l)
    require(bitwise_equal(loaded[l].w1, result.states[l].w1) && bitwise_equal(loaded[l].w2, result.states[l].w2) &&
                bitwise_equal(loaded[l].w3, result.states[l].w3),
            "state tensors");
  save_states(root / "state_copy", loaded, mc, extra);
  require(same_tree(ro.out / "state", root / "state_copy"), "state files");

  const auto net = load_network(ckpt);
  const auto camera = parse_camera((ro.out / "pred").string() + "#2");
  const auto raymap = raymaps_for<float>({camera}, 16, 16);
  Prediction<float> in_process;
  {
    NoGradGuard no_grad;
    in_process = net->query(result.states, raymap);
  }
  QueryOptions qo;
  qo.state = ro.out / "state";
  qo.camera = (ro.out / "pred").string() + "#2";
  qo.out = root / "query";
  const auto from_file = query(qo);
  require(bitwise_equal(in_process.query_rgb, from_file.prediction.query_rgb) &&
              bitwise_equal(in_process.query_depth, from_file.prediction.query_depth) &&
              bitwise_equal(in_process.query_conf, from_file.prediction.query_conf),
          "query after reload");
  require(bitwise_equal(load_zten<float>(qo.out / "query_depth.zten"), in_process.query_depth), "query file");
  std::string detail = "bundle, checkpoint and state files re-save byte-identical; reloaded-state query bitwise equal";
  if (!failures.empty()) {
    detail = "mismatch:";
    for (const auto& f : failures) detail += " " + f;
  }
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient oracles", criterion_gradients},
      {"fast-weight norm preservation", criterion_norms},
      {"Newton-Schulz spectrum", criterion_newton_schulz},
      {"ROE exactness and scale invariance", criterion_roe},
      {"streaming consistency and linear update cost", criterion_streaming},
      {"scaling benchmark", criterion_bench},
      {"query latency constancy", criterion_query_latency},
      {"toy end-to-end training", criterion_training},
      {"metric oracles", criterion_metrics},
      {"serialization round trips", criterion_serialization},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str(),
                seconds_since(start));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
