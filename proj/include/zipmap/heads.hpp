#pragma once

// Prediction heads and the full network (backbone + heads sharing one parameter store).

#include <memory>

#include "zipmap/backbone.hpp"
#include "zipmap/geometry.hpp"

namespace zipmap {

inline constexpr double kConfMin = 1e-3;
inline constexpr double kConfMax = 1e3;
inline constexpr double kFocalEps = 1e-3;

template <typename T>
struct Prediction {
  Index views = 0;
  Index query_views = 0;
  Index height = 0;
  Index width = 0;
  Tensor<T> cameras;  // N x 9, [qw qx qy qz tx ty tz fx fy], world-to-camera
  Tensor<T> depth;    // N x H x W
  Tensor<T> conf;     // N x H x W
  Tensor<T> points;   // N x H x W x 3, local camera frame
  Tensor<T> query_rgb;    // M x H x W x 3
  Tensor<T> query_depth;  // M x H x W
  Tensor<T> query_conf;   // M x H x W
};

template <typename T>
struct DenseHeadParams {
  std::vector<Tensor<T>> norm, proj_w, proj_b;  // one per feature layer
  Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b, out_w, out_b;
};

template <typename T>
class Heads {
 public:
  // Registers head parameters ("head.*") in `store`.
  Heads(const ModelConfig& config, ParameterStore<T>& store, std::uint64_t seed);

  // Camera tokens of the last block -> decoded N x 9 cameras.
  Tensor<T> camera_head(const ForwardOutput<T>& out) const;
  // Raw per-pixel channels, (views * H * W) x out_channels, from a stack of feature layers.
  Tensor<T> dense_head(const DenseHeadParams<T>& p, const std::vector<Tensor<T>>& features, Index views,
                       Index grid_h, Index grid_w, Index height, Index width) const;
  // Assembles the Prediction. `want_query` without raymap features is a UsageError.
  Prediction<T> decode_all(const ForwardOutput<T>& out, Index height, Index width, bool want_query) const;

  const DenseHeadParams<T>& depth_params() const { return depth_; }
  const DenseHeadParams<T>& point_params() const { return point_; }
  const DenseHeadParams<T>& query_params() const { return query_; }

 private:
  DenseHeadParams<T> make_dense(const std::string& name, Index out_channels, ParameterStore<T>& store, Rng& rng);

  ModelConfig config_;
  Tensor<T> cam_norm_, cam_w1_, cam_b1_, cam_w2_, cam_b2_;
  DenseHeadParams<T> depth_, point_, query_;
};

// Backbone plus heads. Not copyable: parameters are shared handles.
template <typename T>
class Network {
 public:
  Network(const ModelConfig& config, std::uint64_t seed);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const ModelConfig& config() const { return backbone_.config(); }
  Model<T>& backbone() { return backbone_; }
  const Model<T>& backbone() const { return backbone_; }
  const Heads<T>& heads() const { return heads_; }
  ParameterStore<T>& params() { return backbone_.params(); }
  const ParameterStore<T>& params() const { return backbone_.params(); }

  struct Result {
    Prediction<T> prediction;
    std::vector<FastWeightState<T>> states;
  };
  // Bidirectional reconstruction; raymaps (M x H x W x 9) additionally produce query outputs.
  Result reconstruct(const Tensor<T>& images, const Tensor<T>& raymaps = {}) const;
  // One view at a time through the streaming update; per-view predictions are concatenated.
  Result reconstruct_streaming(const Tensor<T>& images) const;
  // Apply-only query of stored states.
  Prediction<T> query(const std::vector<FastWeightState<T>>& states, const Tensor<T>& raymaps) const;

 private:
  Model<T> backbone_;
  Heads<T> heads_;
};

// Raymaps for a set of cameras at one resolution, M x H x W x 9.
template <typename T>
Tensor<T> raymaps_for(const std::vector<Camerad>& cameras, Index height, Index width);

// Camera 9-vectors (N x 9) decoded into Camera objects.
std::vector<Camerad> cameras_from_tensor(std::span<const double> values, Index count);
template <typename T>
std::vector<Camerad> cameras_from_tensor(const Tensor<T>& cameras);

}  // namespace zipmap
