#pragma once

// Tokenization and the interleaved window-attention / large-chunk TTT stack.
//
// Every view is p = G + 5 token rows: G patch tokens in raster order, then the camera
// (images) or query (raymaps) token, then 4 register tokens. Token matrices for several
// views are stacked view after view.

#include <array>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "zipmap/linalg.hpp"
#include "zipmap/rng.hpp"

namespace zipmap {

inline constexpr Index kSpecialTokens = 5;
inline constexpr Index kFeatureLayers = 4;

enum class Mixer { kTTT, kDenseAttention };

struct ModelConfig {
  Index dim = 64;
  Index fast_hidden = 128;  // h'
  Index layers = 4;
  Index patch = 8;
  Index heads = 4;
  Index ffn_hidden = 128;
  int ns_iters = kDefaultNewtonSchulzIters;
  double eta_init = 0.01;
  Index head_channels = 8;   // per feature layer in the dense heads
  Index head_hidden = 16;
  Mixer mixer = Mixer::kTTT;

  void validate() const;
  Index head_dim() const { return dim / heads; }
  // 3 d h' fast-weight parameters per layer (6 d^2 when h' = 2d).
  Index state_params_per_layer() const { return 3 * dim * fast_hidden; }
  // Block indices whose outputs feed the dense heads, evenly spaced and ending at the last.
  std::vector<Index> feature_layers() const;

  nlohmann::json to_json() const;
  // Missing or mistyped keys raise ConfigError naming the key under `path`.
  static ModelConfig from_json(const nlohmann::json& j, const std::string& path = "model");
};

std::string to_string(Mixer mixer);
Mixer mixer_from_string(const std::string& name);

enum class ParamGroup { kTTT, kOther };

// Named trainable tensors in registration order. Copies of the stored tensors share
// storage, so modules keep direct handles and the store is the serialization view.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    ParamGroup group;
  };

  Tensor<T> add(const std::string& name, Tensor<T> value, ParamGroup group);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<Entry>& entries() const { return entries_; }
  Index total_size() const;
  void zero_grad();
  // Overwrites values in place from `other` (same names and shapes).
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---- fast weights -------------------------------------------------------------------

template <typename T>
struct FastWeightState {
  Tensor<T> w1;  // h' x d
  Tensor<T> w2;  // d x h'
  Tensor<T> w3;  // h' x d
  std::array<Tensor<T>, 3> norms;  // Frobenius norms captured when the pass started

  Index param_count() const { return w1.numel() + w2.numel() + w3.numel(); }
  FastWeightState detach() const;
};

template <typename T>
struct FastWeightGradient {
  Tensor<T> g1, g2, g3;
};

// State whose weights are `w1..w3` and whose stored norms are their current norms.
template <typename T>
FastWeightState<T> initial_fast_state(const Tensor<T>& w1, const Tensor<T>& w2, const Tensor<T>& w3);

// f_W(x) = W2 (silu(W1 x) * (W3 x)) for every row of x.
template <typename T>
Tensor<T> fast_weight_forward(const FastWeightState<T>& state, const Tensor<T>& x);

// Virtual key-value objective  -sum_i eta_i f_W(k_i) . v_i  (eta is rows x 1).
template <typename T>
Tensor<T> virtual_loss(const FastWeightState<T>& state, const Tensor<T>& k, const Tensor<T>& v,
                       const Tensor<T>& eta);

// Closed-form gradient of virtual_loss w.r.t. W1, W2, W3, assembled from differentiable
// ops so slow weights can be trained through it.
template <typename T>
FastWeightGradient<T> fast_weight_gradient(const FastWeightState<T>& state, const Tensor<T>& k,
                                           const Tensor<T>& v, const Tensor<T>& eta);

// One large-chunk step: per matrix, Delta = NewtonSchulz(g) and
// W <- stored_norm * (W - Delta) / ||W - Delta||. Throws NumericError naming `layer` if the
// gradient is not finite.
template <typename T>
FastWeightState<T> ttt_update(const FastWeightState<T>& state, const Tensor<T>& k, const Tensor<T>& v,
                              const Tensor<T>& eta, int ns_iters, Index layer);

// o = rmsnorm(o') * silu(W_g o') with o' = f_W(q). Reads the state only.
template <typename T>
Tensor<T> ttt_apply(const FastWeightState<T>& state, const Tensor<T>& q, const Tensor<T>& gate,
                    const Tensor<T>& norm_gain);

// ---- model --------------------------------------------------------------------------

template <typename T>
struct BlockParams {
  Tensor<T> attn_norm, attn_q, attn_k, attn_v, attn_o;
  Tensor<T> ttt_norm, ttt_q, ttt_k, ttt_v, ttt_eta_w, ttt_eta_b, ttt_gate, ttt_out_norm, ttt_o;
  Tensor<T> fast_w1, fast_w2, fast_w3;
  Tensor<T> ffn_norm, ffn_up, ffn_down;
};

template <typename T>
struct ForwardOutput {
  Index views = 0;
  Index query_views = 0;
  Index grid_h = 0;
  Index grid_w = 0;
  Index tokens_per_view = 0;
  // Outputs of the blocks listed by ModelConfig::feature_layers(), (views * p) x d.
  std::vector<Tensor<T>> features;
  std::vector<Tensor<T>> query_features;
  // Per layer, the fast weights after that layer's update.
  std::vector<FastWeightState<T>> states;
};

template <typename T>
struct StreamState {
  std::vector<FastWeightState<T>> layers;
  Index views_seen = 0;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  const BlockParams<T>& block(Index l) const { return blocks_[static_cast<std::size_t>(l)]; }

  // images: N x H x W x 3 -> (N * p) x d.
  Tensor<T> tokenize_images(const Tensor<T>& images) const;
  // raymaps: M x H x W x 9 -> (M * p) x d.
  Tensor<T> tokenize_raymaps(const Tensor<T>& raymaps) const;
  // Multi-head attention restricted to each view's p tokens, 2D rotary on patch tokens
  // of a grid_h x grid_w patch grid.
  Tensor<T> window_attention(const Tensor<T>& x, Index layer, Index grid_h, Index grid_w) const;

  // All views update every TTT layer in one step; raymaps only read the updated state.
  ForwardOutput<T> forward(const Tensor<T>& images, const Tensor<T>& raymaps = {}) const;
  // Apply-only pass of raymaps through previously computed per-layer states.
  ForwardOutput<T> query(const std::vector<FastWeightState<T>>& states, const Tensor<T>& raymaps) const;

  StreamState<T> begin_stream() const;
  // Updates each layer's state with one new view (1 x H x W x 3) and returns its features.
  ForwardOutput<T> stream_step(StreamState<T>& stream, const Tensor<T>& image) const;

  FastWeightState<T> initial_state(Index layer) const;

 private:
  struct Grid {
    Index views, grid_h, grid_w;
  };
  Grid check_input(const Tensor<T>& x, Index channels, const char* what) const;
  Tensor<T> tokenize(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& special,
                     Index channels, const char* what) const;
  Tensor<T> ffn(const Tensor<T>& x, Index layer) const;
  struct Projections {
    Tensor<T> q, k, v, eta;
  };
  Projections ttt_projections(const Tensor<T>& x, Index layer, bool need_kv) const;
  Tensor<T> ttt_output(const FastWeightState<T>& state, const Tensor<T>& q, Index layer) const;
  // Runs block `layer` on image tokens (updating `state` from them) and on raymap tokens.
  void run_block(Index layer, Tensor<T>& x, Tensor<T>* rays, FastWeightState<T>& state, const Grid& grid,
                 bool update) const;

  ModelConfig config_;
  ParameterStore<T> params_;
  std::vector<BlockParams<T>> blocks_;
  Tensor<T> image_embed_w_, image_embed_b_, ray_embed_w_, ray_embed_b_;
  Tensor<T> camera_token_, query_token_, registers_;
};

// Scene state file: <dir>/state.json plus layer_LL_w{1,2,3}.zten.
template <typename T>
void save_states(const std::filesystem::path& dir, const std::vector<FastWeightState<T>>& states,
                 const ModelConfig& config, const nlohmann::json& extra = {});
template <typename T>
std::vector<FastWeightState<T>> load_states(const std::filesystem::path& dir, ModelConfig* config = nullptr,
                                            nlohmann::json* extra = nullptr);

}  // namespace zipmap
