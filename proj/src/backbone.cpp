#include "zipmap/backbone.hpp"

#include <cmath>
#include <fstream>

#include "zipmap/json_util.hpp"
#include "zipmap/zten.hpp"

namespace zipmap {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- config -------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (dim <= 0 || fast_hidden <= 0 || layers <= 0 || patch <= 0 || heads <= 0 || ffn_hidden <= 0 ||
      head_channels <= 0 || head_hidden <= 0)
    throw ConfigError("model dimensions must be positive");
  if (dim % heads != 0) throw ConfigError("model dim " + std::to_string(dim) + " not divisible by heads");
  if (head_dim() % 4 != 0) throw ConfigError("head dim must be a multiple of 4 for 2D rotary encoding");
  if (ns_iters < 0) throw ConfigError("ns_iters must be non-negative");
  if (!(eta_init > 0.0)) throw ConfigError("eta_init must be positive");
}

std::vector<Index> ModelConfig::feature_layers() const {
  std::vector<Index> out;
  for (Index i = 1; i <= kFeatureLayers; ++i) out.push_back(std::max<Index>(0, i * layers / kFeatureLayers - 1));
  return out;
}

std::string to_string(Mixer mixer) { return mixer == Mixer::kTTT ? "ttt" : "dense-attn"; }

Mixer mixer_from_string(const std::string& name) {
  if (name == "ttt") return Mixer::kTTT;
  if (name == "dense-attn") return Mixer::kDenseAttention;
  throw ConfigError("unknown mixer '" + name + "' (expected ttt or dense-attn)");
}

json ModelConfig::to_json() const {
  return {{"dim", dim},           {"fast_hidden", fast_hidden},     {"layers", layers},
          {"patch", patch},       {"heads", heads},                 {"ffn_hidden", ffn_hidden},
          {"ns_iters", ns_iters}, {"eta_init", eta_init},           {"head_channels", head_channels},
          {"head_hidden", head_hidden}, {"mixer", zipmap::to_string(mixer)}};
}

ModelConfig ModelConfig::from_json(const json& j, const std::string& path) {
  ModelConfig c;
  c.dim = require_key<Index>(j, "dim", path);
  c.fast_hidden = require_key<Index>(j, "fast_hidden", path);
  c.layers = require_key<Index>(j, "layers", path);
  c.patch = require_key<Index>(j, "patch", path);
  c.heads = require_key<Index>(j, "heads", path);
  c.ffn_hidden = require_key<Index>(j, "ffn_hidden", path);
  c.ns_iters = require_key<int>(j, "ns_iters", path);
  c.eta_init = require_key<double>(j, "eta_init", path);
  c.head_channels = require_key<Index>(j, "head_channels", path);
  c.head_hidden = require_key<Index>(j, "head_hidden", path);
  c.mixer = mixer_from_string(require_key<std::string>(j, "mixer", path));
  c.validate();
  return c;
}

// ---- parameters ---------------------------------------------------------------------

template <typename T>
Tensor<T> ParameterStore<T>::add(const std::string& name, Tensor<T> value, ParamGroup group) {
  if (index_.count(name)) throw ParameterError("duplicate parameter '" + name + "'");
  value.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.push_back({name, value, group});
  return value;
}

template <typename T>
const Tensor<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

template <typename T>
Index ParameterStore<T>::total_size() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

template <typename T>
void ParameterStore<T>::copy_values_from(const ParameterStore& other) {
  for (auto& e : entries_) {
    const Tensor<T>& src = other.get(e.name);
    if (src.shape() != e.value.shape()) throw ShapeError("parameter '" + e.name + "' shape mismatch");
    std::copy(src.data().begin(), src.data().end(), e.value.mutable_data().begin());
  }
}

// ---- fast weights -------------------------------------------------------------------

template <typename T>
FastWeightState<T> FastWeightState<T>::detach() const {
  return {w1.detach(), w2.detach(), w3.detach(), {norms[0].detach(), norms[1].detach(), norms[2].detach()}};
}

template <typename T>
FastWeightState<T> initial_fast_state(const Tensor<T>& w1, const Tensor<T>& w2, const Tensor<T>& w3) {
  if (w1.rank() != 2 || w1.shape() != w3.shape() || w2.shape() != Shape{w1.cols(), w1.rows()})
    throw ShapeError("fast weights must be h' x d, d x h', h' x d");
  return {w1, w2, w3, {frobenius_norm(w1), frobenius_norm(w2), frobenius_norm(w3)}};
}

template <typename T>
Tensor<T> fast_weight_forward(const FastWeightState<T>& s, const Tensor<T>& x) {
  return matmul_nt(mul(silu(matmul_nt(x, s.w1)), matmul_nt(x, s.w3)), s.w2);
}

template <typename T>
Tensor<T> virtual_loss(const FastWeightState<T>& s, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& eta) {
  return neg(sum(mul(row_sum(mul(fast_weight_forward(s, k), v)), eta)));
}

template <typename T>
FastWeightGradient<T> fast_weight_gradient(const FastWeightState<T>& s, const Tensor<T>& k, const Tensor<T>& v,
                                           const Tensor<T>& eta) {
  if (k.rows() != v.rows() || eta.numel() != k.rows())
    throw ShapeError("fast_weight_gradient: k, v and eta row counts differ");
  const Tensor<T> a = matmul_nt(k, s.w1);
  const Tensor<T> b = matmul_nt(k, s.w3);
  const Tensor<T> sa = silu(a);
  const Tensor<T> hidden = mul(sa, b);
  // dL/dF for L = -sum eta_i F_i . v_i
  const Tensor<T> g = neg(mul_col(v, eta));
  const Tensor<T> d_hidden = matmul(g, s.w2);
  const Tensor<T> da = mul(mul(d_hidden, b), silu_prime(a));
  const Tensor<T> db = mul(d_hidden, sa);
  return {matmul_tn(da, k), matmul_tn(g, hidden), matmul_tn(db, k)};
}

namespace {

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T x : t.data())
    if (!std::isfinite(x)) return false;
  return true;
}

template <typename T>
Tensor<T> renormalized_step(const Tensor<T>& w, const Tensor<T>& g, const Tensor<T>& norm, int ns_iters) {
  const Tensor<T> stepped = sub(w, newton_schulz_orthonormalize(g, ns_iters));
  return mul_scalar(div_scalar(stepped, frobenius_norm(stepped)), norm);
}

}  // namespace

template <typename T>
FastWeightState<T> ttt_update(const FastWeightState<T>& s, const Tensor<T>& k, const Tensor<T>& v,
                              const Tensor<T>& eta, int ns_iters, Index layer) {
  if (k.rows() == 0) throw ShapeError("ttt_update: no tokens");
  const auto g = fast_weight_gradient(s, k, v, eta);
  if (!all_finite(g.g1) || !all_finite(g.g2) || !all_finite(g.g3))
    throw NumericError("TTT layer " + std::to_string(layer) + ": non-finite fast-weight gradient");
  return {renormalized_step(s.w1, g.g1, s.norms[0], ns_iters), renormalized_step(s.w2, g.g2, s.norms[1], ns_iters),
          renormalized_step(s.w3, g.g3, s.norms[2], ns_iters), s.norms};
}

template <typename T>
Tensor<T> ttt_apply(const FastWeightState<T>& s, const Tensor<T>& q, const Tensor<T>& gate, const Tensor<T>& norm_gain) {
  const Tensor<T> o = fast_weight_forward(s, q);
  return mul(rmsnorm(o, norm_gain), silu(linear(o, gate)));
}

// ---- model --------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> init_normal(Rng& rng, Shape shape, double stddev) {
  return rng.normal_tensor<T>(std::move(shape), stddev);
}

template <typename T>
Tensor<T> ones(Index n) {
  return Tensor<T>(Shape{n}, T(1));
}

// cos/sin tables (p x d/2) for 2D axial rotary encoding. Inside each head, the first
// half of the channel pairs rotate with the patch row, the second half with the column.
// Special tokens sit at position (0, 0), i.e. no rotation.
template <typename T>
std::pair<RowMatrix<T>, RowMatrix<T>> rotary_tables(Index grid_h, Index grid_w, Index dim, Index heads) {
  const Index p = grid_h * grid_w + kSpecialTokens, half = dim / 2, head_pairs = dim / heads / 2,
              quarter = head_pairs / 2;
  RowMatrix<T> c(p, half), s(p, half);
  for (Index t = 0; t < p; ++t) {
    const bool patch = t < grid_h * grid_w;
    const double row = patch ? static_cast<double>(t / grid_w + 1) : 0.0;
    const double col = patch ? static_cast<double>(t % grid_w + 1) : 0.0;
    for (Index j = 0; j < half; ++j) {
      const Index jj = j % head_pairs;
      const Index fi = jj < quarter ? jj : jj - quarter;
      const double freq = std::pow(100.0, -static_cast<double>(fi) / static_cast<double>(quarter));
      const double angle = (jj < quarter ? row : col) * freq;
      c(t, j) = static_cast<T>(std::cos(angle));
      s(t, j) = static_cast<T>(std::sin(angle));
    }
  }
  return {c, s};
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const Index d = config_.dim, h = config_.fast_hidden, f = config_.ffn_hidden, pp = config_.patch * config_.patch;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const auto other = ParamGroup::kOther, ttt = ParamGroup::kTTT;

  image_embed_w_ = params_.add("embed.image.w", init_normal<T>(rng, {d, pp * 3}, 1.0 / std::sqrt(pp * 3.0)), other);
  image_embed_b_ = params_.add("embed.image.b", Tensor<T>(Shape{d}), other);
  ray_embed_w_ = params_.add("embed.ray.w", init_normal<T>(rng, {d, pp * 9}, 1.0 / std::sqrt(pp * 9.0)), other);
  ray_embed_b_ = params_.add("embed.ray.b", Tensor<T>(Shape{d}), other);
  camera_token_ = params_.add("embed.camera_token", init_normal<T>(rng, {1, d}, 0.5), other);
  query_token_ = params_.add("embed.query_token", init_normal<T>(rng, {1, d}, 0.5), other);
  registers_ = params_.add("embed.registers", init_normal<T>(rng, {kSpecialTokens - 1, d}, 0.5), other);

  const double eta_bias = std::log(std::expm1(config_.eta_init));
  for (Index l = 0; l < config_.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockParams<T> b;
    b.attn_norm = params_.add(p + "attn.norm", ones<T>(d), other);
    b.attn_q = params_.add(p + "attn.wq", init_normal<T>(rng, {d, d}, sd), other);
    b.attn_k = params_.add(p + "attn.wk", init_normal<T>(rng, {d, d}, sd), other);
    b.attn_v = params_.add(p + "attn.wv", init_normal<T>(rng, {d, d}, sd), other);
    b.attn_o = params_.add(p + "attn.wo", init_normal<T>(rng, {d, d}, 0.5 * sd), other);
    b.ttt_norm = params_.add(p + "ttt.norm", ones<T>(d), ttt);
    b.ttt_q = params_.add(p + "ttt.wq", init_normal<T>(rng, {d, d}, sd), ttt);
    b.ttt_k = params_.add(p + "ttt.wk", init_normal<T>(rng, {d, d}, sd), ttt);
    b.ttt_v = params_.add(p + "ttt.wv", init_normal<T>(rng, {d, d}, sd), ttt);
    b.ttt_eta_w = params_.add(p + "ttt.eta.w", init_normal<T>(rng, {1, d}, 0.1 * sd), ttt);
    b.ttt_eta_b = params_.add(p + "ttt.eta.b", Tensor<T>(Shape{1}, static_cast<T>(eta_bias)), ttt);
    b.ttt_gate = params_.add(p + "ttt.gate", init_normal<T>(rng, {d, d}, sd), ttt);
    b.ttt_out_norm = params_.add(p + "ttt.out_norm", ones<T>(d), ttt);
    b.ttt_o = params_.add(p + "ttt.wo", init_normal<T>(rng, {d, d}, 0.5 * sd), ttt);
    b.fast_w1 = params_.add(p + "ttt.fast.w1", init_normal<T>(rng, {h, d}, sd), ttt);
    b.fast_w2 = params_.add(p + "ttt.fast.w2", init_normal<T>(rng, {d, h}, 1.0 / std::sqrt(static_cast<double>(h))), ttt);
    b.fast_w3 = params_.add(p + "ttt.fast.w3", init_normal<T>(rng, {h, d}, sd), ttt);
    b.ffn_norm = params_.add(p + "ffn.norm", ones<T>(d), other);
    b.ffn_up = params_.add(p + "ffn.up", init_normal<T>(rng, {f, d}, sd), other);
    b.ffn_down = params_.add(p + "ffn.down", init_normal<T>(rng, {d, f}, 0.5 / std::sqrt(static_cast<double>(f))), other);
    blocks_.push_back(b);
  }
}

template <typename T>
typename Model<T>::Grid Model<T>::check_input(const Tensor<T>& x, Index channels, const char* what) const {
  if (x.rank() != 4 || x.dim(3) != channels)
    throw ShapeError(std::string(what) + " must be N x H x W x " + std::to_string(channels));
  const Index n = x.dim(0), hgt = x.dim(1), wid = x.dim(2), p = config_.patch;
  if (n <= 0 || hgt <= 0 || wid <= 0) throw ShapeError(std::string(what) + ": empty input");
  if (hgt % p != 0 || wid % p != 0)
    throw ShapeError(std::string(what) + ": " + std::to_string(hgt) + "x" + std::to_string(wid) +
                     " not divisible by patch size " + std::to_string(p));
  return {n, hgt / p, wid / p};
}

template <typename T>
Tensor<T> Model<T>::tokenize(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& special,
                             Index channels, const char* what) const {
  const Grid g = check_input(x, channels, what);
  const Index p = config_.patch, hgt = g.grid_h * p, wid = g.grid_w * p, cells = g.grid_h * g.grid_w;
  std::vector<Index> pix;
  pix.reserve(static_cast<std::size_t>(g.views * hgt * wid));
  for (Index n = 0; n < g.views; ++n)
    for (Index gr = 0; gr < g.grid_h; ++gr)
      for (Index gc = 0; gc < g.grid_w; ++gc)
        for (Index pr = 0; pr < p; ++pr)
          for (Index pc = 0; pc < p; ++pc) pix.push_back((n * hgt + gr * p + pr) * wid + gc * p + pc);
  const Tensor<T> flat = reshape(x, Shape{g.views * hgt * wid, channels});
  const Tensor<T> patches =
      linear(reshape(gather_rows(flat, pix), Shape{g.views * cells, p * p * channels}), w, b);
  std::vector<Index> order;
  const Index per_view = cells + kSpecialTokens;
  order.reserve(static_cast<std::size_t>(g.views * per_view));
  for (Index n = 0; n < g.views; ++n) {
    for (Index c = 0; c < cells; ++c) order.push_back(n * cells + c);
    for (Index s = 0; s < kSpecialTokens; ++s) order.push_back(g.views * cells + s);
  }
  return gather_rows(concat_rows<T>({patches, special}), order);
}

template <typename T>
Tensor<T> Model<T>::tokenize_images(const Tensor<T>& images) const {
  return tokenize(images, image_embed_w_, image_embed_b_, concat_rows<T>({camera_token_, registers_}), 3, "images");
}

template <typename T>
Tensor<T> Model<T>::tokenize_raymaps(const Tensor<T>& raymaps) const {
  return tokenize(raymaps, ray_embed_w_, ray_embed_b_, concat_rows<T>({query_token_, registers_}), 9, "raymaps");
}

template <typename T>
Tensor<T> Model<T>::window_attention(const Tensor<T>& x, Index layer, Index grid_h, Index grid_w) const {
  const auto& b = block(layer);
  const Index p = grid_h * grid_w + kSpecialTokens;
  if (x.rows() % p != 0) throw ShapeError("window_attention: token rows not a multiple of p");
  const auto [cos, sin] = rotary_tables<T>(grid_h, grid_w, config_.dim, config_.heads);
  const Tensor<T> h = rmsnorm(x, b.attn_norm);
  const Tensor<T> q = rotary(linear(h, b.attn_q), cos, sin);
  const Tensor<T> k = rotary(linear(h, b.attn_k), cos, sin);
  const Tensor<T> v = linear(h, b.attn_v);
  return linear(block_attention(q, k, v, config_.heads, p, p), b.attn_o);
}

template <typename T>
Tensor<T> Model<T>::ffn(const Tensor<T>& x, Index layer) const {
  const auto& b = block(layer);
  return linear(silu(linear(rmsnorm(x, b.ffn_norm), b.ffn_up)), b.ffn_down);
}

template <typename T>
typename Model<T>::Projections Model<T>::ttt_projections(const Tensor<T>& x, Index layer, bool need_kv) const {
  const auto& b = block(layer);
  const Tensor<T> h = rmsnorm(x, b.ttt_norm);
  Projections out;
  out.q = l2_normalize(linear(h, b.ttt_q));
  if (need_kv) {
    out.k = l2_normalize(linear(h, b.ttt_k));
    out.v = linear(h, b.ttt_v);
    out.eta = softplus(linear(h, b.ttt_eta_w, b.ttt_eta_b));
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::ttt_output(const FastWeightState<T>& state, const Tensor<T>& q, Index layer) const {
  const auto& b = block(layer);
  return linear(ttt_apply(state, q, b.ttt_gate, b.ttt_out_norm), b.ttt_o);
}

template <typename T>
FastWeightState<T> Model<T>::initial_state(Index layer) const {
  const auto& b = block(layer);
  return initial_fast_state(b.fast_w1, b.fast_w2, b.fast_w3);
}

template <typename T>
void Model<T>::run_block(Index layer, Tensor<T>& x, Tensor<T>* rays, FastWeightState<T>& state, const Grid& grid,
                         bool update) const {
  if (x.defined()) x = add(x, window_attention(x, layer, grid.grid_h, grid.grid_w));
  if (rays) *rays = add(*rays, window_attention(*rays, layer, grid.grid_h, grid.grid_w));

  if (config_.mixer == Mixer::kTTT) {
    if (x.defined()) {
      const auto pr = ttt_projections(x, layer, update);
      if (update) state = ttt_update(state, pr.k, pr.v, pr.eta, config_.ns_iters, layer);
      x = add(x, ttt_output(state, pr.q, layer));
    }
    if (rays) *rays = add(*rays, ttt_output(state, ttt_projections(*rays, layer, false).q, layer));
  } else {
    // Dense ablation: softmax attention over every image token of every view.
    if (!x.defined()) throw UsageError("dense-attn mixer has no stored state to query");
    const auto pr = ttt_projections(x, layer, true);
    const auto& b = block(layer);
    x = add(x, linear(block_attention(pr.q, pr.k, pr.v, config_.heads, x.rows(), x.rows()), b.ttt_o));
    if (rays) {
      const Tensor<T> qr = ttt_projections(*rays, layer, false).q;
      *rays = add(*rays, linear(block_attention(qr, pr.k, pr.v, config_.heads, rays->rows(), pr.k.rows()), b.ttt_o));
    }
  }

  if (x.defined()) x = add(x, ffn(x, layer));
  if (rays) *rays = add(*rays, ffn(*rays, layer));
}

template <typename T>
ForwardOutput<T> Model<T>::forward(const Tensor<T>& images, const Tensor<T>& raymaps) const {
  const Grid grid = check_input(images, 3, "images");
  ForwardOutput<T> out;
  out.views = grid.views;
  out.grid_h = grid.grid_h;
  out.grid_w = grid.grid_w;
  out.tokens_per_view = grid.grid_h * grid.grid_w + kSpecialTokens;
  Tensor<T> x = tokenize_images(images);
  Tensor<T> rays;
  if (raymaps.defined()) {
    const Grid rg = check_input(raymaps, 9, "raymaps");
    if (rg.grid_h != grid.grid_h || rg.grid_w != grid.grid_w)
      throw ShapeError("raymaps and images must share a resolution");
    out.query_views = rg.views;
    rays = tokenize_raymaps(raymaps);
  }
  const auto feature_layers = config_.feature_layers();
  for (Index l = 0; l < config_.layers; ++l) {
    FastWeightState<T> state = initial_state(l);
    run_block(l, x, rays.defined() ? &rays : nullptr, state, grid, true);
    if (config_.mixer == Mixer::kTTT) out.states.push_back(state);
    for (Index f : feature_layers) {
      if (f != l) continue;
      out.features.push_back(x);
      if (rays.defined()) out.query_features.push_back(rays);
    }
  }
  return out;
}

template <typename T>
ForwardOutput<T> Model<T>::query(const std::vector<FastWeightState<T>>& states, const Tensor<T>& raymaps) const {
  if (config_.mixer != Mixer::kTTT) throw UsageError("query needs a TTT model");
  if (static_cast<Index>(states.size()) != config_.layers)
    throw ShapeError("query: expected " + std::to_string(config_.layers) + " layer states, got " +
                     std::to_string(states.size()));
  const Grid grid = check_input(raymaps, 9, "raymaps");
  ForwardOutput<T> out;
  out.query_views = grid.views;
  out.grid_h = grid.grid_h;
  out.grid_w = grid.grid_w;
  out.tokens_per_view = grid.grid_h * grid.grid_w + kSpecialTokens;
  Tensor<T> none;
  Tensor<T> rays = tokenize_raymaps(raymaps);
  const auto feature_layers = config_.feature_layers();
  for (Index l = 0; l < config_.layers; ++l) {
    FastWeightState<T> state = states[static_cast<std::size_t>(l)];
    run_block(l, none, &rays, state, grid, false);
    for (Index f : feature_layers)
      if (f == l) out.query_features.push_back(rays);
  }
  out.states = states;
  return out;
}

template <typename T>
StreamState<T> Model<T>::begin_stream() const {
  if (config_.mixer != Mixer::kTTT) throw UsageError("streaming needs a TTT model");
  StreamState<T> s;
  for (Index l = 0; l < config_.layers; ++l) s.layers.push_back(initial_state(l));
  return s;
}

template <typename T>
ForwardOutput<T> Model<T>::stream_step(StreamState<T>& stream, const Tensor<T>& image) const {
  const Grid grid = check_input(image, 3, "image");
  if (grid.views != 1) throw ShapeError("stream_step takes exactly one view");
  if (static_cast<Index>(stream.layers.size()) != config_.layers) throw ShapeError("stream state layer count mismatch");
  ForwardOutput<T> out;
  out.views = 1;
  out.grid_h = grid.grid_h;
  out.grid_w = grid.grid_w;
  out.tokens_per_view = grid.grid_h * grid.grid_w + kSpecialTokens;
  Tensor<T> x = tokenize_images(image);
  const auto feature_layers = config_.feature_layers();
  for (Index l = 0; l < config_.layers; ++l) {
    run_block(l, x, nullptr, stream.layers[static_cast<std::size_t>(l)], grid, true);
    for (Index f : feature_layers)
      if (f == l) out.features.push_back(x);
  }
  out.states = stream.layers;
  ++stream.views_seen;
  return out;
}

// ---- scene state files --------------------------------------------------------------

namespace {

constexpr int kStateSchemaVersion = 1;

std::string state_file(std::size_t layer, int which) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "layer_%02zu_w%d.zten", layer, which);
  return buf;
}

}  // namespace

template <typename T>
void save_states(const fs::path& dir, const std::vector<FastWeightState<T>>& states, const ModelConfig& config,
                 const json& extra) {
  fs::create_directories(dir);
  json norms = json::array();
  for (std::size_t l = 0; l < states.size(); ++l) {
    const auto& s = states[l];
    save_zten(dir / state_file(l, 1), s.w1);
    save_zten(dir / state_file(l, 2), s.w2);
    save_zten(dir / state_file(l, 3), s.w3);
    norms.push_back({s.norms[0].item(), s.norms[1].item(), s.norms[2].item()});
  }
  json header = {{"format", "zipmap.scene_state"},
                 {"schema_version", kStateSchemaVersion},
                 {"layers", states.size()},
                 {"dim", config.dim},
                 {"fast_hidden", config.fast_hidden},
                 {"norms", norms},
                 {"model", config.to_json()},
                 {"extra", extra}};
  std::ofstream out(dir / "state.json");
  if (!out) throw FormatError("cannot write " + (dir / "state.json").string());
  out << header.dump(2) << '\n';
}

template <typename T>
std::vector<FastWeightState<T>> load_states(const fs::path& dir, ModelConfig* config, json* extra) {
  const fs::path path = dir / "state.json";
  std::ifstream in(path);
  if (!in) throw FormatError("missing file " + path.string());
  json h;
  try {
    h = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (h.value("format", "") != "zipmap.scene_state") throw FormatError(path.string() + ": not a scene state file");
  if (h.value("schema_version", -1) != kStateSchemaVersion)
    throw FormatError(path.string() + ": unsupported schema version");
  const auto layers = h.at("layers").get<std::size_t>();
  const auto& norms = h.at("norms");
  if (norms.size() != layers) throw FormatError(path.string() + ": norm list length mismatch");
  std::vector<FastWeightState<T>> states;
  for (std::size_t l = 0; l < layers; ++l) {
    FastWeightState<T> s;
    for (int which = 1; which <= 3; ++which)
      if (!fs::exists(dir / state_file(l, which))) throw FormatError("missing file " + (dir / state_file(l, which)).string());
    s.w1 = load_zten<T>(dir / state_file(l, 1));
    s.w2 = load_zten<T>(dir / state_file(l, 2));
    s.w3 = load_zten<T>(dir / state_file(l, 3));
    for (int k = 0; k < 3; ++k) s.norms[static_cast<std::size_t>(k)] = Tensor<T>::scalar(norms[l][static_cast<std::size_t>(k)].get<T>());
    states.push_back(s);
  }
  if (config) *config = ModelConfig::from_json(h.at("model"));
  if (extra) *extra = h.value("extra", json::object());
  return states;
}

#define ZIPMAP_INSTANTIATE_BACKBONE(T)                                                                       \
  template class ParameterStore<T>;                                                                          \
  template struct FastWeightState<T>;                                                                        \
  template FastWeightState<T> initial_fast_state(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> fast_weight_forward(const FastWeightState<T>&, const Tensor<T>&);                       \
  template Tensor<T> virtual_loss(const FastWeightState<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                  const Tensor<T>&);                                                         \
  template FastWeightGradient<T> fast_weight_gradient(const FastWeightState<T>&, const Tensor<T>&,           \
                                                      const Tensor<T>&, const Tensor<T>&);                   \
  template FastWeightState<T> ttt_update(const FastWeightState<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                         const Tensor<T>&, int, Index);                                      \
  template Tensor<T> ttt_apply(const FastWeightState<T>&, const Tensor<T>&, const Tensor<T>&,                \
                               const Tensor<T>&);                                                            \
  template class Model<T>;                                                                                   \
  template void save_states(const fs::path&, const std::vector<FastWeightState<T>>&, const ModelConfig&,     \
                            const json&);                                                                    \
  template std::vector<FastWeightState<T>> load_states(const fs::path&, ModelConfig*, json*);

ZIPMAP_INSTANTIATE_BACKBONE(float)
ZIPMAP_INSTANTIATE_BACKBONE(double)

}  // namespace zipmap
