#include "zipmap/heads.hpp"

#include <cmath>

namespace zipmap {

namespace {

template <typename T>
Tensor<T> normal_init(Rng& rng, Shape shape, double fan_in) {
  return rng.normal_tensor<T>(std::move(shape), 1.0 / std::sqrt(fan_in));
}

// Neighbour row indices for a 3x3 same-padded convolution over `views` H x W grids:
// for every pixel, 9 entries in (dy, dx) raster order, -1 outside the image.
std::vector<Index> im2col_index(Index views, Index height, Index width) {
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(views * height * width * 9));
  for (Index n = 0; n < views; ++n)
    for (Index v = 0; v < height; ++v)
      for (Index u = 0; u < width; ++u)
        for (Index dy = -1; dy <= 1; ++dy)
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index vv = v + dy, uu = u + dx;
            idx.push_back(vv < 0 || uu < 0 || vv >= height || uu >= width ? -1 : (n * height + vv) * width + uu);
          }
  return idx;
}

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const std::vector<Index>& idx, const Tensor<T>& w, const Tensor<T>& b) {
  const Index rows = x.rows(), c = x.cols();
  return linear(reshape(gather_rows(x, idx), Shape{rows, 9 * c}), w, b);
}

// Pixel-center coordinates scaled to [-1, 1], two channels (u, v).
template <typename T>
Tensor<T> pixel_coords(Index views, Index height, Index width) {
  Tensor<T> out(Shape{views * height * width, 2});
  auto d = out.mutable_data();
  std::size_t i = 0;
  for (Index n = 0; n < views; ++n)
    for (Index v = 0; v < height; ++v)
      for (Index u = 0; u < width; ++u) {
        d[i++] = static_cast<T>(2.0 * (static_cast<double>(u) + 0.5) / static_cast<double>(width) - 1.0);
        d[i++] = static_cast<T>(2.0 * (static_cast<double>(v) + 0.5) / static_cast<double>(height) - 1.0);
      }
  return out;
}

template <typename T>
Tensor<T> positive_conf(const Tensor<T>& raw) {
  return exp(clamp(raw, static_cast<T>(std::log(kConfMin)), static_cast<T>(std::log(kConfMax))));
}

}  // namespace

template <typename T>
Heads<T>::Heads(const ModelConfig& config, ParameterStore<T>& store, std::uint64_t seed) : config_(config) {
  Rng rng(seed);
  const Index d = config_.dim;
  const auto g = ParamGroup::kOther;
  cam_norm_ = store.add("head.camera.norm", Tensor<T>(Shape{d}, T(1)), g);
  cam_w1_ = store.add("head.camera.w1", normal_init<T>(rng, {d, d}, static_cast<double>(d)), g);
  cam_b1_ = store.add("head.camera.b1", Tensor<T>(Shape{d}), g);
  cam_w2_ = store.add("head.camera.w2", Tensor<T>(Shape{9, d}), g);
  // Identity rotation, zero translation, unit focals: softplus(log(e - 1)) = 1.
  const T f0 = static_cast<T>(std::log(std::expm1(1.0 - kFocalEps)));
  cam_b2_ = store.add("head.camera.b2", Tensor<T>(Shape{9}, std::vector<T>{1, 0, 0, 0, 0, 0, 0, f0, f0}), g);
  depth_ = make_dense("depth", 2, store, rng);
  point_ = make_dense("point", 3, store, rng);
  query_ = make_dense("query", 5, store, rng);
}

template <typename T>
DenseHeadParams<T> Heads<T>::make_dense(const std::string& name, Index out_channels, ParameterStore<T>& store,
                                        Rng& rng) {
  const std::string p = "head." + name + ".";
  const Index d = config_.dim, c = config_.head_channels, hid = config_.head_hidden;
  const Index in = kFeatureLayers * c + 2;
  const auto g = ParamGroup::kOther;
  DenseHeadParams<T> h;
  for (Index i = 0; i < kFeatureLayers; ++i) {
    const std::string l = std::to_string(i);
    h.norm.push_back(store.add(p + "norm" + l, Tensor<T>(Shape{d}, T(1)), g));
    h.proj_w.push_back(store.add(p + "proj" + l + ".w", normal_init<T>(rng, {c, d}, static_cast<double>(d)), g));
    h.proj_b.push_back(store.add(p + "proj" + l + ".b", Tensor<T>(Shape{c}), g));
  }
  h.conv1_w = store.add(p + "conv1.w", normal_init<T>(rng, {hid, 9 * in}, 9.0 * static_cast<double>(in)), g);
  h.conv1_b = store.add(p + "conv1.b", Tensor<T>(Shape{hid}), g);
  h.conv2_w = store.add(p + "conv2.w", normal_init<T>(rng, {hid, 9 * hid}, 9.0 * static_cast<double>(hid)), g);
  h.conv2_b = store.add(p + "conv2.b", Tensor<T>(Shape{hid}), g);
  h.out_w = store.add(p + "out.w", rng.normal_tensor<T>({out_channels, hid}, 0.1 / std::sqrt(static_cast<double>(hid))), g);
  h.out_b = store.add(p + "out.b", Tensor<T>(Shape{out_channels}), g);
  return h;
}

template <typename T>
Tensor<T> Heads<T>::camera_head(const ForwardOutput<T>& out) const {
  const Index cells = out.grid_h * out.grid_w;
  std::vector<Index> rows;
  for (Index n = 0; n < out.views; ++n) rows.push_back(n * out.tokens_per_view + cells);
  const Tensor<T> tokens = rmsnorm(gather_rows(out.features.back(), rows), cam_norm_);
  const Tensor<T> raw = linear(silu(linear(tokens, cam_w1_, cam_b1_)), cam_w2_, cam_b2_);

  const Tensor<T> quat = l2_normalize(slice_cols(raw, 0, 4));
  Tensor<T> sign(Shape{out.views, 1});
  for (Index n = 0; n < out.views; ++n) sign.mutable_data()[static_cast<std::size_t>(n)] = quat[n * 4] < T(0) ? T(-1) : T(1);
  const Tensor<T> focal = add_scalar(softplus(slice_cols(raw, 7, 2)), static_cast<T>(kFocalEps));
  return concat_cols<T>({mul_col(quat, sign), slice_cols(raw, 4, 3), focal});
}

template <typename T>
Tensor<T> Heads<T>::dense_head(const DenseHeadParams<T>& p, const std::vector<Tensor<T>>& features, Index views,
                               Index grid_h, Index grid_w, Index height, Index width) const {
  if (static_cast<Index>(features.size()) != kFeatureLayers)
    throw ShapeError("dense_head expects " + std::to_string(kFeatureLayers) + " feature layers");
  const Index cells = grid_h * grid_w, per_view = cells + kSpecialTokens;
  std::vector<Index> patch_rows;
  patch_rows.reserve(static_cast<std::size_t>(views * cells));
  for (Index n = 0; n < views; ++n)
    for (Index c = 0; c < cells; ++c) patch_rows.push_back(n * per_view + c);
  std::vector<Tensor<T>> projected;
  for (Index i = 0; i < kFeatureLayers; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    projected.push_back(linear(rmsnorm(gather_rows(features[ui], patch_rows), p.norm[ui]), p.proj_w[ui], p.proj_b[ui]));
  }
  const Tensor<T> grid = concat_cols(projected);
  const Tensor<T> up = concat_cols<T>(
      {bilinear_upsample(grid, views, grid_h, grid_w, height, width), pixel_coords<T>(views, height, width)});
  const auto idx = im2col_index(views, height, width);
  const Tensor<T> h1 = silu(conv3x3(up, idx, p.conv1_w, p.conv1_b));
  const Tensor<T> h2 = silu(conv3x3(h1, idx, p.conv2_w, p.conv2_b));
  return linear(h2, p.out_w, p.out_b);
}

template <typename T>
Prediction<T> Heads<T>::decode_all(const ForwardOutput<T>& out, Index height, Index width, bool want_query) const {
  if (want_query && out.query_features.empty()) throw UsageError("query outputs requested without raymap features");
  Prediction<T> pred;
  pred.height = height;
  pred.width = width;
  pred.views = out.features.empty() ? 0 : out.views;
  if (!out.features.empty()) {
    const Index n = out.views;
    pred.cameras = camera_head(out);
    const Tensor<T> dc = dense_head(depth_, out.features, n, out.grid_h, out.grid_w, height, width);
    pred.depth = reshape(exp(slice_cols(dc, 0, 1)), Shape{n, height, width});
    pred.conf = reshape(positive_conf(slice_cols(dc, 1, 1)), Shape{n, height, width});
    const Tensor<T> pc = dense_head(point_, out.features, n, out.grid_h, out.grid_w, height, width);
    pred.points = reshape(concat_cols<T>({slice_cols(pc, 0, 2), exp(slice_cols(pc, 2, 1))}), Shape{n, height, width, 3});
  }
  if (!out.query_features.empty()) {
    const Index m = out.query_views;
    pred.query_views = m;
    const Tensor<T> qc = dense_head(query_, out.query_features, m, out.grid_h, out.grid_w, height, width);
    pred.query_rgb = reshape(sigmoid(slice_cols(qc, 0, 3)), Shape{m, height, width, 3});
    pred.query_depth = reshape(exp(slice_cols(qc, 3, 1)), Shape{m, height, width});
    pred.query_conf = reshape(positive_conf(slice_cols(qc, 4, 1)), Shape{m, height, width});
  }
  return pred;
}

// ---- network ------------------------------------------------------------------------

template <typename T>
Network<T>::Network(const ModelConfig& config, std::uint64_t seed)
    : backbone_(config, seed), heads_(backbone_.config(), backbone_.params(), seed ^ 0x9e3779b97f4a7c15ULL) {}

template <typename T>
typename Network<T>::Result Network<T>::reconstruct(const Tensor<T>& images, const Tensor<T>& raymaps) const {
  auto out = backbone_.forward(images, raymaps);
  Result r;
  r.prediction = heads_.decode_all(out, images.dim(1), images.dim(2), raymaps.defined());
  r.states = std::move(out.states);
  return r;
}

namespace {

template <typename T>
Tensor<T> slice_view(const Tensor<T>& x, Index view) {
  const Index per = x.numel() / x.dim(0);
  std::vector<T> v(x.data().begin() + view * per, x.data().begin() + (view + 1) * per);
  Shape s = x.shape();
  s[0] = 1;
  return Tensor<T>(s, std::move(v));
}

template <typename T>
Tensor<T> stack_views(const std::vector<Tensor<T>>& parts, Shape tail) {
  std::vector<Tensor<T>> flat;
  for (const auto& p : parts) flat.push_back(reshape(p, Shape{p.numel() / p.shape().back(), p.shape().back()}));
  Tensor<T> all = concat_rows(flat);
  tail.insert(tail.begin(), static_cast<Index>(parts.size()));
  return reshape(all, tail);
}

}  // namespace

template <typename T>
typename Network<T>::Result Network<T>::reconstruct_streaming(const Tensor<T>& images) const {
  if (images.rank() != 4) throw ShapeError("images must be N x H x W x 3");
  const Index n = images.dim(0), h = images.dim(1), w = images.dim(2);
  auto stream = backbone_.begin_stream();
  std::vector<Tensor<T>> cams, depth, conf, points;
  for (Index i = 0; i < n; ++i) {
    const auto out = backbone_.stream_step(stream, slice_view(images, i));
    const auto p = heads_.decode_all(out, h, w, false);
    cams.push_back(p.cameras);
    depth.push_back(p.depth);
    conf.push_back(p.conf);
    points.push_back(p.points);
  }
  Result r;
  r.prediction.views = n;
  r.prediction.height = h;
  r.prediction.width = w;
  r.prediction.cameras = concat_rows(cams);
  r.prediction.depth = stack_views(depth, {h, w});
  r.prediction.conf = stack_views(conf, {h, w});
  r.prediction.points = stack_views(points, {h, w, 3});
  r.states = stream.layers;
  return r;
}

template <typename T>
Prediction<T> Network<T>::query(const std::vector<FastWeightState<T>>& states, const Tensor<T>& raymaps) const {
  const auto out = backbone_.query(states, raymaps);
  return heads_.decode_all(out, raymaps.dim(1), raymaps.dim(2), true);
}

template <typename T>
Tensor<T> raymaps_for(const std::vector<Camerad>& cameras, Index height, Index width) {
  std::vector<T> data;
  data.reserve(cameras.size() * static_cast<std::size_t>(height * width * 9));
  for (const auto& c : cameras) {
    const auto r = camera_to_raymap(c, height, width);
    for (double x : r.data()) data.push_back(static_cast<T>(x));
  }
  return Tensor<T>(Shape{static_cast<Index>(cameras.size()), height, width, 9}, std::move(data));
}

std::vector<Camerad> cameras_from_tensor(std::span<const double> values, Index count) {
  if (static_cast<Index>(values.size()) != count * Camerad::kParams) throw ShapeError("camera tensor must be N x 9");
  std::vector<Camerad> out;
  for (Index i = 0; i < count; ++i) out.push_back(Camerad::from_vector(values.subspan(static_cast<std::size_t>(i * 9), 9)));
  return out;
}

template <typename T>
std::vector<Camerad> cameras_from_tensor(const Tensor<T>& cameras) {
  if (cameras.cols() != 9) throw ShapeError("camera tensor must be N x 9");
  std::vector<double> v(cameras.data().begin(), cameras.data().end());
  return cameras_from_tensor(std::span<const double>(v), cameras.rows());
}

#define ZIPMAP_INSTANTIATE_HEADS(T)                                                    \
  template class Heads<T>;                                                             \
  template class Network<T>;                                                           \
  template Tensor<T> raymaps_for<T>(const std::vector<Camerad>&, Index, Index);        \
  template std::vector<Camerad> cameras_from_tensor(const Tensor<T>&);

ZIPMAP_INSTANTIATE_HEADS(float)
ZIPMAP_INSTANTIATE_HEADS(double)

}  // namespace zipmap
