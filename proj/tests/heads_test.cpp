#include <gtest/gtest.h>

#include "zipmap/heads.hpp"

namespace zipmap {
namespace {

template <typename T>
void randomize(ParameterStore<T>& store, const std::string& name, Rng& rng, double stddev) {
  Tensor<T> p = store.get(name);
  for (auto& x : p.mutable_data()) x = static_cast<T>(rng.normal(0.0, stddev));
}

TEST(CameraHead, InitialisedToIdentity) {
  Network<float> net(ModelConfig{}, 1);
  Rng rng(2);
  NoGradGuard ng;
  const auto r = net.reconstruct(rng.uniform_tensor<float>({3, 32, 32, 3}, 0, 1));
  ASSERT_EQ(r.prediction.cameras.shape(), (Shape{3, 9}));
  for (Index n = 0; n < 3; ++n) {
    EXPECT_NEAR(r.prediction.cameras[n * 9], 1.0f, 1e-6f);
    for (int k = 1; k < 7; ++k) EXPECT_EQ(r.prediction.cameras[n * 9 + k], 0.0f);
    EXPECT_NEAR(r.prediction.cameras[n * 9 + 7], 1.0f, 1e-5f);
  }
}

TEST(CameraHead, RandomWeightsGiveValidCameras) {
  Network<float> net(ModelConfig{}, 3);
  Rng rng(4);
  randomize(net.params(), "head.camera.w2", rng, 1.0);
  randomize(net.params(), "head.camera.b2", rng, 2.0);
  NoGradGuard ng;
  const auto cams = net.reconstruct(rng.uniform_tensor<float>({5, 32, 32, 3}, 0, 1)).prediction.cameras;
  for (Index n = 0; n < 5; ++n) {
    double norm = 0;
    for (int k = 0; k < 4; ++k) norm += cams[n * 9 + k] * cams[n * 9 + k];
    EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-6);
    EXPECT_GE(cams[n * 9], 0.0f);
    EXPECT_GT(cams[n * 9 + 7], 0.0f);
    EXPECT_GT(cams[n * 9 + 8], 0.0f);
  }
  EXPECT_NO_THROW(cameras_from_tensor(cams));
}

TEST(DenseHead, RangesAndShapes) {
  Network<float> net(ModelConfig{}, 5);
  Rng rng(6);
  for (const auto& name : {"head.depth.out.w", "head.point.out.w", "head.query.out.w"}) randomize(net.params(), name, rng, 3.0);
  NoGradGuard ng;
  for (auto [h, w] : {std::pair<Index, Index>{32, 32}, {16, 24}}) {
    const auto images = rng.uniform_tensor<float>({2, h, w, 3}, 0, 1);
    const auto rays = rng.normal_tensor<float>({1, h, w, 9});
    const auto p = net.reconstruct(images, rays).prediction;
    EXPECT_EQ(p.depth.shape(), (Shape{2, h, w}));
    EXPECT_EQ(p.conf.shape(), (Shape{2, h, w}));
    EXPECT_EQ(p.points.shape(), (Shape{2, h, w, 3}));
    EXPECT_EQ(p.query_rgb.shape(), (Shape{1, h, w, 3}));
    for (float d : p.depth.data()) EXPECT_GT(d, 0.0f);
    for (float c : p.conf.data()) {
      EXPECT_GE(c, 0.999e-3f);
      EXPECT_LE(c, 1.001e3f);
    }
    for (Index i = 0; i < p.points.numel(); i += 3) EXPECT_GT(p.points[i + 2], 0.0f);
    for (float x : p.query_rgb.data()) {
      EXPECT_GE(x, 0.0f);
      EXPECT_LE(x, 1.0f);
    }
    for (float x : p.query_depth.data()) EXPECT_TRUE(std::isfinite(x) && x > 0);
  }
}

TEST(DecodeAll, QueryFieldsEmptyWithoutRaymaps) {
  Network<float> net(ModelConfig{}, 7);
  Rng rng(8);
  NoGradGuard ng;
  const auto images = rng.uniform_tensor<float>({2, 32, 32, 3}, 0, 1);
  const auto p = net.reconstruct(images).prediction;
  EXPECT_EQ(p.query_views, 0);
  EXPECT_FALSE(p.query_rgb.defined());
  const auto out = net.backbone().forward(images);
  EXPECT_THROW(net.heads().decode_all(out, 32, 32, true), UsageError);
}

TEST(Network, StreamingSingleViewMatchesBidirectional) {
  Network<float> net(ModelConfig{}, 9);
  Rng rng(10);
  NoGradGuard ng;
  const auto image = rng.uniform_tensor<float>({1, 32, 32, 3}, 0, 1);
  const auto a = net.reconstruct(image).prediction;
  const auto b = net.reconstruct_streaming(image).prediction;
  for (Index i = 0; i < a.depth.numel(); ++i) EXPECT_LT(std::abs(a.depth[i] - b.depth[i]), 1e-6f);
  for (Index i = 0; i < a.points.numel(); ++i) EXPECT_LT(std::abs(a.points[i] - b.points[i]), 1e-6f);
  for (Index i = 0; i < 9; ++i) EXPECT_LT(std::abs(a.cameras[i] - b.cameras[i]), 1e-6f);
}

TEST(Network, QueryIsDeterministicAndMatchesInlineQuery) {
  Network<float> net(ModelConfig{}, 11);
  Rng rng(12);
  NoGradGuard ng;
  const auto images = rng.uniform_tensor<float>({3, 32, 32, 3}, 0, 1);
  Camerad cam;
  cam.translation = Eigen::Vector3d(0.1, 0.0, 0.2);
  const auto rays = raymaps_for<float>({cam}, 32, 32);
  const auto inline_q = net.reconstruct(images, rays);
  const auto again = net.reconstruct(images);
  const auto q = net.query(again.states, rays);
  EXPECT_TRUE(std::equal(q.query_rgb.data().begin(), q.query_rgb.data().end(),
                         inline_q.prediction.query_rgb.data().begin()));
  EXPECT_TRUE(std::equal(q.query_depth.data().begin(), q.query_depth.data().end(),
                         inline_q.prediction.query_depth.data().begin()));
}

TEST(Network, RaymapOfCameraMatchesGeometry) {
  Camerad cam;
  cam.fx = cam.fy = 0.9;
  const auto r = raymaps_for<double>({cam, cam}, 4, 4);
  const auto direct = camera_to_raymap(cam, 4, 4);
  EXPECT_EQ(r.shape(), (Shape{2, 4, 4, 9}));
  for (Index i = 0; i < direct.numel(); ++i) {
    EXPECT_EQ(r[i], direct[i]);
    EXPECT_EQ(r[direct.numel() + i], direct[i]);
  }
}

}  // namespace
}  // namespace zipmap
