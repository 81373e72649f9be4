#include <gtest/gtest.h>

#include <cmath>

#include "zipmap/metrics.hpp"
#include "zipmap/rng.hpp"

namespace zipmap {
namespace {

Eigen::Quaterniond random_quaternion(Rng& rng) {
  return canonical_quaternion(Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()));
}

std::vector<Camerad> random_trajectory(Rng& rng, int n) {
  std::vector<Camerad> cams(static_cast<std::size_t>(n));
  for (auto& c : cams) {
    c.rotation = random_quaternion(rng);
    c.translation = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 2.0;
  }
  return cams;
}

// World mapped by x' = s R x + t.
std::vector<Camerad> transform(const std::vector<Camerad>& cams, double s, const Eigen::Quaterniond& r,
                               const Eigen::Vector3d& t) {
  std::vector<Camerad> out = cams;
  for (auto& c : out) {
    c.rotation = canonical_quaternion(Eigen::Quaterniond(c.rotation * r.conjugate()));
    c.translation = s * c.translation - (c.rotation * t);
  }
  return out;
}

PointMatrix random_cloud(Rng& rng, Index n) {
  PointMatrix p(n, 3);
  for (Index i = 0; i < n; ++i) p.row(i) << rng.normal(), rng.normal(), rng.normal();
  return p;
}

TEST(RotationError, ExactZeroAndKnownAngle) {
  Rng rng(1);
  const auto q = random_quaternion(rng);
  EXPECT_EQ(rotation_error_deg(q, q), 0.0);
  EXPECT_EQ(rotation_error_deg(q, Eigen::Quaterniond(-q.coeffs())), 0.0);
  const Eigen::Quaterniond r(Eigen::AngleAxisd(0.3, Eigen::Vector3d::UnitY()));
  EXPECT_NEAR(rotation_error_deg(q, q * r), 0.3 * 180 / std::numbers::pi, 1e-10);
}

TEST(AteRpe, IdentityIsExactlyZero) {
  Rng rng(2);
  const auto cams = random_trajectory(rng, 6);
  const auto r = ate_rpe(cams, cams);
  EXPECT_EQ(r.ate_rmse, 0.0);
  EXPECT_EQ(r.rpe_trans, 0.0);
  EXPECT_EQ(r.rpe_rot, 0.0);
}

TEST(AteRpe, SimilarityIsAbsorbed) {
  Rng rng(3);
  for (int n : {2, 3, 7}) {
    const auto gt = random_trajectory(rng, n);
    const auto pred = transform(gt, 2.7, random_quaternion(rng), Eigen::Vector3d(1, -2, 0.5));
    const auto r = ate_rpe(pred, gt);
    EXPECT_LT(r.ate_rmse, 1e-5) << n;
    EXPECT_LT(r.rpe_trans, 1e-5) << n;
    EXPECT_LT(r.rpe_rot, 1e-5) << n;
  }
}

TEST(AteRpe, AteIsTheMinimumOverSimilarities) {
  Rng rng(4);
  const auto gt = random_trajectory(rng, 12);
  auto pred = transform(gt, 0.5, random_quaternion(rng), Eigen::Vector3d(0.3, 0.1, -1));
  for (auto& c : pred) c.translation += Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.05;
  const double ate = ate_rpe(pred, gt).ate_rmse;
  PointMatrix cp(12, 3), cg(12, 3);
  for (Index i = 0; i < 12; ++i) {
    cp.row(i) = pred[i].center().transpose();
    cg.row(i) = gt[i].center().transpose();
  }
  const auto best = umeyama_align<double>(cp, cg, true);
  auto rms = [&](const Similarity<double>& s) {
    return std::sqrt((s.apply_rows(cp) - cg).rowwise().squaredNorm().mean());
  };
  EXPECT_NEAR(ate, rms(best), 1e-12);
  EXPECT_GT(ate, 1e-3);
  for (int trial = 0; trial < 200; ++trial) {
    Similarity<double> s = best;
    s.scale *= 1 + 0.01 * rng.normal();
    s.rotation = Eigen::AngleAxisd(0.01 * rng.normal(), Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized()) *
                 s.rotation;
    s.translation += Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 0.01;
    EXPECT_GE(rms(s), ate - 1e-12);
  }
}

TEST(AteRpe, RpeOfOneRotatedFrame) {
  std::vector<Camerad> gt(4);
  for (int i = 0; i < 4; ++i) gt[i].translation = Eigen::Vector3d(-i, 0, 0);
  auto pred = gt;
  pred[2].rotation = Eigen::Quaterniond(Eigen::AngleAxisd(10.0 * std::numbers::pi / 180, Eigen::Vector3d::UnitY()));
  const auto r = ate_rpe(pred, gt);
  EXPECT_NEAR(r.rpe_rot, 20.0 / 3.0, 1e-9);
  EXPECT_THROW(ate_rpe(pred, std::vector<Camerad>(3)), UsageError);
  EXPECT_THROW(ate_rpe(std::vector<Camerad>(1), std::vector<Camerad>(1)), UsageError);
}

TEST(PoseAuc, IdentityIsOneHundred) {
  Rng rng(5);
  const auto cams = random_trajectory(rng, 5);
  for (const auto& [t, v] : pose_auc(cams, cams)) EXPECT_EQ(v, 100.0) << t;
}

TEST(PoseAuc, DiscretizationRule) {
  const std::vector<double> errors(12, 10.0);
  const auto auc = pose_auc_from_errors(errors, {5, 10, 11, 30});
  EXPECT_EQ(auc.at(5), 0.0);
  EXPECT_EQ(auc.at(10), 0.0);
  EXPECT_NEAR(auc.at(11), 100.0 / 11.0, 1e-12);
  EXPECT_NEAR(auc.at(30), 100.0 * 20.0 / 30.0, 1e-12);
}

TEST(PoseAuc, MonotoneAndOrderFree) {
  Rng rng(6);
  const auto gt = random_trajectory(rng, 6);
  auto pred = gt;
  for (auto& c : pred)
    c.rotation = canonical_quaternion(Eigen::Quaterniond(
        Eigen::AngleAxisd(0.2 * rng.uniform(), Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized()) *
        c.rotation));
  std::vector<int> taus;
  for (int t = 1; t <= 60; ++t) taus.push_back(t);
  const auto auc = pose_auc(pred, gt, taus);
  for (int t = 2; t <= 60; ++t) EXPECT_GE(auc.at(t), auc.at(t - 1));
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  std::vector<Camerad> pp, gp;
  for (auto i : perm) {
    pp.push_back(pred[i]);
    gp.push_back(gt[i]);
  }
  EXPECT_EQ(pose_auc(pp, gp, taus), auc);
}

TEST(PoseAuc, PairErrorsMatchDirectComputation) {
  Rng rng(7);
  const auto gt = random_trajectory(rng, 5);
  const auto pred = random_trajectory(rng, 5);
  const auto errors = pairwise_pose_errors(pred, gt);
  ASSERT_EQ(errors.size(), 20u);
  std::size_t k = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      if (i == j) continue;
      const Eigen::Matrix3d rp = pred[j].rotation_matrix() * pred[i].rotation_matrix().transpose();
      const Eigen::Matrix3d rg = gt[j].rotation_matrix() * gt[i].rotation_matrix().transpose();
      const Eigen::Vector3d tp = pred[j].translation - rp * pred[i].translation;
      const Eigen::Vector3d tg = gt[j].translation - rg * gt[i].translation;
      const double expected = std::max(rotation_angle_deg<double>(rp.transpose() * rg), vector_angle_deg<double>(tp, tg));
      EXPECT_NEAR(errors[k++], expected, 1e-6);
    }
}

TEST(KdTree, MatchesBruteForceExactly) {
  Rng rng(8);
  for (Index n : {1, 2, 17, 100}) {
    const auto pts = random_cloud(rng, n);
    const KdTree tree(pts);
    for (int q = 0; q < 500; ++q) {
      const Eigen::Vector3d query(rng.normal(), rng.normal(), rng.normal());
      const auto a = tree.nearest(query);
      const auto b = brute_force_nearest(pts, query);
      EXPECT_EQ(a.index, b.index);
      EXPECT_EQ(a.distance, b.distance);
    }
  }
  // Duplicated points resolve to the lowest index.
  PointMatrix dup(3, 3);
  dup << 1, 1, 1, 0, 0, 0, 1, 1, 1;
  EXPECT_EQ(KdTree(dup).nearest(Eigen::Vector3d(1, 1, 1.1)).index, 0);
}

TEST(Chamfer, IdentityIsExact) {
  Rng rng(9);
  const auto pts = random_cloud(rng, 80);
  const auto normals = random_cloud(rng, 80);
  for (bool corr : {false, true}) {
    const auto r = chamfer_metrics(pts, normals, pts, normals, {10, corr});
    EXPECT_EQ(r.acc_mean, 0.0);
    EXPECT_EQ(r.comp_mean, 0.0);
    EXPECT_EQ(r.acc_median, 0.0);
    EXPECT_EQ(r.nc_mean, 1.0);
    EXPECT_EQ(r.nc_median, 1.0);
  }
}

TEST(Chamfer, IcpRemovesARigidOffset) {
  Rng rng(10);
  const auto gt = random_cloud(rng, 100);
  PointMatrix pred = gt.rowwise() + Eigen::RowVector3d(0.05, -0.03, 0.02);
  const auto n = random_cloud(rng, 100);
  const auto r = chamfer_metrics(pred, n, gt, n);
  EXPECT_LT(r.acc_mean, 1e-6);
  EXPECT_LT(r.comp_mean, 1e-6);
  const auto no_icp = chamfer_metrics(pred, n, gt, n, {0, false});
  EXPECT_GT(no_icp.acc_mean, 0.01);
}

TEST(Chamfer, WithoutIcpMatchesBruteForce) {
  Rng rng(11);
  const auto pred = random_cloud(rng, 60), gt = random_cloud(rng, 100);
  const auto np = random_cloud(rng, 60), ng = random_cloud(rng, 100);
  const auto r = chamfer_metrics(pred, np, gt, ng, {0, false});
  double acc = 0, comp = 0, nc = 0;
  for (Index i = 0; i < 60; ++i) {
    double best = 1e300;
    Index arg = 0;
    for (Index j = 0; j < 100; ++j) {
      const double d = (pred.row(i) - gt.row(j)).norm();
      if (d < best) best = d, arg = j;
    }
    acc += best;
    nc += std::abs(np.row(i).normalized().dot(ng.row(arg).normalized())) / 120.0;
  }
  for (Index j = 0; j < 100; ++j) {
    double best = 1e300;
    Index arg = 0;
    for (Index i = 0; i < 60; ++i) {
      const double d = (pred.row(i) - gt.row(j)).norm();
      if (d < best) best = d, arg = i;
    }
    comp += best;
    nc += std::abs(np.row(arg).normalized().dot(ng.row(j).normalized())) / 200.0;
  }
  EXPECT_NEAR(r.acc_mean, acc / 60, 1e-9);
  EXPECT_NEAR(r.comp_mean, comp / 100, 1e-9);
  EXPECT_NEAR(r.nc_mean, nc, 1e-9);
}

TEST(Chamfer, FlippedNormalsAreConsistentAndEmptyThrows) {
  Rng rng(12);
  const auto pts = random_cloud(rng, 30);
  const auto n = random_cloud(rng, 30);
  const PointMatrix flipped = -n;
  EXPECT_NEAR(chamfer_metrics(pts, flipped, pts, n).nc_mean, 1.0, 1e-15);
  EXPECT_THROW(chamfer_metrics(PointMatrix(0, 3), PointMatrix(0, 3), pts, n), UsageError);
}

TEST(DepthMetrics, TrivialCases) {
  Rng rng(13);
  const auto gt = rng.uniform_tensor<double>({2, 4, 5}, 0.5, 4.0);
  const Tensor<double> mask({2, 4, 5}, 1.0);
  for (bool seq : {false, true})
    for (auto mode : {DepthAlign::kScale, DepthAlign::kScaleShift}) {
      const auto r = depth_metrics(gt, gt, mask, mode, seq);
      EXPECT_EQ(r.abs_rel, 0.0);
      EXPECT_EQ(r.delta, 1.0);
    }
  Tensor<double> twice = gt.clone();
  for (auto& x : twice.mutable_data()) x *= 2;
  const auto r2 = depth_metrics(twice, gt, mask, DepthAlign::kScale, true);
  EXPECT_EQ(r2.abs_rel, 0.0);
  EXPECT_EQ(r2.delta, 1.0);
  Tensor<double> shifted = gt.clone();
  for (auto& x : shifted.mutable_data()) x += 0.7;
  const auto r3 = depth_metrics(shifted, gt, mask, DepthAlign::kScaleShift, true);
  EXPECT_LT(r3.abs_rel, 1e-12);
  EXPECT_EQ(r3.delta, 1.0);
  EXPECT_GT(depth_metrics(shifted, gt, mask, DepthAlign::kScale, true).abs_rel, 0.01);
}

TEST(DepthMetrics, ScaleModeInvariantToRescaling) {
  Rng rng(14);
  const auto gt = rng.uniform_tensor<double>({3, 6, 6}, 0.5, 4.0);
  const auto pred = rng.uniform_tensor<double>({3, 6, 6}, 0.5, 4.0);
  const Tensor<double> mask({3, 6, 6}, 1.0);
  for (bool seq : {false, true}) {
    const auto base = depth_metrics(pred, gt, mask, DepthAlign::kScale, seq);
    Tensor<double> scaled = pred.clone();
    for (auto& x : scaled.mutable_data()) x *= 13.0;
    const auto r = depth_metrics(scaled, gt, mask, DepthAlign::kScale, seq);
    EXPECT_NEAR(r.abs_rel, base.abs_rel, 1e-12);
    EXPECT_EQ(r.delta, base.delta);
  }
}

TEST(DepthMetrics, MatchesDirectComputationAndFlagsBadGt) {
  const Tensor<double> pred({1, 1, 5}, {1.0, 2.0, 3.0, 4.0, 5.0});
  const Tensor<double> gt({1, 1, 5}, {2.0, 2.0, 6.0, 0.0, 12.0});
  const Tensor<double> mask({1, 1, 5}, 1.0);
  const auto r = depth_metrics(pred, gt, mask, DepthAlign::kScale, true);
  // Ratios {2, 1, 2, 2.4}: median 2, aligned {2, 4, 6, 10}.
  EXPECT_EQ(r.excluded_pixels, 1);
  EXPECT_NEAR(r.abs_rel, (0.0 + 1.0 + 0.0 + 2.0 / 12.0) / 4.0, 1e-15);
  EXPECT_EQ(r.delta, 0.75);
  EXPECT_THROW(depth_metrics(pred, gt, Tensor<double>({1, 1, 5}, 0.0), DepthAlign::kScale, true), DegenerateInputError);
}

TEST(DepthMetrics, PerViewAlignmentDiffersFromSequenceAlignment) {
  const Tensor<double> gt({2, 1, 2}, {1.0, 1.0, 1.0, 1.0});
  const Tensor<double> pred({2, 1, 2}, {1.0, 1.0, 3.0, 3.0});
  const Tensor<double> mask({2, 1, 2}, 1.0);
  EXPECT_EQ(depth_metrics(pred, gt, mask, DepthAlign::kScale, false).abs_rel, 0.0);
  EXPECT_GT(depth_metrics(pred, gt, mask, DepthAlign::kScale, true).abs_rel, 0.5);
}

}  // namespace
}  // namespace zipmap
