#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "oracles.hpp"
#include "vpnet/gradcheck.hpp"
#include "vpnet/pointnet.hpp"

using namespace vpnet;

namespace {

CameraRig rig64() {
  CameraRig r;
  r.fx = r.fy = 100;
  r.cx = 64;
  r.cy = 32;
  r.baseline = 0.5;
  r.width = 128;
  r.height = 64;
  return r;
}

PointCloud random_cloud(const CameraRig& rig, const VoxelGridSpec& spec, std::size_t n, Rng& rng) {
  return probes::random_points(rig, spec, n, rng, 2.0, 0.95 * spec.z_max);
}

}  // namespace

TEST(Cluster, SinglePointIsItsOwnCluster) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  PointCloud c;
  c.add({0, 0, 10});
  const auto ci = cluster(c, rig, spec);
  ASSERT_EQ(ci.size(), 1u);
  EXPECT_EQ(ci.neighbors[0], (std::vector<std::uint32_t>{0}));
}

TEST(Cluster, DepthWindowOnOneRay) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  const double step = spec.spacing();
  PointCloud c;
  c.add({0, 0, static_cast<float>(10 * step)});
  c.add({0, 0, static_cast<float>(13 * step)});
  EXPECT_EQ(cluster(c, rig, spec, {1, 1, 1}).neighbors[0].size(), 1u);
  EXPECT_EQ(cluster(c, rig, spec, {1, 1, 3}).neighbors[0], (std::vector<std::uint32_t>{0, 1}));
}

TEST(Cluster, MatchesQuadraticScan) {
  const auto rig = rig64();
  Rng rng(21);
  for (const auto& spec : {VoxelGridSpec::depth_linear(rig, 48, 100), VoxelGridSpec::disparity_linear(rig, 16, 100)}) {
    for (int rep = 0; rep < 5; ++rep) {
      const auto pts = random_cloud(rig, spec, 200, rng);
      for (const Window w : {Window{1, 1, 1}, Window{2, 0, 3}}) {
        const auto got = cluster(pts, rig, spec, w);
        const auto ref = oracle::cluster(pts, rig, spec, static_cast<long>(w.wu), static_cast<long>(w.wv),
                                         static_cast<long>(w.wd));
        EXPECT_EQ(got.neighbors, ref);
      }
    }
  }
}

TEST(Cluster, CenterAlwaysIncluded) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  Rng rng(2);
  const auto pts = random_cloud(rig, spec, 100, rng);
  const auto ci = cluster(pts, rig, spec);
  for (std::size_t i = 0; i < ci.size(); ++i) {
    EXPECT_TRUE(std::binary_search(ci.neighbors[i].begin(), ci.neighbors[i].end(), static_cast<std::uint32_t>(i)));
  }
}

TEST(Cluster, OutOfGridPointRejected) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  PointCloud c;
  c.add({0, 0, 150});
  EXPECT_THROW(cluster(c, rig, spec), UsageError);
  EXPECT_EQ(filter_points_for_grid(c, rig, spec).dropped, 1u);
}

TEST(Fuse, ConstantFeatureMap) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  Rng rng(5);
  const auto pts = random_cloud(rig, spec, 30, rng);
  Tensor<double> fl({2, spec.H, spec.W}, 5.0);
  Tensor<double> fp({2, pts.size()}, 1.0);
  const auto at = feature_coords(pts, rig, spec);
  const auto fused = image_to_point_fuse(fl, std::span<const Sample2d>(at), fp);
  ASSERT_EQ(fused.shape(), (Shape{4, pts.size()}));
  for (std::size_t i = 0; i < 2 * pts.size(); ++i) EXPECT_DOUBLE_EQ(fused[i], 5.0);
}

TEST(Fuse, NodeAndMidpointSamples) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  Tensor<double> fl({1, spec.H, spec.W});
  // cell (i=16, j=8) holds 1, its right neighbor holds 3
  fl[8 * spec.W + 16] = 1;
  fl[8 * spec.W + 17] = 3;
  PointCloud c;
  c.add({0, 0, 10});  // projects to pixel (64, 32) -> cell (16, 8)
  c.add(Point3{static_cast<float>(2.0 * 10 / 100), 0, 10});  // pixel (66, 32) -> (16.5, 8)
  const auto at = feature_coords(c, rig, spec);
  const auto fused = image_to_point_fuse(fl, std::span<const Sample2d>(at), Tensor<double>({1, 2}));
  EXPECT_DOUBLE_EQ(fused[0], 1.0);
  EXPECT_NEAR(fused[1], 2.0, 1e-6);
}

TEST(FusionConvLayer, LonePointPassThrough) {
  PointCloud c;
  c.add({0, 0, 10});
  ClusterIndex ci;
  ci.neighbors = {{0}};
  Tensor<double> coeffs({1, 4}, std::vector<double>{1, 0, 0, 0});
  Tensor<double> mix({1, 2}, std::vector<double>{0, 1});
  FusionConv<double> layer(coeffs, mix);
  Tensor<double> fused({2, 1}, std::vector<double>{9, 3});
  const auto out = layer.forward(fused, ci, c);
  EXPECT_DOUBLE_EQ(out[0], 3.0);

  // d out / d A0 is the mixed feature
  coeffs.zero_grad();
  mix.zero_grad();
  fused.zero_grad();
  layer.backward(std::span<const double>(std::vector<double>{1.0}), fused);
  EXPECT_DOUBLE_EQ(coeffs.grad()[0], 3.0);
}

TEST(FusionConvLayer, GeometricWeightVanishes) {
  PointCloud c;
  c.add({0, 0, 10});
  c.add({1, 0, 10});
  ClusterIndex ci;
  ci.neighbors = {{0, 1}, {0, 1}};
  Tensor<double> coeffs({1, 4}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> mix({1, 2}, std::vector<double>{0, 1});
  FusionConv<double> layer(coeffs, mix);
  Tensor<double> fused({2, 2}, std::vector<double>{0, 0, 2, 4});
  const auto out = layer.forward(fused, ci, c);
  EXPECT_DOUBLE_EQ(out[0], 1.0);
  // seen from the neighbor, dx = +1 doubles the center's weight
  EXPECT_DOUBLE_EQ(out[1], (2.0 * 2 + 4.0 * 1) / 2);
}

TEST(FusionConvLayer, ZeroUpstreamGivesZeroGradients) {
  Rng rng(8);
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  const auto pts = random_cloud(rig, spec, 12, rng);
  const auto ci = cluster(pts, rig, spec);
  auto coeffs = probes::random({3, 4}, rng);
  auto mix = probes::random({3, 6}, rng);
  auto fused = probes::random({6, pts.size()}, rng);
  FusionConv<double> layer(coeffs, mix);
  layer.forward(fused, ci, pts);
  layer.backward(std::span<const double>(std::vector<double>(3 * pts.size(), 0.0)), fused);
  for (double g : coeffs.grad()) EXPECT_EQ(g, 0.0);
  for (double g : mix.grad()) EXPECT_EQ(g, 0.0);
  for (double g : fused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(FusionConvLayer, MatchesNaiveOracle) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  Rng rng(99);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 1 + rng.below(64), c = 1 + rng.below(4);
    const auto pts = random_cloud(rig, spec, n, rng);
    const auto ci = cluster(pts, rig, spec);
    auto coeffs = probes::random({c, 4}, rng);
    auto mix = probes::random({c, 2 * c}, rng);
    auto fused = probes::random({2 * c, n}, rng);
    FusionConv<double> layer(coeffs, mix);
    const auto got = layer.forward(fused, ci, pts);
    const auto ref = oracle::fusionconv(fused.values(), 2 * c, coeffs.values(), mix.values(), c,
                                        oracle::cluster(pts, rig, spec, 1, 1, 1), pts);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-9);
  }
}

TEST(FusionConvLayer, GradcheckTenPoints) {
  for (const auto& r : gradcheck("fusionconv")) EXPECT_TRUE(r.pass) << r.wrt << " " << r.max_rel_err;
}

TEST(PointNet, MlpIdentityKeepsFeature) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  ParameterSet<double> ps;
  Rng rng(1);
  PointFeatureNet<double> net(ps, PointMode::mlp, 2, rng);
  for (auto& p : ps) {
    std::fill(p.value.values().begin(), p.value.values().end(), 0.0);
    if (p.name == "pointnet.lift.bias") std::fill(p.value.values().begin(), p.value.values().end(), 7.0);
    if (p.name.ends_with(".weight") && p.name != "pointnet.lift.weight") {
      p.value[0] = 1;
      p.value[3] = 1;
    }
  }
  PointCloud c;
  c.add({0, 0, 10});
  c.add({1, 1, 30});
  const auto out = net.forward(Tensor<double>({2, spec.H, spec.W}), c, nullptr, rig, spec);
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 7.0);
}

TEST(PointNet, MlpIsPermutationEquivariant) {
  const auto rig = rig64();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  ParameterSet<double> ps;
  Rng rng(6);
  PointFeatureNet<double> net(ps, PointMode::mlp, 3, rng);
  const auto pts = random_cloud(rig, spec, 20, rng);
  std::vector<std::size_t> perm(pts.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  PointCloud shuffled;
  for (std::size_t i : perm) shuffled.add(pts[i]);
  const Tensor<double> fl({3, spec.H, spec.W});
  const auto a = net.forward(fl, pts, nullptr, rig, spec);
  const auto b = net.forward(fl, shuffled, nullptr, rig, spec);
  const std::size_t n = pts.size();
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t j = 0; j < n; ++j) EXPECT_DOUBLE_EQ(b[ch * n + j], a[ch * n + perm[j]]);
}

TEST(PointNet, RawModeHasNoParameters) {
  ParameterSet<float> ps;
  Rng rng(1);
  PointFeatureNet<float> net(ps, PointMode::raw, 4, rng);
  EXPECT_EQ(ps.size(), 0u);
}

TEST(PointNet, GradcheckBothModes) {
  for (const char* k : {"pointnet-fusionconv", "pointnet-mlp"}) {
    for (const auto& r : gradcheck(k)) EXPECT_TRUE(r.pass) << k << " " << r.wrt << " " << r.max_rel_err;
  }
}
