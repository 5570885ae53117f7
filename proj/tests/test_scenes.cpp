#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vpnet/imageio.hpp"
#include "vpnet/scenes.hpp"
#include "vpnet/train.hpp"

using namespace vpnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("vpnet_" + name);
  fs::remove_all(p);
  return p;
}

Scene single_plane(double z) {
  Scene s;
  s.rig = default_rig();
  Rng rng(1);
  s.ground = Texture::random(rng, 0.6, 3.0);
  Rectangle r;
  r.z = z;
  r.x0 = -3;
  r.x1 = 4;
  r.y0 = -4;
  r.y1 = -0.5;  // above the horizon, so the ground never occludes it
  r.texture = Texture::random(rng, 0.5, 2.0);
  s.objects.push_back(r);
  return s;
}

}  // namespace

TEST(Scene, SameSeedIsBitIdentical) {
  const auto rig = default_rig();
  const auto a = generate_scene(7, 3, rig);
  const auto b = generate_scene(7, 3, rig);
  EXPECT_EQ(a.left.values(), b.left.values());
  EXPECT_EQ(a.right.values(), b.right.values());
  EXPECT_EQ(a.depth.depth, b.depth.depth);
  EXPECT_EQ(a.points, b.points);
  const auto c = generate_scene(8, 3, rig);
  EXPECT_NE(a.left.values(), c.left.values());
}

TEST(Scene, PlaneFootprintDepth) {
  const Scene s = single_plane(20);
  const auto sample = render_scene(s, 0);
  const auto& rig = s.rig;
  std::size_t covered = 0;
  for (std::size_t v = 0; v < rig.height; ++v)
    for (std::size_t u = 0; u < rig.width; ++u) {
      const double x = (static_cast<double>(u) - rig.cx) / rig.fx * 20, y = (static_cast<double>(v) - rig.cy) / rig.fy * 20;
      if (x >= -3 && x <= 4 && y >= -4 && y <= -0.5) {
        EXPECT_EQ(sample.depth.at(u, v), 20.0f);
        ++covered;
      }
    }
  EXPECT_GT(covered, 100u);
}

TEST(Scene, OcclusionKeepsNearestSurface) {
  const auto rig = default_rig();
  const Scene s = generate_layout(12, rig, 8);
  std::vector<double> z;
  render_view(s, false, &z);
  for (std::size_t v = 0; v < rig.height; ++v)
    for (std::size_t u = 0; u < rig.width; ++u) {
      double best = INFINITY;
      const double dx = (static_cast<double>(u) - rig.cx) / rig.fx, dy = (static_cast<double>(v) - rig.cy) / rig.fy;
      if (dy > 0) best = s.ground_y / dy;
      for (const auto& r : s.objects) {
        const double x = r.z * dx, y = r.z * dy;
        if (x >= r.x0 && x <= r.x1 && y >= r.y0 && y <= r.y1) best = std::min(best, r.z);
      }
      EXPECT_EQ(z[v * rig.width + u], best);
    }
}

TEST(Scene, PhotoConsistency) {
  const auto rig = default_rig();
  const Scene s = generate_layout(4, rig, 6);
  Rng rng(9);
  std::size_t checked = 0;
  double worst = 0;
  while (checked < 1000) {
    const double u = rng.uniform(0, static_cast<double>(rig.width - 1));
    const double v = rng.uniform(0, static_cast<double>(rig.height - 1));
    const Hit l = cast_ray(s, 0, u, v);
    if (!std::isfinite(l.z)) continue;
    const double ur = u - rig.fx * rig.baseline / l.z;
    const Hit r = cast_ray(s, rig.baseline, ur, v);
    if (r.z != l.z) continue;  // occluded in the right view
    for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(l.rgb[c] - r.rgb[c]));
    ++checked;
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Lidar, PointsLieOnGroundTruth) {
  const auto rig = default_rig();
  const auto s = generate_scene(2, 0, rig, {6, 800, 0, 100});
  EXPECT_EQ(s.points.size(), 800u);
  for (const auto& p : s.points) {
    const Pixel px = project(rig, p.as_vec());
    const auto u = static_cast<std::size_t>(std::lround(px.u)), v = static_cast<std::size_t>(std::lround(px.v));
    EXPECT_NEAR(px.u, static_cast<double>(u), 1e-3);
    ASSERT_TRUE(s.depth.valid[v * rig.width + u]);
    EXPECT_EQ(p.z, s.depth.at(u, v));
    EXPECT_LT(p.z, 100.0f);
  }
}

TEST(Lidar, FullDropoutIsEmpty) {
  const auto s = generate_scene(2, 0, default_rig());
  EXPECT_TRUE(sample_lidar(s, 500, 1, 1.0).empty());
  EXPECT_THROW(sample_lidar(s, 10, 1, 1.5), UsageError);
  EXPECT_THROW(sample_lidar(s, 1000000, 1, 0), UsageError);
}

TEST(Lidar, SinglePointKeepsDepth) {
  SceneSample s;
  s.rig = default_rig(8, 4);
  s.depth = DepthMap::from_values(8, 4, std::vector<float>(32, 15.0f), 100);
  const auto c = sample_lidar(s, 1, 3, 0);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].z, 15.0f);
}

TEST(Lidar, DropoutThinsCloud) {
  const auto s = generate_scene(2, 0, default_rig());
  const auto kept = sample_lidar(s, 4000, 5, 0.5).size();
  EXPECT_GT(kept, 1700u);
  EXPECT_LT(kept, 2300u);
}

TEST(ImageIo, PpmRoundTrip) {
  auto img = generate_scene(1, 0, default_rig(16, 8), {2, 10, 0, 100}).left;
  std::stringstream ss;
  write_ppm(ss, img);
  EXPECT_EQ(read_ppm(ss).values(), img.values());
}

TEST(ImageIo, PfmRoundTripAndInvalidPixels) {
  const auto m = DepthMap::from_values(3, 2, {1, 0, 2.5f, INFINITY, 7, 99}, 100);
  std::stringstream ss;
  write_pfm(ss, m);
  const auto back = read_pfm(ss);
  EXPECT_EQ(back.depth, m.depth);
  EXPECT_EQ(back.valid, m.valid);
}

TEST(ImageIo, CorruptPfmScaleRejected) {
  std::stringstream ss("Pf\n2 1\nabc\n12345678");
  try {
    read_pfm(ss);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("scale"), std::string::npos);
  }
  std::stringstream zero("Pf\n2 1\n0\n12345678");
  EXPECT_THROW(read_pfm(zero), FormatError);
}

TEST(ImageIo, TruncatedPfmRejected) {
  std::stringstream ss("Pf\n2 2\n-1.0\n1234");
  EXPECT_THROW(read_pfm(ss), FormatError);
}

TEST(Dataset, EmptyDirectoryIsEmptyDataset) {
  const auto dir = scratch("empty");
  fs::create_directories(dir);
  EXPECT_TRUE(load_dataset(dir.string()).samples.empty());
  fs::remove_all(dir);
}

TEST(Dataset, MissingCalibRejected) {
  const auto dir = scratch("nocalib");
  const auto ds = generate_dataset(1, 1, default_rig(32, 16), {3, 50, 0, 100});
  save_dataset(dir.string(), ds);
  fs::remove(dir / "calib.txt");
  EXPECT_THROW(load_dataset(dir.string()), FormatError);
  fs::remove_all(dir);
}

TEST(Dataset, RoundTripKeepsMetrics) {
  const auto dir = scratch("roundtrip");
  const auto rig = default_rig(32, 16);
  const auto ds = generate_dataset(3, 2, rig, {3, 150, 0, 100});
  save_dataset(dir.string(), ds);
  const auto back = load_dataset(dir.string());
  ASSERT_EQ(back.samples.size(), 2u);
  EXPECT_EQ(back.rig, rig);
  ModelConfig c;
  c.channels = 2;
  c.bins = 8;
  c.stages = 1;
  c.weights = {1.0};
  c.hidden = 2;
  Model<float> m(c, 0);
  const auto a = evaluate(m, ds);
  const auto b = evaluate(m, back);
  EXPECT_NEAR(a.mean.rmse_mm, b.mean.rmse_mm, 1e-6 * a.mean.rmse_mm);
  EXPECT_NEAR(a.mean.mae_mm, b.mean.mae_mm, 1e-6 * a.mean.mae_mm);
  fs::remove_all(dir);
}

TEST(Dataset, ExtentMismatchRejected) {
  const auto dir = scratch("mismatch");
  save_dataset(dir.string(), generate_dataset(1, 1, default_rig(32, 16), {3, 50, 0, 100}));
  save_calib((dir / "calib.txt").string(), default_rig(64, 32));
  EXPECT_THROW(load_dataset(dir.string()), FormatError);
  fs::remove_all(dir);
}

TEST(Dataset, ParallelGenerationMatchesSerial) {
  const auto rig = default_rig(32, 16);
  setenv("VPNET_THREADS", "1", 1);
  const auto serial = generate_dataset(5, 4, rig, {3, 50, 0, 100});
  setenv("VPNET_THREADS", "4", 1);
  const auto parallel = generate_dataset(5, 4, rig, {3, 50, 0, 100});
  unsetenv("VPNET_THREADS");
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(serial.samples[i].left.values(), parallel.samples[i].left.values());
    EXPECT_EQ(serial.samples[i].points, parallel.samples[i].points);
  }
}
