// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "oracles.hpp"
#include "vpnet/cli.hpp"

using namespace vpnet;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTimeS = 120;
constexpr double kSoftmaxSumTol = 1e-6;
constexpr double kFusionConvTol = 1e-5;
constexpr double kFusionHalfBinM = 1.07;
constexpr double kZSquaredRatio = 4.0;
constexpr double kLossDrop = 0.5;
constexpr double kTrainTimeS = 600;
constexpr double kLadderSlack = 0.05;
constexpr double kLadderTimeS = 300;
constexpr double kAblationTimeS = 1800;
constexpr double kMetricRelTol = 1e-3;
constexpr std::uint64_t kSeeds[] = {0, 1, 2};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("%s  %d %-22s %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig desk_config() {
  ModelConfig c;
  c.channels = 4;
  c.bins = 16;
  c.stages = 2;
  c.weights = default_stage_weights(2);
  return c;
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto rows = gradcheck_all();
  const double t = seconds_since(t0);
  bool ok = true;
  double worst = 0;
  std::string failed;
  std::size_t retried = 0;
  for (const auto& s : summarize(rows)) {
    ok = ok && s.pass;
    worst = std::max(worst, s.max_rel_err / s.tolerance);
    if (!s.pass) failed += " " + s.kind;
  }
  for (const auto& r : rows) retried += r.retried;
  report(1, "gradient-suite", ok && t < kGradTimeS,
         fmt("%zu kinds, worst err/tol %.2e, %zu elements re-measured, %.1fs%s", summarize(rows).size(), worst,
             retried, t, failed.c_str()));
}

void regression_contract() {
  const auto t0 = Clock::now();
  Rng rng(404);
  const std::size_t D = 48;
  double lo = INFINITY, hi = -INFINITY, sum_err = 0;
  for (int i = 0; i < 10000; ++i) {
    Tensor<double> l({D});
    const double scale = rng.uniform(0.1, 30);
    for (auto& v : l.values()) v = rng.normal() * scale;
    const double z = regress_depth_vector<double>(l.data(), 100);
    lo = std::min(lo, z);
    hi = std::max(hi, z);
    const auto p = softmax(l, 0);
    double s = 0;
    for (double v : p.values()) s += v;
    sum_err = std::max(sum_err, std::abs(s - 1));
  }
  const std::vector<double> flat(D, 0.37);
  const double uniform = regress_depth_vector<double>(std::span<const double>(flat), 100);
  const bool ok = lo >= 0 && hi <= 100 && sum_err <= kSoftmaxSumTol && uniform == 50.0;
  report(2, "depth-regression", ok,
         fmt("range [%.4f, %.4f], max |sum-1| %.2e, uniform %.17g, %.2fs", lo, hi, sum_err, uniform,
             seconds_since(t0)));
}

void fusionconv_oracle() {
  const auto t0 = Clock::now();
  const auto rig = default_rig();
  const auto spec = VoxelGridSpec::depth_linear(rig, 48, 100);
  Rng rng(303);
  double worst = 0;
  std::size_t cluster_mismatch = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 1 + rng.below(64), c = 1 + rng.below(6);
    const auto pts = probes::random_points(rig, spec, n, rng, 2.0, 95.0);
    const auto ci = cluster(pts, rig, spec, Window{1, 1, 1});
    const auto ref_nb = oracle::cluster(pts, rig, spec, 1, 1, 1);
    if (ci.neighbors != ref_nb) ++cluster_mismatch;
    auto coeffs = probes::random({c, 4}, rng);
    auto mix = probes::random({c, 2 * c}, rng);
    auto fused = probes::random({2 * c, n}, rng);
    auto cast = [](const Tensor<double>& t) {
      return Tensor<float>(t.shape(), std::vector<float>(t.values().begin(), t.values().end()));
    };
    auto coeffs_f = cast(coeffs), mix_f = cast(mix), fused_f = cast(fused);
    FusionConv<float> layer(coeffs_f, mix_f);
    const auto got = layer.forward(fused_f, ci, pts);
    // oracle in double on the float-rounded inputs
    auto widen = [](const Tensor<float>& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
    const auto ref = oracle::fusionconv(widen(fused_f), 2 * c, widen(coeffs_f), widen(mix_f), c, ref_nb, pts);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(got[i]) - ref[i]) / std::max(1.0, std::abs(ref[i])));
    }
  }
  const double t = seconds_since(t0);
  report(3, "fusionconv-oracle", worst <= kFusionConvTol && cluster_mismatch == 0 && t < 60,
         fmt("max err %.2e, cluster mismatches %zu, %.2fs", worst, cluster_mismatch, t));
}

void quantization() {
  const auto t0 = Clock::now();
  CameraRig rig;
  rig.fx = rig.fy = 100;
  rig.cx = 64;
  rig.cy = 32;
  rig.baseline = 0.5;
  rig.width = 128;
  rig.height = 64;
  Rng rng(505);
  PointCloud pts;
  while (pts.size() < 100000) {
    const double z = rng.uniform(0, 100);
    if (z <= 0) continue;
    const Vec3 p = backproject(rig, rng.uniform(0, 127), rng.uniform(0, 63), z);
    pts.add({static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)});
  }
  const std::vector<DepthBand> bands = {{0, 10}, {10, 20}, {20, 40}, {40, 80}, {80, 100}};
  QuantizationAccumulator acc({{"fusion", VoxelGridSpec::depth_linear(rig, 48, 100)},
                               {"cost", VoxelGridSpec::disparity_linear(rig, 48, 100)}},
                              bands);
  acc.add(pts, rig);
  const auto rep = acc.report();
  double fusion_max = 0, near_mean = 0, far_mean = 0;
  for (const auto& r : rep.rows) {
    if (r.spec == "fusion") fusion_max = std::max(fusion_max, r.max_abs_err);
    if (r.spec == "cost" && r.band.lo == 10) near_mean = r.mean_abs_err;
    if (r.spec == "cost" && r.band.lo == 40) far_mean = r.mean_abs_err;
  }
  const double ratio = far_mean / near_mean;
  const double t = seconds_since(t0);
  report(4, "quantization", fusion_max <= kFusionHalfBinM && ratio >= kZSquaredRatio && t < 60,
         fmt("fusion max %.4f m, cost mean [10,20) %.4f m, [40,80) %.4f m, ratio %.2f, %.2fs", fusion_max, near_mean,
             far_mean, ratio, t));
}

void training_convergence() {
  const auto t0 = Clock::now();
  const auto data = generate_dataset(5, 4, default_rig());
  double fusion_rmse = 0, zero_rmse = 0, worst_drop = 0;
  std::string per_seed;
  for (auto seed : kSeeds) {
    TrainOptions opt;
    opt.seed = seed;
    Model<float> model(desk_config(), seed);
    const auto rows = train(model, data, opt);
    const double drop = rows.back().total / rows.front().total;
    worst_drop = std::max(worst_drop, drop);
    EvalOptions eo;
    eo.seed = seed;
    const double f = evaluate(model, data, eo).mean.rmse_mm;

    // stereo-only reference: same architecture, never shown a point
    TrainOptions zopt = opt;
    zopt.points = 0;
    Model<float> zero(desk_config(), seed);
    train(zero, data, zopt);
    EvalOptions zeo = eo;
    zeo.dropout = 1.0;
    const double z = evaluate(zero, data, zeo).mean.rmse_mm;
    fusion_rmse += f / 3;
    zero_rmse += z / 3;
    per_seed += fmt(" [seed %llu: loss x%.3f, rmse %.0f vs %.0f]", static_cast<unsigned long long>(seed), drop, f, z);
  }
  const double t = seconds_since(t0);
  report(5, "training-convergence", worst_drop < kLossDrop && fusion_rmse < zero_rmse && t < kTrainTimeS,
         fmt("mean rmse %.0f mm vs zero-point %.0f mm, worst final/initial %.3f, %.0fs;", fusion_rmse, zero_rmse,
             worst_drop, t) +
             per_seed);
}

void point_ladder() {
  const auto t0 = Clock::now();
  const auto data = generate_dataset(6, 4, default_rig(256, 128));
  const std::size_t ladder[] = {10, 1000, 5000, 15000};
  std::vector<double> mean(4, 0.0);
  bool finite = true;
  std::string per_seed;
  for (auto seed : kSeeds) {
    TrainOptions opt;
    opt.seed = seed;
    opt.points = 5000;
    opt.max_dropout = 0.95;
    Model<float> model(desk_config(), seed);
    train(model, data, opt);
    per_seed += fmt(" [seed %llu:", static_cast<unsigned long long>(seed));
    for (std::size_t k = 0; k < 4; ++k) {
      EvalOptions eo;
      eo.seed = seed;
      eo.points = ladder[k];
      const double r = evaluate(model, data, eo).mean.rmse_mm;
      mean[k] += r / 3;
      per_seed += fmt(" %.0f", r);
    }
    EvalOptions none;
    none.seed = seed;
    none.dropout = 1.0;
    const auto m = evaluate(model, data, none).mean;
    finite = finite && std::isfinite(m.rmse_mm) && std::isfinite(m.mae_mm) && std::isfinite(m.irmse) &&
             std::isfinite(m.imae);
    per_seed += fmt(" | no points %.0f]", m.rmse_mm);
  }
  std::size_t violations = 0;
  bool small = true;
  for (std::size_t k = 0; k + 1 < 4; ++k) {
    if (mean[k + 1] > mean[k]) {
      ++violations;
      small = small && mean[k + 1] <= mean[k] * (1 + kLadderSlack);
    }
  }
  const double t = seconds_since(t0);
  report(6, "point-count-ladder", violations <= 1 && small && finite && t < kLadderTimeS,
         fmt("mean rmse %.0f/%.0f/%.0f/%.0f mm, %zu violation(s), dropout-1 finite %s, %.0fs;", mean[0], mean[1],
             mean[2], mean[3], violations, finite ? "yes" : "no", t) +
             per_seed);
}

void ablation() {
  const auto t0 = Clock::now();
  const auto train_ds = generate_dataset(70, 8, default_rig());
  const auto eval_ds = generate_dataset(71, 4, default_rig());
  std::vector<cli::AblationResult> results;
  for (const auto& label : cli::default_ablation_modes()) {
    const auto m = cli::parse_mode(label);
    ModelConfig cfg = desk_config();
    cfg.volume = parse_volume_mode(m.volume);
    cfg.pointnet = parse_point_mode(m.pointnet);
    cfg.fusion = parse_fusion_level(m.fusion);
    for (auto seed : kSeeds) {
      TrainOptions opt;
      opt.seed = seed;
      Model<float> model(cfg, seed);
      const auto rows = train(model, train_ds, opt);
      EvalOptions eo;
      eo.seed = seed;
      results.push_back({m, seed, evaluate(model, eval_ds, eo).mean, cli::tail_loss(rows)});
    }
  }
  auto mean_rmse = [&](const std::string& label) {
    double s = 0;
    for (const auto& r : results) {
      if (r.mode.label() == label) s += r.metrics.rmse_mm / 3;
    }
    return s;
  };
  const double fusion = mean_rmse("fusion/fusionconv/intermediate"), cost = mean_rmse("cost/fusionconv/intermediate"),
               depth = mean_rmse("depth/fusionconv/intermediate"), raw = mean_rmse("fusion/raw/intermediate"),
               mlp = mean_rmse("fusion/mlp/intermediate"), early = mean_rmse("fusion/raw/early");
  std::ofstream("acceptance_ablation.csv") << cli::ablation_csv(results);
  const double t = seconds_since(t0);
  report(7, "ablation-trend", fusion <= cost && raw <= early && t < kAblationTimeS,
         fmt("rmse mm: fusion %.0f <= cost %.0f, intermediate %.0f <= early %.0f; reported: fusionconv %.0f vs raw "
             "%.0f, mlp %.0f, depth-volume %.0f; %.0fs",
             fusion, cost, raw, early, fusion, raw, mlp, depth, t));
}

void metric_units() {
  const auto truth = DepthMap::from_values(2, 1, {1, 1}, 100);
  const auto pred = Tensor<double>({1, 2}, std::vector<double>{1, 3});
  const auto m = evaluate_metrics(pred, truth);
  auto near = [](double got, double want) { return std::abs(got - want) <= kMetricRelTol * want; };
  report(8, "metric-units", near(m.rmse_mm, 1414.2) && near(m.mae_mm, 1000) && near(m.imae, 333.33),
         fmt("rmse %.2f mm, mae %.2f mm, imae %.3f 1/km", m.rmse_mm, m.mae_mm, m.imae));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void determinism() {
  const auto t0 = Clock::now();
  const auto root = fs::temp_directory_path() / "vpnet_acceptance_determinism";
  fs::remove_all(root);
  std::string loss[2], metrics[2];
  bool ran = true;
  for (int k = 0; k < 2; ++k) {
    const auto dir = root / std::to_string(k);
    std::ostringstream out, err;
    const std::vector<std::vector<std::string>> steps = {
        {"synth", "--out", (dir / "data").string(), "--frames", "4", "--seed", "9"},
        {"train", "--data", (dir / "data").string(), "--out", (dir / "model").string(), "--channels", "4", "--bins",
         "16", "--stages", "2", "--steps", "60", "--seed", "3"},
        {"eval", "--data", (dir / "data").string(), "--model", (dir / "model" / "model.vpn").string(), "--report",
         (dir / "metrics.csv").string(), "--seed", "3"}};
    for (const auto& s : steps) ran = ran && run_cli(s, out, err) == kExitOk;
    loss[k] = slurp(dir / "model" / "loss.csv");
    metrics[k] = slurp(dir / "metrics.csv");
  }
  fs::remove_all(root);
  const bool same = ran && !loss[0].empty() && loss[0] == loss[1] && !metrics[0].empty() && metrics[0] == metrics[1];
  report(9, "determinism", same,
         fmt("loss.csv %zu bytes, metrics %zu bytes, identical %s, %.0fs", loss[0].size(), metrics[0].size(),
             same ? "yes" : "no", seconds_since(t0)));
}

}  // namespace

int main() {
  const std::vector<std::function<void()>> criteria = {gradient_suite,   regression_contract, fusionconv_oracle,
                                                      quantization,     training_convergence, point_ladder,
                                                      ablation,         metric_units,         determinism};
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    try {
      criteria[i]();
    } catch (const std::exception& e) {
      report(static_cast<int>(i + 1), "exception", false, e.what());
    }
  }
  std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
