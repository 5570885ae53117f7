#pragma once

// Training loop, dataset evaluation, and model files (VPN1 weights plus a
// JSON config next to them).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vpnet/checkpoint.hpp"
#include "vpnet/network.hpp"
#include "vpnet/optim.hpp"
#include "vpnet/scenes.hpp"

namespace vpnet {

// ------------------------------------------------------------ model files

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"channels", c.channels},
      {"bins", c.bins},
      {"z_max", c.z_max},
      {"stages", c.stages},
      {"weights", c.weights},
      {"hidden", c.hidden},
      {"volume", to_string(c.volume)},
      {"pointnet", to_string(c.pointnet)},
      {"fusion", to_string(c.fusion)},
      {"window", {c.window.wu, c.window.wv, c.window.wd}},
  };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.channels = j.at("channels").get<std::size_t>();
    c.bins = j.at("bins").get<std::size_t>();
    c.z_max = j.at("z_max").get<double>();
    c.stages = j.at("stages").get<std::size_t>();
    c.weights = j.at("weights").get<std::vector<double>>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.volume = parse_volume_mode(j.at("volume").get<std::string>());
    c.pointnet = parse_point_mode(j.at("pointnet").get<std::string>());
    c.fusion = parse_fusion_level(j.at("fusion").get<std::string>());
    const auto w = j.at("window").get<std::vector<std::size_t>>();
    if (w.size() != 3) throw FormatError("window needs three extents");
    c.window = {w[0], w[1], w[2]};
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  } catch (const UsageError& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

/// Config sidecar of a weights file: model.vpn -> model.json.
inline std::string config_path_for(const std::string& weights) {
  return std::filesystem::path(weights).replace_extension(".json").string();
}

template <typename T>
void save_model(const std::string& weights_path, const Model<T>& model) {
  save_checkpoint_file(weights_path, model.params());
  std::ofstream os(config_path_for(weights_path));
  if (!os) throw Error("cannot write " + config_path_for(weights_path));
  os << config_to_json(model.config()).dump(2) << '\n';
}

inline ModelConfig load_model_config(const std::string& weights_path) {
  const std::string p = config_path_for(weights_path);
  std::ifstream is(p);
  if (!is) throw FormatError("missing file: " + p);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p + ": " + e.what());
  }
  return config_from_json(j);
}

template <typename T = float>
std::unique_ptr<Model<T>> load_model(const std::string& weights_path) {
  auto model = std::make_unique<Model<T>>(load_model_config(weights_path), 0);
  load_checkpoint_file(weights_path, model->params());
  return model;
}

// ---------------------------------------------------------------- training

struct TrainOptions {
  std::size_t steps = 200;
  double lr = 1e-3;
  double lr2 = 1e-4;
  std::size_t decay_step = 0;  // 0: never decay
  std::size_t points = 1000;   // LiDAR points resampled per step
  double max_dropout = 0;      // per-step dropout drawn from [0, max_dropout]
  std::size_t accumulate = 1;  // frames per optimizer step
  std::uint64_t seed = 0;
};

struct LossRow {
  std::size_t step = 0;
  std::vector<double> stages;
  double total = 0;
};

inline double learning_rate(const TrainOptions& o, std::size_t step) {
  return o.decay_step > 0 && step >= o.decay_step ? o.lr2 : o.lr;
}

/// Per-step training points: a fresh LiDAR sample of the frame.
inline PointCloud training_points(const SceneSample& s, const TrainOptions& o, std::size_t step, double z_max,
                                  Rng& rng) {
  const double dropout = o.max_dropout > 0 ? rng.uniform(0, o.max_dropout) : 0.0;
  std::size_t available = 0;
  for (std::size_t i = 0; i < s.depth.size(); ++i) available += s.depth.valid[i] && s.depth.depth[i] < z_max;
  return sample_lidar(s, std::min(o.points, available), derive_seed(o.seed, 1000003 + step), dropout, z_max);
}

/// Trains on random frames with per-step point resampling; returns one
/// row per optimizer step (the losses seen before that step's update).
inline std::vector<LossRow> train(Model<float>& model, const Dataset& data, const TrainOptions& opt,
                                  const std::function<void(const LossRow&)>& on_step = {}) {
  if (data.samples.empty()) throw UsageError("train: dataset has no frames");
  if (!(opt.lr > 0) || !(opt.lr2 > 0)) throw UsageError("train: learning rates must be positive");
  if (opt.accumulate == 0) throw UsageError("train: accumulate must be at least 1");
  Rng rng(derive_seed(opt.seed, 0x747261696eULL));
  const auto& cfg = model.config();
  std::vector<LossRow> log;
  model.params().zero_grad();
  for (std::size_t step = 0; step < opt.steps; ++step) {
    LossRow row;
    row.step = step;
    row.stages.assign(cfg.stages, 0.0);
    for (std::size_t k = 0; k < opt.accumulate; ++k) {
      const auto& s = data.samples[rng.below(data.samples.size())];
      const PointCloud pts = training_points(s, opt, step * opt.accumulate + k, cfg.z_max, rng);
      const auto pred = model.forward(s.left, s.right, pts, data.rig);
      const auto rep = model.loss(pred, s.depth, true);
      for (std::size_t i = 0; i < cfg.stages; ++i) row.stages[i] += rep.stages[i] / static_cast<double>(opt.accumulate);
    }
    if (opt.accumulate > 1) {
      const float inv = 1.0f / static_cast<float>(opt.accumulate);
      for (auto& p : model.params()) {
        for (auto& g : p.value.grad()) g *= inv;
      }
    }
    row.total = total_loss(row.stages, cfg.weights);
    optimizer_step(model.params(), learning_rate(opt, step));
    if (on_step) on_step(row);
    log.push_back(std::move(row));
  }
  return log;
}

inline void write_loss_csv(std::ostream& os, const std::vector<LossRow>& rows, std::size_t stages) {
  os << "step";
  for (std::size_t s = 0; s < stages; ++s) os << ",stage" << (s + 1);
  os << ",total\n";
  char buf[64];
  for (const auto& r : rows) {
    os << r.step;
    for (double v : r.stages) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g\n", r.total);
    os << buf;
  }
}

// -------------------------------------------------------------- evaluation

struct EvalOptions {
  /// Resample this many LiDAR points per frame; nullopt keeps the stored cloud.
  std::optional<std::size_t> points;
  double dropout = 0;
  std::uint64_t seed = 0;
};

struct EvalRow {
  std::size_t sample = 0;
  Metrics metrics;
  std::size_t points = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  Metrics mean;  // per-frame average
  std::size_t points = 0;
  double loss = 0;  // mean weighted total loss
};

inline PointCloud eval_points(const SceneSample& s, const EvalOptions& o, std::size_t index, double z_max) {
  if (!o.points) {
    if (o.dropout <= 0) return s.points;
    PointCloud kept;
    Rng rng(derive_seed(o.seed, 0x64726f70ULL + index));
    for (const auto& p : s.points) {
      if (rng.uniform() >= o.dropout) kept.add(p);
    }
    return kept;
  }
  return sample_lidar(s, *o.points, derive_seed(o.seed, index), o.dropout, z_max);
}

inline EvalReport evaluate(Model<float>& model, const Dataset& data, const EvalOptions& opt = {}) {
  if (data.samples.empty()) throw UsageError("eval: dataset has no frames");
  EvalReport rep;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const PointCloud pts = eval_points(s, opt, i, model.config().z_max);
    const auto pred = model.forward(s.left, s.right, pts, data.rig);
    rep.loss += model.loss(pred, s.depth, false).total;
    EvalRow row{i, evaluate_metrics(pred.final_depth().data(), s.depth), pts.size()};
    rep.mean.rmse_mm += row.metrics.rmse_mm;
    rep.mean.mae_mm += row.metrics.mae_mm;
    rep.mean.irmse += row.metrics.irmse;
    rep.mean.imae += row.metrics.imae;
    rep.mean.count += row.metrics.count;
    rep.mean.inverse_excluded += row.metrics.inverse_excluded;
    rep.points += row.points;
    rep.rows.push_back(row);
  }
  const double n = static_cast<double>(data.samples.size());
  rep.mean.rmse_mm /= n;
  rep.mean.mae_mm /= n;
  rep.mean.irmse /= n;
  rep.mean.imae /= n;
  rep.loss /= n;
  return rep;
}

inline void write_metrics_csv(std::ostream& os, const EvalReport& rep) {
  os << "sample,rmse_mm,mae_mm,irmse_per_km,imae_per_km,points\n";
  char buf[256];
  auto line = [&](const std::string& id, const Metrics& m, std::size_t points) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%zu\n", id.c_str(), m.rmse_mm, m.mae_mm, m.irmse, m.imae,
                  points);
    os << buf;
  };
  for (const auto& r : rep.rows) line(std::to_string(r.sample), r.metrics, r.points);
  line("mean", rep.mean, rep.points);
}

}  // namespace vpnet
