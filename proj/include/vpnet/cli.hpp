#pragma once

// Command-line front end: synth, train, eval, infer, quantize, gradcheck,
// ablate. run_cli() returns the process exit code.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vpnet/gradcheck.hpp"
#include "vpnet/imageio.hpp"
#include "vpnet/network.hpp"
#include "vpnet/scenes.hpp"
#include "vpnet/train.hpp"
#include "vpnet/volume.hpp"

namespace vpnet {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitCheck = 3,
};

namespace cli {

inline void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << text;
  if (!os) throw Error("write failed: " + path);
}

struct ModelFlags {
  std::size_t channels = 8, bins = 48, stages = 3, hidden = 8;
  double z_max = 100;
  std::string volume = "fusion", pointnet = "fusionconv", fusion = "intermediate";
  std::vector<double> weights;
  std::vector<std::size_t> window{1, 1, 1};

  void add_to(CLI::App& app) {
    app.add_option("--channels", channels, "feature channels C")->check(CLI::PositiveNumber);
    app.add_option("--bins", bins, "depth bins D")->check(CLI::Range(2, 4096));
    app.add_option("--z-max", z_max, "maximum depth in meters")->check(CLI::PositiveNumber);
    app.add_option("--stages", stages, "aggregation stages S")->check(CLI::PositiveNumber);
    app.add_option("--hidden", hidden, "aggregation channels")->check(CLI::PositiveNumber);
    app.add_option("--weights", weights, "per-stage loss weights (default: tail of 0.5,0.7,1.0)")->delimiter(',');
    app.add_option("--window", window, "clustering window wu,wv,wd")->delimiter(',')->expected(3);
    app.add_option("--volume", volume, "fusion|cost|depth")->check(CLI::IsMember({"fusion", "cost", "depth"}));
    app.add_option("--pointnet", pointnet, "raw|mlp|fusionconv")->check(CLI::IsMember({"raw", "mlp", "fusionconv"}));
    app.add_option("--fusion", fusion, "early|intermediate")->check(CLI::IsMember({"early", "intermediate"}));
  }

  ModelConfig config() const {
    ModelConfig c;
    c.channels = channels;
    c.bins = bins;
    c.z_max = z_max;
    c.stages = stages;
    c.hidden = hidden;
    c.weights = weights.empty() ? default_stage_weights(stages) : weights;
    c.volume = parse_volume_mode(volume);
    c.pointnet = parse_point_mode(pointnet);
    c.fusion = parse_fusion_level(fusion);
    c.window = {window[0], window[1], window[2]};
    c.validate();
    return c;
  }
};

struct TrainFlags {
  TrainOptions opt;
  void add_to(CLI::App& app) {
    app.add_option("--steps", opt.steps, "optimizer steps");
    app.add_option("--lr", opt.lr, "initial learning rate")->check(CLI::PositiveNumber);
    app.add_option("--lr2", opt.lr2, "learning rate after --decay-step")->check(CLI::PositiveNumber);
    app.add_option("--decay-step", opt.decay_step, "step at which --lr2 takes over (0: never)");
    app.add_option("--points-train", opt.points, "LiDAR points resampled per training step");
    app.add_option("--max-dropout", opt.max_dropout, "per-step dropout drawn from [0, this]")->check(CLI::Range(0.0, 1.0));
    app.add_option("--accumulate", opt.accumulate, "frames per optimizer step")->check(CLI::PositiveNumber);
  }
};

inline std::string loss_csv(const std::vector<LossRow>& rows, std::size_t stages) {
  std::ostringstream os;
  write_loss_csv(os, rows, stages);
  return os.str();
}

inline std::string metrics_csv(const EvalReport& rep) {
  std::ostringstream os;
  write_metrics_csv(os, rep);
  return os.str();
}

struct AblationMode {
  std::string volume, pointnet, fusion;
  std::string label() const { return volume + "/" + pointnet + "/" + fusion; }
};

inline AblationMode parse_mode(const std::string& s) {
  AblationMode m;
  std::stringstream ss(s);
  if (!std::getline(ss, m.volume, '/') || !std::getline(ss, m.pointnet, '/') || !std::getline(ss, m.fusion, '/')) {
    throw UsageError("ablate: mode '" + s + "' is not volume/pointnet/fusion");
  }
  parse_volume_mode(m.volume);
  parse_point_mode(m.pointnet);
  parse_fusion_level(m.fusion);
  return m;
}

inline std::vector<std::string> default_ablation_modes() {
  return {"fusion/fusionconv/intermediate", "cost/fusionconv/intermediate", "depth/fusionconv/intermediate",
          "fusion/raw/intermediate",        "fusion/mlp/intermediate",      "fusion/raw/early"};
}

struct AblationResult {
  AblationMode mode;
  std::uint64_t seed = 0;
  Metrics metrics;
  double final_loss = 0;
};

inline std::string ablation_csv(const std::vector<AblationResult>& results) {
  std::ostringstream os;
  os << "volume,pointnet,fusion,seed,rmse_mm,mae_mm,irmse_per_km,imae_per_km,final_train_loss\n";
  char buf[256];
  auto line = [&](const AblationMode& m, const std::string& seed, const Metrics& x, double loss) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", m.volume.c_str(), m.pointnet.c_str(),
                  m.fusion.c_str(), seed.c_str(), x.rmse_mm, x.mae_mm, x.irmse, x.imae, loss);
    os << buf;
  };
  for (const auto& r : results) line(r.mode, std::to_string(r.seed), r.metrics, r.final_loss);
  // Per-mode means, in first-appearance order.
  std::vector<std::string> seen;
  for (const auto& r : results) {
    if (std::find(seen.begin(), seen.end(), r.mode.label()) != seen.end()) continue;
    seen.push_back(r.mode.label());
    Metrics m;
    double loss = 0;
    std::size_t n = 0;
    for (const auto& q : results) {
      if (q.mode.label() != r.mode.label()) continue;
      m.rmse_mm += q.metrics.rmse_mm;
      m.mae_mm += q.metrics.mae_mm;
      m.irmse += q.metrics.irmse;
      m.imae += q.metrics.imae;
      loss += q.final_loss;
      ++n;
    }
    const double k = static_cast<double>(n);
    m.rmse_mm /= k;
    m.mae_mm /= k;
    m.irmse /= k;
    m.imae /= k;
    line(r.mode, "mean", m, loss / k);
  }
  return os.str();
}

/// Mean weighted loss of the last `window` logged steps.
inline double tail_loss(const std::vector<LossRow>& rows, std::size_t window = 20) {
  if (rows.empty()) return 0;
  const std::size_t n = std::min(window, rows.size());
  double acc = 0;
  for (std::size_t i = rows.size() - n; i < rows.size(); ++i) acc += rows[i].total;
  return acc / static_cast<double>(n);
}

}  // namespace cli

/// Parses and runs one subcommand; output goes to out, diagnostics to err.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Volumetric stereo-LiDAR depth network: data, training, evaluation and checks"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic stereo dataset");
  std::string synth_out;
  std::size_t frames = 4, width = 128, height = 64;
  SceneOptions scene_opt;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--frames", frames, "frame count");
  synth->add_option("--seed", seed, "random seed");
  synth->add_option("--width", width, "image width (divisible by 4)")->check(CLI::PositiveNumber);
  synth->add_option("--height", height, "image height (divisible by 4)")->check(CLI::PositiveNumber);
  synth->add_option("--objects", scene_opt.objects, "rectangles per scene")->check(CLI::PositiveNumber);
  synth->add_option("--points", scene_opt.points, "LiDAR points stored per frame");
  synth->add_option("--dropout", scene_opt.dropout, "LiDAR dropout")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--z-max", scene_opt.z_max, "maximum depth in meters")->check(CLI::PositiveNumber);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model; writes model.vpn, model.json and loss.csv");
  std::string data_dir, train_out;
  cli::ModelFlags model_flags;
  cli::TrainFlags train_flags;
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--seed", seed, "random seed");
  model_flags.add_to(*train_cmd);
  train_flags.add_to(*train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a model on a dataset");
  std::string model_path, report_path;
  std::size_t eval_points = 0;
  double eval_dropout = 0;
  std::string eval_volume, eval_pointnet, eval_fusion;
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--model", model_path, "weights file (model.vpn)")->required();
  auto* points_opt = eval_cmd->add_option("--points", eval_points, "resample this many LiDAR points per frame");
  eval_cmd->add_option("--dropout", eval_dropout, "LiDAR dropout")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--seed", seed, "random seed");
  eval_cmd->add_option("--report", report_path, "metrics CSV path");
  eval_cmd->add_option("--volume", eval_volume, "expected volume mode");
  eval_cmd->add_option("--pointnet", eval_pointnet, "expected point network");
  eval_cmd->add_option("--fusion", eval_fusion, "expected fusion level");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "predict a depth map for one stereo pair");
  std::string left_path, right_path, cloud_path, calib_path, depth_out;
  infer_cmd->add_option("--left", left_path, "left PPM")->required();
  infer_cmd->add_option("--right", right_path, "right PPM")->required();
  infer_cmd->add_option("--points", cloud_path, "point cloud (.pcb or .xyz)");
  infer_cmd->add_option("--calib", calib_path, "calibration file")->required();
  infer_cmd->add_option("--model", model_path, "weights file")->required();
  infer_cmd->add_option("--out", depth_out, "output PFM")->required();

  // quantize
  auto* quant_cmd = app.add_subcommand("quantize", "embedding quantization error per range band");
  std::vector<std::string> spec_names;
  std::size_t quant_bins = 48;
  double quant_zmax = 100;
  std::vector<double> band_edges;
  quant_cmd->add_option("--data", data_dir, "dataset directory")->required();
  quant_cmd->add_option("--spec", spec_names, "fusion|cost|depth (repeatable)")
      ->check(CLI::IsMember({"fusion", "cost", "depth"}));
  quant_cmd->add_option("--bins", quant_bins, "depth bins D")->check(CLI::Range(2, 4096));
  quant_cmd->add_option("--z-max", quant_zmax, "maximum depth")->check(CLI::PositiveNumber);
  quant_cmd->add_option("--bands", band_edges, "band edges in meters, e.g. 0,20,40,80")->delimiter(',');
  quant_cmd->add_option("--report", report_path, "CSV path");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every operator");
  GradcheckOptions gopt;
  std::vector<std::string> kinds;
  grad_cmd->add_option("--kind", kinds, "operator kinds to check (default: all)");
  grad_cmd->add_option("--probes", gopt.probes, "random probes per kind")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--step", gopt.step, "central-difference step")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--tolerance", gopt.tolerance, "relative tolerance")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--seed", gopt.seed, "random seed");
  grad_cmd->add_option("--perturb", gopt.perturb, "distort this kind's backward (harness self-test)");
  grad_cmd->add_option("--report", report_path, "per-tensor CSV path");
  bool list_kinds = false;
  grad_cmd->add_flag("--list", list_kinds, "list registered kinds");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate a list of mode triples");
  std::string eval_dir;
  std::vector<std::string> modes;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ablate_cmd->add_option("--data", data_dir, "training dataset")->required();
  ablate_cmd->add_option("--eval-data", eval_dir, "evaluation dataset (default: --data)");
  ablate_cmd->add_option("--modes", modes, "volume/pointnet/fusion triples")->delimiter(',');
  ablate_cmd->add_option("--seeds", seeds, "training seeds")->delimiter(',');
  ablate_cmd->add_option("--report", report_path, "combined CSV path");
  model_flags.add_to(*ablate_cmd);
  train_flags.add_to(*ablate_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      if (width % 4 != 0 || height % 4 != 0) throw UsageError("synth: --width and --height must be divisible by 4");
      const CameraRig rig = default_rig(width, height);
      const Dataset ds = generate_dataset(seed, frames, rig, scene_opt);
      save_dataset(synth_out, ds);
      out << "wrote " << frames << " frames to " << synth_out << '\n';
      return kExitOk;
    }

    if (*train_cmd) {
      const ModelConfig cfg = model_flags.config();
      const Dataset ds = load_dataset(data_dir);
      Model<float> model(cfg, seed);
      auto opt = train_flags.opt;
      opt.seed = seed;
      const auto rows = train(model, ds, opt);
      std::filesystem::create_directories(train_out);
      save_model((std::filesystem::path(train_out) / "model.vpn").string(), model);
      cli::write_text_file((std::filesystem::path(train_out) / "loss.csv").string(), cli::loss_csv(rows, cfg.stages));
      if (!rows.empty()) {
        out << "steps " << rows.size() << " initial_total " << rows.front().total << " final_total "
            << rows.back().total << '\n';
      }
      return kExitOk;
    }

    if (*eval_cmd) {
      auto model = load_model<float>(model_path);
      const auto& cfg = model->config();
      if ((!eval_volume.empty() && eval_volume != to_string(cfg.volume)) ||
          (!eval_pointnet.empty() && eval_pointnet != to_string(cfg.pointnet)) ||
          (!eval_fusion.empty() && eval_fusion != to_string(cfg.fusion))) {
        throw UsageError(std::string("eval: flags do not match the model config (") + to_string(cfg.volume) + "/" +
                         to_string(cfg.pointnet) + "/" + to_string(cfg.fusion) + ")");
      }
      const Dataset ds = load_dataset(data_dir);
      EvalOptions eo;
      if (points_opt->count() > 0) eo.points = eval_points;
      eo.dropout = eval_dropout;
      eo.seed = seed;
      const auto rep = evaluate(*model, ds, eo);
      const std::string csv = cli::metrics_csv(rep);
      if (!report_path.empty()) cli::write_text_file(report_path, csv);
      out << csv;
      return kExitOk;
    }

    if (*infer_cmd) {
      auto model = load_model<float>(model_path);
      const CameraRig rig = load_calib(calib_path);
      const Tensor<float> left = load_ppm(left_path), right = load_ppm(right_path);
      const Shape want{3, rig.height, rig.width};
      if (left.shape() != want || right.shape() != want) {
        throw FormatError("infer: image extents " + to_string(left.shape()) + " / " + to_string(right.shape()) +
                          " do not match calibration " + to_string(want));
      }
      if (rig.width % 4 != 0 || rig.height % 4 != 0) throw FormatError("infer: image extents must be divisible by 4");
      PointCloud cloud;
      if (!cloud_path.empty()) cloud = load_point_cloud(cloud_path).cloud;
      const auto pred = model->forward(left, right, cloud, rig);
      save_pfm(depth_out, DepthMap::from_tensor(pred.final_depth(), model->config().z_max));
      out << "wrote " << depth_out << " (" << cloud.size() << " points)\n";
      return kExitOk;
    }

    if (*quant_cmd) {
      if (spec_names.empty()) spec_names = {"fusion", "cost"};
      std::vector<DepthBand> bands = default_bands();
      if (!band_edges.empty()) {
        if (band_edges.size() < 2 || !std::is_sorted(band_edges.begin(), band_edges.end())) {
          throw UsageError("quantize: --bands needs at least two ascending edges");
        }
        bands.clear();
        for (std::size_t i = 0; i + 1 < band_edges.size(); ++i) bands.push_back({band_edges[i], band_edges[i + 1]});
      }
      const Dataset ds = load_dataset(data_dir);
      std::vector<NamedSpec> specs;
      for (const auto& n : spec_names) {
        specs.push_back({n, n == "fusion" ? VoxelGridSpec::depth_linear(ds.rig, quant_bins, quant_zmax)
                                          : VoxelGridSpec::disparity_linear(ds.rig, quant_bins, quant_zmax)});
      }
      QuantizationAccumulator acc(specs, bands);
      for (const auto& s : ds.samples) acc.add(s.points, ds.rig);
      const auto rep = acc.report();
      std::ostringstream csv;
      write_quantization_csv(csv, rep);
      if (!report_path.empty()) cli::write_text_file(report_path, csv.str());
      out << csv.str();
      for (std::size_t i = 0; i < specs.size(); ++i) {
        if (rep.unbounded[i] > 0) {
          err << "note: " << rep.unbounded[i] << " points of spec '" << specs[i].name
              << "' fell in the zero-disparity bin (unbounded depth) and were excluded\n";
        }
      }
      return kExitOk;
    }

    if (*grad_cmd) {
      if (list_kinds) {
        for (const auto& k : gradcheck_registry()) out << k.name << '\n';
        return kExitOk;
      }
      if (kinds.empty()) {
        for (const auto& k : gradcheck_registry()) kinds.push_back(k.name);
      }
      std::vector<GradcheckRow> rows;
      for (const auto& k : kinds) {
        auto r = gradcheck(k, gopt);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      bool ok = true;
      char buf[256];
      std::snprintf(buf, sizeof buf, "%-22s %6s %12s %10s  %s\n", "kind", "probes", "max_rel_err", "tolerance", "result");
      out << buf;
      for (const auto& s : summarize(rows)) {
        std::snprintf(buf, sizeof buf, "%-22s %6zu %12.3e %10.1e  %s\n", s.kind.c_str(), s.probes, s.max_rel_err,
                      s.tolerance, s.pass ? "PASS" : "FAIL");
        out << buf;
        ok = ok && s.pass;
      }
      if (!report_path.empty()) {
        std::ostringstream csv;
        csv << "kind,probe,wrt,elements,max_rel_err,tolerance,retried,result\n";
        for (const auto& r : rows) {
          std::snprintf(buf, sizeof buf, "%s,%zu,%s,%zu,%.6e,%.1e,%zu,%s\n", r.kind.c_str(), r.probe, r.wrt.c_str(),
                        r.elements, r.max_rel_err, r.tolerance, r.retried, r.pass ? "PASS" : "FAIL");
          csv << buf;
        }
        cli::write_text_file(report_path, csv.str());
      }
      return ok ? kExitOk : kExitCheck;
    }

    if (*ablate_cmd) {
      if (modes.empty()) modes = cli::default_ablation_modes();
      std::vector<cli::AblationMode> parsed;
      for (const auto& m : modes) parsed.push_back(cli::parse_mode(m));
      const Dataset train_ds = load_dataset(data_dir);
      const Dataset eval_ds = eval_dir.empty() ? train_ds : load_dataset(eval_dir);
      std::vector<cli::AblationResult> results;
      for (const auto& m : parsed) {
        cli::ModelFlags f = model_flags;
        f.volume = m.volume;
        f.pointnet = m.pointnet;
        f.fusion = m.fusion;
        const ModelConfig cfg = f.config();
        for (std::uint64_t s : seeds) {
          Model<float> model(cfg, s);
          auto opt = train_flags.opt;
          opt.seed = s;
          const auto rows = train(model, train_ds, opt);
          EvalOptions eo;
          eo.seed = s;
          const auto rep = evaluate(model, eval_ds, eo);
          results.push_back({m, s, rep.mean, cli::tail_loss(rows)});
          err << m.label() << " seed " << s << ": rmse_mm " << rep.mean.rmse_mm << '\n';
        }
      }
      const std::string csv = cli::ablation_csv(results);
      if (!report_path.empty()) cli::write_text_file(report_path, csv);
      out << csv;
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"vpnet"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace vpnet
