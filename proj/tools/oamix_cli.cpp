#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "oamix/data.hpp"
#include "oamix/model_io.hpp"
#include "oamix/selftest.hpp"
#include "oamix/train.hpp"

namespace {

using nlohmann::json;

json load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw oamix::ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw oamix::ConfigError("config '" + path + "': " + e.what());
  }
}

oamix::SyntheticSpec spec_from_config(const json& cfg) {
  oamix::SyntheticSpec spec;
  if (!cfg.contains("data")) return spec;
  const json& d = cfg.at("data");
  spec.image = d.value("image", spec.image);
  spec.channels = d.value("channels", spec.channels);
  spec.patch = d.value("patch", spec.patch);
  spec.classes = d.value("classes", spec.classes);
  spec.bg_families = d.value("bg_families", spec.bg_families);
  spec.bg_correlation = d.value("bg_correlation", spec.bg_correlation);
  spec.train_samples = d.value("train_samples", spec.train_samples);
  spec.eval_samples = d.value("eval_samples", spec.eval_samples);
  spec.seed = d.value("seed", spec.seed);
  return spec;
}

oamix::TrainConfig train_from_config(const json& cfg) {
  oamix::TrainConfig tc;
  if (!cfg.contains("train")) return tc;
  const json& t = cfg.at("train");
  tc.lr = t.value("lr", tc.lr);
  tc.beta1 = t.value("beta1", tc.beta1);
  tc.beta2 = t.value("beta2", tc.beta2);
  tc.eps = t.value("eps", tc.eps);
  tc.weight_decay = t.value("weight_decay", tc.weight_decay);
  tc.epochs = t.value("epochs", tc.epochs);
  tc.batch = t.value("batch", tc.batch);
  tc.seed = t.value("seed", tc.seed);
  return tc;
}

int cmd_gen(const std::string& config_path, const std::string& out_dir, int64_t seed_override) {
  json cfg = config_path.empty() ? json::object() : load_config(config_path);
  oamix::SyntheticSpec spec = spec_from_config(cfg);
  if (seed_override >= 0) spec.seed = static_cast<uint64_t>(seed_override);
  oamix::Dataset ds = oamix::gen_dataset(spec);
  oamix::save_dataset(out_dir, ds);
  std::printf("wrote dataset to %s (train %lld, eval %lld per split)\n", out_dir.c_str(),
              static_cast<long long>(spec.train_samples),
              static_cast<long long>(spec.eval_samples));
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, int64_t seed_override) {
  json cfg = load_config(config_path);
  oamix::ModelConfig mc =
      cfg.contains("model") ? oamix::config_from_json(cfg.at("model")) : oamix::ModelConfig{};
  oamix::TrainConfig tc = train_from_config(cfg);
  if (seed_override >= 0) tc.seed = static_cast<uint64_t>(seed_override);

  oamix::Dataset ds = oamix::load_dataset(data_dir);
  mc.image_h = mc.image_w = ds.spec.image;
  mc.channels = ds.spec.channels;
  mc.patch = ds.spec.patch;
  mc.classes = ds.spec.classes;

  oamix::Model<float> model = oamix::build_model<float>(mc, tc.seed);
  std::filesystem::create_directories(out_dir);
  oamix::TrainResult res =
      oamix::train(model, ds.splits.at("original"), tc, out_dir + "/log.ndjson");
  oamix::save_checkpoint(out_dir + "/checkpoint", model, tc.seed, res.steps);

  double first = res.log.empty() ? 0.0 : res.log.front().loss;
  double last = res.log.empty() ? 0.0 : res.log.back().loss;
  std::printf("trained %lld steps, loss %.4f -> %.4f\n", static_cast<long long>(res.steps),
              first, last);
  if (mc.oamix) std::fputs(format_mask_scale_report(report_mask_scales(model)).c_str(), stdout);
  return 0;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& data_dir, const std::string& split) {
  oamix::Model<float> model = oamix::load_checkpoint<float>(ckpt_dir);
  oamix::Dataset ds = oamix::load_dataset(data_dir);
  if (!split.empty()) {
    auto it = ds.splits.find(split);
    if (it == ds.splits.end()) throw oamix::InputError("no split named '" + split + "'");
    std::printf("%s accuracy: %.4f\n", split.c_str(), oamix::evaluate(model, it->second));
    return 0;
  }
  for (auto& [name, s] : ds.splits)
    std::printf("%s accuracy: %.4f\n", name.c_str(), oamix::evaluate(model, s));
  if (ds.splits.count("mixed_same") && ds.splits.count("mixed_rand"))
    std::printf("bg_gap: %.4f\n", oamix::bg_gap(model, ds));
  return 0;
}

int cmd_report_kappa(const std::string& ckpt_dir) {
  oamix::Model<float> model = oamix::load_checkpoint<float>(ckpt_dir);
  std::fputs(oamix::format_mask_scale_report(oamix::report_mask_scales(model)).c_str(), stdout);
  return 0;
}

int cmd_selftest() {
  auto results = oamix::run_selftest();
  bool all = true;
  for (const auto& r : results) {
    std::printf("[%s] %s%s%s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.empty() ? "" : ": ", r.detail.c_str());
    all = all && r.passed;
  }
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"object-aware reweighting of patch-mixing layers"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, ckpt_dir, split;
  int64_t seed_override = -1;

  auto* gen = app.add_subcommand("gen", "generate a synthetic benchmark dataset");
  gen->add_option("--config", config_path, "JSON config (data section)");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed_override, "seed override");

  auto* train = app.add_subcommand("train", "train a model on a generated dataset");
  train->add_option("--config", config_path, "JSON config (model/train sections)")->required();
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory (checkpoint + log)")->required();
  train->add_option("--seed", seed_override, "seed override");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on benchmark splits");
  eval->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--split", split, "evaluate one split only");

  auto* report = app.add_subcommand("report-kappa", "print per-layer and quarter-averaged mask scales");
  report->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();

  app.add_subcommand("selftest", "run the oracle/invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (app.got_subcommand("gen")) return cmd_gen(config_path, out_dir, seed_override);
    if (app.got_subcommand("train")) return cmd_train(config_path, data_dir, out_dir, seed_override);
    if (app.got_subcommand("eval")) return cmd_eval(ckpt_dir, data_dir, split);
    if (app.got_subcommand("report-kappa")) return cmd_report_kappa(ckpt_dir);
    if (app.got_subcommand("selftest")) return cmd_selftest();
  } catch (const oamix::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
