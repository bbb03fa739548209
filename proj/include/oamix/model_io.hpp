#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "oamix/model.hpp"
#include "oamix/tensor_io.hpp"

namespace oamix {

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"family", family_name(cfg.family)},
                        {"image_h", cfg.image_h},
                        {"image_w", cfg.image_w},
                        {"channels", cfg.channels},
                        {"patch", cfg.patch},
                        {"dim", cfg.dim},
                        {"depth", cfg.depth},
                        {"heads", cfg.heads},
                        {"kernel", cfg.kernel},
                        {"token_hidden", cfg.token_hidden},
                        {"classes", cfg.classes},
                        {"oamix", cfg.oamix},
                        {"conv_sharing", cfg.sharing == ConvSharing::Shared ? "shared" : "full"}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.family = family_from_name(j.value("family", "deit_like"));
  cfg.image_h = j.value("image_h", cfg.image_h);
  cfg.image_w = j.value("image_w", cfg.image_w);
  cfg.channels = j.value("channels", cfg.channels);
  cfg.patch = j.value("patch", cfg.patch);
  cfg.dim = j.value("dim", cfg.dim);
  cfg.depth = j.value("depth", cfg.depth);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.kernel = j.value("kernel", cfg.kernel);
  cfg.token_hidden = j.value("token_hidden", cfg.token_hidden);
  cfg.classes = j.value("classes", cfg.classes);
  cfg.oamix = j.value("oamix", cfg.oamix);
  std::string sharing = j.value("conv_sharing", "shared");
  if (sharing != "shared" && sharing != "full")
    throw ConfigError("conv_sharing must be 'shared' or 'full', got '" + sharing + "'");
  cfg.sharing = sharing == "shared" ? ConvSharing::Shared : ConvSharing::Full;
  cfg.validate();
  return cfg;
}

// Checkpoint layout: one OAT1 file per parameter plus manifest.json holding
// {config, seed, step, parameter list}.
template <class T>
void save_checkpoint(const std::string& dir, Model<T>& model, uint64_t seed, int64_t step) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = config_to_json(model.cfg);
  manifest["seed"] = seed;
  manifest["step"] = step;
  auto params = model.parameters();
  nlohmann::json names = nlohmann::json::array();
  for (auto* p : params) {
    names.push_back(p->name);
    save_oat1(dir + "/" + p->name + ".oat1", p->tensor);
  }
  manifest["parameters"] = names;
  std::ofstream f(dir + "/manifest.json", std::ios::trunc);
  if (!f) throw FormatError("cannot write " + dir + "/manifest.json");
  f << manifest.dump(2) << "\n";
}

template <class T>
Model<T> load_checkpoint(const std::string& dir, uint64_t* seed_out = nullptr,
                         int64_t* step_out = nullptr) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw FormatError("cannot open " + dir + "/manifest.json");
  nlohmann::json manifest = nlohmann::json::parse(f);
  ModelConfig cfg = config_from_json(manifest.at("config"));
  uint64_t seed = manifest.value("seed", 0ull);
  if (seed_out) *seed_out = seed;
  if (step_out) *step_out = manifest.value("step", int64_t(0));
  Model<T> model = build_model<T>(cfg, seed);
  for (auto* p : model.parameters()) {
    Tensor<T> t = load_oat1<T>(dir + "/" + p->name + ".oat1");
    if (t.shape() != p->tensor.shape())
      throw FormatError("checkpoint: shape mismatch for " + p->name + ": " +
                        shape_str(t.shape()) + " vs " + shape_str(p->tensor.shape()));
    auto dst = p->tensor.values_mut();
    auto src = t.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

}  // namespace oamix
