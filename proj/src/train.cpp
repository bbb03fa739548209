#include "oamix/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "oamix/errors.hpp"
#include "oamix/optim.hpp"

namespace oamix {

using nlohmann::json;

void TrainConfig::validate() const {
  if (lr < 0.0) throw ConfigError("train config: lr must be nonnegative");
  if (batch < 1) throw ConfigError("train config: batch must be positive");
  if (epochs < 0) throw ConfigError("train config: epochs must be nonnegative");
  if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be nonnegative");
}

namespace {

std::string param_norms(Model<float>& model) {
  std::ostringstream os;
  for (auto* p : model.parameters()) {
    double s = 0.0;
    for (float v : p->tensor.values()) s += static_cast<double>(v) * v;
    os << " " << p->name << "=" << std::sqrt(s);
  }
  return os.str();
}

}  // namespace

TrainResult train(Model<float>& model, const BenchmarkSplit& data, const TrainConfig& cfg,
                  const std::string& log_path) {
  cfg.validate();
  if (data.samples.empty()) throw InputError("train: empty training split");
  const auto& first = data.samples.front().image;
  if (first.dim(0) != model.cfg.channels || first.dim(1) != model.cfg.image_h ||
      first.dim(2) != model.cfg.image_w)
    throw InputError("train: dataset image shape " + shape_str(first.shape()) +
                     " does not match model config");

  AdamW<float>::Config ocfg;
  ocfg.lr = cfg.lr;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  ocfg.eps = cfg.eps;
  ocfg.weight_decay = cfg.weight_decay;
  AdamW<float> opt(model.parameters(), ocfg);

  const int64_t gh = model.cfg.grid_h(), gw = model.cfg.grid_w();
  std::vector<PatchLabels> labels;
  if (model.cfg.oamix) {
    labels.reserve(data.samples.size());
    for (const auto& s : data.samples) labels.push_back(sample_patch_labels(s, gh, gw));
  }

  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::trunc);
    if (!log_file) throw FormatError("cannot open log file " + log_path);
  }

  TrainResult result;
  const int64_t n = static_cast<int64_t>(data.samples.size());
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int64_t start = 0; start < n; start += cfg.batch) {
      int64_t bsz = std::min(cfg.batch, n - start);
      opt.zero_grad();
      double batch_loss = 0.0;
      for (int64_t k = 0; k < bsz; ++k) {
        int64_t i = start + k;
        tape<float>().clear();
        const Sample& s = data.samples[static_cast<size_t>(i)];
        Tensor<float> logits =
            forward(model, s.image, model.cfg.oamix ? &labels[static_cast<size_t>(i)] : nullptr);
        Tensor<float> loss =
            scale(cross_entropy_with_logits(logits, s.class_id), 1.0f / static_cast<float>(bsz));
        batch_loss += static_cast<double>(loss.item()) ;
        backward(loss);
      }
      tape<float>().clear();
      if (!std::isfinite(batch_loss))
        throw TrainError("train: non-finite loss at step " + std::to_string(step) +
                         "; parameter norms:" + param_norms(model));
      opt.step();
      for (auto* ms : model.mask_scales()) project_kappa(*ms);

      TrainLogEntry entry;
      entry.step = step;
      entry.loss = batch_loss;
      for (auto* ms : model.mask_scales())
        entry.kappa.push_back(static_cast<double>(ms->value()));
      if (log_file) {
        json rec{{"step", entry.step}, {"loss", entry.loss}, {"kappa", entry.kappa}};
        log_file << rec.dump() << "\n";
      }
      result.log.push_back(std::move(entry));
      ++step;
    }
  }
  result.steps = step;
  return result;
}

double evaluate(Model<float>& model, const BenchmarkSplit& split) {
  if (split.samples.empty()) throw InputError("evaluate: split '" + split.name + "' is empty");
  NoGradGuard ng;
  const int64_t gh = model.cfg.grid_h(), gw = model.cfg.grid_w();
  int64_t correct = 0;
  for (const auto& s : split.samples) {
    PatchLabels labels;
    if (model.cfg.oamix) labels = sample_patch_labels(s, gh, gw);
    Tensor<float> logits = forward(model, s.image, model.cfg.oamix ? &labels : nullptr);
    auto v = logits.values();
    int64_t arg = 0;
    for (int64_t j = 1; j < logits.numel(); ++j)
      if (v[static_cast<size_t>(j)] > v[static_cast<size_t>(arg)]) arg = j;  // ties break low
    if (arg == s.class_id) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(split.samples.size());
}

double bg_gap(Model<float>& model, const Dataset& ds) {
  auto same = ds.splits.find("mixed_same");
  auto rand = ds.splits.find("mixed_rand");
  if (same == ds.splits.end() || rand == ds.splits.end())
    throw InputError("bg_gap: dataset must contain mixed_same and mixed_rand splits");
  return evaluate(model, same->second) - evaluate(model, rand->second);
}

std::string format_mask_scale_report(const MaskScaleReport& rep) {
  std::ostringstream os;
  os << "Learned mask scales kappa(l)\n";
  os << "layer kappas:";
  char buf[40];
  for (double k : rep.per_layer) {
    std::snprintf(buf, sizeof(buf), " %.9g", k);
    os << buf;
  }
  os << "\n";
  os << "Layer 1/4  Layer 2/4  Layer 3/4  Layer 4/4\n";
  for (int q = 0; q < 4; ++q) {
    std::snprintf(buf, sizeof(buf), q ? "      %.3f" : "%.3f", rep.quarters[static_cast<size_t>(q)]);
    os << buf;
  }
  os << "\n";
  return os.str();
}

std::vector<double> parse_mask_scale_report(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("layer kappas:", 0) == 0) {
      std::istringstream ls(line.substr(13));
      std::vector<double> out;
      double v;
      while (ls >> v) out.push_back(v);
      return out;
    }
  }
  throw FormatError("mask scale report: no 'layer kappas:' line found");
}

}  // namespace oamix
