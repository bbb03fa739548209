#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oamix/data.hpp"
#include "oamix/model.hpp"

namespace oamix {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;  // dropped for kappa, norms and biases
  int64_t epochs = 30;
  int64_t batch = 32;
  uint64_t seed = 1;

  void validate() const;
};

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
  std::vector<double> kappa;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  int64_t steps = 0;
};

// Softmax cross-entropy training with AdamW; kappa is clamped at zero after
// every step. Samples are visited in dataset order each epoch so runs are
// reproducible bit-for-bit from (config, seed). Writes newline-delimited JSON
// records {step, loss, kappa: [...]} when log_path is nonempty.
TrainResult train(Model<float>& model, const BenchmarkSplit& data, const TrainConfig& cfg,
                  const std::string& log_path = "");

// Top-1 accuracy; OAMixed models consume each sample's ground-truth patch labels.
double evaluate(Model<float>& model, const BenchmarkSplit& split);

// accuracy(mixed_same) - accuracy(mixed_rand)
double bg_gap(Model<float>& model, const Dataset& ds);

std::string format_mask_scale_report(const MaskScaleReport& rep);
std::vector<double> parse_mask_scale_report(const std::string& text);

}  // namespace oamix
