#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "keycap/model.hpp"
#include "keycap/params.hpp"

namespace keycap {

struct TrainConfig {
  std::size_t epochs = 2;
  std::size_t batch_size = 64;  // clamped to the training-set size
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // global L2 norm; 0 disables

  void validate() const;
};

struct AdamState {
  Parameters m;
  Parameters v;
  std::uint64_t step = 0;

  static AdamState like(const Parameters& params);
};

// One bias-corrected Adam update; increments state.step first.
void adam_step(Parameters& params, const Parameters& grads, AdamState& state, const TrainConfig& cfg);

// Scales grads in place so their global L2 norm is at most max_norm.
double clip_gradients(Parameters& grads, double max_norm);

// Token-weighted mean teacher-forced loss.
double dataset_loss(const CaptionModel& model, std::span<const Example> examples);

// Gradient of the token-weighted mean loss over a batch.
double batch_gradients(const CaptionModel& model, std::span<const Example* const> batch, Parameters& grads);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  Parameters params;
  AdamState adam;
  std::uint32_t vocab_fingerprint = 0;
  std::string config;  // key=value echo of the run configuration

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(std::span<const std::uint8_t> bytes);
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct LogRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;  // 0 on the per-epoch validation record
  double loss = 0.0;
  std::optional<double> val_loss;

  std::string format() const;
};

struct TrainResult {
  Checkpoint best;  // lowest validation loss seen
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;
  std::vector<LogRecord> log;
};

// Trains model in place (it ends holding the last-epoch weights).
TrainResult train(CaptionModel& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& cfg, const std::function<void(const LogRecord&)>& on_record = {});

}  // namespace keycap
