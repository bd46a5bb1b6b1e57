#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "lift/featureio.hpp"
#include "lift/model.hpp"

namespace lift {

struct LossTerms {
  double total = 0.0;
  double rec = 0.0;   // sum over frames and feature dims of squared error
  double orth = 0.0;  // |cos(z_s, z_d)|
};

/// Per-video objective: L_rec + lambda * |cos(z_s, z_d)|. A zero-norm token
/// makes the orthogonality term 0 (with a logged warning).
LossTerms lift_loss(const Tensor& frames, const Tensor& reconstruction, const Descriptor& desc, double lambda);

template <typename T>
struct LossGraph {
  Var total;  // batch mean of rec + lambda * orth
  Var rec;    // batch sum of squared error
  Var orth;   // batch sum of |cos|
};

/// Builds the batched objective on `tape`; `frames` is [batch*steps x D].
template <typename T>
LossGraph<T> lift_loss_graph(Tape<T>& tape, const LiftConfig& config, std::span<const Var> params, Var frames,
                             std::size_t batch, std::size_t steps);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 coefficient added to the gradient before the moment updates.
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update in place. `names`, when given, labels the
/// parameter in the error raised for a non-finite gradient.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
               const AdamConfig& config = {}, const std::vector<std::string>* names = nullptr);

struct PlateauConfig {
  double factor = 0.5;
  std::size_t patience = 10;
  double min_lr = 1e-6;
  double threshold = 1e-4;  // relative improvement that counts as progress
};

/// Reduce-on-plateau: after `patience` consecutive epochs without relative
/// improvement the rate is multiplied by `factor` (floored at min_lr) and the
/// counter restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, PlateauConfig config);

  /// Feeds one epoch's loss and returns the rate for the next epoch.
  double step(double epoch_loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  PlateauConfig config_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  PlateauConfig scheduler;
  std::uint64_t seed = 0;
  /// Per-dimension standardization of inputs, fit on the training videos.
  bool standardize = false;
  /// Fraction of the training videos used, chosen by a seeded draw.
  double data_fraction = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;
  double l_rec = 0.0;   // mean over videos
  double l_orth = 0.0;  // mean over videos
  double total = 0.0;
  double lr = 0.0;      // rate used during the epoch
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// CSV with header epoch,l_rec,l_orth,lr.
  std::string to_csv() const;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainLog log;
};

/// Per-dimension mean and standard deviation over every frame of every video.
/// Dimensions with zero spread get a deviation of 1.
std::pair<std::vector<float>, std::vector<float>> fit_standardization(const std::vector<Tensor>& videos);
Tensor apply_standardization(const Tensor& frames, const CheckpointMeta& meta);

/// Resamples to config.frames and applies the checkpoint's standardization.
Tensor prepare_frames(const Tensor& raw, const LiftConfig& config, const CheckpointMeta& meta);

/// Trains on in-memory videos that already have config.frames rows each.
TrainResult train_videos(const std::vector<Tensor>& videos, const LiftConfig& lift_config,
                         const TrainConfig& train_config);

/// Loads, resamples and trains on every record of the manifest.
TrainResult train(const Manifest& manifest, const LiftConfig& lift_config, const TrainConfig& train_config);

/// Mean |cos(z_s, z_d)| of the encoded videos.
double mean_abs_cosine(const std::vector<Descriptor>& descriptors);

}  // namespace lift
