#include "lift/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace lift {

namespace {

// |cos| of the two descriptor halves; 0 when either has zero norm.
double abs_cosine(const Descriptor& desc) {
  double dot = 0, ns = 0, nd = 0;
  for (std::size_t j = 0; j < desc.z_static.size(); ++j) {
    const double s = desc.z_static[j];
    const double d = desc.z_dynamic[j];
    dot += s * d;
    ns += s * s;
    nd += d * d;
  }
  if (ns == 0.0 || nd == 0.0) {
    spdlog::warn("zero-norm descriptor token, orthogonality term set to 0");
    return 0.0;
  }
  return std::abs(dot / (std::sqrt(ns) * std::sqrt(nd)));
}

}  // namespace

LossTerms lift_loss(const Tensor& frames, const Tensor& reconstruction, const Descriptor& desc, double lambda) {
  if (frames.shape() != reconstruction.shape()) {
    throw DimensionError("lift_loss: frames " + shape_string(frames.shape()) + " vs reconstruction " +
                         shape_string(reconstruction.shape()));
  }
  if (desc.z_static.size() != desc.z_dynamic.size()) throw DimensionError("lift_loss: descriptor halves differ");
  if (!(lambda >= 0.0)) throw ValidationError("lift_loss: lambda must be >= 0");
  LossTerms out;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const double diff = static_cast<double>(reconstruction[i]) - static_cast<double>(frames[i]);
    out.rec += diff * diff;
  }
  out.orth = abs_cosine(desc);
  out.total = out.rec + lambda * out.orth;
  return out;
}

template <typename T>
LossGraph<T> lift_loss_graph(Tape<T>& tape, const LiftConfig& config, std::span<const Var> params, Var frames,
                             std::size_t batch, std::size_t steps) {
  const auto g = lift_graph(tape, config, params, frames, batch, steps);
  const Var rec = squared_error(tape, g.reconstruction, frames);
  const Var orth = sum(tape, abs(tape, row_cosine(tape, g.z_static, g.z_dynamic)));
  const Var total = add(tape, rec, scale(tape, orth, static_cast<T>(config.lambda_orth)));
  return {scale(tape, total, static_cast<T>(1.0 / static_cast<double>(batch))), rec, orth};
}

template LossGraph<float> lift_loss_graph(Tape<float>&, const LiftConfig&, std::span<const Var>, Var, std::size_t,
                                          std::size_t);
template LossGraph<double> lift_loss_graph(Tape<double>&, const LiftConfig&, std::span<const Var>, Var, std::size_t,
                                           std::size_t);

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
               const AdamConfig& config, const std::vector<std::string>* names) {
  if (grads.size() != params.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::string label = names ? names->at(k) : "#" + std::to_string(k);
    if (grads[k].size() != params[k].size()) throw DimensionError("adam_step: gradient shape mismatch for " + label);
    if (!grads[k].all_finite()) throw ValidationError("non-finite gradient for parameter " + label);
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape());
      state.v.emplace_back(p.shape());
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(config.beta1);
  const float b2 = static_cast<float>(config.beta2);
  const float step_size = static_cast<float>(lr / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(config.eps);
  const float wd = static_cast<float>(config.weight_decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].data();
    auto g = grads[k].data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float gi = g[i] + wd * p[i];
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      p[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

PlateauScheduler::PlateauScheduler(double lr, PlateauConfig config) : lr_(lr), config_(config) {}

double PlateauScheduler::step(double epoch_loss) {
  if (!std::isfinite(epoch_loss)) throw ValidationError("scheduler received a non-finite loss");
  if (epoch_loss < best_ - config_.threshold * std::abs(best_) || !std::isfinite(best_)) {
    best_ = epoch_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= config_.patience) {
    lr_ = std::max(lr_ * config_.factor, config_.min_lr);
    bad_epochs_ = 0;
  }
  return lr_;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(scheduler.factor > 0.0 && scheduler.factor < 1.0)) throw ConfigError("scheduler factor must be in (0, 1)");
  if (scheduler.patience == 0) throw ConfigError("scheduler patience must be >= 1");
  if (!(scheduler.min_lr > 0.0)) throw ConfigError("scheduler min_lr must be > 0");
  if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw ConfigError("data_fraction must be in (0, 1]");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"scheduler",
                      {{"factor", c.scheduler.factor},
                       {"patience", c.scheduler.patience},
                       {"min_lr", c.scheduler.min_lr},
                       {"threshold", c.scheduler.threshold}}},
                     {"seed", c.seed},
                     {"standardize", c.standardize},
                     {"data_fraction", c.data_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  const auto& s = j.at("scheduler");
  s.at("factor").get_to(c.scheduler.factor);
  s.at("patience").get_to(c.scheduler.patience);
  s.at("min_lr").get_to(c.scheduler.min_lr);
  s.at("threshold").get_to(c.scheduler.threshold);
  j.at("seed").get_to(c.seed);
  j.at("standardize").get_to(c.standardize);
  j.at("data_fraction").get_to(c.data_fraction);
}

std::string TrainLog::to_csv() const {
  std::string out = "epoch,l_rec,l_orth,lr\n";
  for (const auto& e : epochs) out += fmt::format("{},{:.9g},{:.9g},{:.9g}\n", e.epoch, e.l_rec, e.l_orth, e.lr);
  return out;
}

std::pair<std::vector<float>, std::vector<float>> fit_standardization(const std::vector<Tensor>& videos) {
  if (videos.empty()) throw ValidationError("standardization needs at least one video");
  const std::size_t d = videos.front().cols();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  std::size_t n = 0;
  for (const auto& v : videos) {
    if (v.cols() != d) throw DimensionError("standardization: videos differ in feature width");
    for (std::size_t r = 0; r < v.rows(); ++r) {
      const auto row = v.row(r);
      for (std::size_t k = 0; k < d; ++k) sum[k] += row[k];
    }
    n += v.rows();
  }
  std::vector<float> mean(d), sd(d);
  for (std::size_t k = 0; k < d; ++k) mean[k] = static_cast<float>(sum[k] / static_cast<double>(n));
  for (const auto& v : videos) {
    for (std::size_t r = 0; r < v.rows(); ++r) {
      const auto row = v.row(r);
      for (std::size_t k = 0; k < d; ++k) {
        const double c = static_cast<double>(row[k]) - mean[k];
        sq[k] += c * c;
      }
    }
  }
  for (std::size_t k = 0; k < d; ++k) {
    const double s = std::sqrt(sq[k] / static_cast<double>(n));
    sd[k] = s > 0.0 ? static_cast<float>(s) : 1.0f;
  }
  return {mean, sd};
}

Tensor apply_standardization(const Tensor& frames, const CheckpointMeta& meta) {
  if (meta.input_mean.empty()) return frames;
  const std::size_t d = frames.cols();
  if (meta.input_mean.size() != d || meta.input_std.size() != d) {
    throw DimensionError("standardization statistics have width " + std::to_string(meta.input_mean.size()) +
                         ", frames have " + std::to_string(d));
  }
  Tensor out = frames;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t k = 0; k < d; ++k) row[k] = (row[k] - meta.input_mean[k]) / meta.input_std[k];
  }
  return out;
}

Tensor prepare_frames(const Tensor& raw, const LiftConfig& config, const CheckpointMeta& meta) {
  if (raw.cols() != config.feature_dim) {
    throw DimensionError("features have width " + std::to_string(raw.cols()) + ", model expects " +
                         std::to_string(config.feature_dim));
  }
  return apply_standardization(resample_frames(raw, config.frames), meta);
}

namespace {

std::vector<std::size_t> draw_subset(std::size_t n, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (fraction >= 1.0) return idx;
  std::mt19937_64 rng(seed ^ 0x5eed0f7a11d47aULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

TrainResult train_videos(const std::vector<Tensor>& all_videos, const LiftConfig& lift_config,
                         const TrainConfig& tc) {
  lift_config.validate();
  tc.validate();
  if (all_videos.empty()) throw ValidationError("training set is empty");
  const std::size_t steps = lift_config.frames;
  const std::size_t D = lift_config.feature_dim;
  for (std::size_t i = 0; i < all_videos.size(); ++i) {
    if (all_videos[i].rank() != 2 || all_videos[i].rows() != steps || all_videos[i].cols() != D) {
      throw DimensionError("training video " + std::to_string(i) + " has shape " +
                           shape_string(all_videos[i].shape()) + ", expected [" + std::to_string(steps) + "x" +
                           std::to_string(D) + "]");
    }
  }

  std::vector<Tensor> videos;
  for (std::size_t i : draw_subset(all_videos.size(), tc.data_fraction, tc.seed)) videos.push_back(all_videos[i]);

  CheckpointMeta meta;
  meta.seed = tc.seed;
  if (tc.standardize) {
    std::tie(meta.input_mean, meta.input_std) = fit_standardization(videos);
    for (auto& v : videos) v = apply_standardization(v, meta);
  }

  LiftParams params = init_params(lift_config, tc.seed);
  std::vector<std::string> names;
  for (const auto& spec : param_layout(lift_config)) names.push_back(spec.name);
  AdamState adam;
  PlateauScheduler scheduler(tc.learning_rate, tc.scheduler);
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(videos.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  const std::size_t report_every = std::max<std::size_t>(1, tc.epochs / 10);
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = scheduler.lr();
    double rec_sum = 0.0, orth_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t batch = std::min(tc.batch_size, order.size() - start);
      Tensor stacked(Shape{batch * steps, D});
      for (std::size_t b = 0; b < batch; ++b) {
        const auto& src = videos[order[start + b]].data();
        std::copy(src.begin(), src.end(), stacked.data().begin() + static_cast<std::ptrdiff_t>(b * steps * D));
      }
      Tape<float> tape;
      std::vector<Var> vars;
      vars.reserve(params.tensors.size());
      for (const auto& t : params.tensors) vars.push_back(tape.param(t));
      const Var frames = tape.constant(std::move(stacked));
      const auto loss = lift_loss_graph(tape, lift_config, vars, frames, batch, steps);
      rec_sum += tape.value(loss.rec)[0];
      orth_sum += tape.value(loss.orth)[0];
      tape.backward(loss.total);
      std::vector<Tensor> grads;
      grads.reserve(vars.size());
      for (const Var v : vars) grads.push_back(tape.grad(v));
      adam_step(params.tensors, grads, adam, lr, AdamConfig{}, &names);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.l_rec = rec_sum / static_cast<double>(videos.size());
    rec.l_orth = orth_sum / static_cast<double>(videos.size());
    rec.total = rec.l_rec + lift_config.lambda_orth * rec.l_orth;
    rec.lr = lr;
    if (!std::isfinite(rec.total)) throw ValidationError("training diverged at epoch " + std::to_string(epoch));
    result.log.epochs.push_back(rec);
    scheduler.step(rec.total);
    if (epoch % report_every == 0 || epoch == 1) {
      spdlog::info("epoch {}/{}: l_rec {:.5g} l_orth {:.4f} lr {:.3g}", epoch, tc.epochs, rec.l_rec, rec.l_orth, lr);
    }
  }
  meta.epoch = tc.epochs;
  meta.final_loss = result.log.epochs.back().total;
  result.checkpoint = Checkpoint::from_params(params, meta);
  return result;
}

TrainResult train(const Manifest& manifest, const LiftConfig& lift_config, const TrainConfig& train_config) {
  if (manifest.empty()) throw ValidationError("manifest is empty");
  std::vector<Tensor> videos;
  videos.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto seq = manifest.load(i);
    if (seq.frames.cols() != lift_config.feature_dim) {
      throw DimensionError("video '" + seq.video_id + "' has feature width " + std::to_string(seq.frames.cols()) +
                           ", config expects " + std::to_string(lift_config.feature_dim));
    }
    videos.push_back(resample_frames(seq.frames, lift_config.frames));
  }
  return train_videos(videos, lift_config, train_config);
}

double mean_abs_cosine(const std::vector<Descriptor>& descriptors) {
  if (descriptors.empty()) return 0.0;
  double total = 0.0;
  for (const auto& d : descriptors) total += abs_cosine(d);
  return total / static_cast<double>(descriptors.size());
}

}  // namespace lift
