#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "lift/chiralmine.hpp"
#include "lift/featureio.hpp"
#include "lift/model.hpp"
#include "lift/training.hpp"

namespace lift {

enum class PoolingKind { single_frame, k_frame_concat, mean, time_weighted, full_concat, lift_descriptor };

/// How a [T x D] frame sequence becomes one vector. Frame indices are 1-based.
struct PoolingSpec {
  PoolingKind kind = PoolingKind::mean;
  std::vector<std::size_t> indices;

  static PoolingSpec single_frame(std::size_t i) { return {PoolingKind::single_frame, {i}}; }
  static PoolingSpec k_frames(std::vector<std::size_t> idx) { return {PoolingKind::k_frame_concat, std::move(idx)}; }
  /// k indices spread evenly over 1..T with the same rounding as frame resampling.
  static PoolingSpec k_frames_evenly(std::size_t k, std::size_t T);
  static PoolingSpec mean() { return {PoolingKind::mean, {}}; }
  static PoolingSpec time_weighted() { return {PoolingKind::time_weighted, {}}; }
  static PoolingSpec full_concat() { return {PoolingKind::full_concat, {}}; }
  static PoolingSpec lift_descriptor() { return {PoolingKind::lift_descriptor, {}}; }

  /// Throws ValidationError for out-of-range or missing indices.
  void validate(std::size_t frames) const;
  /// e.g. "mean", "single_frame(3)", "k_frame_concat(1,9)".
  std::string name() const;
};

/// Parses "mean", "time_weighted", "full_concat", "lift", "single:I",
/// "frames:I,J,..." and "kframes:K" (needs T).
PoolingSpec parse_pooling(const std::string& text, std::size_t frames);

/// A trained encoder together with its input preparation.
struct LiftEncoder {
  LiftParams params;
  CheckpointMeta meta;

  static LiftEncoder from_checkpoint(const Checkpoint& ckpt);
};

/// lift_descriptor needs `model`; frames are resampled and standardized as the
/// model expects before encoding.
std::vector<float> pool_descriptor(const Tensor& frames, const PoolingSpec& spec, const LiftEncoder* model = nullptr);

/// Batched pool_descriptor. Results do not depend on `workers`.
std::vector<std::vector<float>> pool_descriptors(const std::vector<Tensor>& videos, const PoolingSpec& spec,
                                                 const LiftEncoder* model = nullptr, std::size_t workers = 1);

/// Concatenation (a, b).
std::vector<float> concat_descriptors(const std::vector<float>& a, const std::vector<float>& b);

enum class ProbeKind { linear, mlp, attentive };

struct ProbeSpec {
  ProbeKind kind = ProbeKind::linear;
  std::size_t hidden = 512;  // mlp
  double dropout = 0.1;      // mlp
  std::size_t key_dim = 0;   // attentive; 0 means the token width
  double learning_rate = 1e-3;
  std::size_t epochs = 200;
  double weight_decay = 1e-4;
  std::size_t batch_size = 0;  // 0 is full batch
  bool plateau = false;
  PlateauConfig scheduler;
  std::uint64_t seed = 0;
  bool standardize = true;

  /// Adam 1e-3, 200 epochs, weight decay 1e-4, full batch.
  static ProbeSpec chiral(ProbeKind kind = ProbeKind::linear);
  /// Adam 1e-5, 100 epochs, plateau schedule, batch 256.
  static ProbeSpec standard(ProbeKind kind = ProbeKind::linear);

  void validate() const;
};

std::string to_string(ProbeKind k);
ProbeKind parse_probe_kind(const std::string& s);
void to_json(nlohmann::json& j, const ProbeSpec& s);
void from_json(const nlohmann::json& j, ProbeSpec& s);

/// Training examples: a vector per sample, or a token sequence per sample
/// (attentive) with an optional auxiliary vector concatenated after pooling.
struct ProbeData {
  std::vector<std::vector<float>> features;
  std::vector<Tensor> tokens;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

/// A trained classifier. Two classes use one logit (predict 1 iff logit > 0);
/// more classes use softmax with ties going to the lowest index.
class Probe {
 public:
  Probe() = default;
  Probe(ProbeSpec spec, std::size_t classes, std::size_t feature_dim, std::size_t token_dim);

  /// A probe with given weights and no standardization, laid out as train_probe
  /// would produce for spec.kind.
  static Probe from_params(ProbeSpec spec, std::size_t classes, std::size_t feature_dim, std::size_t token_dim,
                           std::vector<Tensor> params);

  std::vector<int> predict(const ProbeData& data) const;
  double accuracy(const ProbeData& data) const;
  /// [N x outputs] where outputs is 1 for two classes.
  Tensor logits(const ProbeData& data) const;

  const ProbeSpec& spec() const { return spec_; }
  std::size_t classes() const { return classes_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<float>& feature_mean() const { return feature_mean_; }
  const std::vector<float>& feature_std() const { return feature_std_; }

 private:
  friend Probe train_probe(const ProbeData& train, const ProbeSpec& spec);

  ProbeSpec spec_;
  std::size_t classes_ = 2;
  std::size_t feature_dim_ = 0;
  std::size_t token_dim_ = 0;
  std::vector<Tensor> params_;
  std::vector<float> feature_mean_, feature_std_;
  std::vector<float> token_mean_, token_std_;
};

/// Dispatches on spec.kind. Throws ValidationError when the training set has a
/// single class or is malformed.
Probe train_probe(const ProbeData& train, const ProbeSpec& spec);
Probe train_linear_probe(const ProbeData& train, ProbeSpec spec);
Probe train_mlp_probe(const ProbeData& train, ProbeSpec spec);
Probe train_attentive_probe(const ProbeData& train, ProbeSpec spec);

/// Descriptors keyed by video id, in insertion order.
struct DescriptorTable {
  std::vector<std::string> ids;
  std::vector<std::vector<float>> rows;

  void add(std::string id, std::vector<float> row);
  std::size_t dim() const { return rows.empty() ? 0 : rows.front().size(); }
  std::size_t size() const { return ids.size(); }
  /// Throws ValidationError for unknown ids.
  const std::vector<float>& at(const std::string& id) const;

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

/// Binary: "LDS1" | u32 N | u32 dim | N x (u32 id length, id bytes, dim float32), little endian.
void save_descriptor_table(const DescriptorTable& table, const std::filesystem::path& path);
DescriptorTable load_descriptor_table(const std::filesystem::path& path);
/// CSV with header video_id,f0,...; values printed to round-trip exactly.
std::string descriptor_table_csv(const DescriptorTable& table);

struct GroupResult {
  std::string group;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double accuracy = 0.0;
  bool skipped = false;
  std::string reason;
};

struct ProbeReport {
  std::vector<GroupResult> groups;
  double macro_accuracy = 0.0;  // unweighted over groups that ran
  std::size_t descriptor_dim = 0;
  std::string descriptor;  // pooling name
  ProbeSpec spec;
  std::string reference = "SSv2 chiral 86.6, dim 768";

  nlohmann::json to_json() const;
  /// group,n_train,n_test,accuracy then a macro row.
  std::string to_csv() const;
};

/// Per-video token sequences for attentive probes, keyed by video id.
using TokenTable = std::unordered_map<std::string, Tensor>;

/// One independent probe per group; failures become skipped entries. Attentive
/// probes pool `tokens` and use the descriptors (if the table is non-empty) as
/// the auxiliary vector.
ProbeReport evaluate_chiral(const std::vector<ChiralGroup>& groups, const DescriptorTable& descriptors,
                            const ProbeSpec& spec, std::size_t workers = 1, const std::string& descriptor_name = "",
                            const TokenTable* tokens = nullptr);

/// Multi-class probe over the manifest's verbs (sorted, one class each),
/// trained on the train split and scored on the test split. The report has a
/// single row named "all".
ProbeReport evaluate_standard(const Manifest& manifest, const DescriptorTable& descriptors, const ProbeSpec& spec,
                              const std::string& descriptor_name = "", const TokenTable* tokens = nullptr);

}  // namespace lift
