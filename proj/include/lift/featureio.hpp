#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lift/config.hpp"
#include "lift/model.hpp"
#include "lift/tensor.hpp"

namespace lift {

enum class Split { train, test };

std::string to_string(Split s);
/// Accepts "train" or "test"; anything else is a ValidationError.
Split parse_split(const std::string& s);

/// One video's per-frame features plus identity and labels.
struct FeatureSequence {
  std::string video_id;
  Tensor frames;  // [T_raw x D]
  std::string verb;
  std::string noun;
  Split split = Split::train;
};

// Feature file: "LFT1" | u32 version | u32 T | u32 D | T*D little-endian float32.
inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 16;

void write_feature_file(const Tensor& frames, const std::filesystem::path& path);
void write_feature_file(const FeatureSequence& seq, const std::filesystem::path& path);

/// video_id is set to the file stem; labels are left empty.
FeatureSequence read_feature_file(const std::filesystem::path& path);

/// Only the (T_raw, D) header fields.
std::pair<std::size_t, std::size_t> read_feature_header(const std::filesystem::path& path);

/// Row indices round(i * (raw - 1) / (target - 1)); the middle frame when target == 1.
std::vector<std::size_t> resample_indices(std::size_t raw, std::size_t target);
Tensor resample_frames(const Tensor& frames, std::size_t target);

struct ManifestRecord {
  std::string video_id;
  std::string path;  // relative to the manifest's directory
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::string verb;
  std::string noun;
  Split split = Split::train;

  bool operator==(const ManifestRecord&) const = default;
};

class Manifest {
 public:
  Manifest() = default;
  Manifest(std::vector<ManifestRecord> records, std::filesystem::path base_dir);

  const std::vector<ManifestRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const ManifestRecord& operator[](std::size_t i) const { return records_.at(i); }
  const std::filesystem::path& base_dir() const { return base_dir_; }

  std::filesystem::path file_path(std::size_t i) const;

  /// Reads record i's feature file and checks its header against the record.
  FeatureSequence load(std::size_t i) const;

  /// Subset in the given order; base directory is kept.
  Manifest select(const std::vector<std::size_t>& indices) const;

 private:
  std::vector<ManifestRecord> records_;
  std::filesystem::path base_dir_;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct CheckpointMeta {
  std::size_t epoch = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
  /// Per-dimension input standardization applied before encoding, if any.
  std::vector<float> input_mean;
  std::vector<float> input_std;

  bool operator==(const CheckpointMeta&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  std::optional<LiftConfig> config;
  std::vector<NamedTensor> tensors;
  CheckpointMeta meta;

  static Checkpoint from_params(const LiftParams& params, CheckpointMeta meta = {});
  /// Throws ValidationError when there is no config.
  LiftParams params() const;
};

/// Throws ValidationError unless the tensors are exactly param_layout(config)
/// in names and shapes (or there is no config and no tensors).
void validate_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Whole-file helpers shared by the writers.
std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

}  // namespace lift
