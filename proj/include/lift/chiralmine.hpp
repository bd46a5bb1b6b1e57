#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lift/featureio.hpp"

namespace lift {

struct NounGroup {
  std::string group_name;
  std::vector<std::string> nouns;
};

struct AntonymEntry {
  std::string verb_pos;
  std::string verb_neg;
  std::vector<NounGroup> noun_groups;
};

/// Curated verb antonym pairs with their noun groupings.
struct AntonymConfig {
  std::vector<AntonymEntry> entries;

  /// Rejects self-antonyms, empty noun lists and repeated (pair, group) keys.
  void validate() const;
};

void to_json(nlohmann::json& j, const AntonymConfig& c);
void from_json(const nlohmann::json& j, AntonymConfig& c);

AntonymConfig load_antonym_config(const std::filesystem::path& path);
void save_antonym_config(const AntonymConfig& config, const std::filesystem::path& path);

struct LabeledVideo {
  std::string video_id;
  int label = 0;  // 1 for verb_pos
  Split split = Split::train;

  bool operator==(const LabeledVideo&) const = default;
};

/// One binary task: verb_pos vs verb_neg on the nouns of one group.
struct ChiralGroup {
  std::string verb_pos;
  std::string verb_neg;
  std::string group_name;
  std::vector<LabeledVideo> train;
  std::vector<LabeledVideo> test;

  /// "verb_pos|verb_neg|group_name".
  std::string key() const;
};

/// Lower-cased, surrounding whitespace removed.
std::string normalize_label(const std::string& s);

/// Videos join every group whose verb pair and noun list they match. Members
/// are ordered by video_id, groups follow config order. Groups without both
/// labels in train are dropped; the reasons are appended to `dropped` if given.
std::vector<ChiralGroup> build_chiral_groups(const Manifest& manifest, const AntonymConfig& config,
                                             std::vector<std::string>* dropped = nullptr);

struct GroupStatsRow {
  std::string group;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

struct GroupStats {
  std::vector<GroupStatsRow> rows;  // sorted by group key
  std::size_t groups = 0;
  std::size_t total_train = 0;
  std::size_t total_test = 0;
  double mean_per_group = 0.0;  // (train + test) / groups

  /// Header group,n_train,n_test,n_total; one row per group, then a total row.
  std::string to_csv() const;
};

GroupStats group_stats(const std::vector<ChiralGroup>& groups);

/// Writes one JSONL file per group plus groups.json (the index) into `dir`.
void write_chiral_groups(const std::vector<ChiralGroup>& groups, const std::filesystem::path& dir);
/// Reads a directory written by write_chiral_groups.
std::vector<ChiralGroup> read_chiral_groups(const std::filesystem::path& dir);

/// File name used for a group's JSONL.
std::string group_file_name(const ChiralGroup& group);

}  // namespace lift
