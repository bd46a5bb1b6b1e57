#include "lift/chiralmine.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace lift {

namespace fs = std::filesystem;
using nlohmann::json;

std::string normalize_label(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  std::string out = s.substr(first, last - first + 1);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

void AntonymConfig::validate() const {
  std::set<std::string> keys;
  for (const auto& e : entries) {
    const std::string pos = normalize_label(e.verb_pos);
    const std::string neg = normalize_label(e.verb_neg);
    if (pos.empty() || neg.empty()) throw ValidationError("antonym entry with an empty verb");
    if (pos == neg) throw ValidationError("verb '" + e.verb_pos + "' is listed as its own antonym");
    if (e.noun_groups.empty()) throw ValidationError("antonym pair " + pos + "/" + neg + " has no noun groups");
    for (const auto& g : e.noun_groups) {
      if (g.nouns.empty()) {
        throw ValidationError("noun group '" + g.group_name + "' of " + pos + "/" + neg + " has no nouns");
      }
      if (!keys.insert(pos + "|" + neg + "|" + g.group_name).second) {
        throw ValidationError("duplicate chiral group " + pos + "|" + neg + "|" + g.group_name);
      }
    }
  }
}

void to_json(json& j, const AntonymConfig& c) {
  json entries = json::array();
  for (const auto& e : c.entries) {
    json groups = json::array();
    for (const auto& g : e.noun_groups) groups.push_back({{"group_name", g.group_name}, {"nouns", g.nouns}});
    entries.push_back({{"verb_pos", e.verb_pos}, {"verb_neg", e.verb_neg}, {"noun_groups", groups}});
  }
  j = json{{"entries", entries}};
}

void from_json(const json& j, AntonymConfig& c) {
  c.entries.clear();
  for (const auto& e : j.at("entries")) {
    AntonymEntry entry;
    e.at("verb_pos").get_to(entry.verb_pos);
    e.at("verb_neg").get_to(entry.verb_neg);
    for (const auto& g : e.at("noun_groups")) {
      NounGroup group;
      g.at("group_name").get_to(group.group_name);
      g.at("nouns").get_to(group.nouns);
      entry.noun_groups.push_back(std::move(group));
    }
    c.entries.push_back(std::move(entry));
  }
}

AntonymConfig load_antonym_config(const fs::path& path) {
  const std::string text = read_file_bytes(path);
  AntonymConfig config;
  try {
    json::parse(text).get_to(config);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": invalid antonym config (" + e.what() + ")");
  }
  config.validate();
  return config;
}

void save_antonym_config(const AntonymConfig& config, const fs::path& path) {
  config.validate();
  write_file_bytes(path, json(config).dump(2) + "\n");
}

std::string ChiralGroup::key() const { return verb_pos + "|" + verb_neg + "|" + group_name; }

std::vector<ChiralGroup> build_chiral_groups(const Manifest& manifest, const AntonymConfig& config,
                                             std::vector<std::string>* dropped) {
  config.validate();
  std::vector<std::size_t> order(manifest.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return manifest[a].video_id < manifest[b].video_id; });

  std::vector<ChiralGroup> out;
  for (const auto& e : config.entries) {
    const std::string pos = normalize_label(e.verb_pos);
    const std::string neg = normalize_label(e.verb_neg);
    for (const auto& g : e.noun_groups) {
      std::set<std::string> nouns;
      for (const auto& n : g.nouns) nouns.insert(normalize_label(n));
      ChiralGroup group{e.verb_pos, e.verb_neg, g.group_name, {}, {}};
      for (std::size_t i : order) {
        const auto& r = manifest[i];
        const std::string verb = normalize_label(r.verb);
        if ((verb != pos && verb != neg) || !nouns.count(normalize_label(r.noun))) continue;
        LabeledVideo v{r.video_id, verb == pos ? 1 : 0, r.split};
        (r.split == Split::train ? group.train : group.test).push_back(std::move(v));
      }
      const auto positives = std::count_if(group.train.begin(), group.train.end(),
                                           [](const LabeledVideo& v) { return v.label == 1; });
      const auto negatives = static_cast<std::ptrdiff_t>(group.train.size()) - positives;
      if (positives == 0 || negatives == 0) {
        const std::string reason = fmt::format("dropped group {}: {} positive and {} negative training videos",
                                               group.key(), positives, negatives);
        spdlog::info("{}", reason);
        if (dropped) dropped->push_back(reason);
        continue;
      }
      out.push_back(std::move(group));
    }
  }
  return out;
}

GroupStats group_stats(const std::vector<ChiralGroup>& groups) {
  GroupStats stats;
  for (const auto& g : groups) {
    stats.rows.push_back({g.key(), g.train.size(), g.test.size()});
    stats.total_train += g.train.size();
    stats.total_test += g.test.size();
  }
  std::sort(stats.rows.begin(), stats.rows.end(),
            [](const GroupStatsRow& a, const GroupStatsRow& b) { return a.group < b.group; });
  stats.groups = groups.size();
  if (stats.groups > 0) {
    stats.mean_per_group =
        static_cast<double>(stats.total_train + stats.total_test) / static_cast<double>(stats.groups);
  }
  return stats;
}

std::string GroupStats::to_csv() const {
  std::string out = "group,n_train,n_test,n_total\n";
  for (const auto& r : rows) out += fmt::format("{},{},{},{}\n", r.group, r.n_train, r.n_test, r.n_train + r.n_test);
  if (groups > 0) {
    out += fmt::format("total ({} groups),{},{},{}\n", groups, total_train, total_test, total_train + total_test);
    out += fmt::format("mean per group,{:.1f},{:.1f},{:.1f}\n", static_cast<double>(total_train) / groups,
                       static_cast<double>(total_test) / groups, mean_per_group);
  }
  return out;
}

std::string group_file_name(const ChiralGroup& group) {
  auto clean = [](const std::string& s) {
    std::string out;
    for (char c : s) out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_');
    return out;
  };
  return clean(group.verb_pos) + "__" + clean(group.verb_neg) + "__" + clean(group.group_name) + ".jsonl";
}

void write_chiral_groups(const std::vector<ChiralGroup>& groups, const fs::path& dir) {
  fs::create_directories(dir);
  json index = json::array();
  std::set<std::string> names;
  for (const auto& g : groups) {
    const std::string name = group_file_name(g);
    if (!names.insert(name).second) throw ValidationError("groups " + g.key() + " collide on file name " + name);
    std::string lines;
    for (const auto* part : {&g.train, &g.test}) {
      for (const auto& v : *part) {
        lines += json{{"video_id", v.video_id}, {"label", v.label}, {"split", to_string(v.split)}}.dump();
        lines += '\n';
      }
    }
    write_file_bytes(dir / name, lines);
    index.push_back(
        {{"verb_pos", g.verb_pos}, {"verb_neg", g.verb_neg}, {"group_name", g.group_name}, {"file", name}});
  }
  write_file_bytes(dir / "groups.json", index.dump(2) + "\n");
}

std::vector<ChiralGroup> read_chiral_groups(const fs::path& dir) {
  std::vector<ChiralGroup> out;
  json index;
  try {
    index = json::parse(read_file_bytes(dir / "groups.json"));
  } catch (const json::parse_error& e) {
    throw ValidationError((dir / "groups.json").string() + ": " + e.what());
  }
  for (const auto& entry : index) {
    ChiralGroup g;
    g.verb_pos = entry.at("verb_pos").get<std::string>();
    g.verb_neg = entry.at("verb_neg").get<std::string>();
    g.group_name = entry.at("group_name").get<std::string>();
    const fs::path file = dir / entry.at("file").get<std::string>();
    const std::string text = read_file_bytes(file);
    std::size_t start = 0, line_no = 0;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      ++line_no;
      const std::string line = text.substr(start, end - start);
      start = end + 1;
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        LabeledVideo v{j.at("video_id").get<std::string>(), j.at("label").get<int>(),
                       parse_split(j.at("split").get<std::string>())};
        (v.split == Split::train ? g.train : g.test).push_back(std::move(v));
      } catch (const json::exception& e) {
        throw ValidationError(file.string() + " line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace lift
