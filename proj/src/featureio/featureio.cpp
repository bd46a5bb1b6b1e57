#include "lift/featureio.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lift/bytes.hpp"

namespace lift {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace bytes;

std::string fold(const std::string& s) {
  std::string out;
  for (char c : s) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return out;
}

void check_finite(const Tensor& t, const std::string& what) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) throw ValidationError(what + ": non-finite value at element " + std::to_string(i));
  }
}

}  // namespace

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(const std::string& s) {
  const std::string f = fold(s);
  if (f == "train") return Split::train;
  if (f == "test") return Split::test;
  throw ValidationError("unknown split '" + s + "' (expected train or test)");
}

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("read failed for " + path.string());
  return std::move(buf).str();
}

void write_file_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_feature_file(const Tensor& frames, const fs::path& path) {
  if (frames.rank() != 2 || frames.rows() == 0 || frames.cols() == 0) {
    throw DimensionError("feature file needs a non-empty [T x D] tensor, got " + shape_string(frames.shape()));
  }
  check_finite(frames, path.string());
  std::string bytes = "LFT1";
  bytes.reserve(kFeatureHeaderBytes + frames.size() * sizeof(float));
  put_u32(bytes, kFeatureFileVersion);
  put_u32(bytes, static_cast<std::uint32_t>(frames.rows()));
  put_u32(bytes, static_cast<std::uint32_t>(frames.cols()));
  put_floats(bytes, frames.data());
  write_file_bytes(path, bytes);
}

void write_feature_file(const FeatureSequence& seq, const fs::path& path) { write_feature_file(seq.frames, path); }

namespace {

std::pair<std::size_t, std::size_t> parse_header(const std::string& bytes, const fs::path& path) {
  const std::string where = path.string();
  if (bytes.size() < 4 || bytes.compare(0, 4, "LFT1") != 0) throw FormatError(where + ": bad magic", 0);
  if (bytes.size() < 8) throw FormatError(where + ": truncated header", bytes.size());
  if (get_u32(bytes, 4) != kFeatureFileVersion) {
    throw FormatError(where + ": unsupported version " + std::to_string(get_u32(bytes, 4)), 4);
  }
  if (bytes.size() < kFeatureHeaderBytes) throw FormatError(where + ": truncated header", bytes.size());
  const std::size_t t = get_u32(bytes, 8);
  const std::size_t d = get_u32(bytes, 12);
  if (t == 0) throw FormatError(where + ": frame count is zero", 8);
  if (d == 0) throw FormatError(where + ": feature dimension is zero", 12);
  return {t, d};
}

}  // namespace

std::pair<std::size_t, std::size_t> read_feature_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string head(kFeatureHeaderBytes, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  return parse_header(head, path);
}

FeatureSequence read_feature_file(const fs::path& path) {
  const std::string bytes = read_file_bytes(path);
  const auto [t, d] = parse_header(bytes, path);
  const std::size_t payload = t * d * sizeof(float);
  if (bytes.size() < kFeatureHeaderBytes + payload) {
    throw FormatError(path.string() + ": truncated payload, expected " + std::to_string(payload) + " bytes",
                      bytes.size());
  }
  if (bytes.size() > kFeatureHeaderBytes + payload) {
    throw FormatError(path.string() + ": trailing bytes after payload", kFeatureHeaderBytes + payload);
  }
  FeatureSequence seq;
  seq.video_id = path.stem().string();
  seq.frames = Tensor(Shape{t, d});
  get_floats(bytes, kFeatureHeaderBytes, seq.frames.data());
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    if (!std::isfinite(seq.frames[i])) {
      throw FormatError(path.string() + ": non-finite feature value", kFeatureHeaderBytes + i * sizeof(float));
    }
  }
  return seq;
}

std::vector<std::size_t> resample_indices(std::size_t raw, std::size_t target) {
  if (raw == 0 || target == 0) throw ValidationError("resample needs at least one source and one target frame");
  std::vector<std::size_t> idx(target);
  if (target == 1) {
    idx[0] = (raw - 1) / 2;
    return idx;
  }
  for (std::size_t i = 0; i < target; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(raw - 1) / static_cast<double>(target - 1);
    idx[i] = static_cast<std::size_t>(std::llround(pos));
  }
  return idx;
}

Tensor resample_frames(const Tensor& frames, std::size_t target) {
  if (frames.rank() != 2) throw DimensionError("resample expects [T x D], got " + shape_string(frames.shape()));
  const auto idx = resample_indices(frames.rows(), target);
  const std::size_t d = frames.cols();
  Tensor out(Shape{target, d});
  for (std::size_t i = 0; i < target; ++i) {
    const auto src = frames.row(idx[i]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

Manifest::Manifest(std::vector<ManifestRecord> records, fs::path base_dir)
    : records_(std::move(records)), base_dir_(std::move(base_dir)) {
  std::set<std::string> seen;
  for (const auto& r : records_) {
    if (!seen.insert(r.video_id).second) throw ValidationError("duplicate video_id '" + r.video_id + "'");
  }
}

fs::path Manifest::file_path(std::size_t i) const {
  const fs::path p = records_.at(i).path;
  return p.is_absolute() ? p : base_dir_ / p;
}

FeatureSequence Manifest::load(std::size_t i) const {
  const auto& r = records_.at(i);
  FeatureSequence seq = read_feature_file(file_path(i));
  if (seq.frames.rows() != r.frames || seq.frames.cols() != r.dim) {
    throw ValidationError("video '" + r.video_id + "': file holds " + std::to_string(seq.frames.rows()) + "x" +
                          std::to_string(seq.frames.cols()) + " features, manifest says " +
                          std::to_string(r.frames) + "x" + std::to_string(r.dim));
  }
  seq.video_id = r.video_id;
  seq.verb = r.verb;
  seq.noun = r.noun;
  seq.split = r.split;
  return seq;
}

Manifest Manifest::select(const std::vector<std::size_t>& indices) const {
  std::vector<ManifestRecord> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(records_.at(i));
  return Manifest(std::move(out), base_dir_);
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + " line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
    }
    try {
      ManifestRecord r;
      r.video_id = j.at("video_id").get<std::string>();
      r.path = j.at("path").get<std::string>();
      r.frames = j.at("frames").get<std::size_t>();
      r.dim = j.at("dim").get<std::size_t>();
      r.verb = j.value("verb", std::string{});
      r.noun = j.value("noun", std::string{});
      r.split = parse_split(j.value("split", std::string{"train"}));
      if (r.video_id.empty()) throw ValidationError("empty video_id");
      if (r.frames == 0 || r.dim == 0) throw ValidationError("frames and dim must be >= 1");
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return Manifest(std::move(records), path.parent_path());
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  std::string out;
  for (const auto& r : manifest.records()) {
    const json j{{"video_id", r.video_id}, {"path", r.path},   {"frames", r.frames},         {"dim", r.dim},
                 {"verb", r.verb},         {"noun", r.noun},   {"split", to_string(r.split)}};
    out += j.dump();
    out += '\n';
  }
  write_file_bytes(path, out);
}

Checkpoint Checkpoint::from_params(const LiftParams& params, CheckpointMeta meta) {
  Checkpoint c;
  c.config = params.config;
  const auto layout = param_layout(params.config);
  if (layout.size() != params.tensors.size()) {
    throw ValidationError("parameter set has " + std::to_string(params.tensors.size()) + " tensors, config implies " +
                          std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) c.tensors.push_back({layout[i].name, params.tensors[i]});
  c.meta = std::move(meta);
  return c;
}

LiftParams Checkpoint::params() const {
  if (!config) throw ValidationError("checkpoint carries no model config");
  validate_checkpoint(*this);
  LiftParams p{*config, {}};
  for (const auto& t : tensors) p.tensors.push_back(t.value);
  return p;
}

void validate_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.config) {
    if (!ckpt.tensors.empty()) {
      throw ValidationError("checkpoint without config holds tensor '" + ckpt.tensors.front().name + "'");
    }
    return;
  }
  const auto layout = param_layout(*ckpt.config);
  std::set<std::string> expected;
  for (const auto& spec : layout) expected.insert(spec.name);
  std::set<std::string> present;
  for (const auto& t : ckpt.tensors) {
    if (!expected.count(t.name)) throw ValidationError("unknown tensor '" + t.name + "'");
    if (!present.insert(t.name).second) throw ValidationError("tensor '" + t.name + "' appears twice");
  }
  for (const auto& spec : layout) {
    if (!present.count(spec.name)) throw ValidationError("missing tensor '" + spec.name + "'");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = ckpt.tensors[i];
    if (t.name != layout[i].name) {
      throw ValidationError("tensor '" + t.name + "' out of order, expected '" + layout[i].name + "'");
    }
    if (t.value.shape() != layout[i].shape) {
      throw ValidationError("tensor '" + t.name + "' has shape " + shape_string(t.value.shape()) + ", config implies " +
                            shape_string(layout[i].shape));
    }
  }
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  validate_checkpoint(ckpt);
  json header;
  header["config"] = ckpt.config ? json(*ckpt.config) : json(nullptr);
  header["meta"] = {{"epoch", ckpt.meta.epoch},
                    {"final_loss", ckpt.meta.final_loss},
                    {"seed", ckpt.meta.seed},
                    {"input_mean", ckpt.meta.input_mean},
                    {"input_std", ckpt.meta.input_std}};
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    const std::uint64_t bytes = t.value.size() * sizeof(float);
    dir.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  header["tensors"] = dir;
  const std::string text = header.dump();
  std::string out = "LCK1";
  put_u64(out, text.size());
  out += text;
  for (const auto& t : ckpt.tensors) put_floats(out, t.value.data());
  write_file_bytes(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file_bytes(path);
  const std::string where = path.string();
  if (bytes.size() < 4 || bytes.compare(0, 4, "LCK1") != 0) throw FormatError(where + ": bad magic", 0);
  if (bytes.size() < 12) throw FormatError(where + ": truncated header length", bytes.size());
  const std::uint64_t len = get_u64(bytes, 4);
  if (len > bytes.size() - 12) throw FormatError(where + ": truncated header", bytes.size());
  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::parse_error& e) {
    throw FormatError(where + ": malformed header (" + e.what() + ")", 12);
  }
  const std::size_t base = 12 + len;
  Checkpoint ckpt;
  try {
    if (!header.at("config").is_null()) ckpt.config = header.at("config").get<LiftConfig>();
    const auto& m = header.at("meta");
    ckpt.meta.epoch = m.at("epoch").get<std::size_t>();
    ckpt.meta.final_loss = m.at("final_loss").get<double>();
    ckpt.meta.seed = m.at("seed").get<std::uint64_t>();
    ckpt.meta.input_mean = m.value("input_mean", std::vector<float>{});
    ckpt.meta.input_std = m.value("input_std", std::vector<float>{});
    for (const auto& e : header.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
      const std::uint64_t nbytes = e.at("bytes").get<std::uint64_t>();
      if (nbytes != shape_size(shape) * sizeof(float)) {
        throw FormatError(where + ": tensor '" + t.name + "' byte count disagrees with its shape", 12);
      }
      if (offset > bytes.size() - base || nbytes > bytes.size() - base - offset) {
        throw FormatError(where + ": truncated payload for tensor '" + t.name + "'", bytes.size());
      }
      t.value = Tensor(shape);
      get_floats(bytes, base + offset, t.value.data());
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(where + ": invalid header field (" + e.what() + ")", 12);
  }
  validate_checkpoint(ckpt);
  return ckpt;
}

}  // namespace lift
