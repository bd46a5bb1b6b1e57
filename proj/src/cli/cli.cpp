#include "lift/cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>

#include "lift/chiralmine.hpp"
#include "lift/errors.hpp"
#include "lift/featureio.hpp"
#include "lift/probes.hpp"
#include "lift/synthlab.hpp"
#include "lift/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lift::cli {

void to_json(json& j, const RunManifest& m) {
  j = json{{"subcommand", m.subcommand}, {"config", m.config},   {"seed", m.seed},
           {"inputs", m.inputs},         {"outputs", m.outputs}, {"tool_version", m.tool_version}};
}

void from_json(const json& j, RunManifest& m) {
  j.at("subcommand").get_to(m.subcommand);
  m.config = j.at("config");
  j.at("seed").get_to(m.seed);
  m.inputs = j.value("inputs", std::vector<std::string>{});
  m.outputs = j.value("outputs", std::vector<std::string>{});
  m.tool_version = j.value("tool_version", std::string{});
}

namespace {

constexpr const char* kRunManifestName = "run_manifest.json";

struct SynthOpts {
  std::string out;
  std::uint64_t seed = 0;
  SynthSpec spec;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthOpts, out, seed, spec)

struct TrainOpts {
  std::string manifest;
  std::string out;
  std::string split = "train";
  std::uint64_t seed = 0;
  LiftConfig model;
  TrainConfig train;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainOpts, manifest, out, split, seed, model, train)

struct EncodeOpts {
  std::string manifest;
  std::string checkpoint;
  std::string out;
  std::string pooling = "lift";
  std::string format = "lds";
  std::size_t frames = 0;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncodeOpts, manifest, checkpoint, out, pooling, format, frames,
                                                workers, seed)

struct MineOpts {
  std::string manifest;
  std::string antonyms;
  std::string out;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MineOpts, manifest, antonyms, out, seed)

struct ProbeOpts {
  std::string mode = "chiral";
  std::string recipe;
  std::string groups;
  std::string manifest;
  std::string descriptors;
  std::string aux;
  std::string name;
  std::string out;
  std::size_t frames = 0;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  ProbeSpec spec;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeOpts, mode, recipe, groups, manifest, descriptors, aux, name, out,
                                                frames, workers, seed, spec)

struct TvOpts {
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TvOpts, manifest, out, seed)

struct ProjectOpts {
  std::string manifest;
  std::string checkpoint;
  std::string out;
  std::vector<std::string> videos;
  std::size_t limit = 4;
  std::uint64_t seed = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProjectOpts, manifest, checkpoint, out, videos, limit, seed)

struct ParamsOpts {
  std::string out;
  std::uint64_t seed = 0;
  LiftConfig model;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ParamsOpts, out, seed, model)

struct AblateOpts {
  std::string data;
  std::string out;
  std::vector<std::size_t> dims{16, 32, 64};
  std::vector<double> fractions{0.1, 0.5, 1.0};
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  LiftConfig model;
  TrainConfig train;
  ProbeSpec probe = ProbeSpec::chiral();
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AblateOpts, data, out, dims, fractions, workers, seed, model, train,
                                                probe)

// ---------------------------------------------------------------- helpers

std::string abs_path(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ValidationError(std::string("missing required option ") + flag);
}

fs::path make_out_dir(const std::string& out) {
  require(out, "--out");
  fs::create_directories(out);
  return fs::path(out);
}

void write_text(const fs::path& path, const std::string& text) { write_file_bytes(path, text); }

std::vector<Tensor> load_frames(const Manifest& manifest, std::size_t frames) {
  std::vector<Tensor> out;
  out.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    Tensor f = manifest.load(i).frames;
    out.push_back(frames > 0 ? resample_frames(f, frames) : std::move(f));
  }
  return out;
}

Manifest select_split(const Manifest& manifest, const std::string& split) {
  if (split == "all") return manifest;
  const Split want = parse_split(split);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (manifest[i].split == want) idx.push_back(i);
  }
  return manifest.select(idx);
}

std::size_t manifest_dim(const Manifest& manifest) {
  if (manifest.empty()) throw ValidationError("manifest is empty");
  return manifest[0].dim;
}

std::string millions(std::size_t n) { return fmt::format("{:.2f}M", static_cast<double>(n) / 1e6); }

// ---------------------------------------------------------------- commands

void exec_synth(SynthOpts& o, RunManifest& m) {
  o.spec.seed = o.seed;
  o.spec.validate();
  const fs::path dir = make_out_dir(o.out);
  const auto ds = gen_synth_dataset(o.spec);
  write_synth_dataset(ds, dir);
  m.outputs = {o.out};
  std::size_t test = 0;
  for (const auto& v : ds.videos) test += v.sequence.split == Split::test;
  spdlog::info("synth: {} videos ({} test), T={}, D={} -> {}", ds.videos.size(), test, o.spec.frames, o.spec.dim,
               o.out);
}

void exec_train(TrainOpts& o, RunManifest& m) {
  require(o.manifest, "--manifest");
  const Manifest all = load_manifest(o.manifest);
  const Manifest manifest = select_split(all, o.split);
  if (o.model.feature_dim == 0) o.model.feature_dim = manifest_dim(all);
  o.train.seed = o.seed;
  o.model.validate();
  o.train.validate();
  const fs::path dir = make_out_dir(o.out);
  spdlog::info("train: {} videos ({} split), {} parameters", manifest.size(), o.split,
               millions(count_params(o.model)));
  const auto result = train(manifest, o.model, o.train);
  save_checkpoint(result.checkpoint, dir / "checkpoint.lck");
  write_text(dir / "train_log.csv", result.log.to_csv());
  m.inputs = {o.manifest};
  m.outputs = {(dir / "checkpoint.lck").string(), (dir / "train_log.csv").string()};
  const auto& log = result.log.epochs;
  if (!log.empty()) {
    spdlog::info("train: l_rec {:.4g} -> {:.4g}, l_orth {:.4g} -> {:.4g}", log.front().l_rec, log.back().l_rec,
                 log.front().l_orth, log.back().l_orth);
  }
}

void exec_encode(EncodeOpts& o, RunManifest& m) {
  require(o.manifest, "--manifest");
  if (o.format != "lds" && o.format != "csv" && o.format != "both") {
    throw ValidationError("--format must be lds, csv or both");
  }
  const Manifest manifest = load_manifest(o.manifest);
  std::optional<LiftEncoder> encoder;
  if (!o.checkpoint.empty()) encoder = LiftEncoder::from_checkpoint(load_checkpoint(o.checkpoint));
  std::size_t frames = o.frames;
  if (frames == 0) frames = encoder ? encoder->params.config.frames : (manifest.empty() ? 0 : manifest[0].frames);
  const PoolingSpec pooling = parse_pooling(o.pooling, frames);
  if (pooling.kind == PoolingKind::lift_descriptor && !encoder) {
    throw ValidationError("lift pooling needs --checkpoint");
  }
  const fs::path dir = make_out_dir(o.out);
  const bool resample = o.frames > 0 && pooling.kind != PoolingKind::lift_descriptor;
  const auto videos = load_frames(manifest, resample ? o.frames : 0);
  const auto rows = pool_descriptors(videos, pooling, encoder ? &*encoder : nullptr, o.workers);
  DescriptorTable table;
  for (std::size_t i = 0; i < rows.size(); ++i) table.add(manifest[i].video_id, rows[i]);
  m.inputs = {o.manifest};
  if (!o.checkpoint.empty()) m.inputs.push_back(o.checkpoint);
  if (o.format != "csv") {
    save_descriptor_table(table, dir / "descriptors.lds");
    m.outputs.push_back((dir / "descriptors.lds").string());
  }
  if (o.format != "lds") {
    write_text(dir / "descriptors.csv", descriptor_table_csv(table));
    m.outputs.push_back((dir / "descriptors.csv").string());
  }
  spdlog::info("encode: {} videos, pooling {}, dim {}", table.size(), pooling.name(), table.dim());
}

void exec_mine(MineOpts& o, RunManifest& m) {
  require(o.manifest, "--manifest");
  require(o.antonyms, "--antonyms");
  const Manifest manifest = load_manifest(o.manifest);
  const AntonymConfig config = load_antonym_config(o.antonyms);
  const fs::path dir = make_out_dir(o.out);
  std::vector<std::string> dropped;
  const auto groups = build_chiral_groups(manifest, config, &dropped);
  write_chiral_groups(groups, dir);
  const auto stats = group_stats(groups);
  write_text(dir / "stats.csv", stats.to_csv());
  m.inputs = {o.manifest, o.antonyms};
  m.outputs = {(dir / "groups.json").string(), (dir / "stats.csv").string()};
  spdlog::info("mine: {} groups, {} train / {} test videos, {} dropped", stats.groups, stats.total_train,
               stats.total_test, dropped.size());
}

DescriptorTable with_aux(const DescriptorTable& main, const DescriptorTable& aux) {
  DescriptorTable out;
  for (std::size_t i = 0; i < main.size(); ++i) {
    out.add(main.ids[i], concat_descriptors(main.rows[i], aux.at(main.ids[i])));
  }
  return out;
}

void exec_probe(ProbeOpts& o, RunManifest& m) {
  if (o.mode != "chiral" && o.mode != "standard") throw ValidationError("--mode must be chiral or standard");
  o.spec.seed = o.seed;
  o.spec.validate();
  const bool attentive = o.spec.kind == ProbeKind::attentive;
  if (!attentive) require(o.descriptors, "--descriptors");
  if (o.mode == "chiral") require(o.groups, "--groups");
  if (o.mode == "standard" || attentive) require(o.manifest, "--manifest");

  DescriptorTable table;
  if (!o.descriptors.empty()) {
    table = load_descriptor_table(o.descriptors);
    m.inputs.push_back(o.descriptors);
  }
  if (!o.aux.empty()) {
    if (o.descriptors.empty()) throw ValidationError("--aux needs --descriptors");
    table = with_aux(table, load_descriptor_table(o.aux));
    m.inputs.push_back(o.aux);
  }
  std::optional<Manifest> manifest;
  if (!o.manifest.empty()) {
    manifest = load_manifest(o.manifest);
    m.inputs.push_back(o.manifest);
  }
  TokenTable tokens;
  if (attentive) {
    const auto frames = load_frames(*manifest, o.frames);
    for (std::size_t i = 0; i < manifest->size(); ++i) tokens.emplace((*manifest)[i].video_id, frames[i]);
  }
  std::string name = o.name;
  if (name.empty()) name = o.descriptors.empty() ? "tokens" : fs::path(o.descriptors).parent_path().filename().string();

  const fs::path dir = make_out_dir(o.out);
  ProbeReport report;
  if (o.mode == "chiral") {
    m.inputs.push_back(o.groups);
    report = evaluate_chiral(read_chiral_groups(o.groups), table, o.spec, o.workers, name,
                             attentive ? &tokens : nullptr);
  } else {
    report = evaluate_standard(*manifest, table, o.spec, name, attentive ? &tokens : nullptr);
  }
  write_text(dir / "report.json", report.to_json().dump(2) + "\n");
  write_text(dir / "report.csv", report.to_csv());
  m.outputs = {(dir / "report.json").string(), (dir / "report.csv").string()};
  std::cerr << report.to_csv();
  std::cout << json{{"descriptor", report.descriptor},
                    {"descriptor_dim", report.descriptor_dim},
                    {"macro_accuracy", report.macro_accuracy}}
                   .dump()
            << "\n";
}

void exec_tv(TvOpts& o, RunManifest& m) {
  require(o.manifest, "--manifest");
  const Manifest manifest = load_manifest(o.manifest);
  const fs::path dir = make_out_dir(o.out);
  std::string csv = "video_id,frames,time_variance\n";
  double total = 0.0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto seq = manifest.load(i);
    const double tv = time_variance(seq.frames);
    total += tv;
    csv += fmt::format("{},{},{:.9g}\n", seq.video_id, seq.frames.rows(), tv);
  }
  write_text(dir / "tv.csv", csv);
  m.inputs = {o.manifest};
  m.outputs = {(dir / "tv.csv").string()};
  const double mean = manifest.empty() ? 0.0 : total / static_cast<double>(manifest.size());
  std::cout << json{{"videos", manifest.size()}, {"mean_time_variance", mean}}.dump() << "\n";
  spdlog::info("tv: {} videos, mean {:.6g}", manifest.size(), mean);
}

void exec_project(ProjectOpts& o, RunManifest& m) {
  require(o.manifest, "--manifest");
  require(o.checkpoint, "--checkpoint");
  const Manifest manifest = load_manifest(o.manifest);
  const auto encoder = LiftEncoder::from_checkpoint(load_checkpoint(o.checkpoint));
  std::vector<std::size_t> picks;
  if (o.videos.empty()) {
    for (std::size_t i = 0; i < std::min(o.limit, manifest.size()); ++i) picks.push_back(i);
  } else {
    for (const auto& id : o.videos) {
      std::size_t i = 0;
      while (i < manifest.size() && manifest[i].video_id != id) ++i;
      if (i == manifest.size()) throw ValidationError("video '" + id + "' is not in the manifest");
      picks.push_back(i);
    }
  }
  const fs::path dir = make_out_dir(o.out);
  std::string csv;
  for (std::size_t k = 0; k < picks.size(); ++k) {
    const auto seq = manifest.load(picks[k]);
    const Tensor frames = prepare_frames(seq.frames, encoder.params.config, encoder.meta);
    const auto rec = forward_reconstruct(encoder.params, frames);
    csv += projection_csv(seq.video_id, project_2d(frames, rec.frames), k == 0);
  }
  if (picks.empty()) csv = "video_id,frame,pc1,pc2,kind\n";
  write_text(dir / "projection.csv", csv);
  m.inputs = {o.manifest, o.checkpoint};
  m.outputs = {(dir / "projection.csv").string()};
  spdlog::info("project: {} videos", picks.size());
}

void exec_params(ParamsOpts& o, RunManifest& m) {
  o.model.validate();
  const std::size_t n = count_params(o.model);
  const json out{{"parameters", n},
                 {"millions", static_cast<double>(n) / 1e6},
                 {"display", millions(n)},
                 {"config", o.model}};
  std::cout << out.dump() << "\n";
  std::cerr << fmt::format("LiFT d={} D={} layers={} heads={}: {} trainable parameters ({})\n", o.model.latent_dim,
                           o.model.feature_dim, o.model.layers, o.model.heads, n, millions(n));
  if (!o.out.empty()) {
    const fs::path dir = make_out_dir(o.out);
    write_text(dir / "params.json", out.dump(2) + "\n");
    m.outputs = {(dir / "params.json").string()};
  }
}

void exec_ablate(AblateOpts& o, RunManifest& m) {
  require(o.data, "--data");
  if (o.dims.empty() || o.fractions.empty()) throw ValidationError("--dims and --fractions must be non-empty");
  const fs::path data(o.data);
  const Manifest manifest = load_manifest(data / "manifest.jsonl");
  const auto groups = build_chiral_groups(manifest, load_antonym_config(data / "antonyms.json"));
  if (o.model.feature_dim == 0) o.model.feature_dim = manifest_dim(manifest);
  o.train.seed = o.seed;
  o.probe.seed = o.seed;
  o.probe.validate();
  const fs::path dir = make_out_dir(o.out);

  const auto videos = load_frames(manifest, o.model.frames);
  std::vector<Tensor> train_videos_all;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (manifest[i].split == Split::train) train_videos_all.push_back(videos[i]);
  }

  std::string csv = "d,data_fraction,train_videos,epochs,l_rec_first,l_rec_final,l_rec_ratio,mean_abs_cos,macro_accuracy\n";
  for (const std::size_t d : o.dims) {
    for (const double fraction : o.fractions) {
      LiftConfig lc = o.model;
      lc.latent_dim = d;
      TrainConfig tc = o.train;
      tc.data_fraction = fraction;
      lc.validate();
      tc.validate();
      const std::size_t n_train =
          fraction >= 1.0
              ? train_videos_all.size()
              : std::max<std::size_t>(1, static_cast<std::size_t>(
                                             std::llround(fraction * static_cast<double>(train_videos_all.size()))));
      spdlog::info("ablate: d={} fraction={} ({} videos)", d, fraction, n_train);
      const auto result = lift::train_videos(train_videos_all, lc, tc);
      const auto encoder = LiftEncoder::from_checkpoint(result.checkpoint);

      DescriptorTable table;
      std::vector<Descriptor> descs;
      constexpr std::size_t kChunk = 64;
      for (std::size_t lo = 0; lo < videos.size(); lo += kChunk) {
        std::vector<Tensor> prepared;
        for (std::size_t i = lo; i < std::min(videos.size(), lo + kChunk); ++i) {
          prepared.push_back(prepare_frames(videos[i], lc, encoder.meta));
        }
        for (auto& desc : encode_batch(encoder.params, prepared)) descs.push_back(std::move(desc));
      }
      for (std::size_t i = 0; i < descs.size(); ++i) table.add(manifest[i].video_id, descs[i].concat());
      const auto report = evaluate_chiral(groups, table, o.probe, o.workers, "lift_descriptor");

      const auto& log = result.log.epochs;
      const double first = log.front().l_rec, last = log.back().l_rec;
      csv += fmt::format("{},{},{},{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", d, fraction, n_train, tc.epochs, first,
                         last, first > 0.0 ? last / first : 0.0, mean_abs_cosine(descs), report.macro_accuracy);
      spdlog::info("ablate: d={} fraction={} macro {:.4f}", d, fraction, report.macro_accuracy);
    }
  }
  write_text(dir / "ablation.csv", csv);
  m.inputs = {(data / "manifest.jsonl").string(), (data / "antonyms.json").string()};
  m.outputs = {(dir / "ablation.csv").string()};
  std::cerr << csv;
}

// ---------------------------------------------------------------- dispatch

// Paths in a run manifest are stored relative to the directory holding it.
const std::vector<std::string> kPathKeys{"out", "manifest", "checkpoint", "antonyms", "groups", "descriptors", "aux", "data"};

std::string relative_to(const std::string& p, const fs::path& base) {
  if (p.empty()) return p;
  return fs::path(p).lexically_relative(base).generic_string();
}

std::string resolve_from(const std::string& p, const fs::path& base) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (base / p).lexically_normal().string();
}

void map_paths(json& config, std::vector<std::string>& inputs, std::vector<std::string>& outputs,
               const std::function<std::string(const std::string&)>& f) {
  for (const auto& key : kPathKeys) {
    if (config.contains(key) && config[key].is_string()) config[key] = f(config[key].get<std::string>());
  }
  for (auto& p : inputs) p = f(p);
  for (auto& p : outputs) p = f(p);
}

template <typename Opts>
RunManifest execute(const std::string& name, Opts opts, void (*exec)(Opts&, RunManifest&)) {
  RunManifest m;
  m.subcommand = name;
  exec(opts, m);
  m.seed = opts.seed;
  m.config = opts;
  if (!opts.out.empty()) {
    const fs::path base = fs::path(opts.out).lexically_normal();
    RunManifest rel = m;
    map_paths(rel.config, rel.inputs, rel.outputs, [&](const std::string& p) { return relative_to(p, base); });
    write_text(base / kRunManifestName, json(rel).dump(2) + "\n");
  }
  return m;
}

template <typename Opts>
RunManifest execute_json(const std::string& name, const json& config, const std::string& out_override,
                         void (*exec)(Opts&, RunManifest&)) {
  Opts opts = config.get<Opts>();
  if (!out_override.empty()) opts.out = out_override;
  return execute(name, std::move(opts), exec);
}

RunManifest rerun(RunManifest rm, const fs::path& base, const std::string& out) {
  map_paths(rm.config, rm.inputs, rm.outputs, [&](const std::string& p) { return resolve_from(p, base); });
  const auto& c = rm.config;
  const auto& s = rm.subcommand;
  if (s == "synth") return execute_json<SynthOpts>(s, c, out, exec_synth);
  if (s == "train") return execute_json<TrainOpts>(s, c, out, exec_train);
  if (s == "encode") return execute_json<EncodeOpts>(s, c, out, exec_encode);
  if (s == "mine") return execute_json<MineOpts>(s, c, out, exec_mine);
  if (s == "probe") return execute_json<ProbeOpts>(s, c, out, exec_probe);
  if (s == "tv") return execute_json<TvOpts>(s, c, out, exec_tv);
  if (s == "project") return execute_json<ProjectOpts>(s, c, out, exec_project);
  if (s == "params") return execute_json<ParamsOpts>(s, c, out, exec_params);
  if (s == "ablate") return execute_json<AblateOpts>(s, c, out, exec_ablate);
  throw ValidationError("run manifest names unknown subcommand '" + s + "'");
}

std::uint64_t env_seed() {
  const char* v = std::getenv("LIFT_SEED");
  if (!v || !*v) return 0;
  try {
    std::size_t used = 0;
    const auto seed = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument(v);
    return seed;
  } catch (const std::exception&) {
    throw ValidationError(std::string("LIFT_SEED is not an unsigned integer: ") + v);
  }
}

void setup_logging(const std::string& level) {
  auto logger = spdlog::get("lift");
  if (!logger) {
    logger = spdlog::stderr_color_mt("lift");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
  }
  const auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") throw ValidationError("unknown log level '" + level + "'");
  spdlog::set_level(lvl);
}

void add_model_flags(CLI::App* app, LiftConfig& c) {
  app->add_option("--D,--feature-dim", c.feature_dim, "Per-frame feature width D (0: from the manifest)");
  app->add_option("--d,--latent-dim", c.latent_dim, "Latent width d");
  app->add_option("--layers", c.layers, "Transformer layers per stack");
  app->add_option("--heads", c.heads, "Attention heads");
  app->add_option("--ffn-mult", c.ffn_mult, "Feed-forward width multiplier");
  app->add_option("--frames", c.frames, "Frames T after resampling");
  app->add_option("--lambda-orth", c.lambda_orth, "Weight of the orthogonality loss");
}

void add_train_flags(CLI::App* app, TrainConfig& c) {
  app->add_option("--epochs", c.epochs, "Training epochs");
  app->add_option("--batch-size", c.batch_size, "Videos per step");
  app->add_option("--lr,--learning-rate", c.learning_rate, "Initial Adam learning rate");
  app->add_option("--plateau-factor", c.scheduler.factor, "Plateau decay factor");
  app->add_option("--plateau-patience", c.scheduler.patience, "Plateau patience in epochs");
  app->add_option("--min-lr", c.scheduler.min_lr, "Learning-rate floor");
  app->add_option("--plateau-threshold", c.scheduler.threshold, "Relative improvement that resets patience");
  app->add_flag("--standardize,!--no-standardize", c.standardize, "Standardize input features");
  app->add_option("--data-fraction", c.data_fraction, "Fraction of training videos used");
}

// Probe flags land in `given`; explicit ones override the recipe afterwards.
struct ProbeFlags {
  ProbeSpec given;
  std::string kind = "linear";
  std::vector<std::pair<CLI::Option*, std::function<void(ProbeSpec&, const ProbeSpec&)>>> overrides;

  void add(CLI::App* app) {
    app->add_option("--kind", kind, "linear, mlp or attentive")->check(CLI::IsMember({"linear", "mlp", "attentive"}));
    bind(app->add_option("--hidden", given.hidden, "MLP hidden width"), &ProbeSpec::hidden);
    bind(app->add_option("--dropout", given.dropout, "MLP dropout"), &ProbeSpec::dropout);
    bind(app->add_option("--key-dim", given.key_dim, "Attentive key width (0: token width)"), &ProbeSpec::key_dim);
    bind(app->add_option("--lr,--learning-rate", given.learning_rate, "Adam learning rate"),
         &ProbeSpec::learning_rate);
    bind(app->add_option("--epochs", given.epochs, "Probe epochs"), &ProbeSpec::epochs);
    bind(app->add_option("--weight-decay", given.weight_decay, "Adam weight decay"), &ProbeSpec::weight_decay);
    bind(app->add_option("--batch-size", given.batch_size, "Mini-batch size (0: full batch)"),
         &ProbeSpec::batch_size);
    bind(app->add_flag("--plateau,!--no-plateau", given.plateau, "Reduce the rate on plateaus"), &ProbeSpec::plateau);
    bind(app->add_flag("--standardize,!--no-standardize", given.standardize, "Standardize descriptors"),
         &ProbeSpec::standardize);
  }

  template <typename M>
  void bind(CLI::Option* opt, M ProbeSpec::*field) {
    overrides.emplace_back(opt, [field](ProbeSpec& dst, const ProbeSpec& src) { dst.*field = src.*field; });
  }

  ProbeSpec resolve(const std::string& recipe) const {
    const ProbeKind k = parse_probe_kind(kind);
    ProbeSpec spec = recipe == "standard" ? ProbeSpec::standard(k) : ProbeSpec::chiral(k);
    for (const auto& [opt, apply_flag] : overrides) {
      if (opt->count() > 0) apply_flag(spec, given);
    }
    return spec;
  }
};

int dispatch(CLI::App& app, std::vector<std::string> args) {
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    std::cout << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }
  return -1;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"LiFT: linearized feature trajectories for time-aware video descriptors", "lift"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

  std::optional<std::uint64_t> seed;
  auto add_seed = [&seed](CLI::App* sub) { sub->add_option("--seed", seed, "Random seed (fallback: LIFT_SEED, then 0)"); };

  SynthOpts synth;
  auto* s_synth = app.add_subcommand("synth", "Generate the synthetic trajectory suite");
  s_synth->add_option("--out", synth.out, "Output directory")->required();
  add_seed(s_synth);
  s_synth->add_option("--n-videos", synth.spec.n_videos, "Number of videos");
  s_synth->add_option("--frames", synth.spec.frames, "Frames per video");
  s_synth->add_option("--dim", synth.spec.dim, "Observed feature width");
  s_synth->add_option("--latent-dim", synth.spec.latent_dim, "Latent width");
  s_synth->add_option("--n-static-clusters", synth.spec.n_static_clusters, "Static clusters (nouns)");
  s_synth->add_option("--n-direction-groups", synth.spec.n_direction_groups, "Direction groups (verb pairs)");
  s_synth->add_option("--noise", synth.spec.noise, "Per-frame latent noise");
  s_synth->add_option("--warp-depth", synth.spec.warp_depth, "Nonlinear warp layers");
  s_synth->add_option("--drift-amplitude", synth.spec.drift_amplitude, "Length of the latent drift");
  s_synth->add_option("--center-jitter", synth.spec.center_jitter, "Per-video jitter of the cluster center");

  TrainOpts trn;
  trn.model.feature_dim = 0;
  auto* s_train = app.add_subcommand("train", "Train a LiFT model on a manifest");
  s_train->add_option("--manifest", trn.manifest, "Manifest (JSONL)")->required();
  s_train->add_option("--out", trn.out, "Output directory")->required();
  s_train->add_option("--split", trn.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  add_seed(s_train);
  add_model_flags(s_train, trn.model);
  add_train_flags(s_train, trn.train);

  EncodeOpts enc;
  auto* s_encode = app.add_subcommand("encode", "Pool every video of a manifest into a descriptor");
  s_encode->add_option("--manifest", enc.manifest, "Manifest (JSONL)")->required();
  s_encode->add_option("--checkpoint", enc.checkpoint, "LiFT checkpoint (needed for lift pooling)");
  s_encode->add_option("--out", enc.out, "Output directory")->required();
  s_encode->add_option("--pooling", enc.pooling,
                       "lift, mean, time_weighted, full_concat, single:I, frames:I,J,... or kframes:K");
  s_encode->add_option("--format", enc.format, "lds, csv or both");
  s_encode->add_option("--frames", enc.frames, "Resample to this many frames first (0: keep)");
  s_encode->add_option("--workers", enc.workers, "Worker threads")->check(CLI::PositiveNumber);
  add_seed(s_encode);

  MineOpts mine;
  auto* s_mine = app.add_subcommand("mine", "Build chiral groups from a manifest and an antonym file");
  s_mine->add_option("--manifest", mine.manifest, "Manifest (JSONL)")->required();
  s_mine->add_option("--antonyms", mine.antonyms, "Antonym configuration (JSON)")->required();
  s_mine->add_option("--out", mine.out, "Output directory")->required();
  add_seed(s_mine);

  ProbeOpts prb;
  ProbeFlags probe_flags;
  auto* s_probe = app.add_subcommand("probe", "Train and score probes on descriptors");
  s_probe->add_option("--mode", prb.mode, "chiral or standard")->check(CLI::IsMember({"chiral", "standard"}));
  s_probe->add_option("--recipe", prb.recipe, "chiral or standard (default: the mode)")
      ->check(CLI::IsMember({"chiral", "standard"}));
  s_probe->add_option("--groups", prb.groups, "Directory written by mine (chiral mode)");
  s_probe->add_option("--manifest", prb.manifest, "Manifest (standard mode, attentive tokens)");
  s_probe->add_option("--descriptors", prb.descriptors, "Descriptor table (.lds)");
  s_probe->add_option("--aux", prb.aux, "Second descriptor table concatenated to the first");
  s_probe->add_option("--name", prb.name, "Descriptor name for the report");
  s_probe->add_option("--frames", prb.frames, "Resample attentive tokens to this many frames (0: keep)");
  s_probe->add_option("--out", prb.out, "Output directory")->required();
  s_probe->add_option("--workers", prb.workers, "Worker threads")->check(CLI::PositiveNumber);
  add_seed(s_probe);
  probe_flags.add(s_probe);

  TvOpts tv;
  auto* s_tv = app.add_subcommand("tv", "Time variance of every video in a manifest");
  s_tv->add_option("--manifest", tv.manifest, "Manifest (JSONL)")->required();
  s_tv->add_option("--out", tv.out, "Output directory")->required();
  add_seed(s_tv);

  ProjectOpts prj;
  auto* s_project = app.add_subcommand("project", "2-D PCA of original and reconstructed trajectories");
  s_project->add_option("--manifest", prj.manifest, "Manifest (JSONL)")->required();
  s_project->add_option("--checkpoint", prj.checkpoint, "LiFT checkpoint")->required();
  s_project->add_option("--out", prj.out, "Output directory")->required();
  s_project->add_option("--videos", prj.videos, "Video ids (default: the first --limit)")->delimiter(',');
  s_project->add_option("--limit", prj.limit, "Videos to project when --videos is absent");
  add_seed(s_project);

  ParamsOpts prm;
  auto* s_params = app.add_subcommand("params", "Count trainable parameters");
  add_model_flags(s_params, prm.model);
  s_params->add_option("--out", prm.out, "Also write params.json here");
  add_seed(s_params);

  AblateOpts abl;
  abl.model.feature_dim = 0;
  abl.train.epochs = 200;
  auto* s_ablate = app.add_subcommand("ablate", "Sweep latent width and data fraction on a synthetic suite");
  s_ablate->add_option("--data", abl.data, "Directory written by synth")->required();
  s_ablate->add_option("--out", abl.out, "Output directory")->required();
  s_ablate->add_option("--dims", abl.dims, "Latent widths")->delimiter(',');
  s_ablate->add_option("--fractions", abl.fractions, "Training data fractions")->delimiter(',');
  s_ablate->add_option("--workers", abl.workers, "Probe worker threads")->check(CLI::PositiveNumber);
  add_seed(s_ablate);
  add_model_flags(s_ablate, abl.model);
  add_train_flags(s_ablate, abl.train);

  std::string manifest_path, rerun_out;
  auto* s_rerun = app.add_subcommand("rerun", "Repeat a run from its run_manifest.json");
  s_rerun->add_option("--run-manifest", manifest_path, "run_manifest.json of an earlier run")->required();
  s_rerun->add_option("--out", rerun_out, "Write outputs here instead of the recorded directory");

  const int parsed = dispatch(app, args);
  if (parsed >= 0) return parsed;

  try {
    setup_logging(log_level);
    const std::uint64_t seed_value = seed ? *seed : env_seed();
    const std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "synth") {
      synth.seed = seed_value;
      synth.out = abs_path(synth.out);
      execute(sub, synth, exec_synth);
    } else if (sub == "train") {
      trn.seed = seed_value;
      trn.manifest = abs_path(trn.manifest);
      trn.out = abs_path(trn.out);
      execute(sub, trn, exec_train);
    } else if (sub == "encode") {
      enc.seed = seed_value;
      enc.manifest = abs_path(enc.manifest);
      enc.checkpoint = abs_path(enc.checkpoint);
      enc.out = abs_path(enc.out);
      execute(sub, enc, exec_encode);
    } else if (sub == "mine") {
      mine.seed = seed_value;
      mine.manifest = abs_path(mine.manifest);
      mine.antonyms = abs_path(mine.antonyms);
      mine.out = abs_path(mine.out);
      execute(sub, mine, exec_mine);
    } else if (sub == "probe") {
      prb.seed = seed_value;
      if (prb.recipe.empty()) prb.recipe = prb.mode;
      prb.spec = probe_flags.resolve(prb.recipe);
      for (auto* p : {&prb.groups, &prb.manifest, &prb.descriptors, &prb.aux, &prb.out}) *p = abs_path(*p);
      execute(sub, prb, exec_probe);
    } else if (sub == "tv") {
      tv.seed = seed_value;
      tv.manifest = abs_path(tv.manifest);
      tv.out = abs_path(tv.out);
      execute(sub, tv, exec_tv);
    } else if (sub == "project") {
      prj.seed = seed_value;
      prj.manifest = abs_path(prj.manifest);
      prj.checkpoint = abs_path(prj.checkpoint);
      prj.out = abs_path(prj.out);
      execute(sub, prj, exec_project);
    } else if (sub == "params") {
      prm.seed = seed_value;
      prm.out = abs_path(prm.out);
      execute(sub, prm, exec_params);
    } else if (sub == "ablate") {
      abl.seed = seed_value;
      abl.data = abs_path(abl.data);
      abl.out = abs_path(abl.out);
      execute(sub, abl, exec_ablate);
    } else if (sub == "rerun") {
      json j;
      try {
        j = json::parse(read_file_bytes(manifest_path));
      } catch (const json::exception& e) {
        throw ValidationError("run manifest " + manifest_path + ": " + e.what());
      }
      RunManifest rm;
      try {
        rm = j.get<RunManifest>();
      } catch (const json::exception& e) {
        throw ValidationError("run manifest " + manifest_path + ": " + e.what());
      }
      rerun(rm, fs::path(abs_path(manifest_path)).parent_path(), abs_path(rerun_out));
    }
    return 0;
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("invalid configuration: {}", e.what());
    return 1;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace lift::cli
