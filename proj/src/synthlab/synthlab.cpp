#include "lift/synthlab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace lift {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kWarpGain = 1.2;
constexpr double kWarpBias = 0.1;
constexpr std::uint64_t kWorldStream = 0xffffffffffffULL;
constexpr std::uint64_t kSplitStream = 0x5b117ULL;

WarpLayer random_layer(std::size_t in, std::size_t out, double gain, double bias_scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  WarpLayer layer{Tensor64({out, in}), std::vector<double>(out, 0.0)};
  const double s = gain / std::sqrt(static_cast<double>(in));
  for (auto& w : layer.weight.data()) w = s * n01(rng);
  for (auto& b : layer.bias) b = bias_scale * n01(rng);
  return layer;
}

std::vector<double> affine(const WarpLayer& layer, const std::vector<double>& x) {
  const std::size_t out = layer.weight.dim(0), in = layer.weight.dim(1);
  std::vector<double> y(layer.bias);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < in; ++i) acc += layer.weight.at(o, i) * x[i];
    y[o] += acc;
  }
  return y;
}

}  // namespace

void SynthSpec::validate() const {
  if (n_videos < 1 || frames < 1 || dim < 1 || latent_dim < 1 || n_static_clusters < 1 || n_direction_groups < 1) {
    throw ConfigError("synthetic spec counts must be >= 1");
  }
  if (latent_dim > dim) throw ConfigError(fmt::format("latent dim {} exceeds feature dim {}", latent_dim, dim));
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise must be finite and >= 0");
  if (!(center_jitter >= 0.0) || !std::isfinite(center_jitter)) throw ConfigError("center jitter must be >= 0");
  if (!std::isfinite(drift_amplitude)) throw ConfigError("drift amplitude must be finite");
}

void to_json(json& j, const SynthSpec& s) {
  j = json{{"n_videos", s.n_videos},
           {"frames", s.frames},
           {"dim", s.dim},
           {"latent_dim", s.latent_dim},
           {"n_static_clusters", s.n_static_clusters},
           {"n_direction_groups", s.n_direction_groups},
           {"noise", s.noise},
           {"warp_depth", s.warp_depth},
           {"drift_amplitude", s.drift_amplitude},
           {"center_jitter", s.center_jitter},
           {"seed", s.seed}};
}

void from_json(const json& j, SynthSpec& s) {
  SynthSpec d;
  s.n_videos = j.value("n_videos", d.n_videos);
  s.frames = j.value("frames", d.frames);
  s.dim = j.value("dim", d.dim);
  s.latent_dim = j.value("latent_dim", d.latent_dim);
  s.n_static_clusters = j.value("n_static_clusters", d.n_static_clusters);
  s.n_direction_groups = j.value("n_direction_groups", d.n_direction_groups);
  s.noise = j.value("noise", d.noise);
  s.warp_depth = j.value("warp_depth", d.warp_depth);
  s.drift_amplitude = j.value("drift_amplitude", d.drift_amplitude);
  s.center_jitter = j.value("center_jitter", d.center_jitter);
  s.seed = j.value("seed", d.seed);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SynthWorld make_synth_world(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, kWorldStream));
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t m = spec.latent_dim;
  SynthWorld w;
  w.centers = Tensor64({spec.n_static_clusters, m});
  for (auto& v : w.centers.data()) v = n01(rng);
  w.directions = Tensor64({spec.n_direction_groups, m});
  for (std::size_t g = 0; g < spec.n_direction_groups; ++g) {
    double norm = 0.0;
    auto row = w.directions.row(g);
    while (norm < 1e-6) {
      norm = 0.0;
      for (auto& v : row) {
        v = n01(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
    }
    for (auto& v : row) v /= norm;
  }
  std::size_t width = m;
  for (std::size_t l = 0; l < spec.warp_depth; ++l) {
    w.warp.push_back(random_layer(width, spec.dim, kWarpGain, kWarpBias, rng));
    width = spec.dim;
  }
  w.readout = random_layer(width, spec.dim, 1.0, 0.0, rng);
  return w;
}

Tensor64 SynthWorld::latent_path(const SynthSpec& spec, std::size_t cluster, std::size_t group, int sign,
                                 std::mt19937_64& rng) const {
  const std::size_t m = centers.cols(), T = spec.frames;
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> center(m);
  for (std::size_t k = 0; k < m; ++k) center[k] = centers.at(cluster, k) + spec.center_jitter * n01(rng);
  Tensor64 p({T, m});
  const double Td = static_cast<double>(T);
  for (std::size_t t = 1; t <= T; ++t) {
    const double tau = static_cast<double>(t) / Td - (Td + 1.0) / (2.0 * Td);
    const double step = static_cast<double>(sign) * spec.drift_amplitude * tau;
    for (std::size_t k = 0; k < m; ++k) {
      p.at(t - 1, k) = center[k] + step * directions.at(group, k) + spec.noise * n01(rng);
    }
  }
  return p;
}

Tensor64 SynthWorld::observe(const Tensor64& latent) const {
  const std::size_t T = latent.rows(), D = readout.weight.dim(0);
  Tensor64 x({T, D});
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> h(latent.row(t).begin(), latent.row(t).end());
    for (const auto& layer : warp) {
      h = affine(layer, h);
      for (auto& v : h) v = std::tanh(v);
    }
    h = affine(readout, h);
    std::copy(h.begin(), h.end(), x.row(t).begin());
  }
  return x;
}

std::string synth_video_id(std::size_t index) { return fmt::format("syn{:06d}", index); }
std::string synth_verb(std::size_t group, int sign) { return fmt::format("{}_g{}", sign > 0 ? "fwd" : "rev", group); }
std::string synth_noun(std::size_t cluster) { return fmt::format("c{}", cluster); }

SynthDataset gen_synth_dataset(const SynthSpec& spec) {
  SynthDataset ds{spec, make_synth_world(spec), {}, {}};
  const std::size_t G = spec.n_direction_groups, cells = 2 * G;
  ds.videos.resize(spec.n_videos);
  for (std::size_t i = 0; i < spec.n_videos; ++i) {
    const std::size_t cell = i % cells;
    SynthVideo& v = ds.videos[i];
    v.group = cell / 2;
    v.sign = cell % 2 == 0 ? 1 : -1;
    v.cluster = (i / cells) % spec.n_static_clusters;
    std::mt19937_64 rng(derive_seed(spec.seed, i));
    v.latent = ds.world.latent_path(spec, v.cluster, v.group, v.sign, rng);
    v.sequence.video_id = synth_video_id(i);
    v.sequence.frames = ds.world.observe(v.latent).cast<float>();
    v.sequence.verb = synth_verb(v.group, v.sign);
    v.sequence.noun = synth_noun(v.cluster);
  }

  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::vector<std::size_t> members;
    for (std::size_t i = cell; i < spec.n_videos; i += cells) members.push_back(i);
    std::mt19937_64 rng(derive_seed(spec.seed ^ kSplitStream, cell));
    std::shuffle(members.begin(), members.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(members.size())));
    for (std::size_t k = 0; k < members.size(); ++k) {
      ds.videos[members[k]].sequence.split = k < n_test ? Split::test : Split::train;
    }
  }

  NounGroup all_clusters{"all", {}};
  for (std::size_t c = 0; c < spec.n_static_clusters; ++c) all_clusters.nouns.push_back(synth_noun(c));
  for (std::size_t g = 0; g < G; ++g) ds.antonyms.entries.push_back({synth_verb(g, 1), synth_verb(g, -1), {all_clusters}});
  return ds;
}

void write_synth_dataset(const SynthDataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "features");
  std::vector<ManifestRecord> records;
  records.reserve(ds.videos.size());
  for (const auto& v : ds.videos) {
    const auto& s = v.sequence;
    const std::string rel = "features/" + s.video_id + ".lft";
    write_feature_file(s, dir / rel);
    records.push_back({s.video_id, rel, s.frames.rows(), s.frames.cols(), s.verb, s.noun, s.split});
  }
  save_manifest(Manifest(std::move(records), dir), dir / "manifest.jsonl");
  save_antonym_config(ds.antonyms, dir / "antonyms.json");
  write_file_bytes(dir / "synth_spec.json", json(ds.spec).dump(2) + "\n");
}

double time_variance(const Tensor& frames) {
  if (frames.rank() != 2 || frames.rows() < 2) {
    throw DimensionError("time variance needs at least 2 frames");
  }
  const std::size_t T = frames.rows(), D = frames.cols();
  double total = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    double mean = 0.0;
    for (std::size_t t = 0; t < T; ++t) mean += frames.at(t, d);
    mean /= static_cast<double>(T);
    double var = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double e = frames.at(t, d) - mean;
      var += e * e;
    }
    total += var / static_cast<double>(T);
  }
  return total / static_cast<double>(D);
}

std::vector<ProjectionRow> project_2d(const Tensor& original, const Tensor& reconstructed) {
  if (original.rank() != 2 || original.rows() < 2) throw DimensionError("projection needs at least 2 frames");
  if (original.shape() != reconstructed.shape()) {
    throw DimensionError("original and reconstructed sequences differ in shape");
  }
  const std::size_t T = original.rows(), D = original.cols();
  Eigen::MatrixXd X(2 * T, D);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) {
      X(t, d) = original.at(t, d);
      X(T + t, d) = reconstructed.at(t, d);
    }
  }
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(D, 2);
  const std::size_t keep = std::min<std::size_t>(2, sv.size());
  for (std::size_t k = 0; k < keep; ++k) {
    if (sv(k) <= 1e-12 * std::max(1.0, sv(0))) {
      spdlog::warn("projection has rank < {}; component {} is zero-filled", k + 1, k + 1);
      continue;
    }
    Eigen::VectorXd v = svd.matrixV().col(k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    V.col(k) = v;
  }
  if (keep < 2) spdlog::warn("projection has rank < 2; second component is zero-filled");
  const Eigen::MatrixXd P = X * V;
  std::vector<ProjectionRow> rows;
  rows.reserve(2 * T);
  for (std::size_t r = 0; r < 2 * T; ++r) {
    rows.push_back({r % T + 1, P(r, 0), P(r, 1), r < T ? "original" : "reconstructed"});
  }
  return rows;
}

std::string projection_csv(const std::string& video_id, const std::vector<ProjectionRow>& rows, bool header) {
  std::string out = header ? "video_id,frame,pc1,pc2,kind\n" : "";
  for (const auto& r : rows) out += fmt::format("{},{},{:.9g},{:.9g},{}\n", video_id, r.frame, r.pc1, r.pc2, r.kind);
  return out;
}

}  // namespace lift
