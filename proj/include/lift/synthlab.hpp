#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "lift/chiralmine.hpp"
#include "lift/featureio.hpp"

namespace lift {

/// Synthetic videos whose latent paths are straight lines pushed through a
/// frozen random tanh network.
struct SynthSpec {
  std::size_t n_videos = 2000;
  std::size_t frames = 16;
  std::size_t dim = 64;
  std::size_t latent_dim = 8;
  std::size_t n_static_clusters = 4;
  std::size_t n_direction_groups = 4;
  double noise = 0.05;
  std::size_t warp_depth = 2;
  /// Latent length of a path from t=1 to t=T is about this value.
  double drift_amplitude = 2.0;
  /// Per-video Gaussian offset of the path center around its cluster center.
  double center_jitter = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

/// 64-bit mix of (seed, stream), used to derive independent sub-seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct WarpLayer {
  Tensor64 weight;  // [out x in]
  std::vector<double> bias;
};

/// The frozen ingredients shared by every video of one seed.
struct SynthWorld {
  Tensor64 centers;     // [clusters x m]
  Tensor64 directions;  // [groups x m], unit rows
  std::vector<WarpLayer> warp;  // tanh layers
  WarpLayer readout;            // final affine map to D

  /// Latent path c + jitter + s * a * tau_t * u_g + noise with centered
  /// tau_t = t/T - (T+1)/(2T). Jitter is drawn before the noise.
  Tensor64 latent_path(const SynthSpec& spec, std::size_t cluster, std::size_t group, int sign,
                       std::mt19937_64& rng) const;
  /// Applies the warp to each row of a [T x m] latent path.
  Tensor64 observe(const Tensor64& latent) const;
};

SynthWorld make_synth_world(const SynthSpec& spec);

struct SynthVideo {
  FeatureSequence sequence;
  Tensor64 latent;  // [T x m]
  std::size_t cluster = 0;
  std::size_t group = 0;
  int sign = 1;  // +1 fwd, -1 rev
};

struct SynthDataset {
  SynthSpec spec;
  SynthWorld world;
  std::vector<SynthVideo> videos;
  /// One antonym entry per direction group covering every cluster noun.
  AntonymConfig antonyms;
};

std::string synth_video_id(std::size_t index);
std::string synth_verb(std::size_t group, int sign);
std::string synth_noun(std::size_t cluster);

/// Video i sits in cell i % (2G): group cell/2, fwd when cell is even. Its
/// cluster is (i / 2G) % clusters. The split is 80/20 within each cell.
SynthDataset gen_synth_dataset(const SynthSpec& spec);

/// Writes features/<id>.lft, manifest.jsonl, antonyms.json and synth_spec.json.
void write_synth_dataset(const SynthDataset& dataset, const std::filesystem::path& dir);

/// Population variance over time per dimension, averaged over dimensions.
double time_variance(const Tensor& frames);

struct ProjectionRow {
  std::size_t frame = 0;  // 1-based
  double pc1 = 0.0;
  double pc2 = 0.0;
  std::string kind;  // "original" or "reconstructed"
};

/// PCA on the union of both sequences, both projected on the top two
/// components. Components are sign-fixed so their largest entry is positive.
std::vector<ProjectionRow> project_2d(const Tensor& original, const Tensor& reconstructed);

/// Header video_id,frame,pc1,pc2,kind when `header` is set.
std::string projection_csv(const std::string& video_id, const std::vector<ProjectionRow>& rows, bool header);

}  // namespace lift
