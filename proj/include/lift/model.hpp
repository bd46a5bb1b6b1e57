#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "lift/config.hpp"
#include "lift/ops.hpp"
#include "lift/tape.hpp"
#include "lift/tensor.hpp"

namespace lift {

/// All trainable tensors of encoder and decoder, ordered as param_layout(config).
struct LiftParams {
  LiftConfig config;
  std::vector<Tensor> tensors;

  const Tensor& get(std::string_view name) const;
  std::size_t count() const;
};

/// Static and dynamic latent vectors of one video.
struct Descriptor {
  Tensor z_static;
  Tensor z_dynamic;

  /// (z_static, z_dynamic) concatenated; length 2d.
  std::vector<float> concat() const;
};

LiftParams init_params(const LiftConfig& config, std::uint64_t seed);

/// [steps x width] table; row t-1 encodes frame index t (1-based). Even columns
/// hold sin(t / 10000^(2i/width)), odd columns the matching cos.
Tensor64 sinusoidal_encoding(std::size_t steps, std::size_t width);

Descriptor encode(const LiftParams& params, const Tensor& frames);
/// Videos may differ in length; each is encoded independently of the others.
std::vector<Descriptor> encode_batch(const LiftParams& params, std::span<const Tensor> videos);

/// z_t = z_s + (t/T) z_d for 1 <= t <= T.
Tensor latent_point(const Descriptor& desc, std::size_t t, std::size_t steps);
Tensor decode_at(const LiftParams& params, const Descriptor& desc, std::size_t t, std::size_t steps);

struct Reconstruction {
  Descriptor descriptor;
  Tensor frames;  // [T x D]
};

Reconstruction forward_reconstruct(const LiftParams& params, const Tensor& frames);

// Graph-level entry points used by training and gradient checks. `params`
// holds one Var per param_layout entry; `frames` is [batch*steps x D].

template <typename T>
struct LiftGraph {
  Var z_static;        // [batch x d]
  Var z_dynamic;       // [batch x d]
  Var reconstruction;  // [batch*steps x D]
};

template <typename T>
std::pair<Var, Var> encode_graph(Tape<T>& tape, const LiftConfig& config, std::span<const Var> params, Var frames,
                                 std::size_t batch, std::size_t steps);

template <typename T>
Var decode_graph(Tape<T>& tape, const LiftConfig& config, std::span<const Var> params, Var latent);

template <typename T>
LiftGraph<T> lift_graph(Tape<T>& tape, const LiftConfig& config, std::span<const Var> params, Var frames,
                        std::size_t batch, std::size_t steps);

}  // namespace lift
