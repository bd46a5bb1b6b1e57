#include "lift/model.hpp"

#include <cmath>
#include <random>
#include <string>

namespace lift {

namespace {

constexpr std::size_t kPerLayer = 16;
constexpr std::size_t kPrefix = 4;

// Offsets into the canonical layout; see param_layout().
struct LayerSlots {
  std::size_t base;
  Var at(std::span<const Var> p, std::size_t k) const { return p[base + k]; }
};

std::size_t tail_base(const LiftConfig& c) { return kPrefix + kPerLayer * c.layers; }

void check_param_count(const LiftConfig& c, std::span<const Var> params) {
  const std::size_t expected = tail_base(c) + 18;
  if (params.size() != expected) {
    throw DimensionError("expected " + std::to_string(expected) + " parameter tensors, got " +
                         std::to_string(params.size()));
  }
}

template <typename T>
Var constant_like(Tape<T>& tape, const Tensor64& values) {
  return tape.constant(values.template cast<T>());
}

Tensor run_single(const LiftParams& params, auto&& build) {
  Tape<float> tape;
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const auto& t : params.tensors) vars.push_back(tape.constant(t));
  const Var out = build(tape, std::span<const Var>(vars));
  return tape.value(out);
}

}  // namespace

const Tensor& LiftParams::get(std::string_view name) const {
  const auto layout = param_layout(config);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name == name) return tensors.at(i);
  }
  throw ValidationError("unknown parameter '" + std::string(name) + "'");
}

std::size_t LiftParams::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

std::vector<float> Descriptor::concat() const {
  std::vector<float> out(z_static.data().begin(), z_static.data().end());
  out.insert(out.end(), z_dynamic.data().begin(), z_dynamic.data().end());
  return out;
}

LiftParams init_params(const LiftConfig& config, std::uint64_t seed) {
  LiftParams params{config, {}};
  std::mt19937_64 rng(seed);
  for (const auto& spec : param_layout(config)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case ParamInit::xavier: {
        const double fan_in = static_cast<double>(spec.shape[0]);
        const double fan_out = static_cast<double>(spec.shape[1]);
        const float a = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
        std::uniform_real_distribution<float> dist(-a, a);
        for (auto& v : t.data()) v = dist(rng);
        break;
      }
      case ParamInit::token_normal: {
        std::normal_distribution<float> dist(0.0f, 0.02f);
        for (auto& v : t.data()) v = dist(rng);
        break;
      }
      case ParamInit::ones:
        for (auto& v : t.data()) v = 1.0f;
        break;
      case ParamInit::zeros:
        break;
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

Tensor64 sinusoidal_encoding(std::size_t steps, std::size_t width) {
  Tensor64 pe(Shape{steps, width});
  for (std::size_t t = 1; t <= steps; ++t) {
    for (std::size_t i = 0; i < width; ++i) {
      const double pair = static_cast<double>(i / 2 * 2);
      const double angle = static_cast<double>(t) / std::pow(10000.0, pair / static_cast<double>(width));
      pe.at(t - 1, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

template <typename T>
std::pair<Var, Var> encode_graph(Tape<T>& tape, const LiftConfig& c, std::span<const Var> p, Var frames,
                                 std::size_t batch, std::size_t steps) {
  check_param_count(c, p);
  const auto& fv = tape.value(frames);
  if (fv.cols() != c.feature_dim) {
    throw DimensionError("frames have width " + std::to_string(fv.cols()) + ", model expects " +
                         std::to_string(c.feature_dim));
  }
  if (batch == 0 || steps == 0 || fv.rows() != batch * steps) {
    throw DimensionError("frames hold " + std::to_string(fv.rows()) + " rows, expected " + std::to_string(batch) +
                         " x " + std::to_string(steps));
  }
  const std::size_t d = c.latent_dim;
  const std::size_t seq = steps + 2;

  Var embedded = linear(tape, frames, p[0], p[1]);
  {
    const Tensor64 pe = sinusoidal_encoding(steps, d);
    Tensor64 tiled(Shape{batch * steps, d});
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(pe.data().begin(), pe.data().end(), tiled.data().begin() + static_cast<std::ptrdiff_t>(b * pe.size()));
    }
    embedded = add(tape, embedded, constant_like(tape, tiled));
  }

  // Sequence per video: [e_s, e_d, e_1 .. e_T].
  const Var tokens = concat_rows(tape, p[2], p[3]);
  const Var pool = concat_rows(tape, tokens, embedded);
  std::vector<std::size_t> order;
  order.reserve(batch * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(0);
    order.push_back(1);
    for (std::size_t t = 0; t < steps; ++t) order.push_back(2 + b * steps + t);
  }
  Var x = gather_rows(tape, pool, std::move(order));

  for (std::size_t l = 0; l < c.layers; ++l) {
    const LayerSlots s{kPrefix + kPerLayer * l};
    const Var normed = layer_norm(tape, x, s.at(p, 0), s.at(p, 1));
    const AttentionWeights w{s.at(p, 2), s.at(p, 3), s.at(p, 4), s.at(p, 5),
                             s.at(p, 6), s.at(p, 7), s.at(p, 8), s.at(p, 9)};
    x = add(tape, x, multi_head_attention(tape, normed, normed, normed, w, c.heads, batch));
    const Var normed2 = layer_norm(tape, x, s.at(p, 10), s.at(p, 11));
    const Var hidden = gelu(tape, linear(tape, normed2, s.at(p, 12), s.at(p, 13)));
    x = add(tape, x, linear(tape, hidden, s.at(p, 14), s.at(p, 15)));
  }

  std::vector<std::size_t> static_rows, dynamic_rows;
  for (std::size_t b = 0; b < batch; ++b) {
    static_rows.push_back(b * seq);
    dynamic_rows.push_back(b * seq + 1);
  }
  const std::size_t t0 = tail_base(c);
  const Var zs = layer_norm(tape, linear(tape, gather_rows(tape, x, std::move(static_rows)), p[t0], p[t0 + 1]),
                            p[t0 + 2], p[t0 + 3]);
  const Var zd = layer_norm(tape, linear(tape, gather_rows(tape, x, std::move(dynamic_rows)), p[t0 + 4], p[t0 + 5]),
                            p[t0 + 6], p[t0 + 7]);
  return {zs, zd};
}

template <typename T>
Var decode_graph(Tape<T>& tape, const LiftConfig& c, std::span<const Var> p, Var latent) {
  check_param_count(c, p);
  const std::size_t t0 = tail_base(c) + 8;
  Var h = layer_norm(tape, gelu(tape, linear(tape, latent, p[t0], p[t0 + 1])), p[t0 + 2], p[t0 + 3]);
  h = layer_norm(tape, gelu(tape, linear(tape, h, p[t0 + 4], p[t0 + 5])), p[t0 + 6], p[t0 + 7]);
  return linear(tape, h, p[t0 + 8], p[t0 + 9]);
}

template <typename T>
LiftGraph<T> lift_graph(Tape<T>& tape, const LiftConfig& c, std::span<const Var> params, Var frames,
                        std::size_t batch, std::size_t steps) {
  const auto [zs, zd] = encode_graph(tape, c, params, frames, batch, steps);
  const Var latent = line_points(tape, zs, zd, steps);
  return {zs, zd, decode_graph(tape, c, params, latent)};
}

Descriptor encode(const LiftParams& params, const Tensor& frames) {
  const Tensor* one = &frames;
  return encode_batch(params, std::span<const Tensor>(one, 1)).front();
}

std::vector<Descriptor> encode_batch(const LiftParams& params, std::span<const Tensor> videos) {
  const auto& c = params.config;
  std::vector<Descriptor> out;
  out.reserve(videos.size());
  // Videos of equal length share one graph; results are row-independent, so
  // chunking does not change any value.
  constexpr std::size_t kChunk = 64;
  std::size_t i = 0;
  while (i < videos.size()) {
    const std::size_t steps = videos[i].rows();
    std::size_t j = i;
    std::vector<float> stacked;
    while (j < videos.size() && j - i < kChunk && videos[j].rows() == steps) {
      if (videos[j].cols() != c.feature_dim || videos[j].rank() != 2) {
        throw DimensionError("video " + std::to_string(j) + " has shape " + shape_string(videos[j].shape()) +
                             ", model expects [T x " + std::to_string(c.feature_dim) + "]");
      }
      stacked.insert(stacked.end(), videos[j].data().begin(), videos[j].data().end());
      ++j;
    }
    if (steps == 0) throw DimensionError("video " + std::to_string(i) + " has no frames");
    const std::size_t batch = j - i;
    Tape<float> tape;
    std::vector<Var> vars;
    for (const auto& t : params.tensors) vars.push_back(tape.constant(t));
    const Var frames = tape.constant(Tensor(Shape{batch * steps, c.feature_dim}, std::move(stacked)));
    const auto [zs, zd] = encode_graph(tape, c, vars, frames, batch, steps);
    const auto& sv = tape.value(zs);
    const auto& dv = tape.value(zd);
    for (std::size_t b = 0; b < batch; ++b) {
      Descriptor desc{Tensor(Shape{c.latent_dim}), Tensor(Shape{c.latent_dim})};
      std::copy(sv.row(b).begin(), sv.row(b).end(), desc.z_static.data().begin());
      std::copy(dv.row(b).begin(), dv.row(b).end(), desc.z_dynamic.data().begin());
      out.push_back(std::move(desc));
    }
    i = j;
  }
  return out;
}

Tensor latent_point(const Descriptor& desc, std::size_t t, std::size_t steps) {
  if (steps == 0 || t < 1 || t > steps) {
    throw ValidationError("frame index " + std::to_string(t) + " outside 1.." + std::to_string(steps));
  }
  if (desc.z_static.shape() != desc.z_dynamic.shape()) {
    throw DimensionError("descriptor halves differ in shape");
  }
  // Same arithmetic as line_points so decode_at matches forward_reconstruct.
  const float coef = static_cast<float>(t) / static_cast<float>(steps);
  Tensor z(Shape{1, desc.z_static.size()});
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = desc.z_static[j] + coef * desc.z_dynamic[j];
  return z;
}

Tensor decode_at(const LiftParams& params, const Descriptor& desc, std::size_t t, std::size_t steps) {
  if (desc.z_static.size() != params.config.latent_dim) {
    throw DimensionError("descriptor width " + std::to_string(desc.z_static.size()) + " != latent_dim " +
                         std::to_string(params.config.latent_dim));
  }
  Tensor z = latent_point(desc, t, steps);
  Tensor out = run_single(params, [&](Tape<float>& tape, std::span<const Var> vars) {
    return decode_graph(tape, params.config, vars, tape.constant(z));
  });
  return out.reshaped(Shape{params.config.feature_dim});
}

Reconstruction forward_reconstruct(const LiftParams& params, const Tensor& frames) {
  const auto& c = params.config;
  if (frames.rank() != 2 || frames.cols() != c.feature_dim || frames.rows() == 0) {
    throw DimensionError("frames have shape " + shape_string(frames.shape()) + ", model expects [T x " +
                         std::to_string(c.feature_dim) + "]");
  }
  const std::size_t steps = frames.rows();
  Tape<float> tape;
  std::vector<Var> vars;
  for (const auto& t : params.tensors) vars.push_back(tape.constant(t));
  const auto g = lift_graph(tape, c, vars, tape.constant(frames), 1, steps);
  Reconstruction out;
  out.descriptor.z_static = tape.value(g.z_static).reshaped(Shape{c.latent_dim});
  out.descriptor.z_dynamic = tape.value(g.z_dynamic).reshaped(Shape{c.latent_dim});
  out.frames = tape.value(g.reconstruction);
  return out;
}

template std::pair<Var, Var> encode_graph(Tape<float>&, const LiftConfig&, std::span<const Var>, Var, std::size_t,
                                          std::size_t);
template std::pair<Var, Var> encode_graph(Tape<double>&, const LiftConfig&, std::span<const Var>, Var, std::size_t,
                                          std::size_t);
template Var decode_graph(Tape<float>&, const LiftConfig&, std::span<const Var>, Var);
template Var decode_graph(Tape<double>&, const LiftConfig&, std::span<const Var>, Var);
template LiftGraph<float> lift_graph(Tape<float>&, const LiftConfig&, std::span<const Var>, Var, std::size_t,
                                     std::size_t);
template LiftGraph<double> lift_graph(Tape<double>&, const LiftConfig&, std::span<const Var>, Var, std::size_t,
                                      std::size_t);

}  // namespace lift
