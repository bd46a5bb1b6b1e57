#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"
#include "lift/tensor.hpp"

namespace lift {

/// Architecture hyperparameters of the autoencoder. Defaults reproduce the
/// reference configuration (8.7M trainable parameters at D = d = 384).
struct LiftConfig {
  std::size_t feature_dim = 384;  // D, per-frame input feature width
  std::size_t latent_dim = 384;   // d
  std::size_t layers = 4;
  std::size_t heads = 8;
  std::size_t ffn_mult = 4;
  std::size_t frames = 16;  // T, nominal sequence length after resampling
  double lambda_orth = 0.1;

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  bool operator==(const LiftConfig&) const = default;
};

void to_json(nlohmann::json& j, const LiftConfig& c);
void from_json(const nlohmann::json& j, LiftConfig& c);

enum class ParamInit { xavier, zeros, ones, token_normal };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init;
};

/// Every trainable tensor implied by the config, in canonical order. Linear
/// weights are stored [in x out].
std::vector<ParamSpec> param_layout(const LiftConfig& config);

std::size_t count_params(const LiftConfig& config);

}  // namespace lift
