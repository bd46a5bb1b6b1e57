#include "lift/config.hpp"

#include <string>

namespace lift {

void LiftConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(feature_dim, "feature_dim");
  positive(latent_dim, "latent_dim");
  positive(layers, "layers");
  positive(heads, "heads");
  positive(ffn_mult, "ffn_mult");
  positive(frames, "frames");
  if (latent_dim % heads != 0) {
    throw ConfigError("latent_dim " + std::to_string(latent_dim) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (!(lambda_orth >= 0.0)) throw ConfigError("lambda_orth must be >= 0");
}

void to_json(nlohmann::json& j, const LiftConfig& c) {
  j = nlohmann::json{{"feature_dim", c.feature_dim}, {"latent_dim", c.latent_dim}, {"layers", c.layers},
                     {"heads", c.heads},           {"ffn_mult", c.ffn_mult},     {"frames", c.frames},
                     {"lambda_orth", c.lambda_orth}};
}

void from_json(const nlohmann::json& j, LiftConfig& c) {
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("latent_dim").get_to(c.latent_dim);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("ffn_mult").get_to(c.ffn_mult);
  j.at("frames").get_to(c.frames);
  j.at("lambda_orth").get_to(c.lambda_orth);
}

std::vector<ParamSpec> param_layout(const LiftConfig& c) {
  c.validate();
  const std::size_t D = c.feature_dim;
  const std::size_t d = c.latent_dim;
  const std::size_t ffn = c.ffn_mult * d;
  std::vector<ParamSpec> out;
  auto linear = [&out](const std::string& prefix, std::size_t in, std::size_t outw) {
    out.push_back({prefix + ".weight", {in, outw}, ParamInit::xavier});
    out.push_back({prefix + ".bias", {outw}, ParamInit::zeros});
  };
  auto norm = [&out](const std::string& prefix, std::size_t width) {
    out.push_back({prefix + ".gain", {width}, ParamInit::ones});
    out.push_back({prefix + ".bias", {width}, ParamInit::zeros});
  };

  linear("input_proj", D, d);
  out.push_back({"token.static", {d}, ParamInit::token_normal});
  out.push_back({"token.dynamic", {d}, ParamInit::token_normal});
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    norm(p + ".attn_norm", d);
    linear(p + ".attn.query", d, d);
    linear(p + ".attn.key", d, d);
    linear(p + ".attn.value", d, d);
    linear(p + ".attn.out", d, d);
    norm(p + ".ffn_norm", d);
    linear(p + ".ffn.fc1", d, ffn);
    linear(p + ".ffn.fc2", ffn, d);
  }
  linear("static_head.proj", d, d);
  norm("static_head.norm", d);
  linear("dynamic_head.proj", d, d);
  norm("dynamic_head.norm", d);
  linear("decoder.fc1", d, 2 * d);
  norm("decoder.norm1", 2 * d);
  linear("decoder.fc2", 2 * d, 2 * d);
  norm("decoder.norm2", 2 * d);
  linear("decoder.out", 2 * d, D);
  return out;
}

std::size_t count_params(const LiftConfig& config) {
  std::size_t total = 0;
  for (const auto& spec : param_layout(config)) total += shape_size(spec.shape);
  return total;
}

}  // namespace lift
