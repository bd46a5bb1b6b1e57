#include "lift/probes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "lift/bytes.hpp"
#include "lift/ops.hpp"

namespace lift {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- pooling

PoolingSpec PoolingSpec::k_frames_evenly(std::size_t k, std::size_t T) {
  if (k == 0 || k > T) throw ValidationError(fmt::format("cannot pick {} frames out of {}", k, T));
  std::vector<std::size_t> idx;
  for (std::size_t i : resample_indices(T, k)) idx.push_back(i + 1);
  return k_frames(std::move(idx));
}

void PoolingSpec::validate(std::size_t frames) const {
  if (kind == PoolingKind::single_frame && indices.size() != 1) {
    throw ValidationError("single_frame pooling takes exactly one index");
  }
  if (kind == PoolingKind::k_frame_concat && indices.empty()) throw ValidationError("k_frame_concat needs indices");
  for (std::size_t i : indices) {
    if (i < 1 || i > frames) throw ValidationError(fmt::format("frame index {} outside [1, {}]", i, frames));
  }
}

std::string PoolingSpec::name() const {
  switch (kind) {
    case PoolingKind::single_frame:
      return fmt::format("single_frame({})", indices.empty() ? 0 : indices[0]);
    case PoolingKind::k_frame_concat:
      return fmt::format("k_frame_concat({})", fmt::join(indices, ","));
    case PoolingKind::mean:
      return "mean";
    case PoolingKind::time_weighted:
      return "time_weighted";
    case PoolingKind::full_concat:
      return "full_concat";
    case PoolingKind::lift_descriptor:
      return "lift_descriptor";
  }
  return "?";
}

PoolingSpec parse_pooling(const std::string& text, std::size_t frames) {
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string tail = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto numbers = [&] {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= tail.size()) {
      const auto comma = std::min(tail.find(',', pos), tail.size());
      const std::string item = tail.substr(pos, comma - pos);
      try {
        std::size_t used = 0;
        const long long v = std::stoll(item, &used);
        if (used != item.size() || v < 0) throw std::invalid_argument(item);
        out.push_back(static_cast<std::size_t>(v));
      } catch (const std::exception&) {
        throw ValidationError("bad pooling argument '" + item + "' in '" + text + "'");
      }
      pos = comma + 1;
    }
    return out;
  };
  PoolingSpec spec;
  if (head == "mean" && tail.empty()) {
    spec = PoolingSpec::mean();
  } else if (head == "time_weighted" && tail.empty()) {
    spec = PoolingSpec::time_weighted();
  } else if (head == "full_concat" && tail.empty()) {
    spec = PoolingSpec::full_concat();
  } else if ((head == "lift" || head == "lift_descriptor") && tail.empty()) {
    spec = PoolingSpec::lift_descriptor();
  } else if (head == "single" && !tail.empty()) {
    const auto n = numbers();
    if (n.size() != 1) throw ValidationError("single takes one index");
    spec = PoolingSpec::single_frame(n[0]);
  } else if (head == "frames" && !tail.empty()) {
    spec = PoolingSpec::k_frames(numbers());
  } else if (head == "kframes" && !tail.empty()) {
    const auto n = numbers();
    if (n.size() != 1) throw ValidationError("kframes takes one count");
    spec = PoolingSpec::k_frames_evenly(n[0], frames);
  } else {
    throw ValidationError("unknown pooling '" + text + "'");
  }
  if (spec.kind != PoolingKind::lift_descriptor) spec.validate(frames);
  return spec;
}

LiftEncoder LiftEncoder::from_checkpoint(const Checkpoint& ckpt) { return {ckpt.params(), ckpt.meta}; }

namespace {

std::vector<float> pool_plain(const Tensor& x, const PoolingSpec& spec) {
  if (x.rank() != 2 || x.rows() == 0) throw DimensionError("pooling needs a non-empty [T x D] sequence");
  const std::size_t T = x.rows(), D = x.cols();
  spec.validate(T);
  std::vector<float> out;
  switch (spec.kind) {
    case PoolingKind::single_frame:
    case PoolingKind::k_frame_concat:
      for (std::size_t i : spec.indices) out.insert(out.end(), x.row(i - 1).begin(), x.row(i - 1).end());
      break;
    case PoolingKind::full_concat:
      out.assign(x.data().begin(), x.data().end());
      break;
    case PoolingKind::mean:
    case PoolingKind::time_weighted: {
      std::vector<double> mean(D, 0.0), ramp(D, 0.0);
      const double centre = (static_cast<double>(T) + 1.0) / 2.0;
      double l1 = 0.0;
      for (std::size_t t = 1; t <= T; ++t) l1 += std::abs(static_cast<double>(t) - centre);
      for (std::size_t t = 1; t <= T; ++t) {
        const double w = l1 > 0.0 ? (static_cast<double>(t) - centre) / l1 : 0.0;
        auto r = x.row(t - 1);
        for (std::size_t d = 0; d < D; ++d) {
          mean[d] += r[d];
          ramp[d] += w * r[d];
        }
      }
      for (double v : mean) out.push_back(static_cast<float>(v / static_cast<double>(T)));
      if (spec.kind == PoolingKind::time_weighted) {
        for (double v : ramp) out.push_back(static_cast<float>(v));
      }
      break;
    }
    case PoolingKind::lift_descriptor:
      throw ValidationError("lift_descriptor pooling needs a model");
  }
  return out;
}

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& body) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

std::vector<float> pool_descriptor(const Tensor& frames, const PoolingSpec& spec, const LiftEncoder* model) {
  if (spec.kind != PoolingKind::lift_descriptor) return pool_plain(frames, spec);
  if (!model) throw ValidationError("lift_descriptor pooling needs a model");
  return encode(model->params, prepare_frames(frames, model->params.config, model->meta)).concat();
}

std::vector<std::vector<float>> pool_descriptors(const std::vector<Tensor>& videos, const PoolingSpec& spec,
                                                 const LiftEncoder* model, std::size_t workers) {
  std::vector<std::vector<float>> out(videos.size());
  if (spec.kind != PoolingKind::lift_descriptor) {
    parallel_for(videos.size(), workers, [&](std::size_t i) { out[i] = pool_plain(videos[i], spec); });
    return out;
  }
  if (!model) throw ValidationError("lift_descriptor pooling needs a model");
  constexpr std::size_t kChunk = 64;
  const std::size_t chunks = (videos.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, workers, [&](std::size_t c) {
    const std::size_t lo = c * kChunk, hi = std::min(videos.size(), lo + kChunk);
    std::vector<Tensor> prepared;
    for (std::size_t i = lo; i < hi; ++i) {
      prepared.push_back(prepare_frames(videos[i], model->params.config, model->meta));
    }
    const auto desc = encode_batch(model->params, prepared);
    for (std::size_t i = lo; i < hi; ++i) out[i] = desc[i - lo].concat();
  });
  return out;
}

std::vector<float> concat_descriptors(const std::vector<float>& a, const std::vector<float>& b) {
  std::vector<float> out(a);
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// ---------------------------------------------------------------- specs

ProbeSpec ProbeSpec::chiral(ProbeKind kind) {
  ProbeSpec s;
  s.kind = kind;
  return s;
}

ProbeSpec ProbeSpec::standard(ProbeKind kind) {
  ProbeSpec s;
  s.kind = kind;
  s.learning_rate = 1e-5;
  s.epochs = 100;
  s.weight_decay = 0.0;
  s.batch_size = 256;
  s.plateau = true;
  return s;
}

void ProbeSpec::validate() const {
  if (epochs < 1) throw ConfigError("probe epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("probe learning rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("probe weight decay must be >= 0");
  if (kind == ProbeKind::mlp) {
    if (hidden < 1) throw ConfigError("mlp hidden width must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  }
}

std::string to_string(ProbeKind k) {
  switch (k) {
    case ProbeKind::linear:
      return "linear";
    case ProbeKind::mlp:
      return "mlp";
    case ProbeKind::attentive:
      return "attentive";
  }
  return "?";
}

ProbeKind parse_probe_kind(const std::string& s) {
  if (s == "linear") return ProbeKind::linear;
  if (s == "mlp") return ProbeKind::mlp;
  if (s == "attentive") return ProbeKind::attentive;
  throw ValidationError("unknown probe kind '" + s + "'");
}

void to_json(json& j, const ProbeSpec& s) {
  j = json{{"kind", to_string(s.kind)},
           {"hidden", s.hidden},
           {"dropout", s.dropout},
           {"key_dim", s.key_dim},
           {"learning_rate", s.learning_rate},
           {"epochs", s.epochs},
           {"weight_decay", s.weight_decay},
           {"batch_size", s.batch_size},
           {"plateau", s.plateau},
           {"scheduler",
            {{"factor", s.scheduler.factor},
             {"patience", s.scheduler.patience},
             {"min_lr", s.scheduler.min_lr},
             {"threshold", s.scheduler.threshold}}},
           {"seed", s.seed},
           {"standardize", s.standardize}};
}

void from_json(const json& j, ProbeSpec& s) {
  ProbeSpec d;
  s.kind = parse_probe_kind(j.value("kind", to_string(d.kind)));
  s.hidden = j.value("hidden", d.hidden);
  s.dropout = j.value("dropout", d.dropout);
  s.key_dim = j.value("key_dim", d.key_dim);
  s.learning_rate = j.value("learning_rate", d.learning_rate);
  s.epochs = j.value("epochs", d.epochs);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.plateau = j.value("plateau", d.plateau);
  s.scheduler = d.scheduler;
  if (j.contains("scheduler")) {
    const auto& p = j.at("scheduler");
    s.scheduler.factor = p.value("factor", d.scheduler.factor);
    s.scheduler.patience = p.value("patience", d.scheduler.patience);
    s.scheduler.min_lr = p.value("min_lr", d.scheduler.min_lr);
    s.scheduler.threshold = p.value("threshold", d.scheduler.threshold);
  }
  s.seed = j.value("seed", d.seed);
  s.standardize = j.value("standardize", d.standardize);
}

// ---------------------------------------------------------------- probes

namespace {

struct Stats {
  std::vector<float> mean, std;
};

Stats fit_stats(const std::vector<std::span<const float>>& rows, std::size_t dim) {
  std::vector<double> mean(dim, 0.0), var(dim, 0.0);
  for (const auto& r : rows)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += r[d];
  const double n = static_cast<double>(std::max<std::size_t>(1, rows.size()));
  for (auto& m : mean) m /= n;
  for (const auto& r : rows) {
    for (std::size_t d = 0; d < dim; ++d) {
      const double e = r[d] - mean[d];
      var[d] += e * e;
    }
  }
  Stats s;
  for (std::size_t d = 0; d < dim; ++d) {
    const double sd = std::sqrt(var[d] / n);
    s.mean.push_back(static_cast<float>(mean[d]));
    s.std.push_back(sd > 0.0 ? static_cast<float>(sd) : 1.0f);
  }
  return s;
}

void standardize_into(std::span<const float> in, const std::vector<float>& mean, const std::vector<float>& sd,
                      std::span<float> out) {
  for (std::size_t d = 0; d < in.size(); ++d) out[d] = mean.empty() ? in[d] : (in[d] - mean[d]) / sd[d];
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(u(rng));
  return t;
}

/// Inputs of one forward pass, already standardized.
struct Batch {
  Tensor features;                   // [N x F], may have F == 0
  Tensor tokens;                     // [rows x Dt]
  std::vector<std::size_t> offsets;  // attentive only
};

}  // namespace

Probe::Probe(ProbeSpec spec, std::size_t classes, std::size_t feature_dim, std::size_t token_dim)
    : spec_(std::move(spec)), classes_(classes), feature_dim_(feature_dim), token_dim_(token_dim) {}

Probe Probe::from_params(ProbeSpec spec, std::size_t classes, std::size_t feature_dim, std::size_t token_dim,
                         std::vector<Tensor> params) {
  const std::size_t expected = spec.kind == ProbeKind::linear ? 2 : spec.kind == ProbeKind::mlp ? 4 : 5;
  if (params.size() != expected) {
    throw ValidationError(fmt::format("{} probe takes {} tensors, got {}", to_string(spec.kind), expected, params.size()));
  }
  if (classes < 2) throw ValidationError("a probe needs at least two classes");
  Probe p(std::move(spec), classes, feature_dim, token_dim);
  p.params_ = std::move(params);
  return p;
}

namespace {

Batch make_batch(const ProbeData& data, const std::vector<std::size_t>& which, std::size_t feature_dim,
                 std::size_t token_dim, const std::vector<float>& fm, const std::vector<float>& fs,
                 const std::vector<float>& tm, const std::vector<float>& ts, bool attentive) {
  Batch b;
  b.features = Tensor(Shape{which.size(), feature_dim});
  if (feature_dim > 0) {
    for (std::size_t r = 0; r < which.size(); ++r) {
      const auto& f = data.features.at(which[r]);
      if (f.size() != feature_dim) {
        throw DimensionError(fmt::format("sample {} has {} features, probe expects {}", which[r], f.size(), feature_dim));
      }
      standardize_into(f, fm, fs, b.features.row(r));
    }
  }
  if (attentive) {
    std::size_t rows = 0;
    b.offsets.push_back(0);
    for (std::size_t i : which) {
      const auto& t = data.tokens.at(i);
      if (t.rank() != 2 || t.rows() == 0) throw ValidationError(fmt::format("sample {} has an empty token sequence", i));
      if (t.cols() != token_dim) {
        throw DimensionError(fmt::format("sample {} has token width {}, probe expects {}", i, t.cols(), token_dim));
      }
      rows += t.rows();
      b.offsets.push_back(rows);
    }
    b.tokens = Tensor(Shape{rows, token_dim});
    std::size_t r = 0;
    for (std::size_t i : which) {
      const auto& t = data.tokens[i];
      for (std::size_t k = 0; k < t.rows(); ++k) standardize_into(t.row(k), tm, ts, b.tokens.row(r++));
    }
  }
  return b;
}

Var forward(Tape<float>& tape, ProbeKind kind, const std::vector<Var>& p, const Batch& b, double dropout,
            std::mt19937_64* rng) {
  const Var x = tape.constant(b.features);
  switch (kind) {
    case ProbeKind::linear:
      return linear(tape, x, p[0], p[1]);
    case ProbeKind::mlp: {
      Var h = relu(tape, linear(tape, x, p[0], p[1]));
      if (rng && dropout > 0.0) {
        std::bernoulli_distribution keep(1.0 - dropout);
        Tensor mask(tape.value(h).shape());
        const float kept = static_cast<float>(1.0 / (1.0 - dropout));
        for (auto& m : mask.data()) m = keep(*rng) ? kept : 0.0f;
        h = mul(tape, h, tape.constant(std::move(mask)));
      }
      return linear(tape, h, p[2], p[3]);
    }
    case ProbeKind::attentive: {
      const Var tokens = tape.constant(b.tokens);
      const Var keys = linear(tape, tokens, p[0], p[1]);
      Var pooled = attention_pool(tape, keys, tokens, p[2], b.offsets);
      if (b.features.cols() > 0) pooled = concat_cols(tape, pooled, x);
      return linear(tape, pooled, p[3], p[4]);
    }
  }
  throw ValidationError("unknown probe kind");
}

Var loss_of(Tape<float>& tape, Var logits, const std::vector<int>& labels, std::size_t classes) {
  return classes == 2 ? bce_with_logits(tape, logits, labels) : softmax_cross_entropy(tape, logits, labels);
}

}  // namespace

Tensor Probe::logits(const ProbeData& data) const {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const bool attentive = spec_.kind == ProbeKind::attentive;
  if (!attentive && data.features.size() != data.size()) {
    throw DimensionError("probe input needs one feature vector per label");
  }
  if (attentive && data.tokens.size() != data.size()) throw DimensionError("probe input needs one token sequence per label");
  if (feature_dim_ > 0 && data.features.size() != data.size()) {
    throw DimensionError("probe input needs one auxiliary vector per label");
  }
  const Batch b = make_batch(data, all, feature_dim_, token_dim_, feature_mean_, feature_std_, token_mean_,
                             token_std_, attentive);
  Tape<float> tape;
  std::vector<Var> vars;
  for (const auto& t : params_) vars.push_back(tape.constant(t));
  return tape.value(forward(tape, spec_.kind, vars, b, 0.0, nullptr));
}

std::vector<int> Probe::predict(const ProbeData& data) const {
  if (data.size() == 0) return {};
  const Tensor z = logits(data);
  std::vector<int> out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (classes_ == 2) {
      out[i] = z.at(i, 0) > 0.0f ? 1 : 0;
    } else {
      auto r = z.row(i);
      out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
  }
  return out;
}

double Probe::accuracy(const ProbeData& data) const {
  if (data.size() == 0) throw ValidationError("accuracy of an empty set");
  const auto pred = predict(data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

Probe train_probe(const ProbeData& train, const ProbeSpec& spec) {
  spec.validate();
  const std::size_t n = train.size();
  if (n == 0) throw ValidationError("probe training set is empty");
  const bool attentive = spec.kind == ProbeKind::attentive;
  std::set<int> present;
  for (int y : train.labels) {
    if (y < 0) throw ValidationError("probe labels must be >= 0");
    present.insert(y);
  }
  if (present.size() < 2) throw ValidationError("probe training set has a single class");
  const std::size_t classes = std::max<std::size_t>(2, static_cast<std::size_t>(*present.rbegin()) + 1);

  std::size_t feature_dim = 0, token_dim = 0;
  if (!train.features.empty()) {
    if (train.features.size() != n) throw DimensionError("probe input needs one feature vector per label");
    feature_dim = train.features[0].size();
  } else if (!attentive) {
    throw DimensionError("probe input needs one feature vector per label");
  }
  if (attentive) {
    if (train.tokens.size() != n) throw DimensionError("probe input needs one token sequence per label");
    if (train.tokens[0].rank() != 2 || train.tokens[0].rows() == 0) {
      throw ValidationError("sample 0 has an empty token sequence");
    }
    token_dim = train.tokens[0].cols();
  }

  Probe probe(spec, classes, feature_dim, token_dim);
  if (spec.standardize) {
    std::vector<std::span<const float>> rows;
    for (const auto& f : train.features) {
      if (f.size() != feature_dim) throw DimensionError("probe feature vectors differ in length");
      rows.emplace_back(f);
    }
    auto fs = fit_stats(rows, feature_dim);
    probe.feature_mean_ = std::move(fs.mean);
    probe.feature_std_ = std::move(fs.std);
    if (attentive) {
      std::vector<std::span<const float>> trows;
      for (const auto& t : train.tokens) {
        if (t.rank() != 2 || t.cols() != token_dim) throw DimensionError("probe token widths differ");
        for (std::size_t r = 0; r < t.rows(); ++r) trows.push_back(t.row(r));
      }
      auto ts = fit_stats(trows, token_dim);
      probe.token_mean_ = std::move(ts.mean);
      probe.token_std_ = std::move(ts.std);
    }
  }

  const std::size_t outputs = classes == 2 ? 1 : classes;
  std::mt19937_64 rng(spec.seed);
  auto& P = probe.params_;
  switch (spec.kind) {
    case ProbeKind::linear:
      P = {Tensor({feature_dim, outputs}), Tensor({outputs})};
      break;
    case ProbeKind::mlp: {
      const double b1 = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, feature_dim)));
      const double b2 = 1.0 / std::sqrt(static_cast<double>(spec.hidden));
      P.push_back(uniform({feature_dim, spec.hidden}, b1, rng));
      P.push_back(uniform({spec.hidden}, b1, rng));
      P.push_back(uniform({spec.hidden, outputs}, b2, rng));
      P.push_back(uniform({outputs}, b2, rng));
      break;
    }
    case ProbeKind::attentive: {
      const std::size_t kd = spec.key_dim > 0 ? spec.key_dim : token_dim;
      P.push_back(uniform({token_dim, kd}, 1.0 / std::sqrt(static_cast<double>(token_dim)), rng));
      P.push_back(Tensor({kd}));
      P.push_back(Tensor({kd}));
      P.push_back(Tensor({token_dim + feature_dim, outputs}));
      P.push_back(Tensor({outputs}));
      break;
    }
  }

  AdamState adam;
  AdamConfig adam_cfg;
  adam_cfg.weight_decay = spec.weight_decay;
  PlateauScheduler scheduler(spec.learning_rate, spec.scheduler);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch_size = spec.batch_size == 0 ? n : spec.batch_size;
  std::optional<Batch> full;
  if (batch_size >= n) {
    full = make_batch(train, order, feature_dim, token_dim, probe.feature_mean_, probe.feature_std_,
                      probe.token_mean_, probe.token_std_, attentive);
  }
  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    if (!full) std::shuffle(order.begin(), order.end(), rng);
    const double lr = spec.plateau ? scheduler.lr() : spec.learning_rate;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t count = std::min(batch_size, n - start);
      std::vector<std::size_t> which(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(start + count));
      std::vector<int> labels;
      for (std::size_t i : which) labels.push_back(train.labels[i]);
      Batch local;
      if (!full) {
        local = make_batch(train, which, feature_dim, token_dim, probe.feature_mean_, probe.feature_std_,
                           probe.token_mean_, probe.token_std_, attentive);
      }
      Tape<float> tape;
      std::vector<Var> vars;
      for (const auto& t : P) vars.push_back(tape.param(t));
      const Var logits = forward(tape, spec.kind, vars, full ? *full : local, spec.dropout, &rng);
      const Var loss = loss_of(tape, logits, labels, classes);
      loss_sum += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(count);
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (const Var v : vars) grads.push_back(tape.grad(v));
      adam_step(P, grads, adam, lr, adam_cfg);
    }
    const double epoch_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(epoch_loss)) throw ValidationError(fmt::format("probe diverged at epoch {}", epoch));
    if (spec.plateau) scheduler.step(epoch_loss);
  }
  return probe;
}

Probe train_linear_probe(const ProbeData& train, ProbeSpec spec) {
  spec.kind = ProbeKind::linear;
  return train_probe(train, spec);
}

Probe train_mlp_probe(const ProbeData& train, ProbeSpec spec) {
  spec.kind = ProbeKind::mlp;
  return train_probe(train, spec);
}

Probe train_attentive_probe(const ProbeData& train, ProbeSpec spec) {
  spec.kind = ProbeKind::attentive;
  return train_probe(train, spec);
}

// ---------------------------------------------------------------- descriptor tables

void DescriptorTable::add(std::string id, std::vector<float> row) {
  if (!rows.empty() && row.size() != dim()) {
    throw DimensionError(fmt::format("descriptor for '{}' has dim {}, table has {}", id, row.size(), dim()));
  }
  if (!index_.emplace(id, ids.size()).second) throw ValidationError("duplicate descriptor id '" + id + "'");
  ids.push_back(std::move(id));
  rows.push_back(std::move(row));
}

const std::vector<float>& DescriptorTable::at(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) throw ValidationError("no descriptor for video '" + id + "'");
  return rows[it->second];
}

void save_descriptor_table(const DescriptorTable& table, const fs::path& path) {
  std::string out = "LDS1";
  bytes::put_u32(out, static_cast<std::uint32_t>(table.size()));
  bytes::put_u32(out, static_cast<std::uint32_t>(table.dim()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    bytes::put_u32(out, static_cast<std::uint32_t>(table.ids[i].size()));
    out += table.ids[i];
    bytes::put_floats(out, table.rows[i]);
  }
  write_file_bytes(path, out);
}

DescriptorTable load_descriptor_table(const fs::path& path) {
  const std::string in = read_file_bytes(path);
  const auto need = [&](std::size_t at, std::size_t n) {
    if (at + n > in.size()) throw FormatError(path.string() + ": truncated descriptor table", in.size());
  };
  need(0, 12);
  if (in.compare(0, 4, "LDS1") != 0) throw FormatError(path.string() + ": not a descriptor table", 0);
  const std::size_t n = bytes::get_u32(in, 4), dim = bytes::get_u32(in, 8);
  DescriptorTable table;
  std::size_t at = 12;
  for (std::size_t i = 0; i < n; ++i) {
    need(at, 4);
    const std::size_t len = bytes::get_u32(in, at);
    at += 4;
    need(at, len + 4 * dim);
    std::string id = in.substr(at, len);
    at += len;
    std::vector<float> row(dim);
    bytes::get_floats(in, at, row);
    at += 4 * dim;
    table.add(std::move(id), std::move(row));
  }
  if (at != in.size()) throw FormatError(path.string() + ": trailing bytes after descriptor table", at);
  return table;
}

std::string descriptor_table_csv(const DescriptorTable& table) {
  std::string out = "video_id";
  for (std::size_t d = 0; d < table.dim(); ++d) out += fmt::format(",f{}", d);
  out += '\n';
  for (std::size_t i = 0; i < table.size(); ++i) {
    out += table.ids[i];
    for (float v : table.rows[i]) out += fmt::format(",{:.9g}", v);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

json ProbeReport::to_json() const {
  json rows = json::array();
  for (const auto& g : groups) {
    json r{{"group", g.group}, {"n_train", g.n_train}, {"n_test", g.n_test}};
    if (g.skipped) {
      r["skipped"] = true;
      r["reason"] = g.reason;
    } else {
      r["accuracy"] = g.accuracy;
    }
    rows.push_back(std::move(r));
  }
  return json{{"descriptor", descriptor},   {"descriptor_dim", descriptor_dim}, {"macro_accuracy", macro_accuracy},
              {"groups", rows},             {"probe", spec},                    {"reference", reference}};
}

std::string ProbeReport::to_csv() const {
  std::string out = "group,n_train,n_test,accuracy\n";
  std::size_t train = 0, test = 0;
  for (const auto& g : groups) {
    out += fmt::format("{},{},{},{}\n", g.group, g.n_train, g.n_test,
                       g.skipped ? std::string("skipped") : fmt::format("{:.6f}", g.accuracy));
    train += g.n_train;
    test += g.n_test;
  }
  out += fmt::format("macro,{},{},{:.6f}\n", train, test, macro_accuracy);
  return out;
}

namespace {

ProbeData gather(const std::vector<std::string>& ids, const std::vector<int>& labels, const DescriptorTable& descriptors,
                 const ProbeSpec& spec, const TokenTable* tokens) {
  ProbeData d;
  d.labels = labels;
  const bool attentive = spec.kind == ProbeKind::attentive;
  if (attentive && !tokens) throw ValidationError("attentive probes need token sequences");
  for (const auto& id : ids) {
    if (!attentive || descriptors.size() > 0) d.features.push_back(descriptors.at(id));
    if (attentive) {
      const auto it = tokens->find(id);
      if (it == tokens->end()) throw ValidationError("no token sequence for video '" + id + "'");
      d.tokens.push_back(it->second);
    }
  }
  return d;
}

ProbeData gather(const std::vector<LabeledVideo>& videos, const DescriptorTable& descriptors, const ProbeSpec& spec,
                 const TokenTable* tokens) {
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& v : videos) {
    ids.push_back(v.video_id);
    labels.push_back(v.label);
  }
  return gather(ids, labels, descriptors, spec, tokens);
}

double finish_macro(ProbeReport& report) {
  double sum = 0.0;
  std::size_t ran = 0;
  for (const auto& g : report.groups) {
    if (g.skipped) {
      spdlog::warn("skipped group {}: {}", g.group, g.reason);
      continue;
    }
    sum += g.accuracy;
    ++ran;
  }
  return ran > 0 ? sum / static_cast<double>(ran) : 0.0;
}

}  // namespace

ProbeReport evaluate_chiral(const std::vector<ChiralGroup>& groups, const DescriptorTable& descriptors,
                            const ProbeSpec& spec, std::size_t workers, const std::string& descriptor_name,
                            const TokenTable* tokens) {
  spec.validate();
  ProbeReport report;
  report.spec = spec;
  report.descriptor = descriptor_name;
  report.descriptor_dim = descriptors.dim();
  report.groups.resize(groups.size());
  parallel_for(groups.size(), workers, [&](std::size_t gi) {
    const auto& g = groups[gi];
    GroupResult& res = report.groups[gi];
    res.group = g.key();
    res.n_train = g.train.size();
    res.n_test = g.test.size();
    try {
      if (g.test.empty()) throw ValidationError("group has no test videos");
      const ProbeData train = gather(g.train, descriptors, spec, tokens);
      const ProbeData test = gather(g.test, descriptors, spec, tokens);
      res.accuracy = train_probe(train, spec).accuracy(test);
    } catch (const ValidationError& e) {
      res.skipped = true;
      res.reason = e.what();
    }
  });
  report.macro_accuracy = finish_macro(report);
  return report;
}

ProbeReport evaluate_standard(const Manifest& manifest, const DescriptorTable& descriptors, const ProbeSpec& spec,
                              const std::string& descriptor_name, const TokenTable* tokens) {
  spec.validate();
  std::set<std::string> verbs;
  for (const auto& r : manifest.records()) verbs.insert(normalize_label(r.verb));
  const std::vector<std::string> classes(verbs.begin(), verbs.end());
  std::vector<std::string> train_ids, test_ids;
  std::vector<int> train_y, test_y;
  for (const auto& r : manifest.records()) {
    const int y = static_cast<int>(std::lower_bound(classes.begin(), classes.end(), normalize_label(r.verb)) -
                                   classes.begin());
    (r.split == Split::train ? train_ids : test_ids).push_back(r.video_id);
    (r.split == Split::train ? train_y : test_y).push_back(y);
  }
  ProbeReport report;
  report.spec = spec;
  report.descriptor = descriptor_name;
  report.descriptor_dim = descriptors.dim();
  GroupResult res{"all", train_ids.size(), test_ids.size(), 0.0, false, ""};
  try {
    if (test_ids.empty()) throw ValidationError("manifest has no test videos");
    const Probe probe = train_probe(gather(train_ids, train_y, descriptors, spec, tokens), spec);
    res.accuracy = probe.accuracy(gather(test_ids, test_y, descriptors, spec, tokens));
  } catch (const ValidationError& e) {
    res.skipped = true;
    res.reason = e.what();
  }
  report.groups.push_back(res);
  report.macro_accuracy = finish_macro(report);
  return report;
}

}  // namespace lift
