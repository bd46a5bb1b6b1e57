#include "lift/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace lift {

namespace {

double evaluate(const ScalarGraph& f, const std::vector<Tensor64>& inputs) {
  Tape<double> tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  const Var out = f(tape, vars);
  const auto& v = tape.value(out);
  if (v.size() != 1) throw DimensionError("grad_check: function must return one value");
  if (!std::isfinite(v[0])) throw ValidationError("grad_check: function value is not finite");
  return v[0];
}

}  // namespace

std::vector<Tensor64> analytic_gradients(const ScalarGraph& f, const std::vector<Tensor64>& inputs) {
  Tape<double> tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.param(x));
  const Var out = f(tape, vars);
  if (tape.value(out).size() != 1) throw DimensionError("grad_check: function must return one value");
  if (!std::isfinite(tape.value(out)[0])) throw ValidationError("grad_check: function value is not finite");
  std::vector<Tensor64> grads;
  if (tape.requires_grad(out)) tape.backward(out);
  for (const Var v : vars) grads.push_back(tape.grad(v));
  return grads;
}

double grad_check(const ScalarGraph& f, const std::vector<Tensor64>& inputs, double step) {
  const auto grads = analytic_gradients(f, inputs);
  std::vector<Tensor64> probe = inputs;
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double saved = probe[k][i];
      probe[k][i] = saved + step;
      const double hi = evaluate(f, probe);
      probe[k][i] = saved - step;
      const double lo = evaluate(f, probe);
      probe[k][i] = saved;
      const double numeric = (hi - lo) / (2.0 * step);
      const double analytic = grads[k][i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
    }
  }
  return worst;
}

double grad_check(const std::function<Var(Tape<double>&, Var)>& f, const Tensor64& x, double step) {
  return grad_check([&f](Tape<double>& tape, std::span<const Var> vars) { return f(tape, vars[0]); },
                    std::vector<Tensor64>{x}, step);
}

}  // namespace lift
