#pragma once

#include <functional>
#include <span>
#include <vector>

#include "lift/tape.hpp"

namespace lift {

/// Scalar function of one or more tensors, built on a 64-bit tape. Receives one
/// parameter Var per input, in order, and returns a Var holding one value.
using ScalarGraph = std::function<Var(Tape<double>&, std::span<const Var>)>;

/// Max over all input coordinates of |analytic - central difference| /
/// max(1, |analytic|). Throws ValidationError when f(x) is not finite.
double grad_check(const ScalarGraph& f, const std::vector<Tensor64>& inputs, double step = 1e-3);

double grad_check(const std::function<Var(Tape<double>&, Var)>& f, const Tensor64& x, double step = 1e-3);

/// Reverse-mode gradients of f at `inputs`, one tensor per input.
std::vector<Tensor64> analytic_gradients(const ScalarGraph& f, const std::vector<Tensor64>& inputs);

}  // namespace lift
