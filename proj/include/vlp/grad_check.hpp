#pragma once

#include <functional>
#include <span>

#include "vlp/graph.hpp"

namespace vlp {

/// Builds the scalar expression over params bound via Graph::param.
using ScalarFn = std::function<Var(Graph&)>;

/// Central-difference check of the analytic gradient of `f` with respect to
/// every element of every tensor in `inputs`. Returns the worst relative
/// error, with the denominator floored at 1e-8 so exact zero gradients
/// compare cleanly. `f` must rebuild the same expression on every call; the
/// probe perturbs input values in place and restores them.
double grad_check(const ScalarFn& f, std::span<Tensor* const> inputs, double epsilon);

double grad_check(const ScalarFn& f, std::initializer_list<Tensor*> inputs, double epsilon);

}  // namespace vlp
