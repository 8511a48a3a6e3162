#include "vlp/grad_check.hpp"

#include <cmath>
#include <vector>

#include "vlp/errors.hpp"

namespace vlp {

namespace {

double eval_scalar(const ScalarFn& f) {
    Graph g;
    Var out = f(g);
    const Tensor& v = out.value();
    if (v.size() != 1) throw ContractError("grad_check: function must be scalar-valued");
    return v.values[0];
}

}  // namespace

double grad_check(const ScalarFn& f, std::span<Tensor* const> inputs, double epsilon) {
    if (epsilon < 1e-7 || epsilon > 1e-3) {
        throw ContractError("grad_check: epsilon " + std::to_string(epsilon) +
                            " outside [1e-7, 1e-3]");
    }

    std::vector<std::vector<double>> analytic;
    {
        for (Tensor* t : inputs) {
            t->requires_grad = true;
            t->grad.reset();
        }
        Graph g;
        Var out = f(g);
        if (out.value().size() != 1) {
            throw ContractError("grad_check: function must be scalar-valued");
        }
        g.backward(out);
        for (Tensor* t : inputs) {
            t->ensure_grad();
            analytic.push_back(*t->grad);
        }
    }

    double worst = 0.0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor* t = inputs[ti];
        for (std::size_t i = 0; i < t->size(); ++i) {
            const double saved = t->values[i];
            t->values[i] = saved + epsilon;
            const double up = eval_scalar(f);
            t->values[i] = saved - epsilon;
            const double down = eval_scalar(f);
            t->values[i] = saved;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic[ti][i];
            const double denom = std::max({1e-8, std::fabs(a), std::fabs(numeric)});
            worst = std::max(worst, std::fabs(a - numeric) / denom);
        }
    }
    return worst;
}

double grad_check(const ScalarFn& f, std::initializer_list<Tensor*> inputs, double epsilon) {
    std::vector<Tensor*> v(inputs);
    return grad_check(f, std::span<Tensor* const>(v), epsilon);
}

}  // namespace vlp
