#include "vlp/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "vlp/errors.hpp"

namespace vlp {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMap(t.values.data(), static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(cols));
}

/// Decomposition of a shape around one axis: indices factor as
/// (outer, k, inner) with flat = (outer*len + k)*inner + inner_index.
struct AxisView {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisView axis_view(const Shape& s, int axis, const char* op) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= s.size()) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for shape " + shape_str(s));
    }
    AxisView v;
    for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
    v.len = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

Shape drop_axis(const Shape& s, int axis) {
    Shape out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != static_cast<std::size_t>(axis)) out.push_back(s[i]);
    }
    return out;
}

double gauss_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

double gauss_pdf(double x) {
    static const double kInvSqrt2Pi = 0.3989422804014327;
    return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

}  // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::subtract: return "subtract";
        case OpKind::multiply: return "multiply";
        case OpKind::scale: return "scale";
        case OpKind::op_exp: return "exp";
        case OpKind::op_log: return "log";
        case OpKind::softmax: return "softmax";
        case OpKind::layer_norm: return "layer-normalize";
        case OpKind::gelu: return "gelu";
        case OpKind::mean: return "mean";
        case OpKind::sum: return "sum";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::gather: return "embedding-gather";
        case OpKind::l2_normalize: return "l2-normalize";
        case OpKind::transpose: return "transpose";
        case OpKind::reshape: return "reshape";
    }
    return "?";
}

const Tensor& Var::value() const { return graph->value(*this); }
const Shape& Var::shape() const { return graph->value(*this).shape; }

Var Graph::input(Tensor t) {
    Node n;
    n.kind = OpKind::leaf;
    n.needs_grad = t.requires_grad;
    n.value = std::move(t);
    return record(std::move(n));
}

Var Graph::constant(Tensor t) {
    t.requires_grad = false;
    return input(std::move(t));
}

Var Graph::param(Tensor& t) {
    Node n;
    n.kind = OpKind::leaf;
    n.bound = &t;
    n.needs_grad = t.requires_grad;
    n.value = Tensor(t.shape, t.values);
    n.value.requires_grad = t.requires_grad;
    return record(std::move(n));
}

Var Graph::record(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Graph::check_same_graph(std::span<const Var> inputs) const {
    for (const Var& v : inputs) {
        if (v.graph != this) throw ContractError("graph: input belongs to a different graph");
    }
}

Var Graph::apply(OpKind kind, std::span<const Var> inputs, OpAttrs attrs) {
    check_same_graph(inputs);
    Node n;
    n.kind = kind;
    n.attrs = std::move(attrs);
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
        n.inputs.push_back(v.id);
        n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    n.value = forward(n);
#ifndef NDEBUG
    if (!all_finite(n.value)) {
        throw DomainError(std::string(op_name(kind)) + ": non-finite output");
    }
#endif
    return record(std::move(n));
}

const Tensor& Graph::value(Var v) const { return nodes_[v.id].value; }

const std::vector<double>& Graph::grad(Var v) const {
    auto& self = const_cast<Graph&>(*this);
    if (self.grads_.size() != nodes_.size()) self.grads_.resize(nodes_.size());
    auto& g = self.grads_[v.id];
    if (g.empty()) g.assign(nodes_[v.id].value.size(), 0.0);
    return g;
}

void Graph::visit_nodes(const std::function<void(OpKind, const Tensor&)>& fn) const {
    for (const Node& n : nodes_) fn(n.kind, n.value);
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

Tensor Graph::forward(const Node& node) const {
    auto in = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
    const OpAttrs& at = node.attrs;

    switch (node.kind) {
        case OpKind::leaf:
            return node.value;

        case OpKind::matmul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            require(a.rank() == 2 && b.rank() == 2,
                    std::string("matmul: rank-2 operands required, got ") +
                        shape_str(a.shape) + " x " + shape_str(b.shape));
            require(a.shape[1] == b.shape[0],
                    "matmul: inner extents " + std::to_string(a.shape[1]) + " vs " +
                        std::to_string(b.shape[0]) + " for " + shape_str(a.shape) +
                        " x " + shape_str(b.shape));
            Tensor out(Shape{a.shape[0], b.shape[1]});
            MutMap(out.values.data(), static_cast<Eigen::Index>(a.shape[0]),
                   static_cast<Eigen::Index>(b.shape[1]))
                .noalias() = as_matrix(a, a.shape[0], a.shape[1]) *
                             as_matrix(b, b.shape[0], b.shape[1]);
            return out;
        }

        case OpKind::add: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (a.shape == b.shape) {
                Tensor out(a.shape, a.values);
                for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += b.values[i];
                return out;
            }
            // bias add along the last axis
            require(b.rank() == 1 && a.rank() >= 1 && a.shape.back() == b.shape[0],
                    "add: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                        " are neither equal nor a last-axis bias");
            Tensor out(a.shape, a.values);
            const std::size_t d = b.shape[0];
            for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += b.values[i % d];
            return out;
        }

        case OpKind::subtract: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            require(a.shape == b.shape, "subtract: shape mismatch " + shape_str(a.shape) +
                                            " vs " + shape_str(b.shape));
            Tensor out(a.shape, a.values);
            for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= b.values[i];
            return out;
        }

        case OpKind::multiply: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (b.is_scalar()) {
                Tensor out(a.shape, a.values);
                const double s = b.values[0];
                for (double& v : out.values) v *= s;
                return out;
            }
            require(a.shape == b.shape, "multiply: shape mismatch " + shape_str(a.shape) +
                                            " vs " + shape_str(b.shape));
            Tensor out(a.shape, a.values);
            for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= b.values[i];
            return out;
        }

        case OpKind::scale: {
            Tensor out(in(0).shape, in(0).values);
            for (double& v : out.values) v *= at.scalar;
            return out;
        }

        case OpKind::op_exp: {
            Tensor out(in(0).shape, in(0).values);
            for (double& v : out.values) v = std::exp(v);
            return out;
        }

        case OpKind::op_log: {
            const Tensor& a = in(0);
            Tensor out(a.shape);
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (a.values[i] <= 0.0) {
                    throw DomainError("log: non-positive input " + std::to_string(a.values[i]));
                }
                out.values[i] = std::log(a.values[i]);
            }
            return out;
        }

        case OpKind::softmax: {
            const Tensor& a = in(0);
            const AxisView v = axis_view(a.shape, at.axis, "softmax");
            Tensor out(a.shape);
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double mx = -HUGE_VAL;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        mx = std::max(mx, a.values[(o * v.len + k) * v.inner + i]);
                    }
                    double denom = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t idx = (o * v.len + k) * v.inner + i;
                        out.values[idx] = std::exp(a.values[idx] - mx);
                        denom += out.values[idx];
                    }
                    for (std::size_t k = 0; k < v.len; ++k) {
                        out.values[(o * v.len + k) * v.inner + i] /= denom;
                    }
                }
            }
            return out;
        }

        case OpKind::layer_norm: {
            const Tensor& x = in(0);
            const Tensor& g = in(1);
            const Tensor& b = in(2);
            require(x.rank() >= 1, "layer-normalize: rank >= 1 required");
            const std::size_t d = x.shape.back();
            require(g.shape == Shape{d} && b.shape == Shape{d},
                    "layer-normalize: gain/bias must be [" + std::to_string(d) + "], got " +
                        shape_str(g.shape) + " and " + shape_str(b.shape));
            const std::size_t rows = x.size() / d;
            Tensor out(x.shape);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = x.values.data() + r * d;
                double* yr = out.values.data() + r * d;
                double mu = 0.0;
                for (std::size_t j = 0; j < d; ++j) mu += xr[j];
                mu /= static_cast<double>(d);
                double var = 0.0;
                for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= static_cast<double>(d);
                const double inv_sigma = 1.0 / std::sqrt(var + at.eps);
                for (std::size_t j = 0; j < d; ++j) {
                    yr[j] = g.values[j] * (xr[j] - mu) * inv_sigma + b.values[j];
                }
            }
            return out;
        }

        case OpKind::gelu: {
            Tensor out(in(0).shape, in(0).values);
            for (double& v : out.values) v = v * gauss_cdf(v);
            return out;
        }

        case OpKind::mean:
        case OpKind::sum: {
            const Tensor& a = in(0);
            const bool is_mean = node.kind == OpKind::mean;
            if (at.axis < 0) {  // full reduction to a rank-0 scalar
                double acc = 0.0;
                for (double v : a.values) acc += v;
                if (is_mean && !a.values.empty()) acc /= static_cast<double>(a.size());
                return Tensor::scalar(acc);
            }
            const AxisView v = axis_view(a.shape, at.axis, op_name(node.kind));
            Tensor out(drop_axis(a.shape, at.axis));
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        acc += a.values[(o * v.len + k) * v.inner + i];
                    }
                    if (is_mean) acc /= static_cast<double>(v.len);
                    out.values[o * v.inner + i] = acc;
                }
            }
            return out;
        }

        case OpKind::concat: {
            require(!node.inputs.empty(), "concat: no inputs");
            const Tensor& first = in(0);
            const int axis = at.axis;
            axis_view(first.shape, axis, "concat");
            Shape out_shape = first.shape;
            std::size_t total = 0;
            for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                const Tensor& t = in(p);
                require(t.rank() == first.rank(),
                        "concat: rank mismatch " + shape_str(t.shape) + " vs " +
                            shape_str(first.shape));
                for (std::size_t ax = 0; ax < t.rank(); ++ax) {
                    if (ax == static_cast<std::size_t>(axis)) continue;
                    require(t.shape[ax] == first.shape[ax],
                            "concat: extent mismatch on axis " + std::to_string(ax) + ": " +
                                shape_str(t.shape) + " vs " + shape_str(first.shape));
                }
                total += t.shape[static_cast<std::size_t>(axis)];
            }
            out_shape[static_cast<std::size_t>(axis)] = total;
            Tensor out(out_shape);
            const AxisView ov = axis_view(out_shape, axis, "concat");
            std::size_t offset = 0;
            for (std::size_t p = 0; p < node.inputs.size(); ++p) {
                const Tensor& t = in(p);
                const AxisView tv = axis_view(t.shape, axis, "concat");
                for (std::size_t o = 0; o < tv.outer; ++o) {
                    for (std::size_t k = 0; k < tv.len; ++k) {
                        const double* src = t.values.data() + (o * tv.len + k) * tv.inner;
                        double* dst =
                            out.values.data() + (o * ov.len + offset + k) * ov.inner;
                        std::copy(src, src + tv.inner, dst);
                    }
                }
                offset += tv.len;
            }
            return out;
        }

        case OpKind::slice: {
            const Tensor& a = in(0);
            const AxisView v = axis_view(a.shape, at.axis, "slice");
            require(at.start + at.len <= v.len && at.len > 0,
                    "slice: window [" + std::to_string(at.start) + "," +
                        std::to_string(at.start + at.len) + ") exceeds extent " +
                        std::to_string(v.len) + " of " + shape_str(a.shape));
            Shape out_shape = a.shape;
            out_shape[static_cast<std::size_t>(at.axis)] = at.len;
            Tensor out(out_shape);
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t k = 0; k < at.len; ++k) {
                    const double* src =
                        a.values.data() + (o * v.len + at.start + k) * v.inner;
                    std::copy(src, src + v.inner,
                              out.values.data() + (o * at.len + k) * v.inner);
                }
            }
            return out;
        }

        case OpKind::gather: {
            const Tensor& table = in(0);
            require(table.rank() == 2, "embedding-gather: table must be rank 2, got " +
                                           shape_str(table.shape));
            const std::size_t v_rows = table.shape[0];
            const std::size_t d = table.shape[1];
            Tensor out(Shape{at.ids.size(), d});
            for (std::size_t r = 0; r < at.ids.size(); ++r) {
                const std::int32_t id = at.ids[r];
                require(id >= 0 && static_cast<std::size_t>(id) < v_rows,
                        "embedding-gather: id " + std::to_string(id) +
                            " out of range for table extent " + std::to_string(v_rows));
                std::copy(table.values.begin() + static_cast<std::ptrdiff_t>(id * d),
                          table.values.begin() + static_cast<std::ptrdiff_t>((id + 1) * d),
                          out.values.begin() + static_cast<std::ptrdiff_t>(r * d));
            }
            return out;
        }

        case OpKind::l2_normalize: {
            const Tensor& a = in(0);
            const AxisView v = axis_view(a.shape, at.axis, "l2-normalize");
            Tensor out(a.shape);
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double sq = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const double x = a.values[(o * v.len + k) * v.inner + i];
                        sq += x * x;
                    }
                    const double norm = std::sqrt(sq);
                    if (norm <= 1e-12) {
                        throw DomainError("l2-normalize: norm " + std::to_string(norm) +
                                          " below 1e-12");
                    }
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t idx = (o * v.len + k) * v.inner + i;
                        out.values[idx] = a.values[idx] / norm;
                    }
                }
            }
            return out;
        }

        case OpKind::transpose: {
            const Tensor& a = in(0);
            const int a0 = at.axis;
            const int a1 = at.axis2;
            axis_view(a.shape, a0, "transpose");
            axis_view(a.shape, a1, "transpose");
            Shape out_shape = a.shape;
            std::swap(out_shape[static_cast<std::size_t>(a0)],
                      out_shape[static_cast<std::size_t>(a1)]);
            Tensor out(out_shape);
            // strides of the input shape
            std::vector<std::size_t> stride(a.rank(), 1);
            for (std::size_t i = a.rank(); i-- > 1;) stride[i - 1] = stride[i] * a.shape[i];
            std::vector<std::size_t> idx(a.rank(), 0);
            for (std::size_t flat = 0; flat < out.size(); ++flat) {
                std::size_t src = 0;
                for (std::size_t i = 0; i < a.rank(); ++i) {
                    std::size_t which = i;
                    if (i == static_cast<std::size_t>(a0)) which = static_cast<std::size_t>(a1);
                    else if (i == static_cast<std::size_t>(a1)) which = static_cast<std::size_t>(a0);
                    src += idx[which] * stride[i];
                }
                out.values[flat] = a.values[src];
                for (std::size_t i = out_shape.size(); i-- > 0;) {
                    if (++idx[i] < out_shape[i]) break;
                    idx[i] = 0;
                }
            }
            return out;
        }

        case OpKind::reshape: {
            const Tensor& a = in(0);
            require(shape_numel(at.target) == a.size(),
                    "reshape: " + shape_str(a.shape) + " has " + std::to_string(a.size()) +
                        " elements, target " + shape_str(at.target) + " wants " +
                        std::to_string(shape_numel(at.target)));
            return Tensor(at.target, a.values);
        }
    }
    throw ContractError("graph: unknown op");
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Graph::backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss from a different graph");
    if (backward_done_) throw ContractError("backward: already run on this graph");
    const Tensor& lv = nodes_[loss.id].value;
    if (lv.size() != 1 || !lv.is_scalar()) {
        throw ContractError("backward: loss must be scalar-shaped, got " +
                            shape_str(lv.shape));
    }
    backward_done_ = true;
    grads_.assign(nodes_.size(), {});
    grads_[loss.id] = {1.0};

    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
        const Node& n = nodes_[id];
        if (!n.needs_grad || grads_[id].empty()) continue;
        if (n.kind != OpKind::leaf) backward_op(id);
#ifndef NDEBUG
        if (!all_finite(grads_[id])) {
            throw DomainError(std::string(op_name(n.kind)) + ": non-finite gradient");
        }
#endif
    }

    // Bound requires-grad leaves receive their gradient; unreachable ones get
    // explicit zeros.
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        Node& n = nodes_[id];
        if (n.kind != OpKind::leaf || n.bound == nullptr || !n.bound->requires_grad) continue;
        n.bound->ensure_grad();
        if (!grads_[id].empty()) n.bound->accumulate_grad(grads_[id]);
    }
}

void Graph::backward_op(std::uint32_t id) {
    const Node& n = nodes_[id];
    const OpAttrs& at = n.attrs;
    const std::vector<double>& dy = grads_[id];
    auto in_val = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };
    auto in_grad = [&](std::size_t i) -> std::vector<double>* {
        const std::uint32_t iid = n.inputs[i];
        if (!nodes_[iid].needs_grad) return nullptr;
        if (grads_[iid].empty()) grads_[iid].assign(nodes_[iid].value.size(), 0.0);
        return &grads_[iid];
    };

    switch (n.kind) {
        case OpKind::leaf:
            return;

        case OpKind::matmul: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
            ConstMap dyM(dy.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(c));
            if (auto* da = in_grad(0)) {
                MutMap(da->data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k))
                    .noalias() += dyM * as_matrix(b, k, c).transpose();
            }
            if (auto* db = in_grad(1)) {
                MutMap(db->data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c))
                    .noalias() += as_matrix(a, m, k).transpose() * dyM;
            }
            return;
        }

        case OpKind::add: {
            if (auto* da = in_grad(0)) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i];
            }
            if (auto* db = in_grad(1)) {
                if (in_val(0).shape == in_val(1).shape) {
                    for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i];
                } else {
                    const std::size_t d = in_val(1).shape[0];
                    for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i % d] += dy[i];
                }
            }
            return;
        }

        case OpKind::subtract: {
            if (auto* da = in_grad(0)) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i];
            }
            if (auto* db = in_grad(1)) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] -= dy[i];
            }
            return;
        }

        case OpKind::multiply: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            if (b.is_scalar()) {
                const double s = b.values[0];
                if (auto* da = in_grad(0)) {
                    for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * s;
                }
                if (auto* db = in_grad(1)) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * a.values[i];
                    (*db)[0] += acc;
                }
            } else {
                if (auto* da = in_grad(0)) {
                    for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * b.values[i];
                }
                if (auto* db = in_grad(1)) {
                    for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * a.values[i];
                }
            }
            return;
        }

        case OpKind::scale: {
            if (auto* da = in_grad(0)) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * at.scalar;
            }
            return;
        }

        case OpKind::op_exp: {
            if (auto* da = in_grad(0)) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * n.value.values[i];
            }
            return;
        }

        case OpKind::op_log: {
            if (auto* da = in_grad(0)) {
                const Tensor& a = in_val(0);
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] / a.values[i];
            }
            return;
        }

        case OpKind::softmax: {
            auto* da = in_grad(0);
            if (!da) return;
            const AxisView v = axis_view(n.value.shape, at.axis, "softmax");
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double dot = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t idx = (o * v.len + k) * v.inner + i;
                        dot += dy[idx] * n.value.values[idx];
                    }
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t idx = (o * v.len + k) * v.inner + i;
                        (*da)[idx] += n.value.values[idx] * (dy[idx] - dot);
                    }
                }
            }
            return;
        }

        case OpKind::layer_norm: {
            const Tensor& x = in_val(0);
            const Tensor& g = in_val(1);
            const std::size_t d = x.shape.back();
            const std::size_t rows = x.size() / d;
            auto* dx = in_grad(0);
            auto* dg = in_grad(1);
            auto* db = in_grad(2);
            std::vector<double> xhat(d), dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = x.values.data() + r * d;
                const double* dyr = dy.data() + r * d;
                double mu = 0.0;
                for (std::size_t j = 0; j < d; ++j) mu += xr[j];
                mu /= static_cast<double>(d);
                double var = 0.0;
                for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= static_cast<double>(d);
                const double inv_sigma = 1.0 / std::sqrt(var + at.eps);
                for (std::size_t j = 0; j < d; ++j) xhat[j] = (xr[j] - mu) * inv_sigma;
                if (dg) {
                    for (std::size_t j = 0; j < d; ++j) (*dg)[j] += dyr[j] * xhat[j];
                }
                if (db) {
                    for (std::size_t j = 0; j < d; ++j) (*db)[j] += dyr[j];
                }
                if (dx) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dxhat[j] = dyr[j] * g.values[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        (*dx)[r * d + j] +=
                            inv_sigma * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            return;
        }

        case OpKind::gelu: {
            if (auto* da = in_grad(0)) {
                const Tensor& a = in_val(0);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    const double x = a.values[i];
                    (*da)[i] += dy[i] * (gauss_cdf(x) + x * gauss_pdf(x));
                }
            }
            return;
        }

        case OpKind::mean:
        case OpKind::sum: {
            auto* da = in_grad(0);
            if (!da) return;
            const Tensor& a = in_val(0);
            const bool is_mean = n.kind == OpKind::mean;
            if (at.axis < 0) {
                const double w = is_mean ? dy[0] / static_cast<double>(a.size()) : dy[0];
                for (double& v : *da) v += w;
                return;
            }
            const AxisView v = axis_view(a.shape, at.axis, op_name(n.kind));
            const double denom = is_mean ? static_cast<double>(v.len) : 1.0;
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    const double w = dy[o * v.inner + i] / denom;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        (*da)[(o * v.len + k) * v.inner + i] += w;
                    }
                }
            }
            return;
        }

        case OpKind::concat: {
            const AxisView ov = axis_view(n.value.shape, at.axis, "concat");
            std::size_t offset = 0;
            for (std::size_t p = 0; p < n.inputs.size(); ++p) {
                const Tensor& t = in_val(p);
                const AxisView tv = axis_view(t.shape, at.axis, "concat");
                if (auto* dp = in_grad(p)) {
                    for (std::size_t o = 0; o < tv.outer; ++o) {
                        for (std::size_t k = 0; k < tv.len; ++k) {
                            const double* src =
                                dy.data() + (o * ov.len + offset + k) * ov.inner;
                            double* dst = dp->data() + (o * tv.len + k) * tv.inner;
                            for (std::size_t i = 0; i < tv.inner; ++i) dst[i] += src[i];
                        }
                    }
                }
                offset += tv.len;
            }
            return;
        }

        case OpKind::slice: {
            auto* da = in_grad(0);
            if (!da) return;
            const AxisView v = axis_view(in_val(0).shape, at.axis, "slice");
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t k = 0; k < at.len; ++k) {
                    const double* src = dy.data() + (o * at.len + k) * v.inner;
                    double* dst = da->data() + (o * v.len + at.start + k) * v.inner;
                    for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
                }
            }
            return;
        }

        case OpKind::gather: {
            auto* dt = in_grad(0);
            if (!dt) return;
            const std::size_t d = in_val(0).shape[1];
            for (std::size_t r = 0; r < at.ids.size(); ++r) {
                const std::size_t row = static_cast<std::size_t>(at.ids[r]);
                for (std::size_t j = 0; j < d; ++j) (*dt)[row * d + j] += dy[r * d + j];
            }
            return;
        }

        case OpKind::l2_normalize: {
            auto* da = in_grad(0);
            if (!da) return;
            const Tensor& a = in_val(0);
            const AxisView v = axis_view(a.shape, at.axis, "l2-normalize");
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double sq = 0.0, dot = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t idx = (o * v.len + k) * v.inner + i;
                        sq += a.values[idx] * a.values[idx];
                        dot += dy[idx] * n.value.values[idx];
                    }
                    const double norm = std::sqrt(sq);
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t idx = (o * v.len + k) * v.inner + i;
                        (*da)[idx] += (dy[idx] - n.value.values[idx] * dot) / norm;
                    }
                }
            }
            return;
        }

        case OpKind::transpose: {
            auto* da = in_grad(0);
            if (!da) return;
            const Tensor& a = in_val(0);
            const int a0 = at.axis, a1 = at.axis2;
            const Shape& out_shape = n.value.shape;
            std::vector<std::size_t> stride(a.rank(), 1);
            for (std::size_t i = a.rank(); i-- > 1;) stride[i - 1] = stride[i] * a.shape[i];
            std::vector<std::size_t> idx(a.rank(), 0);
            for (std::size_t flat = 0; flat < dy.size(); ++flat) {
                std::size_t src = 0;
                for (std::size_t i = 0; i < a.rank(); ++i) {
                    std::size_t which = i;
                    if (i == static_cast<std::size_t>(a0)) which = static_cast<std::size_t>(a1);
                    else if (i == static_cast<std::size_t>(a1)) which = static_cast<std::size_t>(a0);
                    src += idx[which] * stride[i];
                }
                (*da)[src] += dy[flat];
                for (std::size_t i = out_shape.size(); i-- > 0;) {
                    if (++idx[i] < out_shape[i]) break;
                    idx[i] = 0;
                }
            }
            return;
        }

        case OpKind::reshape: {
            if (auto* da = in_grad(0)) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i];
            }
            return;
        }
    }
}

// ---------------------------------------------------------------------------
// free-function op surface
// ---------------------------------------------------------------------------

namespace {
Graph& owner(Var v) {
    if (v.graph == nullptr) throw ContractError("op on a null Var");
    return *v.graph;
}
}  // namespace

Var matmul(Var a, Var b) { return owner(a).apply(OpKind::matmul, {{a, b}}); }
Var add(Var a, Var b) { return owner(a).apply(OpKind::add, {{a, b}}); }
Var subtract(Var a, Var b) { return owner(a).apply(OpKind::subtract, {{a, b}}); }
Var multiply(Var a, Var b) { return owner(a).apply(OpKind::multiply, {{a, b}}); }

Var scale(Var a, double c) {
    OpAttrs at;
    at.scalar = c;
    return owner(a).apply(OpKind::scale, {{a}}, std::move(at));
}

Var exp(Var a) { return owner(a).apply(OpKind::op_exp, {{a}}); }
Var log(Var a) { return owner(a).apply(OpKind::op_log, {{a}}); }

Var softmax(Var a, int axis) {
    OpAttrs at;
    at.axis = axis;
    return owner(a).apply(OpKind::softmax, {{a}}, std::move(at));
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    OpAttrs at;
    at.eps = eps;
    return owner(x).apply(OpKind::layer_norm, {{x, gain, bias}}, std::move(at));
}

Var gelu(Var a) { return owner(a).apply(OpKind::gelu, {{a}}); }

Var mean(Var a, int axis) {
    OpAttrs at;
    at.axis = axis;
    return owner(a).apply(OpKind::mean, {{a}}, std::move(at));
}

Var mean_all(Var a) {
    OpAttrs at;
    at.axis = -1;
    return owner(a).apply(OpKind::mean, {{a}}, std::move(at));
}

Var sum(Var a, int axis) {
    OpAttrs at;
    at.axis = axis;
    return owner(a).apply(OpKind::sum, {{a}}, std::move(at));
}

Var sum_all(Var a) {
    OpAttrs at;
    at.axis = -1;
    return owner(a).apply(OpKind::sum, {{a}}, std::move(at));
}

Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    OpAttrs at;
    at.axis = axis;
    return owner(parts[0]).apply(OpKind::concat, parts, std::move(at));
}

Var concat(std::initializer_list<Var> parts, int axis) {
    std::vector<Var> v(parts);
    return concat(std::span<const Var>(v), axis);
}

Var slice(Var a, int axis, std::size_t start, std::size_t len) {
    OpAttrs at;
    at.axis = axis;
    at.start = start;
    at.len = len;
    return owner(a).apply(OpKind::slice, {{a}}, std::move(at));
}

Var gather(Var table, std::span<const std::int32_t> ids) {
    OpAttrs at;
    at.ids.assign(ids.begin(), ids.end());
    return owner(table).apply(OpKind::gather, {{table}}, std::move(at));
}

Var l2_normalize(Var a, int axis) {
    OpAttrs at;
    at.axis = axis;
    return owner(a).apply(OpKind::l2_normalize, {{a}}, std::move(at));
}

Var transpose(Var a) { return transpose(a, 0, 1); }

Var transpose(Var a, int axis_a, int axis_b) {
    OpAttrs at;
    at.axis = axis_a;
    at.axis2 = axis_b;
    return owner(a).apply(OpKind::transpose, {{a}}, std::move(at));
}

Var reshape(Var a, Shape target) {
    OpAttrs at;
    at.target = std::move(target);
    return owner(a).apply(OpKind::reshape, {{a}}, std::move(at));
}

}  // namespace vlp
