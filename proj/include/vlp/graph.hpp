#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vlp/tensor.hpp"

namespace vlp {

class Graph;

enum class OpKind : std::uint8_t {
    leaf,
    matmul,
    add,
    subtract,
    multiply,
    scale,
    op_exp,
    op_log,
    softmax,
    layer_norm,
    gelu,
    mean,
    sum,
    concat,
    slice,
    gather,
    l2_normalize,
    transpose,
    reshape,
};

const char* op_name(OpKind k);

/// Handle to a node in one Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::uint32_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const;
    std::size_t numel() const { return value().size(); }
};

struct OpAttrs {
    int axis = 0;
    int axis2 = 0;
    std::size_t start = 0;
    std::size_t len = 0;
    double scalar = 0.0;
    double eps = 0.0;
    std::vector<std::int32_t> ids;
    Shape target;
};

/// Reverse-mode tape over Tensors. Forward values are computed eagerly as ops
/// are recorded; backward() walks the tape once in reverse, accumulating
/// gradients additively. A Graph and its Vars are confined to one thread;
/// distinct graphs are independent.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf holding a copy of `t`. Gradients are queryable via grad() but do
    /// not propagate anywhere external.
    Var input(Tensor t);
    /// Leaf holding a constant; never requires grad.
    Var constant(Tensor t);
    Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }
    /// Leaf bound to an external tensor (copied value). If `t.requires_grad`,
    /// backward() accumulates dLoss/dt into `t.grad`; `t` must outlive the
    /// graph. Unreachable bound tensors receive zero gradients.
    Var param(Tensor& t);

    Var apply(OpKind kind, std::span<const Var> inputs, OpAttrs attrs = {});

    const Tensor& value(Var v) const;
    /// Gradient of the last backward() loss w.r.t. node `v` (zeros if the
    /// node did not participate).
    const std::vector<double>& grad(Var v) const;

    /// Reverse pass from a scalar-shaped loss. May be called once per graph.
    void backward(Var loss);

    std::size_t node_count() const { return nodes_.size(); }

    /// Read-only node inspection, for tests and diagnostics.
    void visit_nodes(const std::function<void(OpKind, const Tensor&)>& fn) const;

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<std::uint32_t> inputs;
        OpAttrs attrs;
        Tensor value;
        Tensor* bound = nullptr;
        bool needs_grad = false;
    };

    Var record(Node node);
    void check_same_graph(std::span<const Var> inputs) const;
    Tensor forward(const Node& node) const;
    void backward_op(std::uint32_t id);

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool backward_done_ = false;
    mutable std::vector<double> zero_scratch_;
};

// Primitive ops. Each records one node on the owning graph of its inputs.

/// [m,k] x [k,n] -> [m,n].
Var matmul(Var a, Var b);
/// Same-shape elementwise sum, or bias add: `b` of shape [d] added along the
/// last axis of `a`.
Var add(Var a, Var b);
Var subtract(Var a, Var b);
/// Same-shape elementwise product, or scalar broadcast when `b` is rank-0.
Var multiply(Var a, Var b);
Var scale(Var a, double c);
Var exp(Var a);
Var log(Var a);
/// Softmax along `axis`, numerically stabilized by subtracting the slice max.
Var softmax(Var a, int axis);
/// Normalizes the last axis to zero mean / unit variance, then applies
/// per-feature gain and bias (both shape [d]).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Exact Gaussian-CDF form: x * Phi(x).
Var gelu(Var a);
/// Reduce `axis` away. mean_all/sum_all reduce everything to a rank-0 scalar.
Var mean(Var a, int axis);
Var mean_all(Var a);
Var sum(Var a, int axis);
Var sum_all(Var a);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(Var a, int axis, std::size_t start, std::size_t len);
/// rows of `table` ([V,d]) selected by ids -> [ids.size(), d].
Var gather(Var table, std::span<const std::int32_t> ids);
Var l2_normalize(Var a, int axis);
/// Swap two axes (rank-2 default: swap 0 and 1).
Var transpose(Var a);
Var transpose(Var a, int axis_a, int axis_b);
/// Same values, new shape of equal element count.
Var reshape(Var a, Shape target);

}  // namespace vlp
