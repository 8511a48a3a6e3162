#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace vlp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of 64-bit floats. Rank 0 (empty shape) is a scalar
/// with one element. `grad`, when present, mirrors `shape` element for
/// element.
struct Tensor {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> v);

    static Tensor scalar(double v);
    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return shape.empty(); }

    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }

    /// Allocates a zero gradient if none is present.
    void ensure_grad();
    void zero_grad();
    void accumulate_grad(const std::vector<double>& g);
};

bool all_finite(const std::vector<double>& v);
bool all_finite(const Tensor& t);

}  // namespace vlp
