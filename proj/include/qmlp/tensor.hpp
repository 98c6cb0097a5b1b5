#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "qmlp/common.hpp"

namespace qmlp {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense n-dimensional array in row-major order. Shape is fixed at
// construction; reshaped() returns a new value over the same data length.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)), data(numel_of(shape), T{}) {}

    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
    }

    Tensor(Shape s, std::initializer_list<T> d) : Tensor(std::move(s), std::vector<T>(d)) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    bool is_scalar() const { return data.size() == 1; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // Row-major multi-index access (no bounds checking beyond debug builds).
    T& at(std::initializer_list<std::size_t> idx) { return data[flat_index(idx)]; }
    const T& at(std::initializer_list<std::size_t> idx) const { return data[flat_index(idx)]; }

    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        std::size_t flat = 0;
        std::size_t d = 0;
        for (std::size_t i : idx) {
            flat = flat * shape[d] + i;
            ++d;
        }
        return flat;
    }

    Tensor reshaped(Shape s) const {
        if (numel_of(s) != data.size()) {
            throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        }
        return Tensor(std::move(s), data);
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.reserve(data.size());
        for (const T& v : data) out.data.push_back(static_cast<U>(v));
        return out;
    }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

// Mean and population variance (divide by n) over one axis.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> moments(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ContractError("moments: axis " + std::to_string(axis) + " out of range for rank " +
                            std::to_string(x.rank()));
    }
    const std::size_t n = x.shape[axis];
    if (n == 0) {
        throw DegenerateInputError("moments: empty extent along axis " + std::to_string(axis));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= x.shape[d];
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape[d];

    Shape out_shape = x.shape;
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
    Tensor<T> mean(out_shape), var(out_shape);

    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            T sum{};
            for (std::size_t k = 0; k < n; ++k) sum += x.data[(o * n + k) * inner + i];
            const T mu = sum / static_cast<T>(n);
            T sq{};
            for (std::size_t k = 0; k < n; ++k) {
                const T d = x.data[(o * n + k) * inner + i] - mu;
                sq += d * d;
            }
            mean.data[o * inner + i] = mu;
            var.data[o * inner + i] = sq / static_cast<T>(n);
        }
    }
    return {mean, var};
}

} // namespace qmlp
