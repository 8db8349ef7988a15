#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tada {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ')';
    return os.str();
}

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar holding one value.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        for (auto& e : t.data) e = v;
        return t;
    }
    static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    void fill(T v) {
        for (auto& e : data) e = v;
    }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
    T acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace tada
