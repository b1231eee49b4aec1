#pragma once

// Dense row-major float64 tensors. Values are immutable once handed to the
// tape; mutation happens only through the optimizer on parameter storage.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "protext/common.hpp"

namespace protext::num {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    Tensor(std::vector<std::size_t> shape_, std::vector<double> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (element_count(shape) != data.size()) {
            throw ValidationError("tensor shape/data mismatch: shape holds " +
                                  std::to_string(element_count(shape)) + " elements, data holds " +
                                  std::to_string(data.size()));
        }
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t s : shape) {
            n *= s;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        const std::size_t n = element_count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        const std::size_t n = element_count(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    static Tensor gaussian(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0) {
        const std::size_t n = element_count(shape);
        std::vector<double> d(n);
        for (double& x : d) {
            x = stddev * rng.gaussian();
        }
        return Tensor(std::move(shape), std::move(d));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return data.size() == 1; }

    std::size_t rows() const { return rank() >= 1 ? shape[0] : 1; }
    std::size_t cols() const { return rank() >= 2 ? shape[1] : 1; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool all_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool bitwise_equal(const Tensor& other) const {
        return shape == other.shape &&
               std::equal(data.begin(), data.end(), other.data.begin(), other.data.end(),
                          [](double a, double b) {
                              std::uint64_t ua, ub;
                              std::memcpy(&ua, &a, sizeof a);
                              std::memcpy(&ub, &b, sizeof b);
                              return ua == ub;
                          });
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            s += (i ? "x" : "") + std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline void require_finite(const Tensor& t, std::string_view where) {
    if (!t.all_finite()) {
        throw NumericError("non-finite value produced by " + std::string(where));
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ValidationError("cosine: dimension mismatch " + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()));
    }
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw NumericError("cosine of zero vector");
    }
    return dot(a, b) / (na * nb);
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    return cosine_similarity(std::span<const double>(a.data),
                             std::span<const double>(b.data));
}

}  // namespace protext::num
