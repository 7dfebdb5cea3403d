// Dense row-major tensor of doubles with an optional gradient buffer.
// The single numeric currency of the library.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "nhmm/common.hpp"

namespace nhmm {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty, or same length as data

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape))
            throw ShapeError(msg("tensor data length ", data.size(), " does not match shape ",
                                 shape_str(shape)));
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError(msg("non-positive dimension in shape ", shape_str(s)));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

    int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 1 : shape[0]); }
    int cols() const { return shape.size() == 2 ? shape[1] : 1; }

    double& at(int i) { return data[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data[static_cast<std::size_t>(i)]; }
    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    bool has_grad() const { return grad.size() == data.size() && !data.empty(); }
    void zero_grad() {
        if (has_grad()) std::fill(grad.begin(), grad.end(), 0.0);
    }
    void drop_grad() { grad.clear(); }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        t.fill(v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor vec(std::vector<double> d) {
        int n = static_cast<int>(d.size());
        return Tensor({n}, std::move(d));
    }
    static Tensor mat(int r, int c, std::vector<double> d) { return Tensor({r, c}, std::move(d)); }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(msg(op, ": shape mismatch ", Tensor::shape_str(a.shape), " vs ",
                             Tensor::shape_str(b.shape)));
}

inline void check_finite(const Tensor& t, const char* context) {
    if (!t.all_finite()) throw NumericError(msg("non-finite value in ", context));
}

// Stable log(sum(exp(xs))) over a raw range.
inline double log_sum_exp(const double* x, int n) {
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) m = std::max(m, x[i]);
    if (!std::isfinite(m)) return m;  // all -inf
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(x[i] - m);
    return m + std::log(s);
}

inline double log_sum_exp(const std::vector<double>& x) {
    return log_sum_exp(x.data(), static_cast<int>(x.size()));
}

inline std::uint64_t tensor_checksum(const Tensor& t, Fnv1a& h) {
    h.u64(t.shape.size());
    for (int d : t.shape) h.u64(static_cast<std::uint64_t>(d));
    for (double v : t.data) h.f64(v);
    return h.value();
}

}  // namespace nhmm
