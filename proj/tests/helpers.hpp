// Shared test utilities: random tensors, naive oracles, and a wrapper that
// runs finite differences over a graph-builder callback.

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "nhmm/nhmm.hpp"

namespace nt {

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline nhmm::Tensor rand_tensor(std::vector<int> shape, std::mt19937_64& g, double lo = -1.0,
                                double hi = 1.0) {
    nhmm::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.data) v = d(g);
    return t;
}

// Random values bounded away from zero (for kinked functions like relu).
inline nhmm::Tensor rand_tensor_away_from_zero(std::vector<int> shape, std::mt19937_64& g,
                                               double lo = 0.2, double hi = 1.0) {
    nhmm::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    std::bernoulli_distribution sign(0.5);
    for (double& v : t.data) v = (sign(g) ? 1.0 : -1.0) * d(g);
    return t;
}

inline nhmm::Parameter rand_param(const std::string& name, std::vector<int> shape,
                                  std::mt19937_64& g, double lo = -1.0, double hi = 1.0) {
    return nhmm::Parameter(name, rand_tensor(std::move(shape), g, lo, hi));
}

// Finite differences for a graph built fresh on every call. The builder gets
// a tape plus one leaf per parameter (same order) and returns the scalar
// loss variable.
inline double fd_builder(
    const std::function<nhmm::Var(nhmm::Tape&, const std::vector<nhmm::Var>&)>& build,
    const std::vector<nhmm::Parameter*>& params, double h = 1e-5, int max_coords = 64,
    std::uint64_t seed = 0) {
    auto f = [&](bool with_grad) {
        nhmm::Tape tp;
        std::vector<nhmm::Var> leaves;
        leaves.reserve(params.size());
        for (nhmm::Parameter* p : params) leaves.push_back(tp.leaf(*p));
        nhmm::Var loss = build(tp, leaves);
        double v = tp.val(loss).at(0);
        if (with_grad) {
            tp.backward(loss);
            nhmm::GradSink sink;
            tp.collect_param_grads(sink);
            sink.apply();
        }
        return v;
    };
    nhmm::GradCheckOptions opt;
    opt.h = h;
    opt.max_coords = max_coords;
    opt.seed = seed;
    return nhmm::finite_diff_check_detail(f, params, opt).max_rel_err;
}

// ---- naive reference implementations ----

inline nhmm::Tensor naive_matmul(const nhmm::Tensor& a, const nhmm::Tensor& b) {
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    nhmm::Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
            out.at(i, j) = s;
        }
    return out;
}

inline nhmm::Tensor naive_matmul_nt(const nhmm::Tensor& a, const nhmm::Tensor& b) {
    int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    nhmm::Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += a.at(i, t) * b.at(j, t);
            out.at(i, j) = s;
        }
    return out;
}

inline double naive_lse(const std::vector<double>& xs) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

inline double max_abs_diff(const nhmm::Tensor& a, const nhmm::Tensor& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

// Writes `text` to a fresh file under /tmp and returns the path.
inline std::string write_temp(const std::string& stem, const std::string& text) {
    std::string path = "/tmp/" + stem;
    std::FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
    return path;
}

}  // namespace nt
