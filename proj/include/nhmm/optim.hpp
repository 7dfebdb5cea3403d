// Trainable parameters, initializers, Adam, and global-norm clipping.

#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "nhmm/tensor.hpp"

namespace nhmm {

struct Parameter {
    Tensor tensor;
    std::string name;
    Tensor adam_m;
    Tensor adam_v;
    std::uint64_t step_count = 0;

    Parameter() = default;
    Parameter(std::string n, Tensor t) : tensor(std::move(t)), name(std::move(n)) {
        adam_m = Tensor::zeros(tensor.shape);
        adam_v = Tensor::zeros(tensor.shape);
    }

    void zero_grad() { tensor.zero_grad(); }
};

// Initialization recipes. gaussian-unit: N(0,1). uniform-fanin: mean 0,
// std sqrt(1/fan_in), i.e. U(-a,a) with a = sqrt(3/fan_in). lstm-gaussian:
// N(0, 1/(2*hidden)). uniform-eps: U(-eps, eps). forget-bias-one: zeros with
// the forget-gate slice set to 1 (for a [4H] LSTM bias laid out i,f,g,o).
struct InitSpec {
    enum class Kind { GaussianUnit, UniformFanIn, LstmGaussian, UniformEps, ForgetBiasOne };
    Kind kind = Kind::GaussianUnit;
    int fan_in = 0;
    int hidden_units = 0;
    double eps = 0.0;

    static InitSpec gaussian_unit() { return {Kind::GaussianUnit, 0, 0, 0.0}; }
    static InitSpec uniform_fan_in(int fan) { return {Kind::UniformFanIn, fan, 0, 0.0}; }
    static InitSpec lstm_gaussian(int hidden) { return {Kind::LstmGaussian, 0, hidden, 0.0}; }
    static InitSpec uniform_eps(double e) { return {Kind::UniformEps, 0, 0, e}; }
    static InitSpec forget_bias_one() { return {Kind::ForgetBiasOne, 0, 0, 0.0}; }
};

inline void initialize(Tensor& t, const InitSpec& spec, std::mt19937_64& rng) {
    switch (spec.kind) {
        case InitSpec::Kind::GaussianUnit: {
            std::normal_distribution<double> d(0.0, 1.0);
            for (double& v : t.data) v = d(rng);
            break;
        }
        case InitSpec::Kind::UniformFanIn: {
            if (spec.fan_in <= 0) throw UsageError("uniform-fanin requires positive fan_in");
            double a = std::sqrt(3.0 / spec.fan_in);
            std::uniform_real_distribution<double> d(-a, a);
            for (double& v : t.data) v = d(rng);
            break;
        }
        case InitSpec::Kind::LstmGaussian: {
            if (spec.hidden_units <= 0) throw UsageError("lstm-gaussian requires positive hidden_units");
            std::normal_distribution<double> d(0.0, std::sqrt(1.0 / (2.0 * spec.hidden_units)));
            for (double& v : t.data) v = d(rng);
            break;
        }
        case InitSpec::Kind::UniformEps: {
            if (spec.eps <= 0.0) throw UsageError("uniform-eps requires positive eps");
            std::uniform_real_distribution<double> d(-spec.eps, spec.eps);
            for (double& v : t.data) v = d(rng);
            break;
        }
        case InitSpec::Kind::ForgetBiasOne: {
            // Gate layout along the last axis: [input | forget | candidate | output].
            if (t.rank() != 1 || t.dim(0) % 4 != 0)
                throw ShapeError("forget-bias-one expects a [4H] bias vector");
            int h = t.dim(0) / 4;
            t.fill(0.0);
            for (int i = h; i < 2 * h; ++i) t.at(i) = 1.0;
            break;
        }
    }
}

// Adam defaults: lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction; zeroes gradients afterwards.
// Parameters without an allocated gradient buffer are treated as zero-grad.
inline void adam_step(const std::vector<Parameter*>& params, const AdamConfig& cfg = {}) {
    for (Parameter* p : params) {
        p->step_count += 1;
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step_count));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step_count));
        const bool has_g = p->tensor.has_grad();
        for (std::size_t i = 0; i < p->tensor.data.size(); ++i) {
            double g = has_g ? p->tensor.grad[i] : 0.0;
            double m = cfg.beta1 * p->adam_m.data[i] + (1.0 - cfg.beta1) * g;
            double v = cfg.beta2 * p->adam_v.data[i] + (1.0 - cfg.beta2) * g * g;
            p->adam_m.data[i] = m;
            p->adam_v.data[i] = v;
            double mhat = m / bc1;
            double vhat = v / bc2;
            p->tensor.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        p->zero_grad();
    }
}

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm. Idempotent.
inline double clip_global_norm(const std::vector<Parameter*>& params, double max_norm) {
    double sq = 0.0;
    for (Parameter* p : params) {
        if (!p->tensor.has_grad()) continue;
        for (double g : p->tensor.grad) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double s = max_norm / norm;
        for (Parameter* p : params) {
            if (!p->tensor.has_grad()) continue;
            for (double& g : p->tensor.grad) g *= s;
        }
    }
    return norm;
}

// Accumulated per-tape parameter gradients, applied serially so that the
// reduction order (and hence the result bits) is independent of thread
// scheduling.
struct GradSink {
    std::vector<std::pair<Parameter*, Tensor>> entries;

    void add(Parameter* p, Tensor g) { entries.emplace_back(p, std::move(g)); }

    void apply() {
        for (auto& [p, g] : entries) {
            p->tensor.ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) p->tensor.grad[i] += g.data[i];
        }
        entries.clear();
    }

    void merge_from(GradSink& other) {
        for (auto& e : other.entries) entries.emplace_back(e.first, std::move(e.second));
        other.entries.clear();
    }
};

}  // namespace nhmm
