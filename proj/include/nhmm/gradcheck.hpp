// Finite-difference verification of backprop gradients.
//
// The callable contract: f(true) evaluates the loss at the current parameter
// values AND accumulates d loss / d theta into each parameter's grad buffer;
// f(false) evaluates the loss only. Both must be deterministic (fixed rng
// streams, dropout disabled) -- the checker re-evaluates and errors out if
// the value is not bit-identical.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nhmm/common.hpp"
#include "nhmm/optim.hpp"

namespace nhmm {

struct GradCheckOptions {
    double h = 1e-5;
    int max_coords = 64;  // per-tensor sub-sample cap
    std::uint64_t seed = 0;
};

struct GradCheckCoord {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    GradCheckCoord worst;
    int coords_checked = 0;
};

// Relative error with an absolute floor: differences at or below 1e-8 count
// as exact agreement, larger ones are scaled by the bigger magnitude.
inline double grad_rel_err(double analytic, double numeric) {
    double diff = std::fabs(analytic - numeric);
    if (diff <= 1e-8) return 0.0;
    double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return diff / scale;
}

inline GradCheckResult finite_diff_check_detail(const std::function<double(bool)>& f,
                                                const std::vector<Parameter*>& params,
                                                const GradCheckOptions& opt = {}) {
    for (Parameter* p : params) {
        p->tensor.ensure_grad();
        p->tensor.zero_grad();
    }
    double base = f(true);
    if (!std::isfinite(base)) throw NumericError(msg("gradcheck: loss is not finite (", base, ")"));
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->tensor.grad);

    double replay = f(false);
    if (replay != base)
        throw NumericError(msg("gradcheck: loss not deterministic under fixed seed (", base,
                               " vs ", replay, ")"));

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        std::size_t n = p->tensor.numel();
        if (n == 0) continue;

        std::vector<std::size_t> coords;
        if (n <= static_cast<std::size_t>(opt.max_coords)) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            std::mt19937_64 rng(derive_seed(opt.seed, {0x6764636bULL, pi}));
            std::uniform_int_distribution<std::size_t> pick(0, n - 1);
            std::vector<char> seen(n, 0);
            while (coords.size() < static_cast<std::size_t>(opt.max_coords)) {
                std::size_t i = pick(rng);
                if (!seen[i]) {
                    seen[i] = 1;
                    coords.push_back(i);
                }
            }
        }

        for (std::size_t i : coords) {
            double orig = p->tensor.data[i];
            p->tensor.data[i] = orig + opt.h;
            double fp = f(false);
            p->tensor.data[i] = orig - opt.h;
            double fm = f(false);
            p->tensor.data[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError(msg("gradcheck: perturbed loss not finite at ", p->name,
                                       "[", i, "]"));
            double numeric = (fp - fm) / (2.0 * opt.h);
            double err = grad_rel_err(analytic[pi][i], numeric);
            ++res.coords_checked;
            if (err >= res.max_rel_err) {
                res.max_rel_err = err;
                res.worst = {p->name, i, analytic[pi][i], numeric, err};
            }
        }
    }
    for (Parameter* p : params) p->tensor.zero_grad();
    return res;
}

inline double finite_diff_check(const std::function<double(bool)>& f,
                                const std::vector<Parameter*>& params, double h = 1e-5) {
    GradCheckOptions opt;
    opt.h = h;
    return finite_diff_check_detail(f, params, opt).max_rel_err;
}

}  // namespace nhmm
