// Define-by-run reverse-mode differentiation. A Tape owns a sequence of
// nodes created in forward order; backward walks them in reverse. The graph
// is rebuilt on every forward pass.
//
// Leaves come in three flavors:
//   constant -- no gradient
//   input    -- aliases an external tensor; its gradient is harvested by the
//               caller (used to stitch per-sentence tapes to a shared tape)
//   leaf     -- aliases a Parameter; gradients stay tape-local until
//               collect_param_grads moves them into a GradSink

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "nhmm/optim.hpp"
#include "nhmm/tensor.hpp"

namespace nhmm {

struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
};

// Integer matrix for character id grids (vocab x max_word_len).
struct IntMat {
    int rows = 0;
    int cols = 0;
    std::vector<int> v;

    IntMat() = default;
    IntMat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0) {}
    int& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    int at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

class Tape {
  public:
    struct CnnFilter {
        int width = 0;
        Var weight;  // [channels x (width * char_dim)]
        Var bias;    // [channels]
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- leaves ----

    Var constant(Tensor t) { return push(std::move(t), false); }

    Var input(const Tensor& t) {
        Node n;
        n.external = &t;
        n.needs_grad = true;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    Var leaf(Parameter& p) {
        Node n;
        n.external = &p.tensor;
        n.param = &p;
        n.needs_grad = true;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    // ---- elementwise / arithmetic ----

    Var add(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require_same_shape(x, y, "add");
        Tensor out(x.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] + y.data[i];
        Var o = push(std::move(out), needs(a) || needs(b));
        set_back(o, [this, a, b, o] {
            const Tensor& g = *grad_of(o);
            if (needs(a)) accum(a, g.data.data());
            if (needs(b)) accum(b, g.data.data());
        });
        return o;
    }

    Var add_n(const std::vector<Var>& xs) {
        if (xs.empty()) throw UsageError("add_n: empty operand list");
        Tensor out = val(xs[0]);
        bool ng = needs(xs[0]);
        for (std::size_t k = 1; k < xs.size(); ++k) {
            const Tensor& x = val(xs[k]);
            require_same_shape(out, x, "add_n");
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += x.data[i];
            ng = ng || needs(xs[k]);
        }
        Var o = push(std::move(out), ng);
        set_back(o, [this, xs, o] {
            const Tensor& g = *grad_of(o);
            for (Var x : xs)
                if (needs(x)) accum(x, g.data.data());
        });
        return o;
    }

    Var scale(Var a, double c) {
        Tensor out = val(a);
        for (double& v : out.data) v *= c;
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, c, o] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += c * g.data[i];
        });
        return o;
    }

    Var mul(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        require_same_shape(x, y, "mul");
        Tensor out(x.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * y.data[i];
        Var o = push(std::move(out), needs(a) || needs(b));
        set_back(o, [this, a, b, o] {
            const Tensor& g = *grad_of(o);
            if (needs(a)) {
                const Tensor& y = val(b);
                Tensor& ga = grad_buf(a);
                for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i];
            }
            if (needs(b)) {
                const Tensor& x = val(a);
                Tensor& gb = grad_buf(b);
                for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * x.data[i];
            }
        });
        return o;
    }

    // Elementwise product with a constant weight tensor (posterior scaling).
    Var mul_const(Var a, Tensor w) {
        const Tensor& x = val(a);
        require_same_shape(x, w, "mul_const");
        Tensor out(x.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * w.data[i];
        Var o = push(std::move(out), needs(a));
        auto wp = std::make_shared<Tensor>(std::move(w));
        set_back(o, [this, a, o, wp] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * wp->data[i];
        });
        return o;
    }

    // ---- linear algebra ----

    // [m x k] @ [k x n] -> [m x n]
    Var matmul(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0))
            throw ShapeError(msg("matmul: incompatible shapes ", Tensor::shape_str(x.shape),
                                 " vs ", Tensor::shape_str(y.shape)));
        int m = x.dim(0), k = x.dim(1), n = y.dim(1);
        Tensor out({m, n});
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                double xv = x.at(i, p);
                if (xv == 0.0) continue;
                for (int j = 0; j < n; ++j) out.at(i, j) += xv * y.at(p, j);
            }
        Var o = push(std::move(out), needs(a) || needs(b));
        set_back(o, [this, a, b, o, m, k, n] {
            const Tensor& g = *grad_of(o);
            if (needs(a)) {
                const Tensor& y = val(b);
                Tensor& ga = grad_buf(a);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gv = g.at(i, j);
                        if (gv == 0.0) continue;
                        for (int p = 0; p < k; ++p) ga.at(i, p) += gv * y.at(p, j);
                    }
            }
            if (needs(b)) {
                const Tensor& x = val(a);
                Tensor& gb = grad_buf(b);
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double xv = x.at(i, p);
                        if (xv == 0.0) continue;
                        for (int j = 0; j < n; ++j) gb.at(p, j) += xv * g.at(i, j);
                    }
            }
        });
        return o;
    }

    // [m x k] @ [n x k]^T -> [m x n]
    Var matmul_nt(Var a, Var b) {
        const Tensor& x = val(a);
        const Tensor& y = val(b);
        if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1))
            throw ShapeError(msg("matmul_nt: incompatible shapes ", Tensor::shape_str(x.shape),
                                 " vs ", Tensor::shape_str(y.shape)));
        int m = x.dim(0), k = x.dim(1), n = y.dim(0);
        Tensor out({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int p = 0; p < k; ++p) s += x.at(i, p) * y.at(j, p);
                out.at(i, j) = s;
            }
        Var o = push(std::move(out), needs(a) || needs(b));
        set_back(o, [this, a, b, o, m, k, n] {
            const Tensor& g = *grad_of(o);
            if (needs(a)) {
                const Tensor& y = val(b);
                Tensor& ga = grad_buf(a);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gv = g.at(i, j);
                        if (gv == 0.0) continue;
                        for (int p = 0; p < k; ++p) ga.at(i, p) += gv * y.at(j, p);
                    }
            }
            if (needs(b)) {
                const Tensor& x = val(a);
                Tensor& gb = grad_buf(b);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gv = g.at(i, j);
                        if (gv == 0.0) continue;
                        for (int p = 0; p < k; ++p) gb.at(j, p) += gv * x.at(i, p);
                    }
            }
        });
        return o;
    }

    // [k] @ [k x n] -> [n]
    Var vecmat(Var v, Var m) {
        const Tensor& x = val(v);
        const Tensor& w = val(m);
        if (x.rank() != 1 || w.rank() != 2 || x.dim(0) != w.dim(0))
            throw ShapeError(msg("vecmat: incompatible shapes ", Tensor::shape_str(x.shape),
                                 " vs ", Tensor::shape_str(w.shape)));
        int k = x.dim(0), n = w.dim(1);
        Tensor out({n});
        for (int p = 0; p < k; ++p) {
            double xv = x.at(p);
            if (xv == 0.0) continue;
            for (int j = 0; j < n; ++j) out.at(j) += xv * w.at(p, j);
        }
        Var o = push(std::move(out), needs(v) || needs(m));
        set_back(o, [this, v, m, o, k, n] {
            const Tensor& g = *grad_of(o);
            if (needs(v)) {
                const Tensor& w = val(m);
                Tensor& gv = grad_buf(v);
                for (int p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) s += g.at(j) * w.at(p, j);
                    gv.at(p) += s;
                }
            }
            if (needs(m)) {
                const Tensor& x = val(v);
                Tensor& gw = grad_buf(m);
                for (int p = 0; p < k; ++p) {
                    double xv = x.at(p);
                    if (xv == 0.0) continue;
                    for (int j = 0; j < n; ++j) gw.at(p, j) += xv * g.at(j);
                }
            }
        });
        return o;
    }

    Var add_rowvec(Var m, Var v) {
        const Tensor& x = val(m);
        const Tensor& b = val(v);
        if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
            throw ShapeError(msg("add_rowvec: incompatible shapes ", Tensor::shape_str(x.shape),
                                 " vs ", Tensor::shape_str(b.shape)));
        int r = x.dim(0), c = x.dim(1);
        Tensor out(x.shape);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + b.at(j);
        Var o = push(std::move(out), needs(m) || needs(v));
        set_back(o, [this, m, v, o, r, c] {
            const Tensor& g = *grad_of(o);
            if (needs(m)) accum(m, g.data.data());
            if (needs(v)) {
                Tensor& gb = grad_buf(v);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb.at(j) += g.at(i, j);
            }
        });
        return o;
    }

    Var add_colvec(Var m, Var v) {
        const Tensor& x = val(m);
        const Tensor& b = val(v);
        if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(0))
            throw ShapeError(msg("add_colvec: incompatible shapes ", Tensor::shape_str(x.shape),
                                 " vs ", Tensor::shape_str(b.shape)));
        int r = x.dim(0), c = x.dim(1);
        Tensor out(x.shape);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + b.at(i);
        Var o = push(std::move(out), needs(m) || needs(v));
        set_back(o, [this, m, v, o, r, c] {
            const Tensor& g = *grad_of(o);
            if (needs(m)) accum(m, g.data.data());
            if (needs(v)) {
                Tensor& gb = grad_buf(v);
                for (int i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < c; ++j) s += g.at(i, j);
                    gb.at(i) += s;
                }
            }
        });
        return o;
    }

    // ---- nonlinearities ----

    Var relu(Var a) {
        Tensor out = val(a);
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, o] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            const Tensor& x = val(a);
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (x.data[i] > 0.0) ga.data[i] += g.data[i];
        });
        return o;
    }

    Var sigmoid(Var a) {
        Tensor out = val(a);
        for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, o] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            const Tensor& y = val(o);
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                double s = y.data[i];
                ga.data[i] += g.data[i] * s * (1.0 - s);
            }
        });
        return o;
    }

    Var tanh(Var a) {
        Tensor out = val(a);
        for (double& v : out.data) v = std::tanh(v);
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, o] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            const Tensor& y = val(o);
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i)
                ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
        });
        return o;
    }

    // ---- softmax / logsumexp ----

    // Row-wise log softmax of a 2-D tensor (max-shifted).
    Var log_softmax_rows(Var a) {
        const Tensor& x = val(a);
        if (x.rank() != 2) throw ShapeError("log_softmax_rows: expected 2-D tensor");
        int r = x.dim(0), c = x.dim(1);
        Tensor out(x.shape);
        for (int i = 0; i < r; ++i) {
            double lse = log_sum_exp(&x.data[static_cast<std::size_t>(i) * c], c);
            for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) - lse;
        }
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, o, r, c] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            const Tensor& y = val(o);
            Tensor& ga = grad_buf(a);
            for (int i = 0; i < r; ++i) {
                double gs = 0.0;
                for (int j = 0; j < c; ++j) gs += g.at(i, j);
                for (int j = 0; j < c; ++j)
                    ga.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gs;
            }
        });
        return o;
    }

    Var log_softmax_vec(Var a) {
        const Tensor& x = val(a);
        if (x.rank() != 1) throw ShapeError("log_softmax_vec: expected 1-D tensor");
        int n = x.dim(0);
        Var m = reshape(a, {1, n});
        return reshape(log_softmax_rows(m), {n});
    }

    // Reduce rows: out[j] = logsumexp_i x[i][j].
    Var logsumexp_cols(Var a) {
        const Tensor& x = val(a);
        if (x.rank() != 2) throw ShapeError("logsumexp_cols: expected 2-D tensor");
        int r = x.dim(0), c = x.dim(1);
        Tensor out({c});
        for (int j = 0; j < c; ++j) {
            double m = -std::numeric_limits<double>::infinity();
            for (int i = 0; i < r; ++i) m = std::max(m, x.at(i, j));
            double s = 0.0;
            for (int i = 0; i < r; ++i) s += std::exp(x.at(i, j) - m);
            out.at(j) = m + std::log(s);
        }
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, o, r, c] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            const Tensor& y = val(o);
            const Tensor& x = val(a);
            Tensor& ga = grad_buf(a);
            for (int j = 0; j < c; ++j) {
                double gv = g.at(j);
                if (gv == 0.0) continue;
                for (int i = 0; i < r; ++i) ga.at(i, j) += gv * std::exp(x.at(i, j) - y.at(j));
            }
        });
        return o;
    }

    // logsumexp over every entry -> scalar.
    Var logsumexp_all(Var a) {
        const Tensor& x = val(a);
        double lse = log_sum_exp(x.data.data(), static_cast<int>(x.data.size()));
        Var o = push(Tensor::scalar(lse), needs(a));
        set_back(o, [this, a, o] {
            if (!needs(a)) return;
            double gv = grad_of(o)->at(0);
            if (gv == 0.0) return;
            const Tensor& x = val(a);
            double lse = val(o).at(0);
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < x.data.size(); ++i)
                ga.data[i] += gv * std::exp(x.data[i] - lse);
        });
        return o;
    }

    // ---- gathers / slices ----

    // Gather rows of a [R x D] table -> [len x D].
    Var lookup_rows(Var table, std::vector<int> ids) {
        const Tensor& t = val(table);
        if (t.rank() != 2) throw ShapeError("lookup_rows: expected 2-D table");
        int rows = t.dim(0), d = t.dim(1);
        for (int id : ids)
            if (id < 0 || id >= rows)
                throw DataError(msg("lookup: index ", id, " out of range [0,", rows, ")"));
        int len = static_cast<int>(ids.size());
        Tensor out({len, d});
        for (int i = 0; i < len; ++i)
            for (int j = 0; j < d; ++j) out.at(i, j) = t.at(ids[static_cast<std::size_t>(i)], j);
        Var o = push(std::move(out), needs(table));
        auto idp = std::make_shared<std::vector<int>>(std::move(ids));
        set_back(o, [this, table, o, idp, d] {
            if (!needs(table)) return;
            const Tensor& g = *grad_of(o);
            Tensor& gt = grad_buf(table);
            for (std::size_t i = 0; i < idp->size(); ++i)
                for (int j = 0; j < d; ++j)
                    gt.at((*idp)[i], j) += g.at(static_cast<int>(i), j);
        });
        return o;
    }

    // From a [K x V] table, build [n x K] with out[t][k] = m[k][ids[t]].
    Var gather_cols_t(Var m, std::vector<int> ids) {
        const Tensor& t = val(m);
        if (t.rank() != 2) throw ShapeError("gather_cols_t: expected 2-D table");
        int k = t.dim(0), vcols = t.dim(1);
        for (int id : ids)
            if (id < 0 || id >= vcols)
                throw DataError(msg("gather_cols_t: column ", id, " out of range [0,", vcols, ")"));
        int n = static_cast<int>(ids.size());
        Tensor out({n, k});
        for (int p = 0; p < n; ++p)
            for (int q = 0; q < k; ++q) out.at(p, q) = t.at(q, ids[static_cast<std::size_t>(p)]);
        Var o = push(std::move(out), needs(m));
        auto idp = std::make_shared<std::vector<int>>(std::move(ids));
        set_back(o, [this, m, o, idp, k] {
            if (!needs(m)) return;
            const Tensor& g = *grad_of(o);
            Tensor& gt = grad_buf(m);
            for (std::size_t p = 0; p < idp->size(); ++p)
                for (int q = 0; q < k; ++q) gt.at(q, (*idp)[p]) += g.at(static_cast<int>(p), q);
        });
        return o;
    }

    // Contiguous block copy of a 2-D tensor.
    Var block(Var m, int r0, int c0, int h, int w) {
        const Tensor& x = val(m);
        if (x.rank() != 2 || r0 < 0 || c0 < 0 || r0 + h > x.dim(0) || c0 + w > x.dim(1))
            throw ShapeError(msg("block: [", r0, ",", c0, ",", h, ",", w, "] out of ",
                                 Tensor::shape_str(x.shape)));
        Tensor out({h, w});
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) out.at(i, j) = x.at(r0 + i, c0 + j);
        Var o = push(std::move(out), needs(m));
        set_back(o, [this, m, o, r0, c0, h, w] {
            if (!needs(m)) return;
            const Tensor& g = *grad_of(o);
            Tensor& gm = grad_buf(m);
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) gm.at(r0 + i, c0 + j) += g.at(i, j);
        });
        return o;
    }

    Var row(Var m, int i) { return reshape(block(m, i, 0, 1, val(m).dim(1)), {val(m).dim(1)}); }
    Var col(Var m, int j) { return reshape(block(m, 0, j, val(m).dim(0), 1), {val(m).dim(0)}); }

    Var slice(Var v, int start, int len) {
        const Tensor& x = val(v);
        if (x.rank() != 1 || start < 0 || start + len > x.dim(0))
            throw ShapeError(msg("slice: [", start, ",", len, ") out of ",
                                 Tensor::shape_str(x.shape)));
        Tensor out({len});
        for (int i = 0; i < len; ++i) out.at(i) = x.at(start + i);
        Var o = push(std::move(out), needs(v));
        set_back(o, [this, v, o, start, len] {
            if (!needs(v)) return;
            const Tensor& g = *grad_of(o);
            Tensor& gv = grad_buf(v);
            for (int i = 0; i < len; ++i) gv.at(start + i) += g.at(i);
        });
        return o;
    }

    Var reshape(Var a, std::vector<int> shape) {
        const Tensor& x = val(a);
        if (Tensor::numel_of(shape) != x.numel())
            throw ShapeError(msg("reshape: cannot view ", Tensor::shape_str(x.shape), " as ",
                                 Tensor::shape_str(shape)));
        Tensor out(std::move(shape), x.data);
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, o] {
            if (!needs(a)) return;
            accum(a, grad_of(o)->data.data());
        });
        return o;
    }

    Var sum_all(Var a) {
        const Tensor& x = val(a);
        double s = 0.0;
        for (double v : x.data) s += v;
        Var o = push(Tensor::scalar(s), needs(a));
        set_back(o, [this, a, o] {
            if (!needs(a)) return;
            double gv = grad_of(o)->at(0);
            Tensor& ga = grad_buf(a);
            for (double& g : ga.data) g += gv;
        });
        return o;
    }

    // ---- stochastic / structured ops ----

    // Inverted dropout: zero with probability rate, scale survivors by
    // 1/(1-rate). Callers skip this op entirely in evaluation mode.
    Var dropout(Var a, double rate, std::mt19937_64& rng) {
        if (rate < 0.0 || rate >= 1.0)
            throw UsageError(msg("dropout rate ", rate, " outside [0,1)"));
        if (rate == 0.0) return a;
        const Tensor& x = val(a);
        double keep = 1.0 - rate;
        std::uniform_real_distribution<double> u(0.0, 1.0);
        auto mask = std::make_shared<std::vector<double>>(x.data.size());
        Tensor out(x.shape);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            double m = u(rng) < rate ? 0.0 : 1.0 / keep;
            (*mask)[i] = m;
            out.data[i] = x.data[i] * m;
        }
        Var o = push(std::move(out), needs(a));
        set_back(o, [this, a, o, mask] {
            if (!needs(a)) return;
            const Tensor& g = *grad_of(o);
            Tensor& ga = grad_buf(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * (*mask)[i];
        });
        return o;
    }

    // Character convolution over the whole vocabulary with max-over-time
    // pooling, one output block per kernel width. char_ids is [V x L]; each
    // filter f of width w scores window p as
    //   sum_{u<w,d} weight[f][u*Dc+d] * embed[char_ids[v][p+u]][d] + bias[f]
    // and the block output is the max over p. Gradients route through the
    // argmax window (first maximal position on ties).
    Var char_cnn(Var char_embed, const std::vector<CnnFilter>& filters, const IntMat& char_ids) {
        const Tensor& emb = val(char_embed);
        if (emb.rank() != 2) throw ShapeError("char_cnn: embedding table must be 2-D");
        int dc = emb.dim(1);
        int vocab = char_ids.rows, len = char_ids.cols;
        for (int idx : char_ids.v)
            if (idx < 0 || idx >= emb.dim(0))
                throw DataError(msg("char_cnn: char id ", idx, " out of range [0,", emb.dim(0), ")"));

        int total = 0;
        bool ng = needs(char_embed);
        for (const auto& f : filters) {
            const Tensor& w = val(f.weight);
            const Tensor& b = val(f.bias);
            if (f.width <= 0 || f.width > len)
                throw ShapeError(msg("char_cnn: width ", f.width, " exceeds padded length ", len));
            if (w.rank() != 2 || w.dim(1) != f.width * dc || b.rank() != 1 || b.dim(0) != w.dim(0))
                throw ShapeError("char_cnn: filter shapes inconsistent with width/char dim");
            total += w.dim(0);
            ng = ng || needs(f.weight) || needs(f.bias);
        }

        Tensor out({vocab, total});
        auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(vocab) * total);
        int off = 0;
        for (const auto& f : filters) {
            const Tensor& w = val(f.weight);
            const Tensor& b = val(f.bias);
            int channels = w.dim(0), width = f.width;
            int positions = len - width + 1;
            for (int v = 0; v < vocab; ++v) {
                for (int c = 0; c < channels; ++c) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_p = 0;
                    for (int p = 0; p < positions; ++p) {
                        double s = b.at(c);
                        for (int u = 0; u < width; ++u) {
                            int ch = char_ids.at(v, p + u);
                            for (int d = 0; d < dc; ++d)
                                s += w.at(c, u * dc + d) * emb.at(ch, d);
                        }
                        if (s > best) {
                            best = s;
                            best_p = p;
                        }
                    }
                    out.at(v, off + c) = best;
                    (*arg)[static_cast<std::size_t>(v) * total + off + c] = best_p;
                }
            }
            off += channels;
        }

        Var o = push(std::move(out), ng);
        auto ids = std::make_shared<IntMat>(char_ids);
        set_back(o, [this, char_embed, filters, o, arg, ids, dc, total] {
            const Tensor& g = *grad_of(o);
            const Tensor& emb = val(char_embed);
            int vocab = ids->rows;
            int off = 0;
            for (const auto& f : filters) {
                const Tensor& w = val(f.weight);
                int channels = w.dim(0), width = f.width;
                Tensor* gw = needs(f.weight) ? &grad_buf(f.weight) : nullptr;
                Tensor* gb = needs(f.bias) ? &grad_buf(f.bias) : nullptr;
                Tensor* ge = needs(char_embed) ? &grad_buf(char_embed) : nullptr;
                for (int v = 0; v < vocab; ++v)
                    for (int c = 0; c < channels; ++c) {
                        double gv = g.at(v, off + c);
                        if (gv == 0.0) continue;
                        int p = (*arg)[static_cast<std::size_t>(v) * total + off + c];
                        if (gb) gb->at(c) += gv;
                        for (int u = 0; u < width; ++u) {
                            int ch = ids->at(v, p + u);
                            for (int d = 0; d < dc; ++d) {
                                if (gw) gw->at(c, u * dc + d) += gv * emb.at(ch, d);
                                if (ge) ge->at(ch, d) += gv * w.at(c, u * dc + d);
                            }
                        }
                    }
                off += channels;
            }
        });
        return o;
    }

    // ---- access / backward ----

    const Tensor& val(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.i)];
        return n.external ? *n.external : n.owned;
    }

    bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.i)].needs_grad; }

    const Tensor* grad_of(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.i)];
        return n.grad.data.empty() ? nullptr : &n.grad;
    }

    Tensor& grad_buf(Var v) {
        Node& n = nodes_[static_cast<std::size_t>(v.i)];
        if (n.grad.data.empty()) n.grad = Tensor::zeros(val(v).shape);
        return n.grad;
    }

    // Seed d(loss)/d(loss) = 1 and run the reverse sweep.
    void backward(Var loss) {
        if (val(loss).numel() != 1) throw UsageError("backward: loss must be scalar");
        grad_buf(loss).at(0) += 1.0;
        backward_accumulated();
    }

    // Reverse sweep using whatever output gradients are already present
    // (set via grad_buf / add_grad).
    void backward_accumulated() {
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.needs_grad || !n.backprop || n.grad.data.empty()) continue;
            n.backprop();
        }
    }

    void add_grad(Var v, const Tensor& g) {
        Tensor& buf = grad_buf(v);
        require_same_shape(buf, g, "add_grad");
        for (std::size_t i = 0; i < g.data.size(); ++i) buf.data[i] += g.data[i];
    }

    // Move tape-local parameter gradients into a sink (applied serially by
    // the caller). Touched leaves only.
    void collect_param_grads(GradSink& sink) {
        for (auto& n : nodes_) {
            if (n.param && !n.grad.data.empty()) {
                sink.add(n.param, std::move(n.grad));
                n.grad = Tensor();
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Parameter* param = nullptr;
        Tensor grad;
        std::function<void()> backprop;
        bool needs_grad = false;
    };

    Var push(Tensor value, bool needs_grad) {
#ifndef NDEBUG
        for (double v : value.data)
            if (!std::isfinite(v)) throw NumericError("tape op produced non-finite value");
#endif
        Node n;
        n.owned = std::move(value);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(Var v, std::function<void()> f) {
        Node& n = nodes_[static_cast<std::size_t>(v.i)];
        if (n.needs_grad) n.backprop = std::move(f);
    }

    // Accumulate a same-shaped raw gradient into a node's buffer.
    void accum(Var v, const double* g) {
        Tensor& buf = grad_buf(v);
        for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g[i];
    }

    std::vector<Node> nodes_;
};

// y = xW + b for a batch of row vectors.
inline Var linear(Tape& tp, Var x, Var w, Var b) { return tp.add_rowvec(tp.matmul(x, w), b); }

// One LSTM cell step. Weights are stored input-major ([D_in x 4H], [H x 4H])
// so a step is two vector-matrix products; the combined bias is [4H] with
// gate layout [input | forget | candidate | output].
struct LstmLayerVars {
    Var w_ih;
    Var w_hh;
    Var bias;
    int hidden = 0;
};

struct LstmStateVars {
    Var h;
    Var c;
};

inline LstmStateVars lstm_step(Tape& tp, const LstmLayerVars& p, Var x, const LstmStateVars& st) {
    Var z = tp.add(tp.add(tp.vecmat(x, p.w_ih), tp.vecmat(st.h, p.w_hh)), p.bias);
    int h = p.hidden;
    Var gi = tp.sigmoid(tp.slice(z, 0, h));
    Var gf = tp.sigmoid(tp.slice(z, h, h));
    Var gg = tp.tanh(tp.slice(z, 2 * h, h));
    Var go = tp.sigmoid(tp.slice(z, 3 * h, h));
    Var c = tp.add(tp.mul(gf, st.c), tp.mul(gi, gg));
    Var hh = tp.mul(go, tp.tanh(c));
    return {hh, c};
}

}  // namespace nhmm
