// Tag-induction metrics over a cluster/gold-tag contingency table:
// Many-to-One accuracy, One-to-One accuracy (optimal assignment, not
// greedy), and V-Measure (natural-log entropies, beta = 1).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "nhmm/common.hpp"

namespace nhmm {

struct ContingencyTable {
    int clusters = 0;
    int tags = 0;
    std::vector<long> counts;  // row-major [clusters x tags]
    long total = 0;

    ContingencyTable() = default;
    ContingencyTable(int c, int t)
        : clusters(c), tags(t), counts(static_cast<std::size_t>(c) * t, 0) {}

    long at(int c, int t) const { return counts[static_cast<std::size_t>(c) * tags + t]; }

    void add(int c, int t, long n = 1) {
        counts[static_cast<std::size_t>(c) * tags + t] += n;
        total += n;
    }

    static ContingencyTable from_rows(const std::vector<std::vector<long>>& rows) {
        int c = static_cast<int>(rows.size());
        int t = c == 0 ? 0 : static_cast<int>(rows[0].size());
        ContingencyTable ct(c, t);
        for (int i = 0; i < c; ++i) {
            if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != t)
                throw ShapeError("contingency rows must have equal length");
            for (int j = 0; j < t; ++j) ct.add(i, j, rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
        }
        return ct;
    }
};

namespace detail {
inline void require_nonempty(const ContingencyTable& ct, const char* op) {
    if (ct.total <= 0 || ct.clusters == 0 || ct.tags == 0)
        throw DataError(msg(op, ": empty contingency table"));
}
}  // namespace detail

// Cluster -> most frequent gold tag (lowest tag id on ties).
inline std::vector<int> many_to_one_mapping(const ContingencyTable& ct) {
    detail::require_nonempty(ct, "many_to_one");
    std::vector<int> map(static_cast<std::size_t>(ct.clusters), 0);
    for (int c = 0; c < ct.clusters; ++c) {
        long best = -1;
        for (int t = 0; t < ct.tags; ++t)
            if (ct.at(c, t) > best) {  // strict: first (lowest-id) maximum wins
                best = ct.at(c, t);
                map[static_cast<std::size_t>(c)] = t;
            }
    }
    return map;
}

inline double many_to_one(const ContingencyTable& ct) {
    std::vector<int> map = many_to_one_mapping(ct);
    long hit = 0;
    for (int c = 0; c < ct.clusters; ++c) hit += ct.at(c, map[static_cast<std::size_t>(c)]);
    return static_cast<double>(hit) / static_cast<double>(ct.total);
}

namespace detail {
// O(n^3) Hungarian algorithm (potentials formulation) for square min-cost
// assignment; returns row -> column.
inline std::vector<int> hungarian_min(const std::vector<std::vector<double>>& a) {
    int n = static_cast<int>(a.size());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            int i0 = p[static_cast<std::size_t>(j0)], j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j)
                if (!used[static_cast<std::size_t>(j)]) {
                    double cur = a[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                                 u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                    if (cur < minv[static_cast<std::size_t>(j)]) {
                        minv[static_cast<std::size_t>(j)] = cur;
                        way[static_cast<std::size_t>(j)] = j0;
                    }
                    if (minv[static_cast<std::size_t>(j)] < delta) {
                        delta = minv[static_cast<std::size_t>(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<std::size_t>(j)] > 0)
            row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return row_to_col;
}
}  // namespace detail

// Best injective cluster -> tag assignment; clusters (or tags) beyond the
// smaller side stay unmatched and contribute 0.
inline std::vector<int> one_to_one_mapping(const ContingencyTable& ct) {
    detail::require_nonempty(ct, "one_to_one");
    int n = std::max(ct.clusters, ct.tags);
    long maxval = 0;
    for (long v : ct.counts) maxval = std::max(maxval, v);
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(n),
                                          std::vector<double>(static_cast<std::size_t>(n),
                                                              static_cast<double>(maxval)));
    for (int c = 0; c < ct.clusters; ++c)
        for (int t = 0; t < ct.tags; ++t)
            cost[static_cast<std::size_t>(c)][static_cast<std::size_t>(t)] =
                static_cast<double>(maxval - ct.at(c, t));
    std::vector<int> assign = detail::hungarian_min(cost);
    std::vector<int> map(static_cast<std::size_t>(ct.clusters), -1);
    for (int c = 0; c < ct.clusters; ++c) {
        int t = assign[static_cast<std::size_t>(c)];
        map[static_cast<std::size_t>(c)] = (t >= 0 && t < ct.tags) ? t : -1;
    }
    return map;
}

inline double one_to_one(const ContingencyTable& ct) {
    std::vector<int> map = one_to_one_mapping(ct);
    long hit = 0;
    for (int c = 0; c < ct.clusters; ++c)
        if (map[static_cast<std::size_t>(c)] >= 0) hit += ct.at(c, map[static_cast<std::size_t>(c)]);
    return static_cast<double>(hit) / static_cast<double>(ct.total);
}

struct VMeasure {
    double homogeneity = 0.0;
    double completeness = 0.0;
    double vm = 0.0;
};

inline VMeasure v_measure(const ContingencyTable& ct) {
    detail::require_nonempty(ct, "v_measure");
    double n = static_cast<double>(ct.total);
    std::vector<long> row(static_cast<std::size_t>(ct.clusters), 0), col(static_cast<std::size_t>(ct.tags), 0);
    for (int c = 0; c < ct.clusters; ++c)
        for (int t = 0; t < ct.tags; ++t) {
            row[static_cast<std::size_t>(c)] += ct.at(c, t);
            col[static_cast<std::size_t>(t)] += ct.at(c, t);
        }
    auto entropy = [&](const std::vector<long>& marg) {
        double h = 0.0;
        for (long m : marg)
            if (m > 0) {
                double p = m / n;
                h -= p * std::log(p);
            }
        return h;
    };
    double h_tag = entropy(col), h_cluster = entropy(row);
    double h_tag_given_cluster = 0.0, h_cluster_given_tag = 0.0;
    for (int c = 0; c < ct.clusters; ++c)
        for (int t = 0; t < ct.tags; ++t) {
            long v = ct.at(c, t);
            if (v <= 0) continue;
            double joint = v / n;
            h_tag_given_cluster -= joint * std::log(static_cast<double>(v) / row[static_cast<std::size_t>(c)]);
            h_cluster_given_tag -= joint * std::log(static_cast<double>(v) / col[static_cast<std::size_t>(t)]);
        }
    VMeasure r;
    r.homogeneity = h_tag == 0.0 ? 1.0 : 1.0 - h_tag_given_cluster / h_tag;
    r.completeness = h_cluster == 0.0 ? 1.0 : 1.0 - h_cluster_given_tag / h_cluster;
    double s = r.homogeneity + r.completeness;
    r.vm = s == 0.0 ? 0.0 : 2.0 * r.homogeneity * r.completeness / s;
    return r;
}

struct EvalReport {
    double m1 = 0.0;
    double o2o = 0.0;
    double homogeneity = 0.0;
    double completeness = 0.0;
    double vm = 0.0;
    ContingencyTable table;
};

inline EvalReport evaluate(const std::vector<std::vector<int>>& pred,
                           const std::vector<std::vector<int>>& gold) {
    if (pred.size() != gold.size())
        throw DataError(msg("alignment error: ", pred.size(), " predicted vs ", gold.size(),
                            " gold sentences"));
    int n_clusters = 0, n_tags = 0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        if (pred[s].size() != gold[s].size())
            throw DataError(msg("alignment error at sentence ", s, ": ", pred[s].size(),
                                " predicted vs ", gold[s].size(), " gold tokens"));
        for (int c : pred[s]) {
            if (c < 0) throw DataError(msg("negative cluster id at sentence ", s));
            n_clusters = std::max(n_clusters, c + 1);
        }
        for (int t : gold[s]) {
            if (t < 0) throw DataError(msg("negative tag id at sentence ", s));
            n_tags = std::max(n_tags, t + 1);
        }
    }
    EvalReport rep;
    rep.table = ContingencyTable(n_clusters, n_tags);
    for (std::size_t s = 0; s < pred.size(); ++s)
        for (std::size_t i = 0; i < pred[s].size(); ++i) rep.table.add(pred[s][i], gold[s][i]);
    rep.m1 = many_to_one(rep.table);
    rep.o2o = one_to_one(rep.table);
    VMeasure v = v_measure(rep.table);
    rep.homogeneity = v.homogeneity;
    rep.completeness = v.completeness;
    rep.vm = v.vm;
    return rep;
}

}  // namespace nhmm
