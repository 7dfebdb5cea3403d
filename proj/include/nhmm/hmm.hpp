// Exact log-space inference on the tagging lattice. Tag ids 0..K-1 are real
// tags; id K is the distinguished boundary tag serving as both z_0 and
// z_{n+1}, giving a sentence of length n exactly n+1 transition factors and
// n emission factors:
//
//   p(x, z) = prod_{t=1..n+1} p(z_t | z_{t-1}) * prod_{t=1..n} p(x_t | z_t)
//
// The boundary never emits and never appears at interior positions. Factor
// f (0-based, 0..n) governs the step z_f -> z_{f+1}.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "nhmm/common.hpp"
#include "nhmm/corpus.hpp"
#include "nhmm/tensor.hpp"

namespace nhmm {

constexpr double kProbFloor = 1e-12;

struct LatticePotentials {
    int n = 0;
    int K = 0;
    Tensor log_emit;                 // [n x K]
    std::vector<Tensor> log_trans;   // 1 matrix (static) or n+1 (contextual), each [(K+1) x (K+1)]

    bool contextual() const { return log_trans.size() > 1; }
    const Tensor& trans_at(int f) const {
        return contextual() ? log_trans[static_cast<std::size_t>(f)] : log_trans.front();
    }
};

inline void validate_lattice(const LatticePotentials& pot) {
    if (pot.n <= 0) throw DataError("empty sentence: lattice has no positions");
    if (pot.K < 1) throw ShapeError(msg("lattice needs K >= 1, got ", pot.K));
    if (pot.log_emit.rank() != 2 || pot.log_emit.dim(0) != pot.n || pot.log_emit.dim(1) != pot.K)
        throw ShapeError(msg("log_emit shape ", Tensor::shape_str(pot.log_emit.shape),
                             " does not match n=", pot.n, " K=", pot.K));
    std::size_t want = pot.log_trans.size();
    if (want != 1 && want != static_cast<std::size_t>(pot.n) + 1)
        throw ShapeError(msg("expected 1 or n+1 transition matrices, got ", want));
    int b = pot.K + 1;
    for (const Tensor& t : pot.log_trans)
        if (t.rank() != 2 || t.dim(0) != b || t.dim(1) != b)
            throw ShapeError(msg("transition matrix shape ", Tensor::shape_str(t.shape),
                                 " does not match K+1=", b));
}

struct PosteriorTable {
    Tensor gamma;             // [n x K], gamma[t][i] = p(z_{t+1} = i | x)   (t 0-based position)
    std::vector<Tensor> xi;   // n+1 matrices [(K+1) x (K+1)], xi[f][i][j] = p(z_f=i, z_{f+1}=j | x)
    double log_marginal = 0.0;
};

struct HmmParams {
    int K = 0;
    int V = 0;
    Tensor trans;  // [(K+1) x (K+1)] row-stochastic
    Tensor emit;   // [K x V] row-stochastic

    void validate() const {
        if (K < 1 || V < 1) throw ShapeError(msg("HmmParams needs K,V >= 1, got K=", K, " V=", V));
        if (trans.rank() != 2 || trans.dim(0) != K + 1 || trans.dim(1) != K + 1)
            throw ShapeError(msg("trans shape ", Tensor::shape_str(trans.shape), " wants K+1=", K + 1));
        if (emit.rank() != 2 || emit.dim(0) != K || emit.dim(1) != V)
            throw ShapeError(msg("emit shape ", Tensor::shape_str(emit.shape), " wants ", K, "x", V));
        for (int i = 0; i <= K; ++i) {
            double s = 0.0;
            for (int j = 0; j <= K; ++j) {
                if (trans.at(i, j) < kProbFloor)
                    throw DataError(msg("trans[", i, ",", j, "] below probability floor"));
                s += trans.at(i, j);
            }
            if (std::fabs(s - 1.0) > 1e-9)
                throw DataError(msg("trans row ", i, " sums to ", s));
        }
        for (int k = 0; k < K; ++k) {
            double s = 0.0;
            for (int v = 0; v < V; ++v) {
                if (emit.at(k, v) < kProbFloor)
                    throw DataError(msg("emit[", k, ",", v, "] below probability floor"));
                s += emit.at(k, v);
            }
            if (std::fabs(s - 1.0) > 1e-9)
                throw DataError(msg("emit row ", k, " sums to ", s));
        }
    }
};

// Lattice for one sentence under probability-domain HMM parameters.
inline LatticePotentials lattice_from_hmm(const HmmParams& hmm, const std::vector<int>& words) {
    if (words.empty()) throw DataError("empty sentence: cannot build lattice");
    LatticePotentials pot;
    pot.n = static_cast<int>(words.size());
    pot.K = hmm.K;
    pot.log_emit = Tensor({pot.n, pot.K});
    for (int t = 0; t < pot.n; ++t) {
        int w = words[static_cast<std::size_t>(t)];
        if (w < 0 || w >= hmm.V) throw DataError(msg("word id ", w, " out of range [0,", hmm.V, ")"));
        for (int k = 0; k < pot.K; ++k) pot.log_emit.at(t, k) = std::log(hmm.emit.at(k, w));
    }
    Tensor lt({hmm.K + 1, hmm.K + 1});
    for (std::size_t i = 0; i < lt.data.size(); ++i) lt.data[i] = std::log(hmm.trans.data[i]);
    pot.log_trans.push_back(std::move(lt));
    return pot;
}

// ---- forward / backward / posteriors / viterbi ----

inline std::pair<Tensor, double> forward(const LatticePotentials& pot) {
    validate_lattice(pot);
    int n = pot.n, K = pot.K, B = K;
    Tensor alpha({n, K});
    std::vector<double> tmp(static_cast<std::size_t>(K));
    {
        const Tensor& t0 = pot.trans_at(0);
        for (int i = 0; i < K; ++i) alpha.at(0, i) = t0.at(B, i) + pot.log_emit.at(0, i);
    }
    for (int t = 1; t < n; ++t) {
        const Tensor& tr = pot.trans_at(t);
        for (int j = 0; j < K; ++j) {
            for (int i = 0; i < K; ++i) tmp[static_cast<std::size_t>(i)] = alpha.at(t - 1, i) + tr.at(i, j);
            alpha.at(t, j) = log_sum_exp(tmp.data(), K) + pot.log_emit.at(t, j);
        }
    }
    const Tensor& tn = pot.trans_at(n);
    for (int i = 0; i < K; ++i) tmp[static_cast<std::size_t>(i)] = alpha.at(n - 1, i) + tn.at(i, B);
    double logm = log_sum_exp(tmp.data(), K);
    return {std::move(alpha), logm};
}

inline Tensor backward(const LatticePotentials& pot) {
    validate_lattice(pot);
    int n = pot.n, K = pot.K, B = K;
    Tensor beta({n, K});
    std::vector<double> tmp(static_cast<std::size_t>(K));
    const Tensor& tn = pot.trans_at(n);
    for (int i = 0; i < K; ++i) beta.at(n - 1, i) = tn.at(i, B);
    for (int t = n - 2; t >= 0; --t) {
        const Tensor& tr = pot.trans_at(t + 1);
        for (int i = 0; i < K; ++i) {
            for (int j = 0; j < K; ++j)
                tmp[static_cast<std::size_t>(j)] = tr.at(i, j) + pot.log_emit.at(t + 1, j) + beta.at(t + 1, j);
            beta.at(t, i) = log_sum_exp(tmp.data(), K);
        }
    }
    return beta;
}

inline PosteriorTable posteriors(const LatticePotentials& pot) {
    auto [alpha, logm] = forward(pot);
    Tensor beta = backward(pot);
    int n = pot.n, K = pot.K, B = K;

    PosteriorTable post;
    post.log_marginal = logm;
    post.gamma = Tensor({n, K});
    for (int t = 0; t < n; ++t)
        for (int i = 0; i < K; ++i)
            post.gamma.at(t, i) = std::exp(alpha.at(t, i) + beta.at(t, i) - logm);

    post.xi.reserve(static_cast<std::size_t>(n) + 1);
    for (int f = 0; f <= n; ++f) post.xi.emplace_back(Tensor({K + 1, K + 1}));
    {
        const Tensor& t0 = pot.trans_at(0);
        for (int j = 0; j < K; ++j)
            post.xi[0].at(B, j) = std::exp(t0.at(B, j) + pot.log_emit.at(0, j) + beta.at(0, j) - logm);
    }
    for (int f = 1; f < n; ++f) {
        const Tensor& tr = pot.trans_at(f);
        for (int i = 0; i < K; ++i)
            for (int j = 0; j < K; ++j)
                post.xi[static_cast<std::size_t>(f)].at(i, j) =
                    std::exp(alpha.at(f - 1, i) + tr.at(i, j) + pot.log_emit.at(f, j) +
                             beta.at(f, j) - logm);
    }
    {
        const Tensor& tn = pot.trans_at(n);
        for (int i = 0; i < K; ++i)
            post.xi[static_cast<std::size_t>(n)].at(i, B) =
                std::exp(alpha.at(n - 1, i) + tn.at(i, B) - logm);
    }
    return post;
}

// Max-product decode. delta[t][i] = best log score of completing the
// sentence from state i at position t (suffix recursion); the path is then
// reconstructed left to right taking the lowest tag id among maximizers,
// which yields the lexicographically smallest optimal path.
inline std::pair<std::vector<int>, double> viterbi(const LatticePotentials& pot) {
    validate_lattice(pot);
    int n = pot.n, K = pot.K, B = K;
    Tensor delta({n, K});
    const Tensor& tn = pot.trans_at(n);
    for (int i = 0; i < K; ++i) delta.at(n - 1, i) = tn.at(i, B);
    for (int t = n - 2; t >= 0; --t) {
        const Tensor& tr = pot.trans_at(t + 1);
        for (int i = 0; i < K; ++i) {
            double best = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < K; ++j)
                best = std::max(best, tr.at(i, j) + pot.log_emit.at(t + 1, j) + delta.at(t + 1, j));
            delta.at(t, i) = best;
        }
    }

    std::vector<int> path(static_cast<std::size_t>(n));
    const Tensor& t0 = pot.trans_at(0);
    double score = -std::numeric_limits<double>::infinity();
    int argi = 0;
    for (int i = 0; i < K; ++i) {
        double s = t0.at(B, i) + pot.log_emit.at(0, i) + delta.at(0, i);
        if (s > score) {
            score = s;
            argi = i;
        }
    }
    path[0] = argi;
    double prefix = t0.at(B, argi) + pot.log_emit.at(0, argi);
    for (int t = 1; t < n; ++t) {
        const Tensor& tr = pot.trans_at(t);
        double best = -std::numeric_limits<double>::infinity();
        int bj = 0;
        for (int j = 0; j < K; ++j) {
            double s = tr.at(path[static_cast<std::size_t>(t - 1)], j) + pot.log_emit.at(t, j) +
                       delta.at(t, j);
            if (s > best) {
                best = s;
                bj = j;
            }
        }
        path[static_cast<std::size_t>(t)] = bj;
        prefix += tr.at(path[static_cast<std::size_t>(t - 1)], bj) + pot.log_emit.at(t, bj);
    }
    prefix += pot.trans_at(n).at(path[static_cast<std::size_t>(n - 1)], B);
    return {std::move(path), prefix};
}

// ---- brute-force oracles (enumerate all K^n paths) ----

namespace detail {
inline void oracle_guard(const LatticePotentials& pot) {
    validate_lattice(pot);
    double paths = std::pow(static_cast<double>(pot.K), static_cast<double>(pot.n));
    if (paths > 1e6)
        throw UsageError(msg("lattice too large for enumeration oracle: K^n = ", paths));
}

inline double path_score(const LatticePotentials& pot, const std::vector<int>& z) {
    int n = pot.n, B = pot.K;
    double s = pot.trans_at(0).at(B, z[0]) + pot.log_emit.at(0, z[0]);
    for (int t = 1; t < n; ++t)
        s += pot.trans_at(t).at(z[static_cast<std::size_t>(t - 1)], z[static_cast<std::size_t>(t)]) +
             pot.log_emit.at(t, z[static_cast<std::size_t>(t)]);
    s += pot.trans_at(n).at(z[static_cast<std::size_t>(n - 1)], B);
    return s;
}

// Advance an odometer in lexicographic order (leftmost digit most
// significant); returns false after the last path.
inline bool next_path(std::vector<int>& z, int K) {
    for (int t = static_cast<int>(z.size()) - 1; t >= 0; --t) {
        if (++z[static_cast<std::size_t>(t)] < K) return true;
        z[static_cast<std::size_t>(t)] = 0;
    }
    return false;
}
}  // namespace detail

inline double brute_force_marginal(const LatticePotentials& pot) {
    detail::oracle_guard(pot);
    std::vector<double> scores;
    std::vector<int> z(static_cast<std::size_t>(pot.n), 0);
    do {
        scores.push_back(detail::path_score(pot, z));
    } while (detail::next_path(z, pot.K));
    return log_sum_exp(scores);
}

inline PosteriorTable brute_force_posteriors(const LatticePotentials& pot) {
    detail::oracle_guard(pot);
    int n = pot.n, K = pot.K, B = K;
    std::vector<double> scores;
    std::vector<std::vector<int>> paths;
    std::vector<int> z(static_cast<std::size_t>(n), 0);
    do {
        scores.push_back(detail::path_score(pot, z));
        paths.push_back(z);
    } while (detail::next_path(z, K));

    double logm = log_sum_exp(scores);
    PosteriorTable post;
    post.log_marginal = logm;
    post.gamma = Tensor({n, K});
    for (int f = 0; f <= n; ++f) post.xi.emplace_back(Tensor({K + 1, K + 1}));
    for (std::size_t p = 0; p < paths.size(); ++p) {
        double w = std::exp(scores[p] - logm);
        const std::vector<int>& zp = paths[p];
        for (int t = 0; t < n; ++t) post.gamma.at(t, zp[static_cast<std::size_t>(t)]) += w;
        post.xi[0].at(B, zp[0]) += w;
        for (int f = 1; f < n; ++f)
            post.xi[static_cast<std::size_t>(f)].at(zp[static_cast<std::size_t>(f - 1)],
                                                    zp[static_cast<std::size_t>(f)]) += w;
        post.xi[static_cast<std::size_t>(n)].at(zp[static_cast<std::size_t>(n - 1)], B) += w;
    }
    return post;
}

inline std::pair<std::vector<int>, double> brute_force_viterbi(const LatticePotentials& pot) {
    detail::oracle_guard(pot);
    std::vector<int> z(static_cast<std::size_t>(pot.n), 0);
    std::vector<int> best = z;
    double best_score = detail::path_score(pot, z);
    while (detail::next_path(z, pot.K)) {
        double s = detail::path_score(pot, z);
        if (s > best_score) {  // strict: first maximizer in lex order wins
            best_score = s;
            best = z;
        }
    }
    return {std::move(best), best_score};
}

// ---- classical count-based EM (Baum-Welch) ----

namespace detail {
// Normalize a row of expected counts into a probability row with every
// entry >= kProbFloor.
inline void normalize_row_floored(double* row, int len) {
    double s = 0.0;
    for (int i = 0; i < len; ++i) s += row[i];
    if (s <= 0.0) {
        for (int i = 0; i < len; ++i) row[i] = 1.0 / len;
        return;
    }
    double s2 = 0.0;
    for (int i = 0; i < len; ++i) {
        row[i] = std::max(row[i] / s, 2.0 * kProbFloor);
        s2 += row[i];
    }
    for (int i = 0; i < len; ++i) row[i] /= s2;
}
}  // namespace detail

inline HmmParams random_hmm(int K, int V, std::uint64_t seed) {
    if (K < 1 || V < 1) throw UsageError(msg("random_hmm needs K,V >= 1, got K=", K, " V=", V));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    HmmParams hmm;
    hmm.K = K;
    hmm.V = V;
    hmm.trans = Tensor({K + 1, K + 1});
    hmm.emit = Tensor({K, V});
    for (int i = 0; i <= K; ++i) {
        for (int j = 0; j <= K; ++j) hmm.trans.at(i, j) = u(rng);
        detail::normalize_row_floored(&hmm.trans.data[static_cast<std::size_t>(i) * (K + 1)], K + 1);
    }
    for (int k = 0; k < K; ++k) {
        for (int v = 0; v < V; ++v) hmm.emit.at(k, v) = u(rng);
        detail::normalize_row_floored(&hmm.emit.data[static_cast<std::size_t>(k) * V], V);
    }
    return hmm;
}

// Total corpus log-likelihood under probability-domain parameters.
inline double hmm_log_likelihood(const HmmParams& hmm, const Corpus& corpus) {
    double total = 0.0;
    for (const Sentence& s : corpus.sentences)
        total += forward(lattice_from_hmm(hmm, s.words)).second;
    return total;
}

inline HmmParams classical_em_train(const Corpus& corpus, int K, int V, int iterations,
                                    std::uint64_t seed, std::vector<double>* ll_trace = nullptr) {
    if (corpus.sentences.empty()) throw DataError("classical_em_train: empty corpus");
    if (K < 1) throw UsageError(msg("classical_em_train needs K >= 1, got ", K));
    if (iterations < 1)
        throw UsageError(msg("classical_em_train needs iterations >= 1, got ", iterations));
    for (const Sentence& s : corpus.sentences)
        for (int w : s.words)
            if (w < 0 || w >= V) throw DataError(msg("word id ", w, " out of range [0,", V, ")"));

    HmmParams hmm = random_hmm(K, V, seed);
    for (int it = 0; it < iterations; ++it) {
        Tensor trans_counts({K + 1, K + 1});
        Tensor emit_counts({K, V});
        double ll = 0.0;
        for (const Sentence& s : corpus.sentences) {
            LatticePotentials pot = lattice_from_hmm(hmm, s.words);
            PosteriorTable post = posteriors(pot);
            ll += post.log_marginal;
            int n = pot.n;
            for (int f = 0; f <= n; ++f)
                for (std::size_t i = 0; i < trans_counts.data.size(); ++i)
                    trans_counts.data[i] += post.xi[static_cast<std::size_t>(f)].data[i];
            for (int t = 0; t < n; ++t) {
                int w = s.words[static_cast<std::size_t>(t)];
                for (int k = 0; k < K; ++k) emit_counts.at(k, w) += post.gamma.at(t, k);
            }
        }
        if (ll_trace) ll_trace->push_back(ll);
        for (int i = 0; i <= K; ++i)
            detail::normalize_row_floored(&trans_counts.data[static_cast<std::size_t>(i) * (K + 1)],
                                          K + 1);
        for (int k = 0; k < K; ++k)
            detail::normalize_row_floored(&emit_counts.data[static_cast<std::size_t>(k) * V], V);
        hmm.trans = std::move(trans_counts);
        hmm.emit = std::move(emit_counts);
    }
    return hmm;
}

// ---- synthetic corpus generation (ancestral sampling) ----

inline Corpus generate_synthetic(const HmmParams& hmm, int num_sentences, int max_len,
                                 std::uint64_t seed) {
    hmm.validate();
    int K = hmm.K, B = K;
    if (hmm.trans.at(B, B) >= 1.0 - 1e-9)
        throw DataError("degenerate HmmParams: boundary self-loop probability is 1");
    if (num_sentences < 1 || max_len < 1)
        throw UsageError(msg("generate_synthetic needs positive counts, got sentences=",
                             num_sentences, " max_len=", max_len));

    std::mt19937_64 rng(derive_seed(seed, {0x73796e74ULL}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto sample_row = [&](const Tensor& m, int row, int len) {
        double r = u(rng);
        double acc = 0.0;
        for (int j = 0; j < len; ++j) {
            acc += m.at(row, j);
            if (r < acc) return j;
        }
        return len - 1;
    };

    Corpus corpus;
    corpus.source = "<synthetic>";
    for (int k = 0; k < K; ++k) corpus.tag_names.push_back(msg("t", k));

    for (int s = 0; s < num_sentences; ++s) {
        Sentence sent;
        int guard = 0;
        while (sent.words.empty()) {
            if (++guard > 10000)
                throw DataError("degenerate HmmParams: cannot sample a non-empty sentence");
            sent = Sentence{};
            int state = B;
            while (static_cast<int>(sent.words.size()) < max_len) {
                int next = sample_row(hmm.trans, state, K + 1);
                if (next == B) break;
                sent.tags.push_back(next);
                sent.words.push_back(sample_row(hmm.emit, next, hmm.V));
                state = next;
            }
        }
        corpus.total_tokens += static_cast<long>(sent.words.size());
        corpus.sentences.push_back(std::move(sent));
    }
    Fnv1a fp;
    for (const Sentence& s : corpus.sentences) {
        for (int w : s.words) fp.u64(static_cast<std::uint64_t>(w));
        fp.u64(0xffffffffULL);
    }
    corpus.fingerprint = fp.value();
    return corpus;
}

}  // namespace nhmm
