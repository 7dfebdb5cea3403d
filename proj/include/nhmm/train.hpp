// Training: Direct Marginal Likelihood (backprop straight through the
// forward recursion) or generalized EM (posterior-scaled surrogate with
// posteriors frozen per inner loop), with per-batch inner loops, global-norm
// clipping, and Adam.
//
// Batch passes use a two-stage tape layout: one shared tape computes the
// emission table (and the static transition matrix), then per-sentence
// tapes run the lattice recursion against `input` aliases of those tables.
// Per-sentence tapes are independent and may run on worker threads; their
// gradients land in per-chunk buffers that are reduced in fixed chunk
// order, and the chunk layout depends only on the batch, so a run is
// bit-reproducible regardless of the thread count.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "nhmm/common.hpp"
#include "nhmm/hmm.hpp"
#include "nhmm/model.hpp"
#include "nhmm/optim.hpp"
#include "nhmm/tape.hpp"

namespace nhmm {

enum class Objective { Dml, Em };

inline Objective parse_objective(const std::string& s) {
    if (s == "dml") return Objective::Dml;
    if (s == "em") return Objective::Em;
    throw UsageError(msg("unknown objective '", s, "' (expected dml|em)"));
}

inline const char* to_string(Objective o) { return o == Objective::Dml ? "dml" : "em"; }

struct TrainConfig {
    Objective objective = Objective::Dml;
    int batch_size = 256;
    int max_len = 40;
    int epochs = 5;
    int max_inner_loops = 6;
    double inner_convergence = 1e-4;
    double clip_norm = 5.0;
    std::uint64_t seed = 0;
    int threads = 1;
    AdamConfig adam;

    void validate() const {
        if (batch_size < 1 || max_len < 1 || epochs < 1 || max_inner_loops < 1 || threads < 1)
            throw UsageError("train config counts must be positive");
        if (inner_convergence <= 0.0 || clip_norm <= 0.0)
            throw UsageError("inner_convergence and clip_norm must be positive");
    }
};

struct BatchRecord {
    int epoch = 0;
    int batch = 0;
    int steps = 0;
    double loss = 0.0;  // first-step loss, i.e. the batch loss entering the inner loop
};

struct TrainReport {
    std::vector<BatchRecord> batches;
    std::vector<double> epoch_ll_per_token;
    long filtered_sentences = 0;
    std::uint64_t param_checksum = 0;
    double wall_clock_seconds = 0.0;  // diagnostics only; never serialized

    void write(std::ostream& out) const {
        char buf[160];
        for (const BatchRecord& b : batches) {
            std::snprintf(buf, sizeof buf, "batch epoch=%d index=%d steps=%d loss=%.17g\n",
                          b.epoch, b.batch, b.steps, b.loss);
            out << buf;
        }
        for (std::size_t e = 0; e < epoch_ll_per_token.size(); ++e) {
            std::snprintf(buf, sizeof buf, "epoch index=%zu ll_per_token=%.17g\n", e,
                          epoch_ll_per_token[e]);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "final filtered_sentences=%ld param_checksum=%016llx\n",
                      filtered_sentences,
                      static_cast<unsigned long long>(param_checksum));
        out << buf;
    }
};

using Batch = std::vector<const std::vector<int>*>;

// Upper bound on per-batch work chunks. Bounds the memory spent on per-chunk
// gradient buffers while leaving enough pieces for worker threads to balance.
constexpr int kMaxChunks = 32;

// Run `body(c)` for every chunk index in [0, n_chunks). Workers pull chunk
// indices from a shared counter; which worker runs a chunk never affects the
// result because each chunk writes only its own accumulator.
template <class Body>
void run_chunks(Body&& body, int n_chunks, int threads) {
    int n_workers = std::min(std::max(threads, 1), n_chunks);
    if (n_workers <= 1) {
        for (int c = 0; c < n_chunks; ++c) body(c);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int c = next.fetch_add(1); c < n_chunks; c = next.fetch_add(1)) body(c);
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& w : pool) w.join();
}

// Inner-loop convergence rule on the batch log probability: relative change
// below the threshold. Loss and log probability differ only in sign, which
// the absolute values cancel.
inline bool inner_converged(double old_lp, double new_lp, double tol) {
    double denom = std::fabs(old_lp);
    if (denom == 0.0) return new_lp == old_lp;
    return std::fabs(new_lp - old_lp) / denom < tol;
}

// ---- differentiable per-sentence losses ----

// Forward recursion on the tape; returns the scalar log marginal.
inline Var lattice_log_marginal(Tape& tp, Var emit_rows, const std::vector<Var>& trans, int K) {
    int n = tp.val(emit_rows).dim(0);
    int B = K;
    auto tr = [&](int f) { return trans.size() == 1 ? trans[0] : trans[static_cast<std::size_t>(f)]; };
    Var a = tp.add(tp.reshape(tp.block(tr(0), B, 0, 1, K), {K}), tp.row(emit_rows, 0));
    for (int t = 1; t < n; ++t) {
        Var inner = tp.add_colvec(tp.block(tr(t), 0, 0, K, K), a);
        a = tp.add(tp.logsumexp_cols(inner), tp.row(emit_rows, t));
    }
    Var exit_col = tp.reshape(tp.block(tr(n), 0, K, K, 1), {K});
    return tp.logsumexp_all(tp.add(a, exit_col));
}

// Posterior-scaled complete-data loss with frozen posteriors:
//   -( sum_t gamma_t . log emit_t  +  sum_f xi_f . log trans_f )
inline Var em_sentence_loss_var(Tape& tp, Var emit_rows, const std::vector<Var>& trans,
                                const PosteriorTable& post, int K) {
    int n = tp.val(emit_rows).dim(0);
    if (post.gamma.rank() != 2 || post.gamma.dim(0) != n || post.gamma.dim(1) != K ||
        static_cast<int>(post.xi.size()) != n + 1)
        throw ShapeError(msg("posterior/sentence length mismatch: gamma ",
                             Tensor::shape_str(post.gamma.shape), " vs n=", n, " K=", K));
    std::vector<Var> terms;
    terms.push_back(tp.sum_all(tp.mul_const(emit_rows, post.gamma)));
    if (trans.size() == 1) {
        Tensor xi_sum({K + 1, K + 1});
        for (const Tensor& x : post.xi)
            for (std::size_t i = 0; i < xi_sum.data.size(); ++i) xi_sum.data[i] += x.data[i];
        terms.push_back(tp.sum_all(tp.mul_const(trans[0], xi_sum)));
    } else {
        for (int f = 0; f <= n; ++f)
            terms.push_back(tp.sum_all(
                tp.mul_const(trans[static_cast<std::size_t>(f)], post.xi[static_cast<std::size_t>(f)])));
    }
    return tp.scale(tp.add_n(terms), -1.0);
}

// ---- batch pass (loss and optionally gradients) ----

struct BatchPassResult {
    double loss = 0.0;
    long tokens = 0;
};

inline BatchPassResult batch_pass(Model& model, const Batch& batch, Objective objective,
                                  const std::vector<PosteriorTable>* frozen, bool training,
                                  std::uint64_t step_seed, int threads, bool with_grad) {
    if (batch.empty()) throw UsageError("batch must be non-empty");
    if (objective == Objective::Em && (!frozen || frozen->size() != batch.size()))
        throw UsageError("em objective needs one frozen posterior table per sentence");
    int K = model.config.K;
    bool static_mode = model.config.transition_mode == TransitionMode::Static;

    // Stage 1: shared tape. No nodes may be added after the value
    // references below are taken (input() aliases them by address).
    Tape shared;
    Var emission = model.emission_var(shared);
    Var strans{};
    if (static_mode) strans = model.static_trans_var(shared);
    const Tensor& etab = shared.val(emission);
    const Tensor* ttab = static_mode ? &shared.val(strans) : nullptr;

    int s_count = static_cast<int>(batch.size());
    // The chunk layout is a function of the batch alone, never of the thread
    // count: per-chunk partial sums always merge in the same order, so results
    // are bit-identical for any --threads value. Workers just pull chunks.
    int n_chunks = std::min(s_count, kMaxChunks);

    struct ChunkAcc {
        Tensor d_emit;
        Tensor d_trans;
        GradSink sink;
        double loss = 0.0;
        long tokens = 0;
        std::exception_ptr error;
    };
    std::vector<ChunkAcc> chunks(static_cast<std::size_t>(n_chunks));

    auto run_chunk = [&](int c) {
        ChunkAcc& acc = chunks[static_cast<std::size_t>(c)];
        try {
            if (with_grad) {
                acc.d_emit = Tensor::zeros(etab.shape);
                if (static_mode) acc.d_trans = Tensor::zeros(ttab->shape);
            }
            int lo = static_cast<int>(static_cast<long>(c) * s_count / n_chunks);
            int hi = static_cast<int>(static_cast<long>(c + 1) * s_count / n_chunks);
            for (int s = lo; s < hi; ++s) {
                const std::vector<int>& words = *batch[static_cast<std::size_t>(s)];
                Tape tp;
                Var e_in = tp.input(etab);
                Var emit_rows = tp.gather_cols_t(e_in, words);
                std::vector<Var> trans;
                if (static_mode) {
                    trans.push_back(tp.input(*ttab));
                } else {
                    std::mt19937_64 drop_rng(derive_seed(step_seed, {0x64726fULL,
                                                                    static_cast<std::uint64_t>(s)}));
                    trans = model.contextual_trans_vars(tp, words, training, &drop_rng);
                }
                Var loss_var;
                if (objective == Objective::Dml)
                    loss_var = tp.scale(lattice_log_marginal(tp, emit_rows, trans, K), -1.0);
                else
                    loss_var = em_sentence_loss_var(tp, emit_rows, trans,
                                                    (*frozen)[static_cast<std::size_t>(s)], K);
                double lv = tp.val(loss_var).at(0);
                if (!std::isfinite(lv))
                    throw NumericError(msg("non-finite loss at batch sentence ", s));
                acc.loss += lv;
                acc.tokens += static_cast<long>(words.size());
                if (with_grad) {
                    tp.backward(loss_var);
                    if (const Tensor* g = tp.grad_of(e_in))
                        for (std::size_t i = 0; i < g->data.size(); ++i)
                            acc.d_emit.data[i] += g->data[i];
                    if (static_mode)
                        if (const Tensor* g = tp.grad_of(trans[0]))
                            for (std::size_t i = 0; i < g->data.size(); ++i)
                                acc.d_trans.data[i] += g->data[i];
                    tp.collect_param_grads(acc.sink);
                }
            }
        } catch (...) {
            acc.error = std::current_exception();
        }
    };

    run_chunks(run_chunk, n_chunks, threads);
    for (ChunkAcc& acc : chunks)
        if (acc.error) std::rethrow_exception(acc.error);

    BatchPassResult res;
    for (ChunkAcc& acc : chunks) {
        res.loss += acc.loss;
        res.tokens += acc.tokens;
    }
    if (with_grad) {
        GradSink master;
        for (ChunkAcc& acc : chunks) {
            shared.add_grad(emission, acc.d_emit);
            if (static_mode) shared.add_grad(strans, acc.d_trans);
            master.merge_from(acc.sink);
        }
        shared.backward_accumulated();
        shared.collect_param_grads(master);
        master.apply();
    }
    return res;
}

// Evaluation-mode posteriors for every sentence (E-step; dropout off).
inline std::vector<PosteriorTable> compute_posteriors(Model& model, const Batch& batch,
                                                      int threads) {
    Tensor etab = model.emission_log_probs();
    std::vector<PosteriorTable> out(batch.size());
    int s_count = static_cast<int>(batch.size());
    int n_chunks = std::max(std::min(s_count, kMaxChunks), 1);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chunks));
    auto run_chunk = [&](int c) {
        try {
            int lo = static_cast<int>(static_cast<long>(c) * s_count / n_chunks);
            int hi = static_cast<int>(static_cast<long>(c + 1) * s_count / n_chunks);
            for (int s = lo; s < hi; ++s)
                out[static_cast<std::size_t>(s)] =
                    posteriors(model.potentials_eval(*batch[static_cast<std::size_t>(s)], etab));
        } catch (...) {
            errors[static_cast<std::size_t>(c)] = std::current_exception();
        }
    };
    run_chunks(run_chunk, n_chunks, threads);
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

// ---- public loss entry points ----

inline Batch as_batch(const std::vector<std::vector<int>>& sents) {
    Batch b;
    b.reserve(sents.size());
    for (const auto& s : sents) b.push_back(&s);
    return b;
}

inline double dml_loss(Model& model, const Batch& batch, bool training_mode,
                       std::uint64_t seed = 0, int threads = 1) {
    return batch_pass(model, batch, Objective::Dml, nullptr, training_mode, seed, threads, false)
        .loss;
}

inline double em_surrogate_loss(Model& model, const Batch& batch,
                                const std::vector<PosteriorTable>& frozen,
                                bool training_mode = false, std::uint64_t seed = 0,
                                int threads = 1) {
    return batch_pass(model, batch, Objective::Em, &frozen, training_mode, seed, threads, false)
        .loss;
}

// Max absolute difference between the EM-surrogate gradient (at the point
// where the posteriors were computed) and the DML gradient. The Fisher
// identity says this is zero.
inline double fisher_identity_gap(Model& model, const Batch& batch) {
    std::vector<PosteriorTable> post = compute_posteriors(model, batch, 1);
    auto params = model.params();
    for (Parameter* p : params) {
        p->tensor.ensure_grad();
        p->tensor.zero_grad();
    }
    batch_pass(model, batch, Objective::Em, &post, false, 0, 1, true);
    std::vector<std::vector<double>> em_grads;
    for (Parameter* p : params) {
        em_grads.push_back(p->tensor.grad);
        p->tensor.zero_grad();
    }
    batch_pass(model, batch, Objective::Dml, nullptr, false, 0, 1, true);
    double gap = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& dml_g = params[i]->tensor.grad;
        for (std::size_t j = 0; j < dml_g.size(); ++j)
            gap = std::max(gap, std::fabs(dml_g[j] - em_grads[i][j]));
        params[i]->tensor.zero_grad();
    }
    return gap;
}

// ---- inner loop and epoch driver ----

struct InnerResult {
    int steps = 0;
    double first_loss = 0.0;
    long tokens = 0;
};

inline InnerResult inner_loop(Model& model, const Batch& batch, const TrainConfig& cfg, int epoch,
                              int batch_index) {
    std::vector<PosteriorTable> frozen;
    const std::vector<PosteriorTable>* fp = nullptr;
    if (cfg.objective == Objective::Em) {
        frozen = compute_posteriors(model, batch, cfg.threads);
        fp = &frozen;
    }
    auto params = model.params();
    InnerResult res;
    double prev = 0.0;
    for (int k = 1; k <= cfg.max_inner_loops; ++k) {
        std::uint64_t step_seed =
            derive_seed(cfg.seed, {0x73746570ULL, static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(batch_index),
                                   static_cast<std::uint64_t>(k)});
        BatchPassResult r =
            batch_pass(model, batch, cfg.objective, fp, true, step_seed, cfg.threads, true);
        if (k == 1) {
            res.first_loss = r.loss;
            res.tokens = r.tokens;
        }
        if (k >= 2 && inner_converged(prev, r.loss, cfg.inner_convergence)) {
            for (Parameter* p : params)
                if (p->tensor.has_grad()) p->tensor.zero_grad();
            res.steps = k - 1;
            return res;
        }
        clip_global_norm(params, cfg.clip_norm);
        adam_step(params, cfg.adam);
        prev = r.loss;
    }
    res.steps = cfg.max_inner_loops;
    return res;
}

inline TrainReport train(Model& model, const Corpus& corpus, const TrainConfig& cfg) {
    cfg.validate();
    if (corpus.sentences.empty()) throw DataError("training corpus is empty");
    Batch pool;
    for (const Sentence& s : corpus.sentences)
        if (static_cast<int>(s.words.size()) <= cfg.max_len) pool.push_back(&s.words);
    if (pool.empty())
        throw DataError(msg("no sentences of length <= ", cfg.max_len, " to train on"));

    TrainReport report;
    report.filtered_sentences = static_cast<long>(pool.size());
    auto t0 = std::chrono::steady_clock::now();
    for (int e = 0; e < cfg.epochs; ++e) {
        Batch order = pool;
        std::mt19937_64 shuf(derive_seed(cfg.seed, {0x65706f6368ULL, static_cast<std::uint64_t>(e)}));
        std::shuffle(order.begin(), order.end(), shuf);
        double epoch_loss = 0.0;
        long epoch_tokens = 0;
        int n_batches =
            static_cast<int>((order.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                             static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < n_batches; ++b) {
            std::size_t lo = static_cast<std::size_t>(b) * cfg.batch_size;
            std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
            Batch batch(order.begin() + static_cast<long>(lo), order.begin() + static_cast<long>(hi));
            InnerResult ir = inner_loop(model, batch, cfg, e, b);
            report.batches.push_back({e, b, ir.steps, ir.first_loss});
            epoch_loss += ir.first_loss;
            epoch_tokens += ir.tokens;
        }
        report.epoch_ll_per_token.push_back(-epoch_loss / static_cast<double>(epoch_tokens));
    }
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.param_checksum = model.param_checksum();
    return report;
}

}  // namespace nhmm
