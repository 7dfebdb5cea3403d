// Classical (count-based) Baum-Welch: closed-form single-state updates,
// monotone likelihood, and structure recovery on separable data.

#include "helpers.hpp"

using namespace nhmm;
using Catch::Approx;

namespace {

Corpus corpus_from_ids(const std::vector<std::vector<int>>& sents) {
    Corpus c;
    for (const auto& w : sents) {
        Sentence s;
        s.words = w;
        s.tags.assign(w.size(), -1);
        c.sentences.push_back(std::move(s));
        c.total_tokens += static_cast<long>(w.size());
    }
    return c;
}

}  // namespace

TEST_CASE("single-state EM reduces to unigram counting") {
    // With K = 1 the posteriors are trivial, so one EM iteration must set
    // the emission row to empirical word frequencies and the transition row
    // to (continue, stop) = ((N - S) / N, S / N).
    Corpus corpus = corpus_from_ids({{0, 1, 0, 2}, {2, 2}, {0, 1, 1, 1, 2}});
    long N = 11, S = 3;
    std::vector<long> wc = {3, 4, 4};  // tallies of words 0, 1, 2 above

    HmmParams hmm = classical_em_train(corpus, 1, 3, 1, 123);
    for (int v = 0; v < 3; ++v)
        REQUIRE(hmm.emit.at(0, v) ==
                Approx(static_cast<double>(wc[static_cast<std::size_t>(v)]) / N).margin(1e-9));
    REQUIRE(hmm.trans.at(0, 0) == Approx(static_cast<double>(N - S) / N).margin(1e-9));
    REQUIRE(hmm.trans.at(0, 1) == Approx(static_cast<double>(S) / N).margin(1e-9));
    // Boundary row: every sentence starts with the single state.
    REQUIRE(hmm.trans.at(1, 0) == Approx(1.0).margin(1e-9));
}

TEST_CASE("EM log likelihood never decreases") {
    HmmParams gen = random_hmm(3, 12, 77);
    Corpus corpus = generate_synthetic(gen, 250, 10, 4);

    std::vector<double> trace;
    classical_em_train(corpus, 3, 12, 20, 5, &trace);
    REQUIRE(trace.size() == 20);
    for (std::size_t i = 1; i < trace.size(); ++i)
        REQUIRE(trace[i] >= trace[i - 1] - 1e-9);
    // It should actually learn something, not just not regress.
    REQUIRE(trace.back() > trace.front());
}

TEST_CASE("EM recovers two states with disjoint vocabularies") {
    // Ground truth: state 0 emits words {0,1,2}, state 1 emits {3,4,5},
    // with sticky transitions. Supports are disjoint, so EM must separate
    // them nearly perfectly from raw text.
    HmmParams gen;
    gen.K = 2;
    gen.V = 6;
    gen.trans = Tensor::mat(3, 3,
                            {0.60, 0.15, 0.25,
                             0.15, 0.60, 0.25,
                             0.50, 0.45, 0.05});
    gen.emit = Tensor::mat(2, 6,
                           {0.5, 0.3, 0.2, 1e-11, 1e-11, 1e-11,
                            1e-11, 1e-11, 1e-11, 0.2, 0.3, 0.5});
    for (int k = 0; k < 2; ++k) {
        double s = 0.0;
        for (int v = 0; v < 6; ++v) s += gen.emit.at(k, v);
        for (int v = 0; v < 6; ++v) gen.emit.at(k, v) /= s;
    }
    gen.validate();
    Corpus corpus = generate_synthetic(gen, 600, 12, 8);

    HmmParams learned = classical_em_train(corpus, 2, 6, 40, 3);

    // Each learned state's emission mass concentrates on one support half.
    double mass_low_0 = learned.emit.at(0, 0) + learned.emit.at(0, 1) + learned.emit.at(0, 2);
    double mass_low_1 = learned.emit.at(1, 0) + learned.emit.at(1, 1) + learned.emit.at(1, 2);
    bool split = (mass_low_0 > 0.98 && mass_low_1 < 0.02) ||
                 (mass_low_0 < 0.02 && mass_low_1 > 0.98);
    REQUIRE(split);

    // Viterbi decoding against gold tags scores near-perfect many-to-one.
    std::vector<std::vector<int>> pred, gold;
    for (const Sentence& s : corpus.sentences) {
        pred.push_back(viterbi(lattice_from_hmm(learned, s.words)).first);
        gold.push_back(s.tags);
    }
    EvalReport r = evaluate(pred, gold);
    REQUIRE(r.m1 >= 0.99);
    REQUIRE(r.o2o >= 0.99);
}

TEST_CASE("EM per-token likelihood approaches the generator's") {
    HmmParams gen = random_hmm(2, 8, 31);
    Corpus corpus = generate_synthetic(gen, 400, 10, 6);
    HmmParams learned = classical_em_train(corpus, 2, 8, 30, 2);
    double ll_gen = hmm_log_likelihood(gen, corpus) / static_cast<double>(corpus.total_tokens);
    double ll_fit = hmm_log_likelihood(learned, corpus) / static_cast<double>(corpus.total_tokens);
    // Fitting the sample should do at least as well as the generator did,
    // minus a small optimization slack.
    REQUIRE(ll_fit >= ll_gen - 0.05);
}

TEST_CASE("EM input validation") {
    Corpus empty;
    REQUIRE_THROWS_AS(classical_em_train(empty, 2, 5, 3, 0), DataError);
    Corpus corpus = corpus_from_ids({{0, 1}});
    REQUIRE_THROWS_AS(classical_em_train(corpus, 0, 5, 3, 0), UsageError);
    REQUIRE_THROWS_AS(classical_em_train(corpus, 2, 5, 0, 0), UsageError);
    // Word id outside the declared vocabulary.
    Corpus oov = corpus_from_ids({{0, 9}});
    REQUIRE_THROWS_AS(classical_em_train(oov, 2, 5, 3, 0), DataError);
}
