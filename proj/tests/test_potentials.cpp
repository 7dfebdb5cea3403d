// Network-parameterized potentials: row-stochasticity, agreement with
// plain-loop reference computations, near-uniform behavior at tiny init,
// causality of contextual transitions, and decode-time vocab extension.

#include "helpers.hpp"

using namespace nhmm;
using Catch::Approx;

namespace {

Vocab make_vocab(const std::vector<std::string>& words) {
    Vocab v;
    for (const auto& w : words) v.word_id(w);
    v.freeze();
    return v;
}

ModelConfig tiny_config(EmissionMode em, TransitionMode tr, int K = 3, int D = 8) {
    ModelConfig c;
    c.emission_mode = em;
    c.transition_mode = tr;
    c.K = K;
    c.D = D;
    c.char_dim = 4;
    c.cnn_filters_per_width = 3;
    c.cnn_max_width = 3;
    c.max_word_len = 8;
    c.lstm_layers = 2;
    return c;
}

// Reference: relu(a W + b) with plain loops.
Tensor ref_relu_linear(const Tensor& a, const Tensor& w, const Tensor& b) {
    Tensor y = nt::naive_matmul(a, w);
    for (int i = 0; i < y.dim(0); ++i)
        for (int j = 0; j < y.dim(1); ++j) y.at(i, j) = std::max(0.0, y.at(i, j) + b.at(j));
    return y;
}

Tensor ref_log_softmax_rows(Tensor y) {
    for (int i = 0; i < y.dim(0); ++i) {
        std::vector<double> row;
        for (int j = 0; j < y.dim(1); ++j) row.push_back(y.at(i, j));
        double lse = nt::naive_lse(row);
        for (int j = 0; j < y.dim(1); ++j) y.at(i, j) -= lse;
    }
    return y;
}

}  // namespace

TEST_CASE("emission and transition tables are row-stochastic") {
    Vocab vocab = make_vocab({"the", "cat", "sat", "on", "mat"});
    for (auto em : {EmissionMode::Lookup, EmissionMode::CharCnn}) {
        for (auto tr : {TransitionMode::Static, TransitionMode::Lstm}) {
            Model model(tiny_config(em, tr), vocab, 7);
            Tensor etab = model.emission_log_probs();
            REQUIRE(etab.dim(0) == 3);
            REQUIRE(etab.dim(1) == vocab.num_words());
            for (int k = 0; k < etab.dim(0); ++k) {
                double mass = 0.0;
                for (int v = 0; v < etab.dim(1); ++v) mass += std::exp(etab.at(k, v));
                REQUIRE(mass == Approx(1.0).margin(1e-12));
            }
            std::vector<Tensor> mats;
            if (tr == TransitionMode::Static) {
                mats.push_back(model.transition_log_matrix());
            } else {
                mats = model.transition_log_matrices_contextual({3, 4, 5});
                REQUIRE(mats.size() == 4);  // n + 1 factors
            }
            for (const Tensor& m : mats)
                for (int i = 0; i < m.dim(0); ++i) {
                    double mass = 0.0;
                    for (int j = 0; j < m.dim(1); ++j) mass += std::exp(m.at(i, j));
                    REQUIRE(mass == Approx(1.0).margin(1e-12));
                }
        }
    }
}

TEST_CASE("lookup emission matches a plain-loop reference") {
    Vocab vocab = make_vocab({"a", "b", "c"});
    Model model(tiny_config(EmissionMode::Lookup, TransitionMode::Static), vocab, 19);
    Tensor etab = model.emission_log_probs();

    const Tensor& tag_e = model.param("emit.tag_embed").tensor;
    const Tensor& tag_w = model.param("emit.tag_w").tensor;
    const Tensor& tag_b = model.param("emit.tag_b").tensor;
    const Tensor& word_e = model.param("emit.word_embed").tensor;
    const Tensor& bias = model.param("emit.word_bias").tensor;

    Tensor v = ref_relu_linear(tag_e, tag_w, tag_b);       // [K x D]
    Tensor scores = nt::naive_matmul_nt(v, word_e);        // [K x V]
    for (int k = 0; k < scores.dim(0); ++k)
        for (int w = 0; w < scores.dim(1); ++w) scores.at(k, w) += bias.at(w);
    Tensor ref = ref_log_softmax_rows(scores);
    REQUIRE(nt::max_abs_diff(etab, ref) < 1e-12);
}

TEST_CASE("static transition head matches a plain-loop reference") {
    Vocab vocab = make_vocab({"a", "b"});
    Model model(tiny_config(EmissionMode::Lookup, TransitionMode::Static, 2, 6), vocab, 23);
    Tensor tmat = model.transition_log_matrix();

    const Tensor& q = model.param("trans.query").tensor;
    const Tensor& U = model.param("trans.U").tensor;
    const Tensor& b = model.param("trans.b").tensor;
    int B2 = 9;
    Tensor logits({3, 3});
    for (int o = 0; o < B2; ++o) {
        double s = b.at(o);
        for (int d = 0; d < q.dim(0); ++d) s += q.at(d) * U.at(d, o);
        logits.data[static_cast<std::size_t>(o)] = s;
    }
    REQUIRE(nt::max_abs_diff(tmat, ref_log_softmax_rows(logits)) < 1e-12);
}

TEST_CASE("near-zero initialization gives near-uniform potentials") {
    Vocab vocab = make_vocab({"u", "v", "w", "x"});  // V = 7 with reserved ids
    ModelConfig cfg = tiny_config(EmissionMode::Lookup, TransitionMode::Static);
    cfg.init_uniform_eps = 1e-13;
    Model model(cfg, vocab, 3);
    int V = vocab.num_words(), K = cfg.K;

    Tensor etab = model.emission_log_probs();
    for (double lp : etab.data) REQUIRE(lp == Approx(-std::log((double)V)).margin(1e-9));
    Tensor tmat = model.transition_log_matrix();
    for (double lp : tmat.data) REQUIRE(lp == Approx(-std::log((double)(K + 1))).margin(1e-9));

    // Sentence log marginal then has the uniform closed form.
    std::vector<std::vector<int>> sents = {{3, 4, 5, 6}};
    double loss = dml_loss(model, as_batch(sents), false);
    int n = 4;
    double logm = n * std::log((double)K) - (n + 1) * std::log((double)(K + 1)) -
                  n * std::log((double)V);
    REQUIRE(loss == Approx(-logm).margin(1e-6));
}

TEST_CASE("eager potentials agree with the differentiable lattice loss") {
    Vocab vocab = make_vocab({"r", "s", "t", "u"});
    for (auto em : {EmissionMode::Lookup, EmissionMode::CharCnn}) {
        for (auto tr : {TransitionMode::Static, TransitionMode::Lstm}) {
            Model model(tiny_config(em, tr), vocab, 29);
            std::vector<std::vector<int>> sents = {{3, 5, 4}, {6, 6}};
            Tensor etab = model.emission_log_probs();
            double manual = 0.0;
            for (const auto& w : sents) manual -= forward(model.potentials_eval(w, etab)).second;
            double loss = dml_loss(model, as_batch(sents), false);
            REQUIRE(loss == Approx(manual).margin(1e-10));
        }
    }
}

TEST_CASE("contextual transitions are causal") {
    Vocab vocab = make_vocab({"a", "b", "c", "d", "x", "y"});
    Model model(tiny_config(EmissionMode::Lookup, TransitionMode::Lstm), vocab, 31);

    std::vector<int> s1 = {3, 4, 5, 6};  // a b c d
    std::vector<int> s2 = {3, 4, 7, 8};  // a b x y  (shares the 2-word prefix)
    auto m1 = model.transition_log_matrices_contextual(s1);
    auto m2 = model.transition_log_matrices_contextual(s2);
    REQUIRE(m1.size() == 5);
    REQUIRE(m2.size() == 5);

    // Factor f depends on words 1..f only, so factors 0..2 must be
    // bit-identical across the two sentences; factor 3 sees word 3 and must
    // differ.
    for (int f = 0; f <= 2; ++f)
        REQUIRE(m1[static_cast<std::size_t>(f)].data == m2[static_cast<std::size_t>(f)].data);
    REQUIRE(m1[3].data != m2[3].data);
}

TEST_CASE("training-mode dropout changes potentials, evaluation does not") {
    Vocab vocab = make_vocab({"a", "b", "c"});
    ModelConfig cfg = tiny_config(EmissionMode::Lookup, TransitionMode::Lstm);
    Model model(cfg, vocab, 37);
    std::vector<int> words = {3, 4, 5};

    Tape t1;
    std::mt19937_64 r1(5);
    auto v1 = model.contextual_trans_vars(t1, words, true, &r1);
    Tape t2;
    std::mt19937_64 r2(6);
    auto v2 = model.contextual_trans_vars(t2, words, true, &r2);
    // Different masks: outputs differ somewhere.
    bool differ = false;
    for (std::size_t f = 0; f < v1.size() && !differ; ++f)
        differ = t1.val(v1[f]).data != t2.val(v2[f]).data;
    REQUIRE(differ);

    // Same seed: identical (bitwise) potentials.
    Tape t3;
    std::mt19937_64 r3(5);
    auto v3 = model.contextual_trans_vars(t3, words, true, &r3);
    for (std::size_t f = 0; f < v1.size(); ++f)
        REQUIRE(t1.val(v1[f]).data == t3.val(v3[f]).data);

    // Evaluation mode needs no rng and is deterministic.
    auto e1 = model.transition_log_matrices_contextual(words);
    auto e2 = model.transition_log_matrices_contextual(words);
    for (std::size_t f = 0; f < e1.size(); ++f) REQUIRE(e1[f].data == e2[f].data);

    // Training mode without an rng is a usage error (dropout active).
    Tape t4;
    REQUIRE_THROWS_AS(model.contextual_trans_vars(t4, words, true, nullptr), UsageError);
}

TEST_CASE("assemble_potentials validates word ids") {
    Vocab vocab = make_vocab({"a", "b"});
    Model model(tiny_config(EmissionMode::Lookup, TransitionMode::Static), vocab, 41);
    Tensor etab = model.emission_log_probs();
    REQUIRE_THROWS_AS(model.potentials_eval({99}, etab), VocabError);
}

TEST_CASE("vocab extension: char-cnn scores new words, old rows unchanged") {
    Vocab vocab = make_vocab({"walk", "walked", "talk"});
    ModelConfig cfg = tiny_config(EmissionMode::CharCnn, TransitionMode::Static);
    Model model(cfg, vocab, 43);
    Tensor before = model.emission_log_probs();
    int old_v = vocab.num_words();

    Vocab ext = model.vocab.unfrozen_words_copy();
    int new_id = ext.word_id("talked");  // chars all known
    REQUIRE(new_id == old_v);
    ext.freeze();
    model.extend_vocab(ext);

    REQUIRE(model.vocab.num_words() == old_v + 1);
    REQUIRE(model.param("emit.word_bias").tensor.dim(0) == old_v + 1);
    REQUIRE(model.param("emit.word_bias").tensor.at(old_v) == 0.0);

    Tensor after = model.emission_log_probs();
    REQUIRE(after.dim(1) == old_v + 1);
    for (double lp : after.data) REQUIRE(std::isfinite(lp));
    // The new column shifts each row's normalizer, but score differences
    // between old words are preserved exactly.
    for (int k = 0; k < cfg.K; ++k)
        for (int w = 1; w < old_v; ++w) {
            double d_before = before.at(k, w) - before.at(k, 0);
            double d_after = after.at(k, w) - after.at(k, 0);
            REQUIRE(d_after == Approx(d_before).margin(1e-10));
        }

    // Decoding a sentence containing the new word works end to end.
    auto paths = decode_corpus(model, [&] {
        Corpus c;
        Sentence s;
        s.words = {3, new_id, 4};
        s.tags = {-1, -1, -1};
        c.sentences.push_back(s);
        c.total_tokens = 3;
        return c;
    }());
    REQUIRE(paths.size() == 1);
    REQUIRE(paths[0].size() == 3);
}

TEST_CASE("vocab extension guards") {
    Vocab vocab = make_vocab({"aa", "bb"});
    Model lookup_model(tiny_config(EmissionMode::Lookup, TransitionMode::Static), vocab, 47);
    Vocab ext = vocab.unfrozen_words_copy();
    ext.word_id("ab");
    ext.freeze();
    REQUIRE_THROWS_AS(lookup_model.extend_vocab(ext), UsageError);

    Model cnn_model(tiny_config(EmissionMode::CharCnn, TransitionMode::Static), vocab, 47);
    Vocab smaller = make_vocab({"aa"});
    REQUIRE_THROWS_AS(cnn_model.extend_vocab(smaller), VocabError);
}

TEST_CASE("vocab extension in lstm mode: new word behaves like <unk> for context") {
    Vocab vocab = make_vocab({"walk", "talk"});
    ModelConfig cfg = tiny_config(EmissionMode::CharCnn, TransitionMode::Lstm);
    Model model(cfg, vocab, 53);

    Vocab ext = model.vocab.unfrozen_words_copy();
    int new_id = ext.word_id("lkat");
    ext.freeze();
    model.extend_vocab(ext);

    // The new word's input embedding copies the <unk> row, so contextual
    // transition matrices are bit-identical to the <unk>-substituted
    // sentence.
    std::vector<int> with_new = {3, new_id, 4};
    std::vector<int> with_unk = {3, Vocab::kUnk, 4};
    auto a = model.transition_log_matrices_contextual(with_new);
    auto b = model.transition_log_matrices_contextual(with_unk);
    REQUIRE(a.size() == b.size());
    for (std::size_t f = 0; f < a.size(); ++f) REQUIRE(a[f].data == b[f].data);
}

TEST_CASE("model config validation") {
    Vocab vocab = make_vocab({"a"});
    ModelConfig cfg = tiny_config(EmissionMode::Lookup, TransitionMode::Static);
    cfg.K = 0;
    REQUIRE_THROWS_AS(Model(cfg, vocab, 1), UsageError);
    cfg = tiny_config(EmissionMode::Lookup, TransitionMode::Static);
    cfg.dropout_rate = 1.5;
    REQUIRE_THROWS_AS(Model(cfg, vocab, 1), UsageError);
    cfg = tiny_config(EmissionMode::Lookup, TransitionMode::Lstm);
    cfg.lstm_layers = 0;
    REQUIRE_THROWS_AS(Model(cfg, vocab, 1), UsageError);
    cfg = tiny_config(EmissionMode::CharCnn, TransitionMode::Static);
    cfg.cnn_max_width = 0;
    REQUIRE_THROWS_AS(Model(cfg, vocab, 1), UsageError);
}

TEST_CASE("parameter registration order is fixed and checksummed") {
    Vocab vocab = make_vocab({"a", "b"});
    Model m1(tiny_config(EmissionMode::Lookup, TransitionMode::Static), vocab, 61);
    Model m2(tiny_config(EmissionMode::Lookup, TransitionMode::Static), vocab, 61);
    REQUIRE(m1.param_checksum() == m2.param_checksum());
    Model m3(tiny_config(EmissionMode::Lookup, TransitionMode::Static), vocab, 62);
    REQUIRE(m1.param_checksum() != m3.param_checksum());

    std::vector<std::string> names;
    for (Parameter* p : m1.params()) names.push_back(p->name);
    std::vector<std::string> expect = {"emit.tag_embed", "emit.tag_w", "emit.tag_b",
                                       "emit.word_embed", "emit.word_bias", "trans.query",
                                       "trans.U", "trans.b"};
    REQUIRE(names == expect);
}
