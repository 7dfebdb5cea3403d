// Neural potential model: an emission network (tag embedding -> MLP query
// against word vectors from a lookup table or a char-CNN) and a transition
// network (static query or per-position LSTM hidden state, pushed through a
// shared linear head and reshaped to a row-stochastic (K+1)x(K+1) matrix).
//
// All graph builders are define-by-run over a Tape; evaluation-mode helpers
// build a scratch tape and copy the values out.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "nhmm/common.hpp"
#include "nhmm/corpus.hpp"
#include "nhmm/hmm.hpp"
#include "nhmm/optim.hpp"
#include "nhmm/tape.hpp"
#include "nhmm/vocab.hpp"

namespace nhmm {

enum class EmissionMode { Lookup, CharCnn };
enum class TransitionMode { Static, Lstm };

inline EmissionMode parse_emission_mode(const std::string& s) {
    if (s == "lookup") return EmissionMode::Lookup;
    if (s == "char-cnn") return EmissionMode::CharCnn;
    throw UsageError(msg("unknown emission mode '", s, "' (expected lookup|char-cnn)"));
}

inline TransitionMode parse_transition_mode(const std::string& s) {
    if (s == "static") return TransitionMode::Static;
    if (s == "lstm") return TransitionMode::Lstm;
    throw UsageError(msg("unknown transition mode '", s, "' (expected static|lstm)"));
}

inline const char* to_string(EmissionMode m) {
    return m == EmissionMode::Lookup ? "lookup" : "char-cnn";
}
inline const char* to_string(TransitionMode m) {
    return m == TransitionMode::Static ? "static" : "lstm";
}

struct ModelConfig {
    int K = 45;
    int D = 512;
    EmissionMode emission_mode = EmissionMode::Lookup;
    TransitionMode transition_mode = TransitionMode::Static;
    int cnn_filters_per_width = 32;
    int cnn_max_width = 7;
    int char_dim = 16;
    int max_word_len = 20;
    double dropout_rate = 0.5;
    int lstm_layers = 3;
    double init_uniform_eps = 0.0;  // ablation: > 0 replaces every init with U(-eps, eps)

    static int default_hidden(EmissionMode m) { return m == EmissionMode::CharCnn ? 128 : 512; }

    void validate() const {
        if (K < 1) throw UsageError(msg("K must be >= 1, got ", K));
        if (D < 1) throw UsageError(msg("hidden size must be >= 1, got ", D));
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw UsageError(msg("dropout rate ", dropout_rate, " outside [0,1)"));
        if (lstm_layers < 1) throw UsageError(msg("lstm_layers must be >= 1, got ", lstm_layers));
        if (emission_mode == EmissionMode::CharCnn) {
            if (cnn_filters_per_width < 1 || cnn_max_width < 1 || char_dim < 1)
                throw UsageError("char-cnn geometry fields must be positive");
            if (max_word_len < cnn_max_width)
                throw UsageError(msg("max_word_len (", max_word_len,
                                     ") must cover the widest CNN kernel (", cnn_max_width, ")"));
        }
        if (init_uniform_eps < 0.0) throw UsageError("init_uniform_eps must be >= 0");
    }
};

// Slice one sentence's factors out of a batch-level emission table and
// attach its transition matrices (1 static or n+1 contextual).
inline LatticePotentials assemble_potentials(const std::vector<int>& words,
                                             const Tensor& emission_table,
                                             std::vector<Tensor> trans) {
    if (words.empty()) throw DataError("empty sentence: nothing to assemble");
    if (emission_table.rank() != 2) throw ShapeError("emission table must be K x V");
    int K = emission_table.dim(0), V = emission_table.dim(1);
    LatticePotentials pot;
    pot.n = static_cast<int>(words.size());
    pot.K = K;
    pot.log_emit = Tensor({pot.n, K});
    for (int t = 0; t < pot.n; ++t) {
        int w = words[static_cast<std::size_t>(t)];
        if (w < 0 || w >= V)
            throw VocabError(msg("word id ", w, " not covered by emission table (V=", V, ")"));
        for (int k = 0; k < K; ++k) pot.log_emit.at(t, k) = emission_table.at(k, w);
    }
    pot.log_trans = std::move(trans);
    validate_lattice(pot);
    return pot;
}

class Model {
  public:
    ModelConfig config;
    Vocab vocab;

    Model(ModelConfig cfg, Vocab voc, std::uint64_t seed) : config(cfg), vocab(std::move(voc)) {
        config.validate();
        vocab.freeze();
        std::mt19937_64 rng(derive_seed(seed, {0x696e6974ULL}));
        int K = config.K, D = config.D, V = vocab.num_words();

        add("emit.tag_embed", {K, D}, InitSpec::gaussian_unit(), rng);
        add("emit.tag_w", {D, D}, InitSpec::uniform_fan_in(D), rng);
        add("emit.tag_b", {D}, InitSpec::uniform_fan_in(D), rng);
        if (config.emission_mode == EmissionMode::Lookup) {
            add("emit.word_embed", {V, D}, InitSpec::gaussian_unit(), rng);
        } else {
            int C = vocab.num_chars(), F = config.cnn_filters_per_width;
            int total = F * config.cnn_max_width;
            add("emit.char_embed", {C, config.char_dim}, InitSpec::gaussian_unit(), rng);
            for (int w = 1; w <= config.cnn_max_width; ++w) {
                int fan = w * config.char_dim;
                add(msg("emit.cnn.w", w, ".weight"), {F, fan}, InitSpec::uniform_fan_in(fan), rng);
                add(msg("emit.cnn.w", w, ".bias"), {F}, InitSpec::uniform_fan_in(fan), rng);
            }
            add("emit.proj_w", {total, D}, InitSpec::uniform_fan_in(total), rng);
            add("emit.proj_b", {D}, InitSpec::uniform_fan_in(total), rng);
        }
        add("emit.word_bias", {V}, InitSpec::uniform_fan_in(D), rng);

        int B2 = (K + 1) * (K + 1);
        if (config.transition_mode == TransitionMode::Static)
            add("trans.query", {D}, InitSpec::gaussian_unit(), rng);
        add("trans.U", {D, B2}, InitSpec::uniform_fan_in(D), rng);
        add("trans.b", {B2}, InitSpec::uniform_fan_in(D), rng);
        if (config.transition_mode == TransitionMode::Lstm) {
            add("trans.input_embed", {V, D}, InitSpec::gaussian_unit(), rng);
            for (int l = 0; l < config.lstm_layers; ++l) {
                add(msg("trans.lstm", l, ".w_ih"), {D, 4 * D}, InitSpec::lstm_gaussian(D), rng);
                add(msg("trans.lstm", l, ".w_hh"), {D, 4 * D}, InitSpec::lstm_gaussian(D), rng);
                add(msg("trans.lstm", l, ".bias"), {4 * D}, InitSpec::forget_bias_one(), rng);
            }
        }

        if (config.emission_mode == EmissionMode::CharCnn) build_char_grid();
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const std::vector<Parameter*>& params() { return order_; }

    Parameter& param(const std::string& name) {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw UsageError(msg("no parameter named ", name));
        return *it->second;
    }

    // ---- graph builders ----

    // [K x V] log emission table (rows are log-distributions over words).
    Var emission_var(Tape& tp) {
        Var tag_e = tp.leaf(param("emit.tag_embed"));
        Var v = tp.relu(linear(tp, tag_e, tp.leaf(param("emit.tag_w")), tp.leaf(param("emit.tag_b"))));
        Var w;
        if (config.emission_mode == EmissionMode::Lookup) {
            w = tp.leaf(param("emit.word_embed"));
        } else {
            std::vector<Tape::CnnFilter> filters;
            for (int width = 1; width <= config.cnn_max_width; ++width)
                filters.push_back({width, tp.leaf(param(msg("emit.cnn.w", width, ".weight"))),
                                   tp.leaf(param(msg("emit.cnn.w", width, ".bias")))});
            Var feats = tp.char_cnn(tp.leaf(param("emit.char_embed")), filters, char_grid_);
            w = tp.relu(linear(tp, feats, tp.leaf(param("emit.proj_w")), tp.leaf(param("emit.proj_b"))));
        }
        Var scores = tp.add_rowvec(tp.matmul_nt(v, w), tp.leaf(param("emit.word_bias")));
        return tp.log_softmax_rows(scores);
    }

    // Shared transition head: query vector [D] -> row-stochastic matrix.
    Var trans_head(Tape& tp, Var query) {
        Var t = tp.add(tp.vecmat(query, tp.leaf(param("trans.U"))), tp.leaf(param("trans.b")));
        return tp.log_softmax_rows(tp.reshape(t, {config.K + 1, config.K + 1}));
    }

    Var static_trans_var(Tape& tp) {
        if (config.transition_mode != TransitionMode::Static)
            throw UsageError("transition_log_matrix requires static transition mode");
        return trans_head(tp, tp.leaf(param("trans.query")));
    }

    // One matrix per factor f = 0..n; the matrix for factor f is built from
    // the LSTM state after consuming [<sos>, x_1 .. x_f] (causal: never the
    // current or future word). Dropout on vertical connections only, and
    // only when training.
    std::vector<Var> contextual_trans_vars(Tape& tp, const std::vector<int>& words, bool training,
                                           std::mt19937_64* drop_rng) {
        if (config.transition_mode != TransitionMode::Lstm)
            throw UsageError("contextual transitions require lstm transition mode");
        if (words.empty()) throw DataError("empty sentence: no transition factors");
        int D = config.D, L = config.lstm_layers;
        bool drop = training && config.dropout_rate > 0.0;
        if (drop && !drop_rng) throw UsageError("training-mode dropout needs an rng");

        std::vector<LstmLayerVars> layers;
        for (int l = 0; l < L; ++l)
            layers.push_back({tp.leaf(param(msg("trans.lstm", l, ".w_ih"))),
                              tp.leaf(param(msg("trans.lstm", l, ".w_hh"))),
                              tp.leaf(param(msg("trans.lstm", l, ".bias"))), D});
        Var embed = tp.leaf(param("trans.input_embed"));
        Var zero = tp.constant(Tensor({D}));
        std::vector<LstmStateVars> st(static_cast<std::size_t>(L), LstmStateVars{zero, zero});

        std::vector<int> inputs;
        inputs.reserve(words.size() + 1);
        inputs.push_back(Vocab::kSos);
        inputs.insert(inputs.end(), words.begin(), words.end());

        std::vector<Var> mats;
        mats.reserve(inputs.size());
        for (int t = 0; t < static_cast<int>(inputs.size()); ++t) {
            Var x = tp.reshape(tp.lookup_rows(embed, {inputs[static_cast<std::size_t>(t)]}), {D});
            if (drop) x = tp.dropout(x, config.dropout_rate, *drop_rng);
            for (int l = 0; l < L; ++l) {
                st[static_cast<std::size_t>(l)] =
                    lstm_step(tp, layers[static_cast<std::size_t>(l)], x, st[static_cast<std::size_t>(l)]);
                x = st[static_cast<std::size_t>(l)].h;
                if (drop) x = tp.dropout(x, config.dropout_rate, *drop_rng);
            }
            mats.push_back(trans_head(tp, x));
        }
        return mats;
    }

    // ---- evaluation-mode products (no gradients, no dropout) ----

    Tensor emission_log_probs() {
        Tape tp;
        return tp.val(emission_var(tp));
    }

    Tensor transition_log_matrix() {
        Tape tp;
        return tp.val(static_trans_var(tp));
    }

    std::vector<Tensor> transition_log_matrices_contextual(const std::vector<int>& words) {
        Tape tp;
        std::vector<Tensor> out;
        for (Var v : contextual_trans_vars(tp, words, false, nullptr)) out.push_back(tp.val(v));
        return out;
    }

    // Full lattice for one sentence against a precomputed emission table.
    LatticePotentials potentials_eval(const std::vector<int>& words, const Tensor& emission_table) {
        std::vector<Tensor> trans;
        if (config.transition_mode == TransitionMode::Static)
            trans.push_back(transition_log_matrix());
        else
            trans = transition_log_matrices_contextual(words);
        return assemble_potentials(words, emission_table, std::move(trans));
    }

    // Decode-time vocabulary extension (char-cnn only): unseen word types
    // get emission scores from their character sequences; their bias starts
    // at 0 and, in lstm mode, their input embedding copies the <unk> row.
    void extend_vocab(const Vocab& bigger) {
        if (config.emission_mode != EmissionMode::CharCnn)
            throw UsageError("vocab extension requires char-cnn emission mode");
        int old_v = vocab.num_words(), new_v = bigger.num_words();
        if (new_v < old_v) throw VocabError("extended vocab is smaller than the model's");
        if (bigger.num_chars() != vocab.num_chars())
            throw VocabError("extended vocab must not introduce new characters");
        for (int i = 0; i < old_v; ++i)
            if (bigger.word(i) != vocab.word(i))
                throw VocabError(msg("extended vocab reorders word id ", i));
        if (new_v > old_v) {
            grow_rows(param("emit.word_bias"), new_v, -1);
            if (config.transition_mode == TransitionMode::Lstm)
                grow_rows(param("trans.input_embed"), new_v, Vocab::kUnk);
        }
        vocab = bigger;
        vocab.freeze();
        build_char_grid();
    }

    std::uint64_t param_checksum() {
        Fnv1a h;
        for (const Parameter* p : order_) {
            h.str(p->name);
            tensor_checksum(p->tensor, h);
        }
        return h.value();
    }

    const IntMat& char_grid() const { return char_grid_; }

  private:
    std::deque<Parameter> store_;
    std::unordered_map<std::string, Parameter*> by_name_;
    std::vector<Parameter*> order_;
    IntMat char_grid_;
    bool trunc_logged_ = false;

    Parameter& add(const std::string& name, std::vector<int> shape, InitSpec spec,
                   std::mt19937_64& rng) {
        if (by_name_.count(name)) throw UsageError(msg("duplicate parameter name ", name));
        store_.emplace_back();
        Parameter& p = store_.back();
        p.name = name;
        p.tensor = Tensor(std::move(shape));
        if (config.init_uniform_eps > 0.0)
            initialize(p.tensor, InitSpec::uniform_eps(config.init_uniform_eps), rng);
        else
            initialize(p.tensor, spec, rng);
        p.adam_m = Tensor::zeros(p.tensor.shape);
        p.adam_v = Tensor::zeros(p.tensor.shape);
        by_name_[name] = &p;
        order_.push_back(&p);
        return p;
    }

    // Extend the leading dimension of a parameter; new rows copy row
    // `copy_row` (or stay zero when copy_row < 0). Adam moments restart at
    // zero for the new rows.
    void grow_rows(Parameter& p, int new_rows, int copy_row) {
        Tensor& t = p.tensor;
        int old_rows = t.dim(0);
        int stride = static_cast<int>(t.numel()) / old_rows;
        std::vector<int> shape = t.shape;
        shape[0] = new_rows;
        Tensor grown(shape);
        std::copy(t.data.begin(), t.data.end(), grown.data.begin());
        if (copy_row >= 0)
            for (int r = old_rows; r < new_rows; ++r)
                for (int c = 0; c < stride; ++c)
                    grown.data[static_cast<std::size_t>(r) * stride + c] =
                        t.data[static_cast<std::size_t>(copy_row) * stride + c];
        Tensor m2(shape), v2(shape);
        std::copy(p.adam_m.data.begin(), p.adam_m.data.end(), m2.data.begin());
        std::copy(p.adam_v.data.begin(), p.adam_v.data.end(), v2.data.begin());
        p.tensor = std::move(grown);
        p.adam_m = std::move(m2);
        p.adam_v = std::move(v2);
    }

    void build_char_grid() {
        int v = vocab.num_words(), l = config.max_word_len;
        char_grid_ = IntMat(v, l);
        long truncated = 0;
        for (int i = 0; i < v; ++i) {
            if (static_cast<int>(vocab.word(i).size()) > l) ++truncated;
            std::vector<int> row = vocab.char_row(i, l);
            for (int c = 0; c < l; ++c) char_grid_.at(i, c) = row[static_cast<std::size_t>(c)];
        }
        if (truncated > 0 && !trunc_logged_) {
            std::fprintf(stderr, "note: %ld word type(s) truncated to %d characters\n", truncated, l);
            trunc_logged_ = true;
        }
    }
};

// Viterbi cluster ids for every sentence (evaluation mode, all lengths).
inline std::vector<std::vector<int>> decode_corpus(Model& model, const Corpus& corpus) {
    Tensor etab = model.emission_log_probs();
    std::vector<std::vector<int>> out;
    out.reserve(corpus.sentences.size());
    for (const Sentence& s : corpus.sentences)
        out.push_back(viterbi(model.potentials_eval(s.words, etab)).first);
    return out;
}

// Total evaluation-mode log marginal likelihood of a corpus.
inline double model_log_likelihood(Model& model, const Corpus& corpus) {
    Tensor etab = model.emission_log_probs();
    double total = 0.0;
    for (const Sentence& s : corpus.sentences)
        total += forward(model.potentials_eval(s.words, etab)).second;
    return total;
}

}  // namespace nhmm
