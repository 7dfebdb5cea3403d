// Command-line front end: train / decode / eval / synth / gradcheck.
// Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
// failure. Every run prints its fully resolved configuration to standard
// error before doing any work.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "nhmm/nhmm.hpp"

namespace {

using namespace nhmm;

using KvList = std::vector<std::pair<std::string, std::string>>;

void print_header(const char* cmd, const KvList& kv) {
    std::fprintf(stderr, "# nhmm %s\n", cmd);
    for (const auto& [k, v] : kv) std::fprintf(stderr, "# %s = %s\n", k.c_str(), v.c_str());
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---- shared model-geometry flag block ----

struct ModelOpts {
    std::string emission = "lookup";
    std::string transition = "static";
    int k = 45;
    int hidden = 0;  // 0 = resolve per emission mode (512 lookup / 128 char-cnn)
    int cnn_filters = 32;
    int cnn_max_width = 7;
    int char_dim = 16;
    int max_word_len = 20;
    double dropout = 0.5;
    bool no_dropout = false;
    int lstm_layers = 3;
    double init_uniform_eps = 0.0;
};

void add_model_flags(CLI::App* cmd, ModelOpts& o) {
    cmd->add_option("--emission", o.emission, "emission network: lookup|char-cnn");
    cmd->add_option("--transition", o.transition, "transition network: static|lstm");
    cmd->add_option("--k", o.k, "number of induced tags");
    cmd->add_option("--hidden", o.hidden, "hidden size D (default 512, 128 for char-cnn)");
    cmd->add_option("--cnn-filters", o.cnn_filters, "CNN channels per kernel width");
    cmd->add_option("--cnn-max-width", o.cnn_max_width, "largest CNN kernel width");
    cmd->add_option("--char-dim", o.char_dim, "character embedding size");
    cmd->add_option("--max-word-len", o.max_word_len, "character-grid width per word");
    cmd->add_option("--dropout", o.dropout, "LSTM vertical dropout rate");
    cmd->add_flag("--no-dropout", o.no_dropout, "disable dropout (ablation)");
    cmd->add_option("--lstm-layers", o.lstm_layers, "stacked LSTM depth (ablation)");
    cmd->add_option("--init-uniform-eps", o.init_uniform_eps,
                    "replace all initializers with U(-eps,eps) (ablation)");
}

ModelConfig resolve_model_config(const ModelOpts& o) {
    ModelConfig c;
    c.emission_mode = parse_emission_mode(o.emission);
    c.transition_mode = parse_transition_mode(o.transition);
    c.K = o.k;
    c.D = o.hidden > 0 ? o.hidden : ModelConfig::default_hidden(c.emission_mode);
    c.cnn_filters_per_width = o.cnn_filters;
    c.cnn_max_width = o.cnn_max_width;
    c.char_dim = o.char_dim;
    c.max_word_len = o.max_word_len;
    c.dropout_rate = o.no_dropout ? 0.0 : o.dropout;
    c.lstm_layers = o.lstm_layers;
    c.init_uniform_eps = o.init_uniform_eps;
    c.validate();
    return c;
}

KvList model_config_kv(const ModelConfig& c) {
    return {{"emission", to_string(c.emission_mode)},
            {"transition", to_string(c.transition_mode)},
            {"k", std::to_string(c.K)},
            {"hidden", std::to_string(c.D)},
            {"cnn_filters", std::to_string(c.cnn_filters_per_width)},
            {"cnn_max_width", std::to_string(c.cnn_max_width)},
            {"char_dim", std::to_string(c.char_dim)},
            {"max_word_len", std::to_string(c.max_word_len)},
            {"dropout", fmt_double(c.dropout_rate)},
            {"lstm_layers", std::to_string(c.lstm_layers)},
            {"init_uniform_eps", fmt_double(c.init_uniform_eps)}};
}

// Read a corpus against a trained model's vocabulary. In char-cnn mode new
// word types are appended (scores come from their characters); otherwise
// unknown tokens map to <unk>.
Corpus read_with_model_vocab(Model& model, const std::string& path, CorpusFormat fmt) {
    if (model.config.emission_mode == EmissionMode::CharCnn) {
        Vocab ext = model.vocab.unfrozen_words_copy();
        Corpus corpus = read_corpus(path, fmt, ext);
        model.extend_vocab(ext);
        return corpus;
    }
    Vocab frozen = model.vocab;
    Corpus corpus = read_corpus(path, fmt, frozen);
    if (corpus.unk_tokens > 0)
        std::fprintf(stderr, "# unknown tokens mapped to <unk>: %ld\n", corpus.unk_tokens);
    return corpus;
}

std::vector<std::vector<int>> read_id_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(msg("cannot open id file ", path));
    std::vector<std::vector<int>> out;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ss(line);
        std::vector<int> ids;
        std::string tok;
        while (ss >> tok) {
            try {
                std::size_t used = 0;
                int v = std::stoi(tok, &used);
                if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
                ids.push_back(v);
            } catch (const std::exception&) {
                throw FormatError(msg(path, ":", lineno, ": expected nonnegative id, got '", tok, "'"));
            }
        }
        if (!ids.empty()) out.push_back(std::move(ids));
    }
    if (out.empty()) throw DataError(msg("id file ", path, " contains no sentences"));
    return out;
}

HmmParams load_hmm_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError(msg("cannot open HMM parameter file ", path));
    std::string magic;
    std::getline(in, magic);
    if (magic != "NHMM-HMM v1")
        throw FormatError(msg("unsupported HMM parameter format: '", magic, "'"));
    std::string key;
    HmmParams hmm;
    if (!(in >> key >> hmm.K) || key != "k" || !(in >> key >> hmm.V) || key != "v")
        throw FormatError("HMM parameter file: expected 'k <K>' and 'v <V>'");
    if (hmm.K < 1 || hmm.V < 1) throw FormatError("HMM parameter file: K and V must be >= 1");
    hmm.trans = Tensor({hmm.K + 1, hmm.K + 1});
    hmm.emit = Tensor({hmm.K, hmm.V});
    for (double& v : hmm.trans.data)
        if (!(in >> v)) throw FormatError("HMM parameter file: truncated transition matrix");
    for (double& v : hmm.emit.data)
        if (!(in >> v)) throw FormatError("HMM parameter file: truncated emission matrix");
    hmm.validate();
    return hmm;
}

// ---- subcommands ----

struct TrainOpts {
    std::string corpus;
    std::string format = "tokens";
    std::string model_out = "model.nhmm";
    std::string report_out;
    std::string objective = "dml";
    int batch_size = 256;
    int max_len = 40;
    int epochs = 5;
    int max_inner = 6;
    double inner_convergence = 1e-4;
    double clip_norm = 5.0;
    std::uint64_t seed = 0;
    int threads = 1;
    ModelOpts model;
};

int cmd_train(const TrainOpts& o) {
    ModelConfig mc = resolve_model_config(o.model);
    TrainConfig tc;
    tc.objective = parse_objective(o.objective);
    tc.batch_size = o.batch_size;
    tc.max_len = o.max_len;
    tc.epochs = o.epochs;
    tc.max_inner_loops = o.max_inner;
    tc.inner_convergence = o.inner_convergence;
    tc.clip_norm = o.clip_norm;
    tc.seed = o.seed;
    tc.threads = o.threads;
    tc.validate();

    KvList kv = model_config_kv(mc);
    kv.insert(kv.end(), {{"corpus", o.corpus},
                         {"format", o.format},
                         {"model_out", o.model_out},
                         {"report_out", o.report_out.empty() ? "<none>" : o.report_out},
                         {"objective", to_string(tc.objective)},
                         {"batch_size", std::to_string(tc.batch_size)},
                         {"max_len", std::to_string(tc.max_len)},
                         {"epochs", std::to_string(tc.epochs)},
                         {"max_inner_loops", std::to_string(tc.max_inner_loops)},
                         {"inner_convergence", fmt_double(tc.inner_convergence)},
                         {"clip_norm", fmt_double(tc.clip_norm)},
                         {"adam_lr", fmt_double(tc.adam.lr)},
                         {"seed", std::to_string(o.seed)},
                         {"threads", std::to_string(tc.threads)}});
    print_header("train", kv);

    Vocab vocab;
    Corpus corpus = read_corpus(o.corpus, parse_corpus_format(o.format), vocab);
    vocab.freeze();
    std::fprintf(stderr, "# corpus: %zu sentences, %ld tokens, %d word types, %d char types\n",
                 corpus.sentences.size(), corpus.total_tokens, vocab.num_words(),
                 vocab.num_chars());

    Model model(mc, std::move(vocab), o.seed);
    TrainReport report = train(model, corpus, tc);
    save_model(model, o.model_out);
    if (!o.report_out.empty()) {
        std::ofstream rf(o.report_out, std::ios::binary);
        if (!rf) throw DataError(msg("cannot write report file ", o.report_out));
        report.write(rf);
    }
    std::fprintf(stderr, "# trained %zu batches over %d epochs in %.1f s; checksum %016llx\n",
                 report.batches.size(), tc.epochs, report.wall_clock_seconds,
                 static_cast<unsigned long long>(report.param_checksum));
    for (std::size_t e = 0; e < report.epoch_ll_per_token.size(); ++e)
        std::fprintf(stderr, "# epoch %zu ll/token %.6f\n", e, report.epoch_ll_per_token[e]);
    return 0;
}

struct DecodeOpts {
    std::string model;
    std::string corpus;
    std::string format = "tokens";
    std::string output;
    std::uint64_t seed = 0;
};

int cmd_decode(const DecodeOpts& o) {
    print_header("decode", {{"model", o.model},
                            {"corpus", o.corpus},
                            {"format", o.format},
                            {"output", o.output.empty() ? "<stdout>" : o.output},
                            {"seed", std::to_string(o.seed)}});
    auto model = load_model(o.model);
    Corpus corpus = read_with_model_vocab(*model, o.corpus, parse_corpus_format(o.format));
    std::vector<std::vector<int>> paths = decode_corpus(*model, corpus);

    std::ofstream file;
    if (!o.output.empty()) {
        file.open(o.output, std::ios::binary);
        if (!file) throw DataError(msg("cannot write output file ", o.output));
    }
    std::ostream& out = o.output.empty() ? std::cout : file;
    for (const auto& p : paths) {
        for (std::size_t i = 0; i < p.size(); ++i) out << (i ? " " : "") << p[i];
        out << '\n';
    }
    return 0;
}

struct EvalOpts {
    std::string gold;
    std::string gold_format = "conll";
    std::string pred;
    std::string model;
    std::string corpus;
    std::string format = "conll";
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalOpts& o) {
    print_header("eval", {{"gold", o.gold},
                          {"gold_format", o.gold_format},
                          {"pred", o.pred.empty() ? "<none>" : o.pred},
                          {"model", o.model.empty() ? "<none>" : o.model},
                          {"corpus", o.corpus.empty() ? "<gold file>" : o.corpus},
                          {"seed", std::to_string(o.seed)}});
    std::vector<std::vector<int>> gold;
    if (o.gold_format == "conll") {
        Vocab tmp;
        Corpus g = read_corpus(o.gold, CorpusFormat::Conll, tmp);
        if (!g.has_gold()) throw DataError(msg("gold file ", o.gold, " carries no tags"));
        for (const Sentence& s : g.sentences) gold.push_back(s.tags);
    } else if (o.gold_format == "ids") {
        gold = read_id_lines(o.gold);
    } else {
        throw UsageError(msg("unknown gold format '", o.gold_format, "' (expected conll|ids)"));
    }

    std::vector<std::vector<int>> pred;
    if (!o.pred.empty()) {
        pred = read_id_lines(o.pred);
    } else if (!o.model.empty()) {
        std::string corpus_path = o.corpus.empty() ? o.gold : o.corpus;
        CorpusFormat fmt = o.corpus.empty() ? CorpusFormat::Conll : parse_corpus_format(o.format);
        if (o.corpus.empty() && o.gold_format != "conll")
            throw UsageError("decoding against --gold requires conll gold (tokens needed)");
        auto model = load_model(o.model);
        Corpus corpus = read_with_model_vocab(*model, corpus_path, fmt);
        pred = decode_corpus(*model, corpus);
    } else {
        throw UsageError("eval needs either --pred or --model");
    }

    EvalReport r = evaluate(pred, gold);
    std::printf("M-1 %.4f\n1-1 %.4f\nVM %.4f\n", r.m1, r.o2o, r.vm);
    std::printf("m1=%.17g o2o=%.17g homogeneity=%.17g completeness=%.17g vm=%.17g "
                "tokens=%ld clusters=%d tags=%d\n",
                r.m1, r.o2o, r.homogeneity, r.completeness, r.vm, r.table.total,
                r.table.clusters, r.table.tags);
    return 0;
}

struct SynthOpts {
    std::string output;
    std::string hmm_file;
    int sentences = 1000;
    int max_len = 20;
    int k = 5;
    int vocab_size = 50;
    std::uint64_t seed = 0;
};

// Letter-encoded nonnegative id ("a".."z", "ba", ...). Synthetic word
// surfaces must stay digit-free: token normalization folds every digit to
// '0' on read, which would merge distinct generator words.
std::string alpha_id(int id) {
    std::string s;
    do {
        s.insert(s.begin(), static_cast<char>('a' + id % 26));
        id /= 26;
    } while (id > 0);
    return s;
}

int cmd_synth(const SynthOpts& o) {
    print_header("synth", {{"output", o.output},
                           {"hmm", o.hmm_file.empty() ? "<random>" : o.hmm_file},
                           {"sentences", std::to_string(o.sentences)},
                           {"max_len", std::to_string(o.max_len)},
                           {"k", std::to_string(o.k)},
                           {"vocab_size", std::to_string(o.vocab_size)},
                           {"seed", std::to_string(o.seed)}});
    HmmParams hmm = o.hmm_file.empty()
                        ? random_hmm(o.k, o.vocab_size, derive_seed(o.seed, {0x686d6dULL}))
                        : load_hmm_text(o.hmm_file);
    Corpus corpus = generate_synthetic(hmm, o.sentences, o.max_len, o.seed);
    std::ofstream out(o.output, std::ios::binary);
    if (!out) throw DataError(msg("cannot write corpus file ", o.output));
    for (const Sentence& s : corpus.sentences) {
        for (std::size_t t = 0; t < s.words.size(); ++t)
            out << 'w' << alpha_id(s.words[t]) << '\t' << 't' << s.tags[t] << '\n';
        out << '\n';
    }
    std::fprintf(stderr, "# wrote %zu sentences, %ld tokens\n", corpus.sentences.size(),
                 corpus.total_tokens);
    return 0;
}

struct GradcheckOpts {
    std::string corpus;
    std::string format = "tokens";
    double h = 1e-4;
    double tolerance = 1e-4;
    int max_coords = 64;
    std::uint64_t seed = 0;
    ModelOpts model;
};

int cmd_gradcheck(const GradcheckOpts& o) {
    ModelConfig mc = resolve_model_config(o.model);
    mc.dropout_rate = 0.0;  // finite differences need a deterministic loss
    KvList kv = model_config_kv(mc);
    kv.insert(kv.end(), {{"corpus", o.corpus.empty() ? "<builtin>" : o.corpus},
                         {"h", fmt_double(o.h)},
                         {"tolerance", fmt_double(o.tolerance)},
                         {"max_coords", std::to_string(o.max_coords)},
                         {"seed", std::to_string(o.seed)}});
    print_header("gradcheck", kv);

    Vocab vocab;
    Corpus corpus;
    if (o.corpus.empty()) {
        const char* text = "the dog runs fast\na cat sat\nthe cat runs\n";
        std::string path = "/tmp/nhmm_gradcheck_builtin.txt";
        std::ofstream tmp(path, std::ios::binary);
        tmp << text;
        tmp.close();
        corpus = read_corpus(path, CorpusFormat::Tokens, vocab);
    } else {
        corpus = read_corpus(o.corpus, parse_corpus_format(o.format), vocab);
    }
    vocab.freeze();

    Model model(mc, std::move(vocab), o.seed);
    Batch batch;
    for (const Sentence& s : corpus.sentences) batch.push_back(&s.words);

    auto f = [&](bool with_grad) {
        return batch_pass(model, batch, Objective::Dml, nullptr, false, 0, 1, with_grad).loss;
    };
    GradCheckOptions opt;
    opt.h = o.h;
    opt.max_coords = o.max_coords;
    opt.seed = o.seed;
    GradCheckResult res = finite_diff_check_detail(f, model.params(), opt);
    std::printf("max_rel_err=%.6e coords_checked=%d worst=%s[%zu] analytic=%.9e numeric=%.9e\n",
                res.max_rel_err, res.coords_checked, res.worst.param.c_str(), res.worst.index,
                res.worst.analytic, res.worst.numeric);
    if (res.max_rel_err > o.tolerance) {
        std::fprintf(stderr, "gradient check failed: %.6e > %.6e\n", res.max_rel_err, o.tolerance);
        return 3;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neural hidden Markov models for unsupervised tag induction"};
    app.require_subcommand(1);

    TrainOpts train_o;
    CLI::App* train_c = app.add_subcommand("train", "train a model on a corpus");
    train_c->add_option("--corpus", train_o.corpus, "training corpus path")->required();
    train_c->add_option("--format", train_o.format, "corpus format: tokens|conll");
    train_c->add_option("--model", train_o.model_out, "output model path");
    train_c->add_option("--report", train_o.report_out, "write the train report here");
    train_c->add_option("--objective", train_o.objective, "dml|em");
    train_c->add_option("--batch-size", train_o.batch_size, "sentences per batch");
    train_c->add_option("--max-len", train_o.max_len, "training length filter");
    train_c->add_option("--epochs", train_o.epochs, "training epochs");
    train_c->add_option("--max-inner", train_o.max_inner, "inner-loop update cap per batch");
    train_c->add_option("--inner-convergence", train_o.inner_convergence,
                        "relative log-probability convergence threshold");
    train_c->add_option("--clip-norm", train_o.clip_norm, "global gradient norm cap");
    train_c->add_option("--seed", train_o.seed, "master RNG seed");
    train_c->add_option("--threads", train_o.threads, "per-sentence inference threads");
    add_model_flags(train_c, train_o.model);

    DecodeOpts decode_o;
    CLI::App* decode_c = app.add_subcommand("decode", "Viterbi-decode a corpus");
    decode_c->add_option("--model", decode_o.model, "trained model path")->required();
    decode_c->add_option("--corpus", decode_o.corpus, "corpus to decode")->required();
    decode_c->add_option("--format", decode_o.format, "corpus format: tokens|conll");
    decode_c->add_option("--output", decode_o.output, "write cluster ids here (default stdout)");
    decode_c->add_option("--seed", decode_o.seed, "seed (recorded for provenance)");

    EvalOpts eval_o;
    CLI::App* eval_c = app.add_subcommand("eval", "score predictions against gold tags");
    eval_c->add_option("--gold", eval_o.gold, "gold file")->required();
    eval_c->add_option("--gold-format", eval_o.gold_format, "gold format: conll|ids");
    eval_c->add_option("--pred", eval_o.pred, "predicted cluster ids (decode output)");
    eval_c->add_option("--model", eval_o.model, "decode with this model instead of --pred");
    eval_c->add_option("--corpus", eval_o.corpus, "corpus to decode (default: the gold file)");
    eval_c->add_option("--format", eval_o.format, "corpus format for --corpus");
    eval_c->add_option("--seed", eval_o.seed, "seed (recorded for provenance)");

    SynthOpts synth_o;
    CLI::App* synth_c = app.add_subcommand("synth", "generate a synthetic gold-tagged corpus");
    synth_c->add_option("--output", synth_o.output, "output conll path")->required();
    synth_c->add_option("--hmm", synth_o.hmm_file, "generating HMM parameters (text format)");
    synth_c->add_option("--sentences", synth_o.sentences, "number of sentences");
    synth_c->add_option("--max-len", synth_o.max_len, "maximum sentence length");
    synth_c->add_option("--k", synth_o.k, "states of the random generator");
    synth_c->add_option("--vocab-size", synth_o.vocab_size, "vocabulary of the random generator");
    synth_c->add_option("--seed", synth_o.seed, "sampling seed");

    GradcheckOpts grad_o;
    CLI::App* grad_c = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    grad_c->add_option("--corpus", grad_o.corpus, "corpus (default: builtin toy sentences)");
    grad_c->add_option("--format", grad_o.format, "corpus format: tokens|conll");
    grad_c->add_option("--fd-step", grad_o.h, "central-difference step");
    grad_c->add_option("--tolerance", grad_o.tolerance, "max accepted relative error");
    grad_c->add_option("--max-coords", grad_o.max_coords, "sampled coordinates per tensor");
    grad_c->add_option("--seed", grad_o.seed, "model init / sampling seed");
    grad_o.model.k = 3;
    grad_o.model.hidden = 8;
    grad_o.model.cnn_filters = 4;
    grad_o.model.char_dim = 4;
    grad_o.model.max_word_len = 12;
    add_model_flags(grad_c, grad_o.model);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (train_c->parsed()) return cmd_train(train_o);
        if (decode_c->parsed()) return cmd_decode(decode_o);
        if (eval_c->parsed()) return cmd_eval(eval_o);
        if (synth_c->parsed()) return cmd_synth(synth_o);
        if (grad_c->parsed()) return cmd_gradcheck(grad_o);
        std::fprintf(stderr, "error: no subcommand selected\n");
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
