// Model persistence: a text header (format version, config, vocab, parameter
// manifest) followed by raw little-endian binary doubles for every parameter
// tensor and its Adam state. Line 2 of the file carries an FNV-1a checksum
// of everything after it, so any flipped byte is detected on load.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "nhmm/common.hpp"
#include "nhmm/model.hpp"

namespace nhmm {

namespace detail {

constexpr const char* kModelMagic = "NHMM-MODEL v1";

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double take_f64(const std::string& in, std::size_t& pos) {
    if (pos + 8 > in.size()) throw FormatError("model file truncated inside binary data");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]))
                << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::string fmt_f64(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Reads one \n-terminated line from the body, advancing pos.
inline std::string take_line(const std::string& in, std::size_t& pos) {
    std::size_t end = in.find('\n', pos);
    if (end == std::string::npos) throw FormatError("model file truncated inside header");
    std::string line = in.substr(pos, end - pos);
    pos = end + 1;
    return line;
}

inline std::string expect_field(const std::string& line, const std::string& key) {
    if (line.size() < key.size() + 1 || line.compare(0, key.size(), key) != 0 ||
        line[key.size()] != ' ')
        throw FormatError(msg("model header: expected '", key, " ...', got '", line, "'"));
    return line.substr(key.size() + 1);
}

inline long field_long(const std::string& line, const std::string& key) {
    std::string v = expect_field(line, key);
    std::size_t used = 0;
    long out = std::stol(v, &used);
    if (used != v.size()) throw FormatError(msg("model header: bad integer in '", line, "'"));
    return out;
}

inline double field_double(const std::string& line, const std::string& key) {
    std::string v = expect_field(line, key);
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw FormatError(msg("model header: bad real in '", line, "'"));
    return out;
}

}  // namespace detail

inline void save_model(Model& model, const std::string& path) {
    for (Parameter* p : model.params()) {
        check_finite(p->tensor, p->name.c_str());
        check_finite(p->adam_m, p->name.c_str());
        check_finite(p->adam_v, p->name.c_str());
    }

    std::string body;
    auto line = [&](const std::string& s) {
        body += s;
        body += '\n';
    };
    const ModelConfig& c = model.config;
    line(msg("emission ", to_string(c.emission_mode)));
    line(msg("transition ", to_string(c.transition_mode)));
    line(msg("k ", c.K));
    line(msg("hidden ", c.D));
    line(msg("cnn_filters ", c.cnn_filters_per_width));
    line(msg("cnn_max_width ", c.cnn_max_width));
    line(msg("char_dim ", c.char_dim));
    line(msg("max_word_len ", c.max_word_len));
    line(msg("dropout ", detail::fmt_f64(c.dropout_rate)));
    line(msg("lstm_layers ", c.lstm_layers));
    line(msg("init_uniform_eps ", detail::fmt_f64(c.init_uniform_eps)));
    line(msg("words ", model.vocab.num_words()));
    for (int i = 0; i < model.vocab.num_words(); ++i) line(model.vocab.word(i));
    line(msg("chars ", model.vocab.num_chars()));
    for (int i = 0; i < model.vocab.num_chars(); ++i) line(model.vocab.chr(i));
    line(msg("params ", model.params().size()));
    for (Parameter* p : model.params()) {
        std::string shape;
        for (std::size_t d = 0; d < p->tensor.shape.size(); ++d)
            shape += msg(d ? " " : "", p->tensor.shape[d]);
        line(msg("param ", p->name));
        line(msg("shape ", shape));
        line(msg("steps ", p->step_count));
    }
    line("data");
    for (Parameter* p : model.params()) {
        for (double v : p->tensor.data) detail::put_f64(body, v);
        for (double v : p->adam_m.data) detail::put_f64(body, v);
        for (double v : p->adam_v.data) detail::put_f64(body, v);
    }

    Fnv1a h;
    h.bytes(body.data(), body.size());
    char head[64];
    std::snprintf(head, sizeof head, "%s\nchecksum %016llx\n", detail::kModelMagic,
                  static_cast<unsigned long long>(h.value()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(msg("cannot write model file ", path));
    out << head;
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw DataError(msg("write failed for model file ", path));
}

inline std::unique_ptr<Model> load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(msg("cannot open model file ", path));
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string whole = ss.str();

    std::size_t pos = 0;
    std::string magic = detail::take_line(whole, pos);
    if (magic != detail::kModelMagic)
        throw FormatError(msg("unsupported model format: '", magic, "' (expected '",
                              detail::kModelMagic, "')"));
    std::string cksum_line = detail::take_line(whole, pos);
    std::string cksum_hex = detail::expect_field(cksum_line, "checksum");
    std::string body = whole.substr(pos);
    Fnv1a h;
    h.bytes(body.data(), body.size());
    char want[20];
    std::snprintf(want, sizeof want, "%016llx", static_cast<unsigned long long>(h.value()));
    if (cksum_hex != want)
        throw DataError(msg("model file ", path, " is corrupt: checksum mismatch (header ",
                            cksum_hex, ", computed ", want, ")"));

    pos = 0;
    ModelConfig cfg;
    cfg.emission_mode = parse_emission_mode(detail::expect_field(detail::take_line(body, pos), "emission"));
    cfg.transition_mode =
        parse_transition_mode(detail::expect_field(detail::take_line(body, pos), "transition"));
    cfg.K = static_cast<int>(detail::field_long(detail::take_line(body, pos), "k"));
    cfg.D = static_cast<int>(detail::field_long(detail::take_line(body, pos), "hidden"));
    cfg.cnn_filters_per_width =
        static_cast<int>(detail::field_long(detail::take_line(body, pos), "cnn_filters"));
    cfg.cnn_max_width =
        static_cast<int>(detail::field_long(detail::take_line(body, pos), "cnn_max_width"));
    cfg.char_dim = static_cast<int>(detail::field_long(detail::take_line(body, pos), "char_dim"));
    cfg.max_word_len =
        static_cast<int>(detail::field_long(detail::take_line(body, pos), "max_word_len"));
    cfg.dropout_rate = detail::field_double(detail::take_line(body, pos), "dropout");
    cfg.lstm_layers = static_cast<int>(detail::field_long(detail::take_line(body, pos), "lstm_layers"));
    cfg.init_uniform_eps = detail::field_double(detail::take_line(body, pos), "init_uniform_eps");

    long n_words = detail::field_long(detail::take_line(body, pos), "words");
    std::vector<std::string> words;
    words.reserve(static_cast<std::size_t>(n_words));
    for (long i = 0; i < n_words; ++i) words.push_back(detail::take_line(body, pos));
    long n_chars = detail::field_long(detail::take_line(body, pos), "chars");
    std::vector<std::string> chars;
    chars.reserve(static_cast<std::size_t>(n_chars));
    for (long i = 0; i < n_chars; ++i) chars.push_back(detail::take_line(body, pos));
    Vocab vocab = Vocab::from_lists(words, chars);

    long n_params = detail::field_long(detail::take_line(body, pos), "params");
    struct Manifest {
        std::string name;
        std::vector<int> shape;
        std::uint64_t steps = 0;
    };
    std::vector<Manifest> manifest;
    for (long i = 0; i < n_params; ++i) {
        Manifest m;
        m.name = detail::expect_field(detail::take_line(body, pos), "param");
        std::istringstream sh(detail::expect_field(detail::take_line(body, pos), "shape"));
        int d;
        while (sh >> d) m.shape.push_back(d);
        m.steps = static_cast<std::uint64_t>(detail::field_long(detail::take_line(body, pos), "steps"));
        manifest.push_back(std::move(m));
    }
    if (detail::take_line(body, pos) != "data")
        throw FormatError("model header: missing 'data' marker");

    auto model = std::make_unique<Model>(cfg, std::move(vocab), 0);
    auto& params = model->params();
    if (params.size() != manifest.size())
        throw FormatError(msg("model file lists ", manifest.size(), " parameters but config implies ",
                              params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter* p = params[i];
        const Manifest& m = manifest[i];
        if (p->name != m.name || p->tensor.shape != m.shape)
            throw FormatError(msg("model file parameter ", m.name, " (",
                                  Tensor::shape_str(m.shape), ") does not match expected ", p->name,
                                  " (", Tensor::shape_str(p->tensor.shape), ")"));
        p->step_count = m.steps;
        for (double& v : p->tensor.data) v = detail::take_f64(body, pos);
        for (double& v : p->adam_m.data) v = detail::take_f64(body, pos);
        for (double& v : p->adam_v.data) v = detail::take_f64(body, pos);
    }
    if (pos != body.size()) throw FormatError("model file has trailing bytes after parameter data");
    return model;
}

}  // namespace nhmm
