// Corpus ingestion. Two formats:
//   tokens -- one sentence per line, whitespace-separated tokens
//   conll  -- one "word<TAB>tag" per line, blank line between sentences
// Tokens are digit-normalized before vocab mapping. Empty sentences are
// never produced. Gold tag strings are interned into dense ids.

#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "nhmm/common.hpp"
#include "nhmm/vocab.hpp"

namespace nhmm {

struct Sentence {
    std::vector<int> words;
    std::vector<int> tags;  // empty when no gold annotation
};

struct Corpus {
    std::vector<Sentence> sentences;
    std::vector<std::string> tag_names;  // gold tag id -> surface
    std::string source;
    std::uint64_t fingerprint = 0;
    long unk_tokens = 0;
    long total_tokens = 0;

    bool has_gold() const {
        return !sentences.empty() && !sentences.front().tags.empty();
    }
};

enum class CorpusFormat { Tokens, Conll };

inline CorpusFormat parse_corpus_format(const std::string& s) {
    if (s == "tokens") return CorpusFormat::Tokens;
    if (s == "conll") return CorpusFormat::Conll;
    throw UsageError(msg("unknown corpus format '", s, "' (expected tokens|conll)"));
}

namespace detail {
inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

inline bool blank(const std::string& line) {
    for (char c : line)
        if (c != ' ' && c != '\t' && c != '\r') return false;
    return true;
}
}  // namespace detail

inline Corpus read_corpus(const std::string& path, CorpusFormat format, Vocab& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError(msg("cannot open corpus file ", path));

    Corpus corpus;
    corpus.source = path;
    std::unordered_map<std::string, int> tag_ids;
    Fnv1a fp;

    auto finish_sentence = [&](Sentence& s) {
        if (s.words.empty()) return;
        for (int w : s.words) fp.u64(static_cast<std::uint64_t>(w));
        fp.u64(0xffffffffULL);
        corpus.total_tokens += static_cast<long>(s.words.size());
        corpus.sentences.push_back(std::move(s));
        s = Sentence{};
    };

    auto map_word = [&](const std::string& raw) {
        std::string norm = normalize_token(raw);
        bool known = vocab.has_word(norm);
        int id = vocab.word_id(norm);
        if (!known && id == Vocab::kUnk) ++corpus.unk_tokens;
        return id;
    };

    std::string line;
    long lineno = 0;
    Sentence cur;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (format == CorpusFormat::Tokens) {
            for (const std::string& tok : detail::split_ws(line)) cur.words.push_back(map_word(tok));
            finish_sentence(cur);
        } else {
            if (detail::blank(line)) {
                finish_sentence(cur);
                continue;
            }
            std::size_t tab = line.find('\t');
            if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size() ||
                line.find('\t', tab + 1) != std::string::npos)
                throw FormatError(msg(path, ":", lineno, ": expected 'word<TAB>tag', got '",
                                      line, "'"));
            std::string word = line.substr(0, tab);
            std::string tag = line.substr(tab + 1);
            cur.words.push_back(map_word(word));
            auto [it, fresh] = tag_ids.emplace(tag, static_cast<int>(corpus.tag_names.size()));
            if (fresh) corpus.tag_names.push_back(tag);
            cur.tags.push_back(it->second);
        }
    }
    finish_sentence(cur);

    if (corpus.sentences.empty()) throw DataError(msg("corpus ", path, " contains no sentences"));
    fp.u64(vocab.checksum());
    corpus.fingerprint = fp.value();
    return corpus;
}

}  // namespace nhmm
