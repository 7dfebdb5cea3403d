// Word and character vocabularies with fixed reserved ids:
//   0 = <unk>, 1 = <pad>, 2 = <sos>  (same layout in both tables).
// Words use <unk> for OOV and <sos> as the LSTM start symbol; chars use
// <pad> to right-pad fixed-width grids. Tokens are digit-normalized
// ("1987" -> "0000") and never case-folded.

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "nhmm/common.hpp"

namespace nhmm {

inline std::string normalize_token(const std::string& raw) {
    std::string out = raw;
    for (char& c : out)
        if (c >= '0' && c <= '9') c = '0';
    return out;
}

class Vocab {
  public:
    static constexpr int kUnk = 0;
    static constexpr int kPad = 1;
    static constexpr int kSos = 2;

    Vocab() {
        for (const char* s : {"<unk>", "<pad>", "<sos>"}) {
            word2id_[s] = static_cast<int>(id2word_.size());
            id2word_.push_back(s);
            char2id_[s] = static_cast<int>(id2char_.size());
            id2char_.push_back(s);
        }
    }

    // Map a normalized token to its id, adding it (and its characters)
    // unless the respective table is frozen.
    int word_id(const std::string& tok) {
        auto it = word2id_.find(tok);
        if (it != word2id_.end()) return it->second;
        if (words_frozen_) return kUnk;
        int id = static_cast<int>(id2word_.size());
        word2id_.emplace(tok, id);
        id2word_.push_back(tok);
        for (char c : tok) char_id(std::string(1, c));
        return id;
    }

    int char_id(const std::string& ch) {
        auto it = char2id_.find(ch);
        if (it != char2id_.end()) return it->second;
        if (chars_frozen_) return kUnk;
        int id = static_cast<int>(id2char_.size());
        char2id_.emplace(ch, id);
        id2char_.push_back(ch);
        return id;
    }

    int find_word(const std::string& tok) const {
        auto it = word2id_.find(tok);
        return it == word2id_.end() ? kUnk : it->second;
    }

    bool has_word(const std::string& tok) const { return word2id_.count(tok) > 0; }

    const std::string& word(int id) const {
        if (id < 0 || id >= num_words()) throw VocabError(msg("word id ", id, " out of range"));
        return id2word_[static_cast<std::size_t>(id)];
    }

    const std::string& chr(int id) const {
        if (id < 0 || id >= num_chars()) throw VocabError(msg("char id ", id, " out of range"));
        return id2char_[static_cast<std::size_t>(id)];
    }

    int num_words() const { return static_cast<int>(id2word_.size()); }
    int num_chars() const { return static_cast<int>(id2char_.size()); }

    void freeze() { words_frozen_ = chars_frozen_ = true; }
    bool frozen() const { return words_frozen_; }

    // Decode-time extension for char-cnn models: new word types may be
    // appended (their emission scores come from the CNN) but the character
    // table stays fixed -- unseen characters map to <unk>.
    Vocab unfrozen_words_copy() const {
        Vocab v = *this;
        v.words_frozen_ = false;
        v.chars_frozen_ = true;
        return v;
    }

    // Character-id row for a word surface, truncated/padded to width cols.
    std::vector<int> char_row(int word_id, int cols) const {
        const std::string& w = word(word_id);
        std::vector<int> row(static_cast<std::size_t>(cols), kPad);
        int n = 0;
        for (char c : w) {
            if (n >= cols) break;
            auto it = char2id_.find(std::string(1, c));
            row[static_cast<std::size_t>(n++)] = it == char2id_.end() ? kUnk : it->second;
        }
        return row;
    }

    // Rebuild a frozen vocab from serialized id-ordered tables.
    static Vocab from_lists(const std::vector<std::string>& words,
                            const std::vector<std::string>& chars) {
        Vocab v;
        if (words.size() < 3 || chars.size() < 3)
            throw FormatError("vocab tables must include the three reserved symbols");
        for (int i = 0; i < 3; ++i)
            if (words[static_cast<std::size_t>(i)] != v.id2word_[static_cast<std::size_t>(i)] ||
                chars[static_cast<std::size_t>(i)] != v.id2char_[static_cast<std::size_t>(i)])
                throw FormatError(msg("reserved vocab id ", i, " has unexpected surface"));
        for (std::size_t i = 3; i < words.size(); ++i) {
            if (v.word2id_.count(words[i])) throw FormatError(msg("duplicate word '", words[i], "'"));
            v.word2id_.emplace(words[i], static_cast<int>(i));
            v.id2word_.push_back(words[i]);
        }
        for (std::size_t i = 3; i < chars.size(); ++i) {
            if (v.char2id_.count(chars[i])) throw FormatError(msg("duplicate char '", chars[i], "'"));
            v.char2id_.emplace(chars[i], static_cast<int>(i));
            v.id2char_.push_back(chars[i]);
        }
        v.freeze();
        return v;
    }

    std::uint64_t checksum() const {
        Fnv1a h;
        for (const auto& w : id2word_) h.str(w);
        h.u64(0x7c);
        for (const auto& c : id2char_) h.str(c);
        return h.value();
    }

  private:
    std::unordered_map<std::string, int> word2id_;
    std::vector<std::string> id2word_;
    std::unordered_map<std::string, int> char2id_;
    std::vector<std::string> id2char_;
    bool words_frozen_ = false;
    bool chars_frozen_ = false;
};

}  // namespace nhmm
