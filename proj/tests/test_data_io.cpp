// Vocabulary handling, corpus parsing, and model serialization.

#include <fstream>
#include <limits>
#include <sstream>

#include "helpers.hpp"

using namespace nhmm;
using Catch::Approx;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ModelConfig tiny_config(EmissionMode em, TransitionMode tr) {
    ModelConfig c;
    c.emission_mode = em;
    c.transition_mode = tr;
    c.K = 2;
    c.D = 6;
    c.char_dim = 4;
    c.cnn_filters_per_width = 2;
    c.cnn_max_width = 2;
    c.max_word_len = 6;
    c.lstm_layers = 2;
    return c;
}

}  // namespace

TEST_CASE("token normalization replaces digits and keeps case") {
    REQUIRE(normalize_token("1987") == "0000");
    REQUIRE(normalize_token("abc123") == "abc000");
    REQUIRE(normalize_token("ABC") == "ABC");
    REQUIRE(normalize_token("U2-42nd") == "U0-00nd");
    REQUIRE(normalize_token("") == "");
}

TEST_CASE("vocab reserves three ids in both tables") {
    Vocab v;
    REQUIRE(v.num_words() == 3);
    REQUIRE(v.num_chars() == 3);
    REQUIRE(v.word(Vocab::kUnk) == "<unk>");
    REQUIRE(v.word(Vocab::kPad) == "<pad>");
    REQUIRE(v.word(Vocab::kSos) == "<sos>");
    REQUIRE(v.chr(0) == "<unk>");

    int id = v.word_id("cab");
    REQUIRE(id == 3);
    REQUIRE(v.word_id("cab") == 3);       // stable
    REQUIRE(v.num_chars() == 6);          // c, a, b appended
    REQUIRE(v.char_id("a") == 4);

    v.freeze();
    REQUIRE(v.word_id("new") == Vocab::kUnk);
    REQUIRE(v.char_id("z") == Vocab::kUnk);
    REQUIRE(v.num_words() == 4);
    REQUIRE(v.find_word("cab") == 3);
    REQUIRE(v.find_word("zzz") == Vocab::kUnk);
    REQUIRE(v.has_word("cab"));
    REQUIRE_FALSE(v.has_word("zzz"));
    REQUIRE_THROWS_AS(v.word(99), VocabError);
}

TEST_CASE("unfrozen word copy accepts words but not characters") {
    Vocab v;
    v.word_id("ab");
    v.freeze();
    Vocab ext = v.unfrozen_words_copy();
    int id = ext.word_id("ba");  // known chars, new word
    REQUIRE(id == 4);
    REQUIRE(ext.num_chars() == v.num_chars());
    // A word with unknown characters is still added; the unseen chars map
    // to <unk> in its grid row.
    int id2 = ext.word_id("xy");
    REQUIRE(id2 == 5);
    REQUIRE(ext.num_chars() == v.num_chars());
    std::vector<int> row = ext.char_row(id2, 4);
    REQUIRE(row == std::vector<int>{Vocab::kUnk, Vocab::kUnk, Vocab::kPad, Vocab::kPad});
}

TEST_CASE("char rows pad and truncate to the grid width") {
    Vocab v;
    int id = v.word_id("abcde");
    std::vector<int> wide = v.char_row(id, 8);
    REQUIRE(wide.size() == 8);
    REQUIRE(wide[0] == v.char_id("a"));
    REQUIRE(wide[4] == v.char_id("e"));
    REQUIRE(wide[5] == Vocab::kPad);
    std::vector<int> narrow = v.char_row(id, 3);
    REQUIRE(narrow == std::vector<int>{v.char_id("a"), v.char_id("b"), v.char_id("c")});
}

TEST_CASE("vocab list round trip") {
    Vocab v;
    v.word_id("dog");
    v.word_id("cat");
    std::vector<std::string> words, chars;
    for (int i = 0; i < v.num_words(); ++i) words.push_back(v.word(i));
    for (int i = 0; i < v.num_chars(); ++i) chars.push_back(v.chr(i));
    Vocab back = Vocab::from_lists(words, chars);
    REQUIRE(back.num_words() == v.num_words());
    REQUIRE(back.num_chars() == v.num_chars());
    REQUIRE(back.find_word("cat") == v.find_word("cat"));
    REQUIRE(back.checksum() == v.checksum());
    REQUIRE(back.frozen());

    std::vector<std::string> bad = words;
    bad[0] = "<wrong>";
    REQUIRE_THROWS_AS(Vocab::from_lists(bad, chars), FormatError);
    std::vector<std::string> dup = words;
    dup.push_back("dog");
    REQUIRE_THROWS_AS(Vocab::from_lists(dup, chars), FormatError);
}

TEST_CASE("tokens format parsing") {
    std::string path = nt::write_temp("nhmm_test_tokens.txt",
                                      "the  dog\truns\n"
                                      "\n"
                                      "a cat 42\r\n"
                                      "\n\n");
    Vocab vocab;
    Corpus corpus = read_corpus(path, CorpusFormat::Tokens, vocab);
    REQUIRE(corpus.sentences.size() == 2);
    REQUIRE(corpus.sentences[0].words.size() == 3);
    REQUIRE(corpus.sentences[1].words.size() == 3);
    REQUIRE(corpus.total_tokens == 6);
    REQUIRE_FALSE(corpus.has_gold());
    // Digit normalization folds "42" into "00".
    REQUIRE(vocab.has_word("00"));
    REQUIRE_FALSE(vocab.has_word("42"));
    // First real word gets the first unreserved id.
    REQUIRE(vocab.find_word("the") == 3);
    REQUIRE(corpus.unk_tokens == 0);

    // Same file, same fingerprint; different content, different fingerprint.
    Vocab v2;
    Corpus again = read_corpus(path, CorpusFormat::Tokens, v2);
    REQUIRE(again.fingerprint == corpus.fingerprint);
    std::string path2 = nt::write_temp("nhmm_test_tokens2.txt", "the dog barks\n");
    Vocab v3;
    REQUIRE(read_corpus(path2, CorpusFormat::Tokens, v3).fingerprint != corpus.fingerprint);
}

TEST_CASE("conll format parsing") {
    std::string path = nt::write_temp("nhmm_test_conll.txt",
                                      "The\tDET\n"
                                      "dog\tNOUN\n"
                                      "runs\tVERB\n"
                                      "\n"
                                      "A\tDET\n"
                                      "cat\tNOUN\n");
    Vocab vocab;
    Corpus corpus = read_corpus(path, CorpusFormat::Conll, vocab);
    REQUIRE(corpus.sentences.size() == 2);
    REQUIRE(corpus.has_gold());
    REQUIRE(corpus.tag_names.size() == 3);
    REQUIRE(corpus.tag_names[0] == "DET");
    REQUIRE(corpus.sentences[0].tags == std::vector<int>{0, 1, 2});
    REQUIRE(corpus.sentences[1].tags == std::vector<int>{0, 1});
    REQUIRE(corpus.sentences[0].words[0] == vocab.find_word("The"));

    std::string bad = nt::write_temp("nhmm_test_badconll.txt", "word-without-tag\n");
    Vocab v2;
    try {
        read_corpus(bad, CorpusFormat::Conll, v2);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find(":1") != std::string::npos);  // line number
    }

    std::string empty = nt::write_temp("nhmm_test_empty.txt", "\n\n");
    Vocab v3;
    REQUIRE_THROWS_AS(read_corpus(empty, CorpusFormat::Tokens, v3), DataError);
    Vocab v4;
    REQUIRE_THROWS_AS(read_corpus("/nonexistent/file.txt", CorpusFormat::Tokens, v4), DataError);
}

TEST_CASE("frozen vocab counts unknown tokens") {
    std::string train = nt::write_temp("nhmm_test_train.txt", "the dog runs\n");
    std::string test = nt::write_temp("nhmm_test_test.txt", "the cat runs quickly\n");
    Vocab vocab;
    read_corpus(train, CorpusFormat::Tokens, vocab);
    vocab.freeze();
    Corpus held = read_corpus(test, CorpusFormat::Tokens, vocab);
    REQUIRE(held.unk_tokens == 2);  // cat, quickly
    REQUIRE(held.sentences[0].words[1] == Vocab::kUnk);
    REQUIRE(held.sentences[0].words[0] == vocab.find_word("the"));
}

TEST_CASE("model save/load round trip is byte-identical") {
    std::string corpus_path = nt::write_temp("nhmm_test_io_corpus.txt",
                                             "the dog runs fast\na cat sat\nthe cat runs\n");
    for (auto em : {EmissionMode::Lookup, EmissionMode::CharCnn}) {
        for (auto tr : {TransitionMode::Static, TransitionMode::Lstm}) {
            Vocab vocab;
            Corpus corpus = read_corpus(corpus_path, CorpusFormat::Tokens, vocab);
            vocab.freeze();
            Model model(tiny_config(em, tr), std::move(vocab), 71);

            // Give the optimizer state non-trivial content.
            TrainConfig cfg;
            cfg.epochs = 1;
            cfg.batch_size = 2;
            cfg.max_inner_loops = 2;
            train(model, corpus, cfg);

            std::string p1 = "/tmp/nhmm_test_model_a.bin";
            std::string p2 = "/tmp/nhmm_test_model_b.bin";
            save_model(model, p1);
            auto loaded = load_model(p1);
            save_model(*loaded, p2);
            REQUIRE(slurp(p1) == slurp(p2));

            REQUIRE(loaded->config.K == model.config.K);
            REQUIRE(loaded->config.emission_mode == model.config.emission_mode);
            REQUIRE(loaded->config.transition_mode == model.config.transition_mode);
            REQUIRE(loaded->vocab.checksum() == model.vocab.checksum());
            REQUIRE(loaded->param_checksum() == model.param_checksum());

            auto pa = model.params();
            auto pb = loaded->params();
            REQUIRE(pa.size() == pb.size());
            for (std::size_t i = 0; i < pa.size(); ++i) {
                REQUIRE(pa[i]->name == pb[i]->name);
                REQUIRE(pa[i]->tensor.data == pb[i]->tensor.data);
                REQUIRE(pa[i]->adam_m.data == pb[i]->adam_m.data);
                REQUIRE(pa[i]->adam_v.data == pb[i]->adam_v.data);
                REQUIRE(pa[i]->step_count == pb[i]->step_count);
            }

            // The loaded model computes identical potentials and decodes
            // identically.
            REQUIRE(model.emission_log_probs().data == loaded->emission_log_probs().data);
            auto d1 = decode_corpus(model, corpus);
            auto d2 = decode_corpus(*loaded, corpus);
            REQUIRE(d1 == d2);
        }
    }
}

TEST_CASE("model file corruption is detected") {
    Vocab vocab;
    vocab.word_id("ab");
    vocab.freeze();
    Model model(tiny_config(EmissionMode::Lookup, TransitionMode::Static), std::move(vocab), 73);
    std::string path = "/tmp/nhmm_test_corrupt.bin";
    save_model(model, path);
    std::string good = slurp(path);

    // Wrong magic line.
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    nt::write_temp("nhmm_test_corrupt.bin", bad_magic);
    REQUIRE_THROWS_AS(load_model(path), FormatError);

    // Flipped payload byte (inside the binary tail).
    std::string flipped = good;
    flipped[flipped.size() - 9] = static_cast<char>(flipped[flipped.size() - 9] ^ 0x40);
    nt::write_temp("nhmm_test_corrupt.bin", flipped);
    REQUIRE_THROWS_AS(load_model(path), DataError);

    // Truncation.
    std::string cut = good.substr(0, good.size() - 32);
    nt::write_temp("nhmm_test_corrupt.bin", cut);
    REQUIRE_THROWS_AS(load_model(path), DataError);

    REQUIRE_THROWS_AS(load_model("/nonexistent/model.bin"), DataError);
}

TEST_CASE("save refuses non-finite parameters") {
    Vocab vocab;
    vocab.word_id("ab");
    vocab.freeze();
    Model model(tiny_config(EmissionMode::Lookup, TransitionMode::Static), std::move(vocab), 79);
    model.param("emit.tag_embed").tensor.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(save_model(model, "/tmp/nhmm_test_nan.bin"), NumericError);
}
