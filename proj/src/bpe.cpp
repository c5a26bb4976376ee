#include "germ/bpe.hpp"

#include <algorithm>

#include <json.hpp>

#include "germ/errors.hpp"

namespace germ {

namespace {

constexpr const char* kAlphabet = "ACGT";

bool base_char(char c) {
    return c == 'A' || c == 'C' || c == 'G' || c == 'T';
}

void check_sequence(const std::string& seq) {
    for (char c : seq) {
        if (!base_char(c)) {
            throw InvalidCharacter(std::string("character '") + c +
                                   "' outside the ACGT alphabet");
        }
    }
}

void apply_merge(std::vector<std::string>& toks, const std::string& left,
                 const std::string& right) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < toks.size();) {
        if (r + 1 < toks.size() && toks[r] == left && toks[r + 1] == right) {
            toks[w++] = left + right;
            r += 2;
        } else {
            if (w != r) toks[w] = std::move(toks[r]);
            ++w;
            ++r;
        }
    }
    toks.resize(w);
}

}  // namespace

const std::vector<std::string>& Vocab::specials() {
    static const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]",
                                                       "[SEP]", "[MASK]"};
    return kSpecials;
}

Vocab bpe_train(const std::vector<std::string>& corpus, std::size_t target_size) {
    if (corpus.empty()) throw EmptyCorpus("bpe_train on empty corpus");
    bool any_chars = false;
    for (const std::string& seq : corpus) {
        check_sequence(seq);
        if (!seq.empty()) any_chars = true;
    }
    if (!any_chars) throw EmptyCorpus("bpe_train on corpus of empty sequences");

    Vocab vocab;
    vocab.target_size = target_size;
    for (const std::string& s : Vocab::specials()) {
        vocab.token_to_id.emplace(s, vocab.tokens.size());
        vocab.tokens.push_back(s);
    }
    for (const char* c = kAlphabet; *c; ++c) {
        vocab.token_to_id.emplace(std::string(1, *c), vocab.tokens.size());
        vocab.tokens.push_back(std::string(1, *c));
    }

    std::vector<std::vector<std::string>> work;
    work.reserve(corpus.size());
    for (const std::string& seq : corpus) {
        std::vector<std::string> toks;
        toks.reserve(seq.size());
        for (char c : seq) toks.emplace_back(1, c);
        work.push_back(std::move(toks));
    }

    std::size_t regular = 4;  // base alphabet
    while (regular < target_size) {
        std::map<std::pair<std::string, std::string>, std::size_t> counts;
        for (const auto& toks : work) {
            for (std::size_t i = 0; i + 1 < toks.size(); ++i) {
                ++counts[{toks[i], toks[i + 1]}];
            }
        }
        // std::map iterates pairs in lexicographic order, so the first
        // maximal entry is the tie-break winner.
        std::pair<std::string, std::string> best;
        std::size_t best_count = 0;
        for (const auto& [pair, count] : counts) {
            if (count > best_count) {
                best = pair;
                best_count = count;
            }
        }
        if (best_count < 2) break;

        for (auto& toks : work) apply_merge(toks, best.first, best.second);
        vocab.merges.push_back(best);
        const std::string merged = best.first + best.second;
        if (vocab.token_to_id.emplace(merged, vocab.tokens.size()).second) {
            vocab.tokens.push_back(merged);
            ++regular;
        }
    }
    return vocab;
}

std::vector<std::size_t> encode(const std::string& seq, const Vocab& vocab) {
    check_sequence(seq);
    std::vector<std::string> toks;
    toks.reserve(seq.size());
    for (char c : seq) toks.emplace_back(1, c);
    for (const auto& [left, right] : vocab.merges) {
        apply_merge(toks, left, right);
    }
    std::vector<std::size_t> ids;
    ids.reserve(toks.size());
    for (const std::string& t : toks) ids.push_back(vocab.token_to_id.at(t));
    return ids;
}

std::string decode(const std::vector<std::size_t>& ids, const Vocab& vocab) {
    std::string out;
    for (std::size_t id : ids) {
        if (id >= vocab.tokens.size()) {
            throw UnknownId("token id " + std::to_string(id) + " outside vocabulary");
        }
        if (vocab.is_special(id)) continue;
        out += vocab.tokens[id];
    }
    return out;
}

std::string Vocab::to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["specials"] = specials();
    nlohmann::json merges_json = nlohmann::json::array();
    for (const auto& [l, r] : merges) merges_json.push_back({l, r});
    j["merges"] = merges_json;
    j["tokens"] = tokens;
    j["target_size"] = target_size;
    return j.dump();
}

Vocab Vocab::from_json_text(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw IoError("vocab file is not valid JSON");
    Vocab vocab;
    try {
        if (j.at("version").get<int>() != 1) {
            throw VersionUnsupported("unsupported vocab file version");
        }
        vocab.tokens = j.at("tokens").get<std::vector<std::string>>();
        for (const auto& m : j.at("merges")) {
            vocab.merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
        }
        vocab.target_size = j.value("target_size", std::size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed vocab file: ") + e.what());
    }
    for (std::size_t i = 0; i < vocab.tokens.size(); ++i) {
        vocab.token_to_id.emplace(vocab.tokens[i], i);
    }
    return vocab;
}

void CorpusSpec::validate() const {
    if (num_sequences == 0) throw ConfigError("num_sequences must be positive");
    if (min_len < 10 || max_len < min_len) {
        throw ConfigError("sequence lengths must satisfy 10 <= min_len <= max_len");
    }
    for (const MotifSpec& m : motifs) {
        check_sequence(m.motif);
        if (m.motif.empty()) throw ConfigError("empty motif");
        if (m.rate < 0.0 || m.rate > 1.0) throw ConfigError("motif rate outside [0, 1]");
    }
}

std::vector<std::string> gen_corpus(const CorpusSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<std::string> corpus;
    corpus.reserve(spec.num_sequences);
    for (std::size_t s = 0; s < spec.num_sequences; ++s) {
        const std::size_t len =
            spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
        std::string seq(len, 'A');
        for (char& c : seq) c = kAlphabet[rng.below(4)];
        for (const MotifSpec& m : spec.motifs) {
            if (m.motif.size() > len) continue;
            if (rng.uniform() < m.rate) {
                const std::size_t pos = rng.below(len - m.motif.size() + 1);
                seq.replace(pos, m.motif.size(), m.motif);
            }
        }
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

}  // namespace germ
