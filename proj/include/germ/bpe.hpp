#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "germ/tensor.hpp"

namespace germ {

// BPE vocabulary over the DNA alphabet. Ids are contiguous: the five
// specials first, then A,C,G,T, then merged tokens in merge order. Specials
// never take part in merges.
struct Vocab {
    static const std::vector<std::string>& specials();

    std::vector<std::string> tokens;                         // id -> string
    std::vector<std::pair<std::string, std::string>> merges;  // replayable
    std::map<std::string, std::size_t> token_to_id;
    std::size_t target_size = 0;  // non-special token budget

    std::size_t size() const { return tokens.size(); }
    bool is_special(std::size_t id) const { return id < specials().size(); }
    std::size_t pad_id() const { return 0; }
    std::size_t unk_id() const { return 1; }
    std::size_t cls_id() const { return 2; }
    std::size_t sep_id() const { return 3; }
    std::size_t mask_id() const { return 4; }
    std::size_t first_regular_id() const { return specials().size(); }

    std::string to_json() const;
    static Vocab from_json_text(const std::string& text);
};

// Greedy highest-frequency pair merging; ties broken by the lexicographically
// smallest (left, right) pair; stops at target_size non-special tokens or
// when no pair occurs at least twice.
Vocab bpe_train(const std::vector<std::string>& corpus, std::size_t target_size);

// Applies the learned merges in order. Input must be an A/C/G/T string.
std::vector<std::size_t> encode(const std::string& seq, const Vocab& vocab);

// Concatenates token strings, dropping specials.
std::string decode(const std::vector<std::size_t>& ids, const Vocab& vocab);

struct MotifSpec {
    std::string motif;
    double rate = 0.0;  // per-sequence planting probability
};

struct CorpusSpec {
    std::size_t num_sequences = 64;
    std::size_t min_len = 10;
    std::size_t max_len = 64;
    std::vector<MotifSpec> motifs;
    std::uint64_t seed = 0;

    void validate() const;
};

// Seeded i.i.d. ACGT sequences with motifs planted at their declared rates.
std::vector<std::string> gen_corpus(const CorpusSpec& spec);

}  // namespace germ
