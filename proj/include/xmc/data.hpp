#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "xmc/rng.hpp"
#include "xmc/tensor.hpp"

namespace xmc::data {

struct EvidenceSpan {
    std::size_t start = 0;  // [start, end) character range
    std::size_t end = 0;
};

struct CodeAnnotation {
    std::string code;
    std::vector<EvidenceSpan> evidence;
};

struct DocumentRecord {
    std::string id;
    std::string text;
    std::vector<CodeAnnotation> annotations;
};

// JSONL, one record per line:
//   {"id": ..., "text": ..., "codes": [{"code": ..., "evidence": [[s,e],...]}]}
std::vector<DocumentRecord> load_corpus(const std::string& path);
void save_corpus(const std::string& path, const std::vector<DocumentRecord>& records);

struct TokenPiece {
    std::string surface;  // lowercased
    std::size_t start = 0;
    std::size_t end = 0;
};

// Lowercased word/punctuation tokenization: alphanumeric runs and
// punctuation runs become separate tokens, whitespace separates.
std::vector<TokenPiece> split_text(const std::string& text);

// A token is "special" when its surface form has no alphanumeric character.
bool is_special_surface(const std::string& surface);

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kStart = 1;
    static constexpr int kEnd = 2;
    static constexpr int kMask = 3;
    static constexpr int kUnk = 4;
    static constexpr int kReserved = 5;

    // Frequency-ranked vocabulary over the training split, capped at
    // max_size entries including the reserved tokens.
    static Vocabulary build(const std::vector<DocumentRecord>& train_split, std::size_t max_size);

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    int id_of(const std::string& surface) const {
        auto it = ids_.find(surface);
        return it == ids_.end() ? kUnk : it->second;
    }
    const std::string& surface_of(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return tokens_.size(); }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

struct TokenizedDocument {
    std::string doc_id;
    std::vector<int> ids;                              // includes start/end markers
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // markers get empty spans
    std::vector<bool> special;
    std::map<std::string, std::set<int>> evidence;     // code -> token indices
    std::vector<std::string> labels;                   // annotated codes
    bool truncated = false;

    int length() const { return static_cast<int>(ids.size()); }
};

// Evidence token sets contain every token whose character span overlaps
// an annotated span of that code. Truncation to max_len keeps the end
// marker and raises `truncated`.
TokenizedDocument tokenize_and_align(const DocumentRecord& record, const Vocabulary& vocab, int max_len);

struct SynthConfig {
    int vocab_words = 400;  // distractor word count
    int codes = 10;
    std::vector<std::vector<std::string>> trigger_phrases;  // default: auto, 2 words per code
    int train_docs = 2000;
    int val_docs = 200;
    int test_docs = 200;
    int min_tokens = 16;  // content tokens, excluding the sequence markers
    int max_tokens = 96;
    double noise_rate = 0.15;       // chance a distractor slot is punctuation-only
    double code_probability = 0.25;
    std::uint64_t seed = 13;

    void validate() const;
    std::vector<std::vector<std::string>> resolved_triggers() const;
};

struct Corpus {
    std::vector<DocumentRecord> train;
    std::vector<DocumentRecord> val;
    std::vector<DocumentRecord> test;
};

// Plants one trigger phrase per sampled code at a random position and
// records its character span as the evidence annotation.
Corpus generate_synthetic(const SynthConfig& config);

// Sorted union of annotated codes across all splits.
std::vector<std::string> label_set(const Corpus& corpus);

}  // namespace xmc::data
