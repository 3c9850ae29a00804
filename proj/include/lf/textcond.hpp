#pragma once

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

#include "lf/tensor.hpp"

namespace lf {

// Reserved token ids.
constexpr int kPadId = 0;
constexpr int kUnknownId = 1;
constexpr int kEmptyPromptId = 2;
constexpr int kNumReservedIds = 3;

// Layer index convention: 1 = foreground, 2 = background, 3 = blended.
constexpr int kNumLayerPrompts = 3;

// Token string <-> id map. The embedding table itself is a model parameter;
// this type only owns the string side.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(const std::vector<std::string>& tokens);

    int size() const { return kNumReservedIds + static_cast<int>(tokens_.size()); }
    int id_of(const std::string& token) const;  // unknown -> kUnknownId
    const std::vector<std::string>& tokens() const { return tokens_; }

    // file format: UTF-8, one token per line, line number = id - 3
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// lowercase + whitespace split; same string always gives the same ids
std::vector<std::string> tokenize(const std::string& text);

// "<index>, <prompt>" -- a pure prefix, no deduplication
std::string prefix_index(const std::string& prompt, int layer_index);

// Joined per-layer text embeddings: 3 blocks of t_txt tokens in the fixed
// order fg, bg, blended. Pad positions are flagged and masked out of
// attention keys.
struct TextContext {
    Tensor embeddings;             // [3*t_txt, d_model]
    std::vector<int> layer_index;  // per token, 1..3
    std::vector<bool> is_pad;      // per token
    int t_txt = 0;
};

// Token-embedding lookup of each prompt plus the block's layer embedding row
// added to every token of the block, so two blocks holding the same prompt
// differ exactly by their layer rows. Gradients flow into both tables when a
// tape is given.
TextContext encode(const std::array<std::string, 3>& prompts, const Vocabulary& vocab,
                   const Tensor& vocab_table, const Tensor& layer_table, int t_txt, Tape* tape);

// Unconditional branch: every block is the empty-prompt sentinel encoding.
// Layer embeddings stay in place; only the text is dropped.
TextContext null_context(const Tensor& vocab_table, const Tensor& layer_table, int t_txt,
                         Tape* tape);

}  // namespace lf
