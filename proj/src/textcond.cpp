#include "lf/textcond.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lf {

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) : tokens_(tokens) {
    for (size_t i = 0; i < tokens_.size(); ++i) {
        auto [it, inserted] = index_.emplace(tokens_[i], kNumReservedIds + static_cast<int>(i));
        if (!inserted) throw std::invalid_argument("Vocabulary: duplicate token " + tokens_[i]);
    }
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnknownId : it->second;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& t : tokens_) os << t << '\n';
    if (!os) throw std::runtime_error("write failed: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open vocabulary: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) tokens.push_back(line);
    }
    return Vocabulary(tokens);
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string prefix_index(const std::string& prompt, int layer_index) {
    if (layer_index < 1 || layer_index > kNumLayerPrompts)
        throw std::invalid_argument("prefix_index: layer index must be 1, 2 or 3");
    return std::to_string(layer_index) + ", " + prompt;
}

namespace {

TextContext encode_ids(const std::vector<int>& ids, const std::vector<bool>& pads,
                       const Tensor& vocab_table, const Tensor& layer_table, int t_txt,
                       Tape* tape) {
    std::vector<int> layer_rows(ids.size());
    TextContext ctx;
    ctx.t_txt = t_txt;
    ctx.layer_index.resize(ids.size());
    ctx.is_pad = pads;
    for (size_t i = 0; i < ids.size(); ++i) {
        const int block = static_cast<int>(i) / t_txt;
        layer_rows[i] = block;
        ctx.layer_index[i] = block + 1;
    }
    Tensor tok = gather_rows(vocab_table, ids, tape);
    Tensor lay = gather_rows(layer_table, layer_rows, tape);
    ctx.embeddings = add(tok, lay, tape);
    return ctx;
}

}  // namespace

TextContext encode(const std::array<std::string, 3>& prompts, const Vocabulary& vocab,
                   const Tensor& vocab_table, const Tensor& layer_table, int t_txt, Tape* tape) {
    if (t_txt <= 0) throw std::invalid_argument("encode: t_txt must be positive");
    if (vocab_table.extent(0) != vocab.size())
        throw std::invalid_argument("encode: vocabulary table size mismatch");
    std::vector<int> ids;
    std::vector<bool> pads;
    ids.reserve(static_cast<size_t>(3 * t_txt));
    for (int block = 0; block < kNumLayerPrompts; ++block) {
        // the layer index reaches the model through the layer embedder alone;
        // blocks with identical prompts differ exactly by layer rows
        const auto words = tokenize(prompts[static_cast<size_t>(block)]);
        for (int j = 0; j < t_txt; ++j) {
            if (j < static_cast<int>(words.size())) {
                ids.push_back(vocab.id_of(words[static_cast<size_t>(j)]));
                pads.push_back(false);
            } else {
                ids.push_back(kPadId);
                pads.push_back(true);
            }
        }
    }
    return encode_ids(ids, pads, vocab_table, layer_table, t_txt, tape);
}

TextContext null_context(const Tensor& vocab_table, const Tensor& layer_table, int t_txt,
                         Tape* tape) {
    if (t_txt <= 0) throw std::invalid_argument("null_context: t_txt must be positive");
    std::vector<int> ids;
    std::vector<bool> pads;
    for (int block = 0; block < kNumLayerPrompts; ++block) {
        for (int j = 0; j < t_txt; ++j) {
            ids.push_back(j == 0 ? kEmptyPromptId : kPadId);
            pads.push_back(j != 0);
        }
    }
    return encode_ids(ids, pads, vocab_table, layer_table, t_txt, tape);
}

}  // namespace lf
