#pragma once

// shared builders for the unit suites

#include <array>
#include <string>

#include "lf/backbone.hpp"
#include "lf/layerpack.hpp"
#include "lf/rng.hpp"
#include "lf/textcond.hpp"

namespace lftest {

inline lf::Vocabulary test_vocab() {
    return lf::Vocabulary({"a", "red", "ball", "blue", "sky", "disc", "over"});
}

inline lf::BackboneConfig tiny_config(const lf::Vocabulary& vocab) {
    lf::BackboneConfig c;
    c.d_model = 8;
    c.n_blocks = 1;
    c.n_heads = 2;
    c.patch = 2;
    c.t_txt = 2;
    c.frames = 1;
    c.height = 4;
    c.width = 4;
    c.vocab_size = vocab.size();
    c.max_timestep = 10;
    c.lora_rank = 2;
    return c;
}

inline lf::LayerQuadruple random_quadruple(int frames, int height, int width, uint64_t seed) {
    lf::Rng rng(seed);
    lf::LayerQuadruple q;
    q.fg = lf::Video::zeros(frames, height, width, 3);
    q.alpha = lf::Video::zeros(frames, height, width, 1);
    q.bg = lf::Video::zeros(frames, height, width, 3);
    q.blended = lf::Video::zeros(frames, height, width, 3);
    for (auto& v : q.fg.data) v = static_cast<float>(rng.uniform());
    for (auto& v : q.alpha.data) v = static_cast<float>(rng.uniform());
    for (auto& v : q.bg.data) v = static_cast<float>(rng.uniform());
    q.blended = lf::composite(q.fg, q.alpha, q.bg);
    q.prompts = {"a red disc", "a blue sky", "a red disc over a blue sky"};
    return q;
}

inline lf::PackedSequence seq_for(const lf::BackboneConfig& cfg, uint64_t seed) {
    lf::LayerQuadruple q = random_quadruple(cfg.frames, cfg.height, cfg.width, seed);
    return lf::pack(q, cfg.patch, lf::IdentityEmbedding());
}

// random head so outputs are non-trivial (build_model zero-initializes it)
inline void randomize_head(lf::Model& m, uint64_t seed) {
    lf::Rng rng(seed);
    for (auto& v : m.head_w.vec()) v = 0.05f * rng.normal();
    for (auto& v : m.head_b.vec()) v = 0.05f * rng.normal();
}

}  // namespace lftest
