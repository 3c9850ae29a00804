#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lf/layerpack.hpp"
#include "lf/lora.hpp"
#include "lf/tensor.hpp"
#include "lf/textcond.hpp"

namespace lf {

struct BackboneConfig {
    int d_model = 64;
    int n_blocks = 6;
    int n_heads = 4;
    int patch = 4;
    int t_txt = 16;
    // data geometry the position tables are sized for
    int frames = 4;
    int height = 16;
    int width = 16;
    int vocab_size = 3;
    int max_timestep = 100;
    int lora_rank = 4;
    float ln_eps = 1e-5f;

    int head_dim() const { return d_model / n_heads; }
    int patch_dim() const { return patch * patch * 3; }
    int grid_h() const { return height / patch; }
    int grid_w() const { return width / patch; }
    int video_tokens() const { return kNumClips * frames * grid_h() * grid_w(); }
    void validate() const;
};

struct Block {
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
    Tensor ada_w, ada_b;  // timestep embedding -> (shift1, scale1, shift2, scale2)
    std::optional<LoraAdapter> q_motion, k_motion, v_motion;
    std::optional<LoraAdapter> q_content, k_content, v_content;
};

// The denoising network: a small transformer over the joined text-and-video
// token sequence with adaptive-norm timestep conditioning. Input and output
// video tokens live in patch-pixel space; the trainable input projection is
// the linear patch embedder.
struct Model {
    BackboneConfig cfg;

    Tensor embed_w, embed_b;                   // patch-pixel -> d_model
    Tensor pos_clip, pos_frame, pos_patch;     // learned additive position tables
    Tensor vocab_table;                        // [V, d_model]
    Tensor layer_table;                        // [3, d_model]
    Tensor time_w1, time_b1, time_w2, time_b2;
    std::vector<Block> blocks;
    Tensor head_ln_gain, head_ln_bias, head_w, head_b;

    float gate_alpha = 0.0f;
    bool has_motion = false;
    bool has_content = false;

    // canonical order; drives the optimizer and the checkpoint layout
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<int> designated_blocks() const;  // the trainable 1/6, last blocks
    void zero_grads();
};

Model build_model(const BackboneConfig& cfg, Rng& rng);
void attach_motion_adapters(Model& m, Rng& rng);
void attach_content_adapters(Model& m, Rng& rng);

// Sinusoidal features of the integer step (pre-map); deterministic in t.
Tensor timestep_features(int t, int d_model);
// Features passed through the two-layer trainable map.
Tensor timestep_embed(const Model& m, int t, Tape* tape);

// Full bidirectional multi-head attention over the joined sequence including
// the output projection. key_mask, when non-empty, is added to every score
// row (large negative entries hide pad keys).
Tensor attention(const Tensor& x, const Block& block, int n_heads, float gate_alpha,
                 const Tensor& key_mask, Tape* tape);

// eps-prediction for the video token positions, [video tokens, patch_dim].
Tensor forward(Model& m, const PackedSequence& seq, const TextContext& ctx, int t, Tape* tape);

}  // namespace lf
