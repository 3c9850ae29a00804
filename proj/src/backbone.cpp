#include "lf/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace lf {

void BackboneConfig::validate() const {
    if (d_model <= 0 || n_blocks <= 0 || n_heads <= 0 || patch <= 0 || t_txt <= 0)
        throw std::invalid_argument("BackboneConfig: extents must be positive");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("BackboneConfig: d_model must be divisible by n_heads");
    if (height % patch != 0 || width % patch != 0)
        throw std::invalid_argument("BackboneConfig: H and W must be divisible by patch");
    if (frames <= 0) throw std::invalid_argument("BackboneConfig: frames must be positive");
    if (vocab_size < kNumReservedIds)
        throw std::invalid_argument("BackboneConfig: vocab_size below reserved ids");
    if (max_timestep <= 0) throw std::invalid_argument("BackboneConfig: max_timestep must be positive");
    if (lora_rank <= 0 || lora_rank >= d_model)
        throw std::invalid_argument("BackboneConfig: lora_rank must be in (0, d_model)");
    if (ln_eps <= 0.0f) throw std::invalid_argument("BackboneConfig: ln_eps must be positive");
}

std::vector<int> Model::designated_blocks() const {
    // the last ceil(n_blocks / 6) blocks host adapters and stage-1 updates
    const int n = cfg.n_blocks;
    const int count = (n + 5) / 6;
    std::vector<int> out;
    for (int i = n - count; i < n; ++i) out.push_back(i);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed.w", embed_w);
    out.emplace_back("embed.b", embed_b);
    out.emplace_back("pos.clip", pos_clip);
    out.emplace_back("pos.frame", pos_frame);
    out.emplace_back("pos.patch", pos_patch);
    out.emplace_back("text.vocab", vocab_table);
    out.emplace_back("text.layer", layer_table);
    out.emplace_back("time.w1", time_w1);
    out.emplace_back("time.b1", time_b1);
    out.emplace_back("time.w2", time_w2);
    out.emplace_back("time.b2", time_b2);
    for (size_t i = 0; i < blocks.size(); ++i) {
        Block& b = blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        out.emplace_back(p + "ln1.gain", b.ln1_gain);
        out.emplace_back(p + "ln1.bias", b.ln1_bias);
        out.emplace_back(p + "ln2.gain", b.ln2_gain);
        out.emplace_back(p + "ln2.bias", b.ln2_bias);
        out.emplace_back(p + "wq", b.wq);
        out.emplace_back(p + "bq", b.bq);
        out.emplace_back(p + "wk", b.wk);
        out.emplace_back(p + "bk", b.bk);
        out.emplace_back(p + "wv", b.wv);
        out.emplace_back(p + "bv", b.bv);
        out.emplace_back(p + "wo", b.wo);
        out.emplace_back(p + "bo", b.bo);
        out.emplace_back(p + "ff.w1", b.ff_w1);
        out.emplace_back(p + "ff.b1", b.ff_b1);
        out.emplace_back(p + "ff.w2", b.ff_w2);
        out.emplace_back(p + "ff.b2", b.ff_b2);
        out.emplace_back(p + "ada.w", b.ada_w);
        out.emplace_back(p + "ada.b", b.ada_b);
        auto push_adapter = [&](std::optional<LoraAdapter>& ad, const char* proj,
                                const char* family) {
            if (!ad.has_value()) return;
            const std::string key =
                "lora.block" + std::to_string(i) + "." + proj + "." + family;
            out.emplace_back(key + ".a", ad->a);
            out.emplace_back(key + ".b", ad->b);
        };
        push_adapter(b.q_motion, "q", "motion");
        push_adapter(b.k_motion, "k", "motion");
        push_adapter(b.v_motion, "v", "motion");
        push_adapter(b.q_content, "q", "content");
        push_adapter(b.k_content, "k", "content");
        push_adapter(b.v_content, "v", "content");
    }
    out.emplace_back("head.ln.gain", head_ln_gain);
    out.emplace_back("head.ln.bias", head_ln_bias);
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
}

void Model::zero_grads() {
    for (auto& [name, t] : named_params()) t.zero_grad();
}

Model build_model(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const int d = cfg.d_model;
    const float w_std = 0.02f;

    m.embed_w = Tensor::randn({cfg.patch_dim(), d}, rng, w_std, true);
    m.embed_b = Tensor::zeros({d}, true);
    m.pos_clip = Tensor::randn({kNumClips, d}, rng, w_std, true);
    m.pos_frame = Tensor::randn({cfg.frames, d}, rng, w_std, true);
    m.pos_patch = Tensor::randn({cfg.grid_h() * cfg.grid_w(), d}, rng, w_std, true);
    m.vocab_table = Tensor::randn({cfg.vocab_size, d}, rng, w_std, true);
    m.layer_table = Tensor::randn({kNumLayerPrompts, d}, rng, w_std, true);
    m.time_w1 = Tensor::randn({d, d}, rng, w_std, true);
    m.time_b1 = Tensor::zeros({d}, true);
    m.time_w2 = Tensor::randn({d, d}, rng, w_std, true);
    m.time_b2 = Tensor::zeros({d}, true);

    m.blocks.resize(static_cast<size_t>(cfg.n_blocks));
    for (auto& b : m.blocks) {
        b.ln1_gain = Tensor::full({d}, 1.0f, true);
        b.ln1_bias = Tensor::zeros({d}, true);
        b.ln2_gain = Tensor::full({d}, 1.0f, true);
        b.ln2_bias = Tensor::zeros({d}, true);
        b.wq = Tensor::randn({d, d}, rng, w_std, true);
        b.bq = Tensor::zeros({d}, true);
        b.wk = Tensor::randn({d, d}, rng, w_std, true);
        b.bk = Tensor::zeros({d}, true);
        b.wv = Tensor::randn({d, d}, rng, w_std, true);
        b.bv = Tensor::zeros({d}, true);
        b.wo = Tensor::randn({d, d}, rng, w_std, true);
        b.bo = Tensor::zeros({d}, true);
        b.ff_w1 = Tensor::randn({d, 4 * d}, rng, w_std, true);
        b.ff_b1 = Tensor::zeros({4 * d}, true);
        b.ff_w2 = Tensor::randn({4 * d, d}, rng, w_std, true);
        b.ff_b2 = Tensor::zeros({d}, true);
        // zero-initialized modulation: the block starts as a plain pre-norm block
        b.ada_w = Tensor::zeros({d, 4 * d}, true);
        b.ada_b = Tensor::zeros({4 * d}, true);
    }
    m.head_ln_gain = Tensor::full({d}, 1.0f, true);
    m.head_ln_bias = Tensor::zeros({d}, true);
    // zero-initialized head: the untrained model predicts exactly zero noise
    m.head_w = Tensor::zeros({d, cfg.patch_dim()}, true);
    m.head_b = Tensor::zeros({cfg.patch_dim()}, true);
    return m;
}

void attach_motion_adapters(Model& m, Rng& rng) {
    if (m.has_motion) throw std::logic_error("attach_motion_adapters: already attached");
    for (int bi : m.designated_blocks()) {
        Block& b = m.blocks[static_cast<size_t>(bi)];
        const std::string host = "block" + std::to_string(bi);
        b.q_motion = make_adapter(m.cfg.d_model, m.cfg.lora_rank, LoraFamily::kMotion,
                                  host + ".q", rng);
        b.k_motion = make_adapter(m.cfg.d_model, m.cfg.lora_rank, LoraFamily::kMotion,
                                  host + ".k", rng);
        b.v_motion = make_adapter(m.cfg.d_model, m.cfg.lora_rank, LoraFamily::kMotion,
                                  host + ".v", rng);
    }
    m.has_motion = true;
}

void attach_content_adapters(Model& m, Rng& rng) {
    if (m.has_content) throw std::logic_error("attach_content_adapters: already attached");
    for (int bi : m.designated_blocks()) {
        Block& b = m.blocks[static_cast<size_t>(bi)];
        const std::string host = "block" + std::to_string(bi);
        b.q_content = make_adapter(m.cfg.d_model, m.cfg.lora_rank, LoraFamily::kContent,
                                   host + ".q", rng);
        b.k_content = make_adapter(m.cfg.d_model, m.cfg.lora_rank, LoraFamily::kContent,
                                   host + ".k", rng);
        b.v_content = make_adapter(m.cfg.d_model, m.cfg.lora_rank, LoraFamily::kContent,
                                   host + ".v", rng);
    }
    m.has_content = true;
}

Tensor timestep_features(int t, int d_model) {
    const int half = d_model / 2;
    Tensor out = Tensor::zeros({1, d_model});
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out.data()[i] = static_cast<float>(std::sin(t * freq));
        out.data()[half + i] = static_cast<float>(std::cos(t * freq));
    }
    if (d_model % 2 == 1) out.data()[d_model - 1] = 1.0f;
    return out;
}

Tensor timestep_embed(const Model& m, int t, Tape* tape) {
    if (t < 0 || t >= m.cfg.max_timestep)
        throw std::out_of_range("timestep_embed: step out of range [0, T)");
    Tensor feat = timestep_features(t, m.cfg.d_model);
    Tensor h = gelu(add(matmul(feat, m.time_w1, tape), m.time_b1, tape), tape);
    return add(matmul(h, m.time_w2, tape), m.time_b2, tape);
}

Tensor attention(const Tensor& x, const Block& block, int n_heads, float gate_alpha,
                 const Tensor& key_mask, Tape* tape) {
    const int d = x.extent(1);
    if (d % n_heads != 0) throw std::invalid_argument("attention: d_model not divisible by heads");
    const int hd = d / n_heads;
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

    Tensor q = adapted_projection(x, block.wq, block.bq,
                                  block.q_motion ? &*block.q_motion : nullptr,
                                  block.q_content ? &*block.q_content : nullptr, gate_alpha, tape);
    Tensor k = adapted_projection(x, block.wk, block.bk,
                                  block.k_motion ? &*block.k_motion : nullptr,
                                  block.k_content ? &*block.k_content : nullptr, gate_alpha, tape);
    Tensor v = adapted_projection(x, block.wv, block.bv,
                                  block.v_motion ? &*block.v_motion : nullptr,
                                  block.v_content ? &*block.v_content : nullptr, gate_alpha, tape);

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        // scaling q first keeps the 1/sqrt(hd) factor off the LxL matrix
        Tensor qh = scale(slice_cols(q, h * hd, (h + 1) * hd, tape), inv_sqrt_hd, tape);
        Tensor kh = slice_cols(k, h * hd, (h + 1) * hd, tape);
        Tensor vh = slice_cols(v, h * hd, (h + 1) * hd, tape);
        Tensor scores = matmul(qh, transpose(kh, tape), tape);
        if (key_mask.defined()) scores = add(scores, key_mask, tape);
        Tensor weights = softmax(scores, -1, tape);
        head_outs.push_back(matmul(weights, vh, tape));
    }
    Tensor merged = concat_cols(head_outs, tape);
    return add(matmul(merged, block.wo, tape), block.bo, tape);
}

namespace {

// u * (1 + scale) + shift, with scale/shift sliced out of the block's
// modulation vector
Tensor modulate(const Tensor& u, const Tensor& ada, int part, int d, Tape* tape) {
    Tensor shift = reshape(slice_cols(ada, (2 * part) * d, (2 * part + 1) * d, tape), {d}, tape);
    Tensor sc = reshape(slice_cols(ada, (2 * part + 1) * d, (2 * part + 2) * d, tape), {d}, tape);
    return add(mul(u, add_scalar(sc, 1.0f, tape), tape), shift, tape);
}

}  // namespace

Tensor forward(Model& m, const PackedSequence& seq, const TextContext& ctx, int t, Tape* tape) {
    const BackboneConfig& cfg = m.cfg;
    seq.validate();
    if (seq.token_dim != cfg.patch_dim())
        throw std::invalid_argument("forward: sequence tokens must be patch-pixel latents");
    if (seq.frames_per_clip != cfg.frames || seq.grid_h != cfg.grid_h() ||
        seq.grid_w != cfg.grid_w())
        throw std::invalid_argument("forward: sequence geometry does not match the model");
    if (ctx.t_txt != cfg.t_txt || ctx.embeddings.extent(0) != 3 * cfg.t_txt ||
        ctx.embeddings.extent(1) != cfg.d_model)
        throw std::invalid_argument("forward: text context shape does not match the model");
    if (m.gate_alpha != 0.0f && m.gate_alpha != 1.0f)
        throw std::invalid_argument("forward: gate must be exactly 0 or 1");

    const int d = cfg.d_model;
    const int n_text = 3 * cfg.t_txt;
    const int n_video = seq.total_tokens();
    const int total = n_text + n_video;

    // position embeddings for the video tokens
    std::vector<int> clip_ids(static_cast<size_t>(n_video));
    std::vector<int> frame_ids(static_cast<size_t>(n_video));
    std::vector<int> patch_ids(static_cast<size_t>(n_video));
    for (int i = 0; i < n_video; ++i) {
        const PositionId& pid = seq.position_ids[static_cast<size_t>(i)];
        clip_ids[static_cast<size_t>(i)] = pid.clip;
        frame_ids[static_cast<size_t>(i)] = pid.frame;
        patch_ids[static_cast<size_t>(i)] = pid.patch;
    }
    Tensor pos = add(add(gather_rows(m.pos_clip, clip_ids, tape),
                         gather_rows(m.pos_frame, frame_ids, tape), tape),
                     gather_rows(m.pos_patch, patch_ids, tape), tape);
    Tensor vid = add(add(matmul(seq.tokens, m.embed_w, tape), m.embed_b, tape), pos, tape);
    Tensor x = concat_rows(ctx.embeddings, vid, tape);

    // pad text tokens are hidden from every attention row
    Tensor key_mask = Tensor::zeros({total});
    for (int i = 0; i < n_text; ++i)
        if (ctx.is_pad[static_cast<size_t>(i)]) key_mask.data()[i] = -1e9f;

    Tensor t_emb = timestep_embed(m, t, tape);
    for (Block& block : m.blocks) {
        Tensor ada = add(matmul(t_emb, block.ada_w, tape), block.ada_b, tape);
        Tensor u = modulate(layer_norm(x, block.ln1_gain, block.ln1_bias, cfg.ln_eps, tape), ada,
                            0, d, tape);
        x = add(x, attention(u, block, cfg.n_heads, m.gate_alpha, key_mask, tape), tape);
        Tensor v = modulate(layer_norm(x, block.ln2_gain, block.ln2_bias, cfg.ln_eps, tape), ada,
                            1, d, tape);
        Tensor ff = add(matmul(gelu(add(matmul(v, block.ff_w1, tape), block.ff_b1, tape), tape),
                               block.ff_w2, tape),
                        block.ff_b2, tape);
        x = add(x, ff, tape);
    }

    Tensor video_part = slice_rows(x, n_text, total, tape);
    Tensor normed = layer_norm(video_part, m.head_ln_gain, m.head_ln_bias, cfg.ln_eps, tape);
    return add(matmul(normed, m.head_w, tape), m.head_b, tape);
}

}  // namespace lf
