#include "lf/lora.hpp"

#include <stdexcept>

#include "lf/backbone.hpp"

namespace lf {

const char* lora_family_name(LoraFamily f) {
    return f == LoraFamily::kMotion ? "motion" : "content";
}

LoraAdapter make_adapter(int d_model, int rank, LoraFamily family, const std::string& host,
                         Rng& rng) {
    if (rank <= 0 || rank >= d_model)
        throw std::invalid_argument("make_adapter: rank must be in (0, d_model)");
    LoraAdapter ad;
    ad.a = Tensor::randn({d_model, rank}, rng, 0.02f, true);
    ad.b = Tensor::zeros({d_model, rank}, true);
    ad.family = family;
    ad.host = host;
    return ad;
}

Tensor adapted_projection(const Tensor& z, const Tensor& w, const Tensor& bias,
                          const LoraAdapter* motion, const LoraAdapter* content, float alpha,
                          Tape* tape) {
    if (alpha != 0.0f && alpha != 1.0f)
        throw std::invalid_argument("adapted_projection: gate must be exactly 0 or 1");
    if (z.rank() != 2 || z.extent(1) != w.extent(0))
        throw std::invalid_argument("adapted_projection: input/projection dimension mismatch");
    Tensor out = matmul(z, w, tape);
    if (motion != nullptr && alpha == 1.0f) {
        if (motion->a.extent(0) != z.extent(1))
            throw std::invalid_argument("adapted_projection: motion adapter dimension mismatch");
        Tensor low = matmul(z, motion->b, tape);
        out = add(out, matmul(low, transpose(motion->a, tape), tape), tape);
    }
    if (content != nullptr) {
        if (content->a.extent(0) != z.extent(1))
            throw std::invalid_argument("adapted_projection: content adapter dimension mismatch");
        Tensor low = matmul(z, content->b, tape);
        out = add(out, matmul(low, transpose(content->a, tape), tape), tape);
    }
    if (bias.defined()) out = add(out, bias, tape);
    return out;
}

std::vector<std::pair<std::string, Tensor>> select_trainable(Model& model, int stage) {
    if (stage < 1 || stage > 3) throw std::invalid_argument("select_trainable: stage must be 1..3");
    std::vector<std::pair<std::string, Tensor>> out;
    const auto designated = model.designated_blocks();

    if (stage == 1) {
        out.emplace_back("embed.w", model.embed_w);
        out.emplace_back("embed.b", model.embed_b);
        out.emplace_back("pos.clip", model.pos_clip);
        out.emplace_back("pos.frame", model.pos_frame);
        out.emplace_back("pos.patch", model.pos_patch);
        out.emplace_back("text.vocab", model.vocab_table);
        out.emplace_back("text.layer", model.layer_table);
        out.emplace_back("time.w1", model.time_w1);
        out.emplace_back("time.b1", model.time_b1);
        out.emplace_back("time.w2", model.time_w2);
        out.emplace_back("time.b2", model.time_b2);
        for (int bi : designated) {
            Block& b = model.blocks[static_cast<size_t>(bi)];
            const std::string p = "block" + std::to_string(bi) + ".";
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
        }
        out.emplace_back("head.ln.gain", model.head_ln_gain);
        out.emplace_back("head.ln.bias", model.head_ln_bias);
        out.emplace_back("head.w", model.head_w);
        out.emplace_back("head.b", model.head_b);
        return out;
    }

    const LoraFamily family = stage == 2 ? LoraFamily::kMotion : LoraFamily::kContent;
    for (int bi : designated) {
        Block& b = model.blocks[static_cast<size_t>(bi)];
        auto push = [&](std::optional<LoraAdapter>& ad, const char* proj) {
            if (!ad.has_value())
                throw std::runtime_error(std::string("select_trainable: no ") +
                                         lora_family_name(family) + " adapter on block" +
                                         std::to_string(bi) + "." + proj);
            const std::string key = "lora.block" + std::to_string(bi) + "." + proj + "." +
                                    lora_family_name(family);
            out.emplace_back(key + ".a", ad->a);
            out.emplace_back(key + ".b", ad->b);
        };
        if (family == LoraFamily::kMotion) {
            push(b.q_motion, "q");
            push(b.k_motion, "k");
            push(b.v_motion, "v");
        } else {
            push(b.q_content, "q");
            push(b.k_content, "k");
            push(b.v_content, "v");
        }
    }
    return out;
}

void set_gate(Model& model, float alpha) {
    if (alpha != 0.0f && alpha != 1.0f)
        throw std::invalid_argument("set_gate: gate must be exactly 0 or 1");
    model.gate_alpha = alpha;
}

}  // namespace lf
