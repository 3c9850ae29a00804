#include "lf/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace lf {

NoiseSchedule build_schedule(int T, float beta_start, float beta_end) {
    if (T < 1) throw std::invalid_argument("build_schedule: T must be at least 1");
    if (!(beta_start > 0.0f) || !(beta_start <= beta_end) || !(beta_end < 1.0f))
        throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta = Tensor::zeros({T});
    s.alpha_bar = Tensor::zeros({T});
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        const double b = beta_start + (static_cast<double>(beta_end) - beta_start) * frac;
        prod *= 1.0 - b;
        s.beta.data()[t] = static_cast<float>(b);
        s.alpha_bar.data()[t] = static_cast<float>(prod);
    }
    return s;
}

std::vector<float> q_sample(const std::vector<float>& x0, int t, const std::vector<float>& eps,
                            const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.T) throw std::out_of_range("q_sample: step out of range");
    if (x0.size() != eps.size()) throw std::invalid_argument("q_sample: shape mismatch");
    const float ab = schedule.alpha_bar.data()[t];
    const float c0 = std::sqrt(ab);
    const float c1 = std::sqrt(1.0f - ab);
    std::vector<float> xt(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) xt[i] = c0 * x0[i] + c1 * eps[i];
    return xt;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (x0.shape() != eps.shape()) throw std::invalid_argument("q_sample: shape mismatch");
    return Tensor::from_data(x0.shape(), q_sample(x0.vec(), t, eps.vec(), schedule));
}

std::vector<float> cfg_combine(const std::vector<float>& eps_uncond,
                               const std::vector<float>& eps_cond, float scale) {
    if (eps_uncond.size() != eps_cond.size())
        throw std::invalid_argument("cfg_combine: shape mismatch");
    std::vector<float> out(eps_uncond.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
    return out;
}

SampleLoss sample_loss(Model& m, const Vocabulary& vocab, const BatchItem& item,
                       const NoiseSchedule& schedule, Tape* tape) {
    bool all_fixed = true;
    for (bool f : item.mask.fixed) all_fixed = all_fixed && f;
    if (all_fixed) throw std::invalid_argument("sample_loss: mask fixes every segment");
    if (item.eps.size() != item.x0.tokens.vec().size())
        throw std::invalid_argument("sample_loss: noise length mismatch");

    std::vector<float> xt_data = q_sample(item.x0.tokens.vec(), item.t, item.eps, schedule);
    xt_data = apply_condition(xt_data, item.x0.tokens.vec(), item.mask, item.x0.tokens_per_clip(),
                              item.x0.token_dim);

    PackedSequence noised = item.x0;
    noised.tokens = Tensor::from_data(item.x0.tokens.shape(), std::move(xt_data));

    TextContext ctx =
        item.drop_prompt
            ? null_context(m.vocab_table, m.layer_table, m.cfg.t_txt, tape)
            : encode(item.prompts, vocab, m.vocab_table, m.layer_table, m.cfg.t_txt, tape);

    SampleLoss out;
    out.eps_hat = forward(m, noised, ctx, item.t, tape);
    out.eps_ref = Tensor::from_data(out.eps_hat.shape(), item.eps);

    // 0/1 row mask over non-fixed positions; fixed rows are annihilated before
    // the reduction so their target gradient is exactly zero
    const int per_clip = item.x0.tokens_per_clip();
    const int token_dim = item.x0.token_dim;
    Tensor row_mask = Tensor::zeros(out.eps_hat.shape());
    int unmasked = 0;
    for (int c = 0; c < kNumClips; ++c) {
        if (item.mask.fixed[static_cast<size_t>(c)]) continue;
        unmasked += per_clip;
        for (int i = 0; i < per_clip; ++i)
            for (int j = 0; j < token_dim; ++j)
                row_mask.data()[(static_cast<int64_t>(c) * per_clip + i) * token_dim + j] = 1.0f;
    }
    out.unmasked_positions = unmasked;

    Tensor diff = sub(out.eps_hat, out.eps_ref, tape);
    Tensor sq = mul(diff, diff, tape);
    Tensor masked = mul(sq, row_mask, tape);
    const float norm = 1.0f / (static_cast<float>(unmasked) * static_cast<float>(token_dim));
    out.loss = scale(sum(masked, tape), norm, tape);
    return out;
}

Tensor masked_loss(Model& m, const Vocabulary& vocab, const std::vector<BatchItem>& batch,
                   const NoiseSchedule& schedule, float gate_alpha, Tape* tape) {
    if (batch.empty()) throw std::invalid_argument("masked_loss: empty batch");
    set_gate(m, gate_alpha);
    Tensor total;
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    for (const BatchItem& item : batch) {
        Tensor l = scale(sample_loss(m, vocab, item, schedule, tape).loss, inv_b, tape);
        total = total.defined() ? add(total, l, tape) : l;
    }
    return total;
}

std::vector<int> strided_steps(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("strided_steps: need 1 <= steps <= T");
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int k = 0; k < steps; ++k)
        ts[static_cast<size_t>(k)] = static_cast<int>((static_cast<int64_t>(k) * T) / steps);
    return ts;
}

LayerQuadruple sample(Model& m, const Vocabulary& vocab,
                      const std::array<std::string, 3>& prompts, const ConditionMask& mask,
                      const PackedSequence* cond_x0, const NoiseSchedule& schedule,
                      const SamplerSettings& settings) {
    if (mask.any_fixed() && cond_x0 == nullptr)
        throw std::invalid_argument("sample: conditioning data required for fixed segments");
    if (settings.gate_alpha != 0.0f && settings.gate_alpha != 1.0f)
        throw std::invalid_argument("sample: gate must be exactly 0 or 1");

    const int patch = m.cfg.patch;
    PackedSequence seq;
    if (cond_x0 != nullptr) {
        seq = *cond_x0;
    } else {
        // geometry-only template; token values are replaced below
        LayerQuadruple blank;
        blank.fg = Video::zeros(m.cfg.frames, m.cfg.height, m.cfg.width, 3);
        blank.alpha = Video::zeros(m.cfg.frames, m.cfg.height, m.cfg.width, 1);
        blank.bg = Video::zeros(m.cfg.frames, m.cfg.height, m.cfg.width, 3);
        blank.blended = Video::zeros(m.cfg.frames, m.cfg.height, m.cfg.width, 3);
        seq = pack(blank, patch, IdentityEmbedding());
    }
    seq.validate();
    const std::vector<float> clean = seq.tokens.vec();
    const size_t n = clean.size();

    set_gate(m, settings.gate_alpha);
    TextContext ctx_cond =
        encode(prompts, vocab, m.vocab_table, m.layer_table, m.cfg.t_txt, nullptr);
    TextContext ctx_null = null_context(m.vocab_table, m.layer_table, m.cfg.t_txt, nullptr);

    Rng rng(settings.seed);
    std::vector<float> x(n);
    for (auto& v : x) v = rng.normal();
    x = apply_condition(x, clean, mask, seq.tokens_per_clip(), seq.token_dim);

    const std::vector<int> ts = strided_steps(schedule.T, settings.steps);
    for (int k = static_cast<int>(ts.size()) - 1; k >= 0; --k) {
        const int t = ts[static_cast<size_t>(k)];
        const double ab_t = schedule.alpha_bar.data()[t];
        const double ab_prev = k > 0 ? schedule.alpha_bar.data()[ts[static_cast<size_t>(k - 1)]] : 1.0;
        const double beta_eff = 1.0 - ab_t / ab_prev;

        seq.tokens = Tensor::from_data(seq.tokens.shape(), x);
        std::vector<float> eps_u = forward(m, seq, ctx_null, t, nullptr).vec();
        std::vector<float> eps_c = forward(m, seq, ctx_cond, t, nullptr).vec();
        std::vector<float> eps = cfg_combine(eps_u, eps_c, settings.cfg_scale);

        const double mean_scale = 1.0 / std::sqrt(1.0 - beta_eff);
        const double eps_coef = beta_eff / std::sqrt(1.0 - ab_t);
        if (k > 0) {
            const double var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t);
            const double sigma = std::sqrt(var);
            for (size_t i = 0; i < n; ++i) {
                const double mu = mean_scale * (x[i] - eps_coef * eps[i]);
                x[i] = static_cast<float>(mu + sigma * rng.normal());
            }
        } else {
            // deterministic final step
            for (size_t i = 0; i < n; ++i)
                x[i] = static_cast<float>(mean_scale * (x[i] - eps_coef * eps[i]));
        }
        x = apply_condition(x, clean, mask, seq.tokens_per_clip(), seq.token_dim);
    }

    seq.tokens = Tensor::from_data(seq.tokens.shape(), std::move(x));
    return unpack(seq, patch, IdentityEmbedding());
}

}  // namespace lf
