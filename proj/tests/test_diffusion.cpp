#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lf/diffusion.hpp"
#include "test_util.hpp"

using namespace lf;
using lftest::random_quadruple;
using lftest::seq_for;
using lftest::test_vocab;
using lftest::tiny_config;

TEST_CASE("build_schedule: single factor and direct cumulative product") {
    NoiseSchedule one = build_schedule(1, 0.1f, 0.1f);
    CHECK(one.alpha_bar.data()[0] == doctest::Approx(0.9).epsilon(1e-6));

    NoiseSchedule two = build_schedule(2, 0.1f, 0.2f);
    CHECK(two.beta.data()[0] == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(two.beta.data()[1] == doctest::Approx(0.2).epsilon(1e-6));
    CHECK(two.alpha_bar.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(two.alpha_bar.data()[1] == doctest::Approx(0.72).epsilon(1e-6));
}

TEST_CASE("build_schedule: long schedule matches numeric cumulative product") {
    NoiseSchedule s = build_schedule(1000, 1e-4f, 2e-2f);
    double prod = 1.0;
    for (int t = 0; t < 1000; ++t) {
        const double beta = 1e-4 + (2e-2 - 1e-4) * t / 999.0;
        prod *= 1.0 - beta;
        CHECK(s.alpha_bar.data()[t] == doctest::Approx(prod).epsilon(1e-5));
        if (t > 0) CHECK(s.alpha_bar.data()[t] < s.alpha_bar.data()[t - 1]);
    }
    CHECK(s.alpha_bar.data()[999] < 0.01f);
}

TEST_CASE("build_schedule rejects invalid ranges") {
    CHECK_THROWS_AS(build_schedule(0, 0.1f, 0.2f), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 0.0f, 0.2f), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 0.3f, 0.2f), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 0.3f, 1.0f), std::invalid_argument);
}

TEST_CASE("q_sample limits and direct value") {
    // alpha_bar -> 1 keeps x0; alpha_bar -> 0 keeps the noise
    NoiseSchedule tiny = build_schedule(1, 1e-7f, 1e-7f);
    std::vector<float> x0{0.3f, -0.2f}, eps{1.0f, 2.0f};
    auto xt = q_sample(x0, 0, eps, tiny);
    CHECK(xt[0] == doctest::Approx(0.3).epsilon(1e-3));
    CHECK(xt[1] == doctest::Approx(-0.2).epsilon(1e-2));

    NoiseSchedule heavy = build_schedule(1, 0.9999f, 0.9999f);
    auto noise = q_sample(x0, 0, eps, heavy);
    CHECK(noise[0] == doctest::Approx(1.0).epsilon(1e-2));
    CHECK(noise[1] == doctest::Approx(2.0).epsilon(1e-2));

    // alpha_bar = 0.72 at step 1 of the {0.1, 0.2} schedule: sqrt(0.72)
    NoiseSchedule two = build_schedule(2, 0.1f, 0.2f);
    auto mid = q_sample({1.0f}, 1, {0.0f}, two);
    CHECK(mid[0] == doctest::Approx(std::sqrt(0.72)).epsilon(1e-5));
}

TEST_CASE("q_sample empirical variance matches 1 - alpha_bar") {
    NoiseSchedule s = build_schedule(100, 1e-3f, 0.15f);
    Rng rng(77);
    const std::vector<float> x0(16, 0.4f);
    for (int t : {0, 24, 49, 74, 99}) {
        const double expect_var = 1.0 - s.alpha_bar.data()[t];
        double sum = 0.0, sum_sq = 0.0;
        const int draws = 10000;
        std::vector<float> eps(x0.size());
        for (int i = 0; i < draws; ++i) {
            for (auto& e : eps) e = rng.normal();
            auto xt = q_sample(x0, t, eps, s);
            for (float v : xt) {
                sum += v;
                sum_sq += static_cast<double>(v) * v;
            }
        }
        const double n = static_cast<double>(draws) * x0.size();
        const double mean = sum / n;
        const double var = sum_sq / n - mean * mean;
        INFO("t=" << t << " var=" << var << " expect=" << expect_var);
        CHECK(std::fabs(var - expect_var) < 0.05 * expect_var);
    }
}

TEST_CASE("cfg_combine endpoints and paper scale") {
    std::vector<float> u{0.5f, -1.0f}, c{1.5f, 2.0f};
    CHECK(cfg_combine(u, c, 1.0f) == c);
    CHECK(cfg_combine(u, c, 0.0f) == u);
    auto six = cfg_combine({0.0f}, {1.0f}, 6.0f);
    CHECK(six[0] == doctest::Approx(6.0).epsilon(1e-6));
}

namespace {

BatchItem make_item(const Model& m, const Vocabulary& v, const ConditionMask& mask, int t,
                    uint64_t seed) {
    (void)v;
    BatchItem item;
    LayerQuadruple q = random_quadruple(m.cfg.frames, m.cfg.height, m.cfg.width, seed);
    item.x0 = pack(q, m.cfg.patch, IdentityEmbedding());
    item.prompts = q.prompts;
    item.mask = mask;
    item.t = t;
    Rng rng(seed ^ 0xabcd);
    item.eps.resize(static_cast<size_t>(item.x0.tokens.numel()));
    for (auto& e : item.eps) e = rng.normal();
    return item;
}

}  // namespace

TEST_CASE("masked_loss: perfect and zero predictors") {
    Vocabulary v = test_vocab();
    Rng rng(5);
    Model m = build_model(tiny_config(v), rng);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);

    // the fresh model's zero head predicts 0, so the loss is mean(eps^2)
    // over non-fixed positions; over many noise draws it concentrates at 1
    double acc = 0.0;
    const int reps = 200;
    for (int i = 0; i < reps; ++i) {
        BatchItem item = make_item(m, v, ConditionMask::generation(), 3, 1000 + i);
        acc += sample_loss(m, v, item, s, nullptr).loss.item();
    }
    CHECK(std::fabs(acc / reps - 1.0) < 0.05);

    // a perfect predictor gives exactly zero: simulate by comparing eps to
    // itself through the masked reduction
    BatchItem item = make_item(m, v, ConditionMask::generation(), 3, 7);
    SampleLoss out = sample_loss(m, v, item, s, nullptr);
    Tensor diff = sub(out.eps_ref, out.eps_ref, nullptr);
    CHECK(sum(mul(diff, diff, nullptr), nullptr).item() == 0.0f);
}

TEST_CASE("masked_loss rejects an all-fixed mask") {
    Vocabulary v = test_vocab();
    Rng rng(6);
    Model m = build_model(tiny_config(v), rng);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);
    BatchItem item = make_item(m, v, ConditionMask::generation(), 0, 9);
    item.mask.fixed = {true, true, true, true};  // bypass the ctor guard
    CHECK_THROWS_AS(sample_loss(m, v, item, s, nullptr), std::invalid_argument);
}

TEST_CASE("masked_loss: fixed-segment gradients are exactly zero") {
    Vocabulary v = test_vocab();
    Rng rng(8);
    Model m = build_model(tiny_config(v), rng);
    lftest::randomize_head(m, 9);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);

    for (const auto& mask : {ConditionMask::fg_conditioned(), ConditionMask::bg_conditioned(),
                             ConditionMask::decomposition()}) {
        BatchItem item = make_item(m, v, mask, 4, 11);
        Tape tape;
        SampleLoss out = sample_loss(m, v, item, s, &tape);
        tape.backward(out.loss);
        const auto* ghat = tape.local_grad_of(out.eps_hat);
        REQUIRE(ghat != nullptr);
        const int per_clip = item.x0.tokens_per_clip();
        const int dim = item.x0.token_dim;
        bool any_nonzero_unfixed = false;
        for (int c = 0; c < kNumClips; ++c) {
            for (int i = 0; i < per_clip * dim; ++i) {
                const float g = (*ghat)[static_cast<size_t>(c * per_clip * dim + i)];
                if (item.mask.fixed[static_cast<size_t>(c)])
                    CHECK(g == 0.0f);
                else
                    any_nonzero_unfixed = any_nonzero_unfixed || g != 0.0f;
            }
        }
        CHECK(any_nonzero_unfixed);
        m.zero_grads();
    }
}

TEST_CASE("masked_loss: fixed segments carry clean tokens into the model") {
    // the loss normalizer counts only non-fixed positions
    Vocabulary v = test_vocab();
    Rng rng(12);
    Model m = build_model(tiny_config(v), rng);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);
    BatchItem item = make_item(m, v, ConditionMask::decomposition(), 2, 13);
    SampleLoss out = sample_loss(m, v, item, s, nullptr);
    CHECK(out.unmasked_positions == 3 * item.x0.tokens_per_clip());
}

TEST_CASE("strided steps cover the schedule and reduce to stride 1") {
    auto full = strided_steps(10, 10);
    for (int i = 0; i < 10; ++i) CHECK(full[static_cast<size_t>(i)] == i);
    auto sub = strided_steps(100, 20);
    CHECK(sub.size() == 20);
    CHECK(sub[0] == 0);
    for (size_t i = 1; i < sub.size(); ++i) CHECK(sub[i] > sub[i - 1]);
    CHECK(sub.back() == 95);
    CHECK_THROWS_AS(strided_steps(10, 11), std::invalid_argument);
}

TEST_CASE("sampler: conditioning contract, determinism, missing input") {
    Vocabulary v = test_vocab();
    Rng rng(21);
    Model m = build_model(tiny_config(v), rng);
    lftest::randomize_head(m, 22);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);

    LayerQuadruple truth = random_quadruple(m.cfg.frames, m.cfg.height, m.cfg.width, 23);
    PackedSequence cond = pack(truth, m.cfg.patch, IdentityEmbedding());

    SamplerSettings settings;
    settings.steps = 5;
    settings.cfg_scale = 2.0f;
    settings.seed = 99;

    // (T,T,T,F): fg, alpha and bg pass through bit-exactly
    ConditionMask keep3(true, true, true, false);
    LayerQuadruple out = sample(m, v, truth.prompts, keep3, &cond, s, settings);
    CHECK(out.fg.data == truth.fg.data);
    CHECK(out.alpha.data == truth.alpha.data);
    CHECK(out.bg.data == truth.bg.data);
    CHECK(out.blended.data != truth.blended.data);

    // every preset variant passes its fixed segments through bit-exactly
    for (const auto& mask : {ConditionMask::fg_conditioned(), ConditionMask::bg_conditioned(),
                             ConditionMask::decomposition()}) {
        LayerQuadruple o = sample(m, v, truth.prompts, mask, &cond, s, settings);
        if (mask.fixed[kFg]) CHECK(o.fg.data == truth.fg.data);
        if (mask.fixed[kAlpha]) CHECK(o.alpha.data == truth.alpha.data);
        if (mask.fixed[kBg]) CHECK(o.bg.data == truth.bg.data);
        if (mask.fixed[kBlended]) CHECK(o.blended.data == truth.blended.data);
    }

    // same seed twice is bit-identical
    LayerQuadruple a = sample(m, v, truth.prompts, ConditionMask::generation(), nullptr, s,
                              settings);
    LayerQuadruple b = sample(m, v, truth.prompts, ConditionMask::generation(), nullptr, s,
                              settings);
    CHECK(a.fg.data == b.fg.data);
    CHECK(a.blended.data == b.blended.data);

    CHECK_THROWS_AS(
        sample(m, v, truth.prompts, ConditionMask::decomposition(), nullptr, s, settings),
        std::invalid_argument);
}

TEST_CASE("sampler with a zero head matches the closed-form recursion oracle") {
    Vocabulary v = test_vocab();
    Rng rng(31);
    Model m = build_model(tiny_config(v), rng);  // head stays zero: eps_hat == 0
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);

    SamplerSettings settings;
    settings.steps = 4;
    settings.cfg_scale = 6.0f;
    settings.seed = 321;

    LayerQuadruple truth = random_quadruple(m.cfg.frames, m.cfg.height, m.cfg.width, 32);
    LayerQuadruple out =
        sample(m, v, truth.prompts, ConditionMask::generation(), nullptr, s, settings);

    // oracle: run the same update rule with eps_hat == 0 and the same rng
    PackedSequence seq = pack(truth, m.cfg.patch, IdentityEmbedding());
    const size_t n = seq.tokens.vec().size();
    Rng r2(settings.seed);
    std::vector<float> x(n);
    for (auto& val : x) val = r2.normal();
    auto ts = strided_steps(s.T, settings.steps);
    for (int k = static_cast<int>(ts.size()) - 1; k >= 0; --k) {
        const int t = ts[static_cast<size_t>(k)];
        const double ab_t = s.alpha_bar.data()[t];
        const double ab_prev = k > 0 ? s.alpha_bar.data()[ts[static_cast<size_t>(k - 1)]] : 1.0;
        const double beta_eff = 1.0 - ab_t / ab_prev;
        const double mean_scale = 1.0 / std::sqrt(1.0 - beta_eff);
        if (k > 0) {
            const double sigma = std::sqrt(beta_eff * (1.0 - ab_prev) / (1.0 - ab_t));
            for (auto& val : x) val = static_cast<float>(mean_scale * val + sigma * r2.normal());
        } else {
            for (auto& val : x) val = static_cast<float>(mean_scale * val);
        }
    }
    seq.tokens = Tensor::from_data(seq.tokens.shape(), x);
    LayerQuadruple expect = unpack(seq, m.cfg.patch, IdentityEmbedding());
    CHECK(out.fg.data == expect.fg.data);
    CHECK(out.alpha.data == expect.alpha.data);
    CHECK(out.bg.data == expect.bg.data);
    CHECK(out.blended.data == expect.blended.data);
}

TEST_CASE("sampling with steps == T reproduces full-schedule stride-1 ancestral sampling") {
    Vocabulary v = test_vocab();
    Rng rng(41);
    Model m = build_model(tiny_config(v), rng);
    lftest::randomize_head(m, 42);
    NoiseSchedule s = build_schedule(6, 0.05f, 0.3f);

    SamplerSettings settings;
    settings.steps = 6;  // == T
    settings.cfg_scale = 1.5f;
    settings.seed = 7;
    LayerQuadruple out = sample(m, v, {"a", "red", "ball"}, ConditionMask::generation(), nullptr,
                                s, settings);

    // explicit stride-1 reference: beta_eff reduces to beta_t exactly
    auto ts = strided_steps(6, 6);
    for (int k = 0; k < 6; ++k) {
        const double ab_t = s.alpha_bar.data()[k];
        const double ab_prev = k > 0 ? s.alpha_bar.data()[k - 1] : 1.0;
        CHECK(1.0 - ab_t / ab_prev == doctest::Approx(s.beta.data()[k]).epsilon(1e-5));
        CHECK(ts[static_cast<size_t>(k)] == k);
    }
    CHECK(all_finite(Tensor::from_data({static_cast<int>(out.blended.data.size())},
                                       out.blended.data)));
}
