#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lf/lora.hpp"
#include "lf/trainer.hpp"
#include "test_util.hpp"

using namespace lf;
using lftest::test_vocab;
using lftest::tiny_config;

namespace {

// small in-memory train set without touching disk
TrainSet tiny_set(const BackboneConfig& cfg, const std::vector<std::string>& tiers, int n,
                  uint64_t seed) {
    TrainSet out;
    for (int i = 0; i < n; ++i) {
        LayerQuadruple q =
            lftest::random_quadruple(cfg.frames, cfg.height, cfg.width, seed + i);
        TrainSample s;
        s.x0 = pack(q, cfg.patch, IdentityEmbedding());
        s.prompts = q.prompts;
        s.tier = tiers[static_cast<size_t>(i) % tiers.size()];
        out.push_back(std::move(s));
    }
    return out;
}

std::map<std::string, std::vector<float>> snapshot(Model& m) {
    std::map<std::string, std::vector<float>> out;
    for (auto& [k, t] : m.named_params()) out[k] = t.vec();
    return out;
}

StageConfig quick_stage(int stage, int steps, int batch) {
    StageConfig c = StageConfig::defaults(stage);
    c.steps = steps;
    c.batch_size = batch;
    if (stage == 1) c.tiers = {"coarse"};
    return c;
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged, moments decay") {
    Tensor p = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
    p.grad();  // allocate zeros
    AdamState state;
    adam_step({{"p", p}}, state, 0.1f);
    CHECK(p.vec() == std::vector<float>{1.0f, -2.0f, 0.5f});
    CHECK(state.m.at("p").vec() == std::vector<float>{0, 0, 0});
}

TEST_CASE("adam: first step matches the hand-evaluated recurrence") {
    Tensor p = Tensor::from_data({2}, {0.5f, -0.25f}, true);
    p.grad() = {0.3f, -0.7f};
    AdamState state;
    const float lr = 1e-2f;
    adam_step({{"p", p}}, state, lr);
    // bias correction at step 1: mhat = g, vhat = g^2, so the update is
    // -lr * g / (|g| + eps)
    for (int i = 0; i < 2; ++i) {
        const float g = i == 0 ? 0.3f : -0.7f;
        const float expect = (i == 0 ? 0.5f : -0.25f) - lr * g / (std::fabs(g) + 1e-8f);
        CHECK(p.vec()[static_cast<size_t>(i)] == doctest::Approx(expect).epsilon(1e-5));
    }
    CHECK(state.step == 1);
}

TEST_CASE("adam: NaN gradient aborts the step naming the key") {
    Tensor p = Tensor::from_data({2}, {1.0f, 2.0f}, true);
    p.grad() = {0.1f, std::nanf("")};
    AdamState state;
    const std::vector<float> before = p.vec();
    try {
        adam_step({{"offending", p}}, state, 0.1f);
        FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("offending") != std::string::npos);
    }
    CHECK(p.vec() == before);
    CHECK(state.step == 0);
}

TEST_CASE("run_stage: stage 2 leaves every base parameter bit-identical") {
    Vocabulary v = test_vocab();
    BackboneConfig cfg = tiny_config(v);
    cfg.n_blocks = 2;  // block 1 designated, block 0 frozen
    Rng rng(1);
    Model m = build_model(cfg, rng);
    lftest::randomize_head(m, 2);
    attach_motion_adapters(m, rng);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);
    TrainSet data = tiny_set(cfg, {"frozen"}, 4, 100);

    auto before = snapshot(m);
    TrainerState state;
    state.rng = Rng(7);
    std::vector<TrainLogRow> log;
    run_stage(m, v, quick_stage(2, 30, 2), data, s, state, 30, 1, log);

    auto after = snapshot(m);
    bool adapters_moved = false;
    for (auto& [key, vals] : after) {
        if (key.rfind("lora.", 0) == 0) {
            adapters_moved = adapters_moved || vals != before.at(key);
        } else {
            CHECK(vals == before.at(key));
        }
    }
    CHECK(adapters_moved);
    for (const auto& row : log) CHECK(row.gate == 1.0f);  // stage-2 gate policy
}

TEST_CASE("run_stage: stage 1 reduces the loss on a tiny overfit") {
    Vocabulary v = test_vocab();
    BackboneConfig cfg = tiny_config(v);
    Rng rng(3);
    Model m = build_model(cfg, rng);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);
    TrainSet data = tiny_set(cfg, {"coarse"}, 4, 200);

    TrainerState state;
    state.rng = Rng(8);
    std::vector<TrainLogRow> log;
    StageConfig c = quick_stage(1, 300, 2);
    c.lr = 3e-3f;  // hot lr: this test only checks that optimization moves downhill
    run_stage(m, v, c, data, s, state, c.steps, 1, log);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 30; ++i) {
        early += log[static_cast<size_t>(i)].loss / 30.0;
        late += log[log.size() - 1 - i].loss / 30.0;
    }
    INFO("early " << early << " late " << late);
    CHECK(late < 0.7 * early);
}

TEST_CASE("run_stage: determinism and thread-count bit-stability") {
    Vocabulary v = test_vocab();
    BackboneConfig cfg = tiny_config(v);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);
    TrainSet data = tiny_set(cfg, {"coarse"}, 4, 300);

    auto train = [&](int threads) {
        Rng rng(4);
        Model m = build_model(cfg, rng);
        TrainerState state;
        state.rng = Rng(9);
        std::vector<TrainLogRow> log;
        run_stage(m, v, quick_stage(1, 20, 4), data, s, state, 20, threads, log);
        return snapshot(m);
    };
    auto a = train(1);
    auto b = train(1);
    auto c = train(3);
    CHECK(a == b);
    CHECK(a == c);
}

TEST_CASE("run_stage: stage-3 gate follows the sample tier and is logged") {
    Vocabulary v = test_vocab();
    BackboneConfig cfg = tiny_config(v);
    Rng rng(5);
    Model m = build_model(cfg, rng);
    attach_motion_adapters(m, rng);
    attach_content_adapters(m, rng);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);
    TrainSet data = tiny_set(cfg, {"mix_static", "mix_dynamic"}, 6, 400);

    TrainerState state;
    state.rng = Rng(10);
    std::vector<TrainLogRow> log;
    run_stage(m, v, quick_stage(3, 60, 2), data, s, state, 60, 1, log);
    bool saw_on = false, saw_off = false;
    for (const auto& row : log) {
        saw_on = saw_on || row.gate == 1.0f;
        saw_off = saw_off || row.gate == 0.0f;
    }
    CHECK(saw_on);
    CHECK(saw_off);

    // replay the batch draw stream: the gate sequence is reproducible
    Rng replay(10);
    size_t n_static = 0, n_dynamic = 0;
    for (const auto& d : data) (d.tier == "mix_dynamic" ? n_dynamic : n_static)++;
    for (const auto& row : log) {
        const double u = replay.uniform();
        const float expect_gate =
            u < static_cast<double>(n_static) / (n_static + n_dynamic) ? 1.0f : 0.0f;
        CHECK(row.gate == expect_gate);
        replay.uniform();  // mask draw
        for (int b = 0; b < 2; ++b) {
            replay.uniform_int(1);  // sample index (pool size irrelevant for stream shape)
            replay.uniform_int(10);
            replay.uniform();
            const int64_t numel = data[0].x0.tokens.numel();
            for (int64_t i = 0; i < numel; ++i) replay.normal();
        }
    }
}

TEST_CASE("checkpoint: save/load round trip reproduces forward bit-exactly") {
    Vocabulary v = test_vocab();
    BackboneConfig cfg = tiny_config(v);
    Rng rng(6);
    Model m = build_model(cfg, rng);
    lftest::randomize_head(m, 7);
    attach_motion_adapters(m, rng);
    set_gate(m, 0.0f);

    PackedSequence seq = lftest::seq_for(cfg, 8);
    TextContext ctx = encode({"a", "red", "ball"}, v, m.vocab_table, m.layer_table, cfg.t_txt,
                             nullptr);
    Tensor before = forward(m, seq, ctx, 1, nullptr);

    TrainerState state;
    state.step = 17;
    state.rng = Rng(123);
    state.rng.normal();  // advance so the state is non-trivial
    const std::string path = "test_ckpt.lfck";
    save_checkpoint(path, m, v, 2, state, false, {});

    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.stage == 2);
    CHECK(ck.state.step == 17);
    CHECK(ck.model.has_motion);
    CHECK_FALSE(ck.model.has_content);
    CHECK(ck.vocab.size() == v.size());
    CHECK(ck.state.rng.state() == state.rng.state());

    TextContext ctx2 = encode({"a", "red", "ball"}, ck.vocab, ck.model.vocab_table,
                              ck.model.layer_table, cfg.t_txt, nullptr);
    Tensor after = forward(ck.model, seq, ctx2, 1, nullptr);
    CHECK(after.vec() == before.vec());
    std::remove(path.c_str());
}

TEST_CASE("checkpoint: flipped magic byte is a version error") {
    Vocabulary v = test_vocab();
    Rng rng(9);
    Model m = build_model(tiny_config(v), rng);
    TrainerState state;
    const std::string path = "test_ckpt_bad.lfck";
    save_checkpoint(path, m, v, 1, state, false, {});
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    try {
        load_checkpoint(path);
        FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("version error") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint: truncated file and unknown keys are rejected by name") {
    Vocabulary v = test_vocab();
    Rng rng(10);
    Model m = build_model(tiny_config(v), rng);
    TrainerState state;
    const std::string path = "test_ckpt_trunc.lfck";
    save_checkpoint(path, m, v, 1, state, false, {});
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 10);
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint: optimizer round trip resumes to a bit-identical step") {
    Vocabulary v = test_vocab();
    BackboneConfig cfg = tiny_config(v);
    NoiseSchedule s = build_schedule(10, 0.02f, 0.3f);
    TrainSet data = tiny_set(cfg, {"coarse"}, 4, 500);
    StageConfig c = quick_stage(1, 0, 2);
    const std::string path = "test_ckpt_resume.lfck";

    // uninterrupted: 0 -> 101 steps
    Rng rng_a(11);
    Model a = build_model(cfg, rng_a);
    TrainerState state_a;
    state_a.rng = Rng(12);
    std::vector<TrainLogRow> log_a;
    run_stage(a, v, c, data, s, state_a, 101, 1, log_a);

    // interrupted at 100 with a full optimizer checkpoint, then resumed
    Rng rng_b(11);
    Model b = build_model(cfg, rng_b);
    TrainerState state_b;
    state_b.rng = Rng(12);
    std::vector<TrainLogRow> log_b;
    run_stage(b, v, c, data, s, state_b, 100, 1, log_b);
    std::vector<std::string> keys;
    for (auto& [k, t] : select_trainable(b, 1)) keys.push_back(k);
    save_checkpoint(path, b, v, 1, state_b, true, keys);

    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.has_optimizer);
    CHECK(ck.state.adam.step == state_b.adam.step);
    std::vector<TrainLogRow> log_c;
    run_stage(ck.model, v, c, data, s, ck.state, 101, 1, log_c);

    auto sa = snapshot(a);
    auto sb = snapshot(ck.model);
    CHECK(sa == sb);
    CHECK(log_a.back().loss == log_c.back().loss);
    std::remove(path.c_str());
}

TEST_CASE("training log serializes with the fixed column order") {
    std::vector<TrainLogRow> log{{1, 1, 0.5f, 0.0f, "generation", 1e-4f},
                                 {2, 1, 0.4f, 1.0f, "decompose", 1e-4f}};
    const std::string csv = log_to_csv(log);
    CHECK(csv.find("step,stage,loss,gate,mask,lr\n") == 0);
    CHECK(csv.find("2,1,0.4,1,decompose,") != std::string::npos);
}

TEST_CASE("load_train_set filters by tier and rejects empty selections") {
    namespace fs = std::filesystem;
    DatasetParams params;
    params.frames = 2;
    params.height = 8;
    params.width = 8;
    params.samples_per_tier = 3;
    const std::string dir = "trainer_data_test";
    auto rows = generate_dataset(params, 5, dir);
    write_manifest((fs::path(dir) / "manifest.csv").string(), rows);

    TrainSet coarse = load_train_set(dir, rows, {"coarse"}, 2);
    CHECK(coarse.size() == 3);
    for (const auto& s : coarse) CHECK(s.tier == "coarse");
    TrainSet mix = load_train_set(dir, rows, {"mix_static", "mix_dynamic"}, 2);
    CHECK(mix.size() == 3);
    CHECK_THROWS_AS(load_train_set(dir, rows, {"nope"}, 2), std::runtime_error);
    fs::remove_all(dir);
}
