#include "lf/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "lf/diffusion.hpp"

namespace lf {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw std::runtime_error("config: " + where + " must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key()))
            throw std::runtime_error("config: unknown key \"" + it.key() + "\" in " + where);
    }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

void parse_stage(const json& obj, const std::string& where, RunConfig::Stage& s) {
    check_keys(obj, {"lr", "steps", "batch"}, where);
    maybe(obj, "lr", s.lr);
    maybe(obj, "steps", s.steps);
    maybe(obj, "batch", s.batch);
}

json stage_json(const RunConfig::Stage& s) {
    return json{{"lr", s.lr}, {"steps", s.steps}, {"batch", s.batch}};
}

}  // namespace

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }

    RunConfig c;
    check_keys(j, {"seed", "threads", "data", "model", "schedule", "sampling", "training"},
               "config");
    maybe(j, "seed", c.seed);
    maybe(j, "threads", c.threads);
    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, {"frames", "height", "width", "samples_per_tier", "dynamic_fraction"},
                   "data");
        maybe(d, "frames", c.data.frames);
        maybe(d, "height", c.data.height);
        maybe(d, "width", c.data.width);
        maybe(d, "samples_per_tier", c.data.samples_per_tier);
        maybe(d, "dynamic_fraction", c.data.dynamic_fraction);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, {"d_model", "n_blocks", "n_heads", "patch", "t_txt", "lora_rank"}, "model");
        maybe(m, "d_model", c.d_model);
        maybe(m, "n_blocks", c.n_blocks);
        maybe(m, "n_heads", c.n_heads);
        maybe(m, "patch", c.patch);
        maybe(m, "t_txt", c.t_txt);
        maybe(m, "lora_rank", c.lora_rank);
    }
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        check_keys(s, {"steps", "beta_start", "beta_end"}, "schedule");
        maybe(s, "steps", c.schedule_steps);
        maybe(s, "beta_start", c.beta_start);
        maybe(s, "beta_end", c.beta_end);
    }
    if (j.contains("sampling")) {
        const json& s = j.at("sampling");
        check_keys(s, {"steps", "cfg_scale"}, "sampling");
        maybe(s, "steps", c.sampling_steps);
        maybe(s, "cfg_scale", c.cfg_scale);
    }
    if (j.contains("training")) {
        const json& t = j.at("training");
        check_keys(t,
                   {"prompt_drop", "mask_generation", "mask_fg_cond", "mask_bg_cond",
                    "mask_decompose", "stage1", "stage2", "stage3"},
                   "training");
        maybe(t, "prompt_drop", c.prompt_drop);
        maybe(t, "mask_generation", c.mask_generation);
        maybe(t, "mask_fg_cond", c.mask_fg_cond);
        maybe(t, "mask_bg_cond", c.mask_bg_cond);
        maybe(t, "mask_decompose", c.mask_decompose);
        if (t.contains("stage1")) parse_stage(t.at("stage1"), "training.stage1", c.stage1);
        if (t.contains("stage2")) parse_stage(t.at("stage2"), "training.stage2", c.stage2);
        if (t.contains("stage3")) parse_stage(t.at("stage3"), "training.stage3", c.stage3);
    }
    c.validate();
    return c;
}

std::string RunConfig::to_json_string() const {
    json j;
    j["seed"] = seed;
    j["threads"] = threads;
    j["data"] = {{"frames", data.frames},
                 {"height", data.height},
                 {"width", data.width},
                 {"samples_per_tier", data.samples_per_tier},
                 {"dynamic_fraction", data.dynamic_fraction}};
    j["model"] = {{"d_model", d_model}, {"n_blocks", n_blocks}, {"n_heads", n_heads},
                  {"patch", patch},     {"t_txt", t_txt},       {"lora_rank", lora_rank}};
    j["schedule"] = {{"steps", schedule_steps}, {"beta_start", beta_start}, {"beta_end", beta_end}};
    j["sampling"] = {{"steps", sampling_steps}, {"cfg_scale", cfg_scale}};
    j["training"] = {{"prompt_drop", prompt_drop},
                     {"mask_generation", mask_generation},
                     {"mask_fg_cond", mask_fg_cond},
                     {"mask_bg_cond", mask_bg_cond},
                     {"mask_decompose", mask_decompose},
                     {"stage1", stage_json(stage1)},
                     {"stage2", stage_json(stage2)},
                     {"stage3", stage_json(stage3)}};
    return j.dump(2) + "\n";
}

void RunConfig::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << to_json_string();
    if (!os) throw std::runtime_error("write failed: " + path);
}

void RunConfig::validate() const {
    if (threads < 1) throw std::runtime_error("config: threads must be >= 1");
    backbone(kNumReservedIds).validate();
    if (schedule_steps < 1) throw std::runtime_error("config: schedule.steps must be >= 1");
    if (!(beta_start > 0.0f) || !(beta_start <= beta_end) || !(beta_end < 1.0f))
        throw std::runtime_error("config: need 0 < beta_start <= beta_end < 1");
    if (sampling_steps < 1 || sampling_steps > schedule_steps)
        throw std::runtime_error("config: sampling.steps must be in [1, schedule.steps]");
    if (data.samples_per_tier < 1)
        throw std::runtime_error("config: data.samples_per_tier must be >= 1");
    if (data.dynamic_fraction < 0.0 || data.dynamic_fraction > 1.0)
        throw std::runtime_error("config: data.dynamic_fraction must be in [0, 1]");
    for (int s = 1; s <= 3; ++s) stage_config(s).validate();
}

BackboneConfig RunConfig::backbone(int vocab_size) const {
    BackboneConfig b;
    b.d_model = d_model;
    b.n_blocks = n_blocks;
    b.n_heads = n_heads;
    b.patch = patch;
    b.t_txt = t_txt;
    b.frames = data.frames;
    b.height = data.height;
    b.width = data.width;
    b.vocab_size = vocab_size;
    b.max_timestep = schedule_steps;
    b.lora_rank = lora_rank;
    return b;
}

NoiseSchedule RunConfig::schedule() const {
    return build_schedule(schedule_steps, beta_start, beta_end);
}

StageConfig RunConfig::stage_config(int stage) const {
    StageConfig c = StageConfig::defaults(stage);
    const Stage& s = stage == 1 ? stage1 : stage == 2 ? stage2 : stage3;
    c.lr = s.lr;
    c.steps = s.steps;
    c.batch_size = s.batch;
    c.prompt_drop = prompt_drop;
    c.mask_generation = mask_generation;
    c.mask_fg_cond = mask_fg_cond;
    c.mask_bg_cond = mask_bg_cond;
    c.mask_decompose = mask_decompose;
    return c;
}

}  // namespace lf
