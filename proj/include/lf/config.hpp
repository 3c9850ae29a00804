#pragma once

#include <string>

#include "lf/backbone.hpp"
#include "lf/synthdata.hpp"
#include "lf/trainer.hpp"

namespace lf {

// One structured document holding every module default. Unknown keys are
// rejected; the effective resolved config is echoed into each output
// directory as config.resolved.json.
struct RunConfig {
    uint64_t seed = 1234;
    int threads = 1;

    DatasetParams data;  // frames/height/width/samples_per_tier/dynamic_fraction

    int d_model = 64;
    int n_blocks = 6;
    int n_heads = 4;
    int patch = 4;
    int t_txt = 16;
    int lora_rank = 4;

    int schedule_steps = 100;
    float beta_start = 1e-3f;
    float beta_end = 0.15f;

    int sampling_steps = 20;
    float cfg_scale = 6.0f;

    double prompt_drop = 0.1;
    double mask_generation = 0.7;
    double mask_fg_cond = 0.1;
    double mask_bg_cond = 0.1;
    double mask_decompose = 0.1;

    struct Stage {
        float lr = 0.0f;
        int steps = 0;
        int batch = 2;
    };
    Stage stage1{1e-4f, 2000, 2};
    Stage stage2{1e-3f, 500, 2};
    Stage stage3{5e-3f, 1000, 2};

    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;
    std::string to_json_string() const;

    void validate() const;
    BackboneConfig backbone(int vocab_size) const;
    NoiseSchedule schedule() const;
    StageConfig stage_config(int stage) const;
};

}  // namespace lf
