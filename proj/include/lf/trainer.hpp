#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lf/backbone.hpp"
#include "lf/diffusion.hpp"
#include "lf/synthdata.hpp"
#include "lf/textcond.hpp"

namespace lf {

enum class GatePolicy { kAlwaysOff, kAlwaysOn, kByTier };

struct StageConfig {
    int stage = 1;
    float lr = 1e-4f;
    int steps = 2000;
    int batch_size = 2;
    std::vector<std::string> tiers{"coarse"};
    GatePolicy gate_policy = GatePolicy::kAlwaysOff;
    double prompt_drop = 0.1;
    // variant-mask curriculum, drawn once per batch
    double mask_generation = 0.7;
    double mask_fg_cond = 0.1;
    double mask_bg_cond = 0.1;
    double mask_decompose = 0.1;

    static StageConfig defaults(int stage);
    void validate() const;
};

// Bias-corrected Adam; moment buffers are keyed by parameter name.
struct AdamState {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

// One update in canonical parameter order. A NaN gradient aborts the step
// and reports the offending key.
void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
               float lr);

struct TrainSample {
    PackedSequence x0;
    std::array<std::string, 3> prompts;
    std::string tier;
};
using TrainSet = std::vector<TrainSample>;

TrainSet load_train_set(const std::string& data_dir, const std::vector<ManifestRow>& manifest,
                        const std::vector<std::string>& tiers, int patch);

struct TrainLogRow {
    int64_t step = 0;
    int stage = 0;
    float loss = 0.0f;
    float gate = 0.0f;
    std::string mask;
    float lr = 0.0f;
};

std::string log_to_csv(const std::vector<TrainLogRow>& log);

// Everything that must survive a checkpoint/resume to replay bit-identically.
struct TrainerState {
    int64_t step = 0;  // completed steps within the stage
    Rng rng;
    AdamState adam;
};

// Runs seeded mini-batch steps until state.step reaches target_steps. Per
// batch: one tier pool, one gate value, one variant mask; per sample its own
// timestep, noise and prompt-drop draw. Only select_trainable(stage) moves.
// Batch elements may be evaluated on worker threads; gradients are reduced
// in sample order so results are bit-stable at any thread count.
void run_stage(Model& model, const Vocabulary& vocab, const StageConfig& cfg,
               const TrainSet& data, const NoiseSchedule& schedule, TrainerState& state,
               int64_t target_steps, int threads, std::vector<TrainLogRow>& log);

// Checkpoint file: magic "LFCK", u32 version, length-prefixed JSON metadata
// (config, stage, step, RNG state, vocabulary), then length-prefixed per-key
// tensor records. Round trips are bit-exact.
struct Checkpoint {
    Model model;
    Vocabulary vocab;
    int stage = 0;
    TrainerState state;
    bool has_optimizer = false;
};

void save_checkpoint(const std::string& path, Model& model, const Vocabulary& vocab, int stage,
                     const TrainerState& state, bool include_optimizer,
                     const std::vector<std::string>& optimizer_keys);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace lf
