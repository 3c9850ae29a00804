#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "lf/backbone.hpp"
#include "lf/layerpack.hpp"
#include "lf/tensor.hpp"
#include "lf/textcond.hpp"

namespace lf {

struct NoiseSchedule {
    int T = 0;
    Tensor beta;       // [T]
    Tensor alpha_bar;  // [T], cumulative product of (1 - beta)
};

// Linear beta ramp; alpha_bar computed as a running product in double.
NoiseSchedule build_schedule(int T, float beta_start, float beta_end);

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
std::vector<float> q_sample(const std::vector<float>& x0, int t, const std::vector<float>& eps,
                            const NoiseSchedule& schedule);
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// eps_uncond + scale * (eps_cond - eps_uncond)
std::vector<float> cfg_combine(const std::vector<float>& eps_uncond,
                               const std::vector<float>& eps_cond, float scale);

// One training example, fully materialized: clean packed latents, prompts,
// task mask, sampled step and noise. The motion gate is model state set by
// the caller (one gate per batch).
struct BatchItem {
    PackedSequence x0;
    std::array<std::string, 3> prompts;
    bool drop_prompt = false;  // CFG unconditional branch substitution
    ConditionMask mask;
    int t = 0;
    std::vector<float> eps;  // same length as x0 tokens
};

struct SampleLoss {
    Tensor loss;      // scalar
    Tensor eps_hat;   // model prediction, on the tape
    Tensor eps_ref;   // noise target (constant leaf)
    int unmasked_positions = 0;
};

// Squared error between eps and the prediction, averaged over non-fixed video
// token positions only. Fixed segments carry clean x0 tokens into the model
// and contribute exactly zero loss and zero gradient through the target.
// Uses the model's current gate; does not mutate it.
SampleLoss sample_loss(Model& m, const Vocabulary& vocab, const BatchItem& item,
                       const NoiseSchedule& schedule, Tape* tape);

// Batch mean of sample_loss over all items (single tape).
Tensor masked_loss(Model& m, const Vocabulary& vocab, const std::vector<BatchItem>& batch,
                   const NoiseSchedule& schedule, float gate_alpha, Tape* tape);

struct SamplerSettings {
    int steps = 20;
    float cfg_scale = 6.0f;
    uint64_t seed = 0;
    float gate_alpha = 0.0f;  // Motion LoRA is dropped at inference
};

// Ancestral denoising over an evenly strided step subset with classifier-free
// guidance; fixed segments are re-imposed from cond_x0 after every update.
// Returns the unpacked quadruple videos (prompts left empty).
LayerQuadruple sample(Model& m, const Vocabulary& vocab,
                      const std::array<std::string, 3>& prompts, const ConditionMask& mask,
                      const PackedSequence* cond_x0, const NoiseSchedule& schedule,
                      const SamplerSettings& settings);

// The evenly strided ascending step subset used by the sampler.
std::vector<int> strided_steps(int T, int steps);

}  // namespace lf
