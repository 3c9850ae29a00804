#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lf/tensor.hpp"

namespace lf {

struct Model;

enum class LoraFamily { kMotion, kContent };

const char* lora_family_name(LoraFamily f);

// Low-rank pair attached to one projection: output for input z is A * (B^T z),
// i.e. (z B) A^T in row-major form. B starts at zero so a fresh adapter is an
// exact no-op.
struct LoraAdapter {
    Tensor a;  // [d_model, r]
    Tensor b;  // [d_model, r]
    LoraFamily family = LoraFamily::kMotion;
    std::string host;  // "block<i>.<proj>" for checkpoint keys and error messages
};

LoraAdapter make_adapter(int d_model, int rank, LoraFamily family, const std::string& host,
                         Rng& rng);

// W z + alpha * A_m B_m^T z + A_c B_c^T z (+ bias). Absent adapters contribute
// zero; the gate applies to motion adapters only.
Tensor adapted_projection(const Tensor& z, const Tensor& w, const Tensor& bias,
                          const LoraAdapter* motion, const LoraAdapter* content, float alpha,
                          Tape* tape);

// The per-stage trainable parameter sets. Stage 1: base parameters of the
// designated blocks plus embedders and heads. Stage 2: motion adapters only.
// Stage 3: content adapters only.
std::vector<std::pair<std::string, Tensor>> select_trainable(Model& model, int stage);

// Uniform gate over all motion adapters; inference default is 0.
void set_gate(Model& model, float alpha);

}  // namespace lf
