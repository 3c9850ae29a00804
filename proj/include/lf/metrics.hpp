#pragma once

#include <array>
#include <map>
#include <string>

#include "lf/layerpack.hpp"

namespace lf {

// Mean adjacent-frame cosine similarity over mean-centered frames; 1.0 for a
// frozen video. A constant frame (zero vector after centering) contributes
// similarity 1 by convention.
double frame_consistency(const Video& v);

// Mean absolute inter-frame pixel difference; 0 for a frozen video, 1 for a
// full black/white alternation.
double dynamic_degree(const Video& v);

// Per-layer mean squared pixel error over fg, alpha, bg, blended.
std::array<double, kNumClips> reconstruction_error(const LayerQuadruple& predicted,
                                                   const LayerQuadruple& truth);

struct MetricValue {
    double value = 0.0;
    bool applicable = true;
    int n = 0;
};

// Aggregate report. Frame consistency and dynamic degree cover the fg, bg
// and blended layers; dynamic degree is not measured on backgrounds, the
// field is present but marked not-applicable. Reconstruction covers all four
// layers when ground truth was given.
struct MetricReport {
    std::map<std::string, MetricValue> frame_consistency;  // keys FG, BG, BL
    std::map<std::string, MetricValue> dynamic_degree;     // keys FG, BG, BL
    std::map<std::string, MetricValue> reconstruction;     // keys FG, ALPHA, BG, BL
    int sample_count = 0;

    std::string to_csv() const;   // layer, metric, value, n
    std::string to_json() const;  // machine-readable sidecar
};

}  // namespace lf
