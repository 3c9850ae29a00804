#pragma once

#include <array>
#include <string>
#include <vector>

#include "lf/layerpack.hpp"
#include "lf/rng.hpp"
#include "lf/textcond.hpp"

namespace lf {

enum class SpriteKind { kDisc, kSquare, kTriangle };
enum class TrajectoryKind { kLinear, kCircular };
enum class PatternKind { kGradient, kStripes, kChecker };

struct Color {
    float r = 0, g = 0, b = 0;
};

struct SpriteSpec {
    SpriteKind kind = SpriteKind::kDisc;
    Color color;
    std::string color_name;
    float size_frac = 0.3f;  // sprite radius as a fraction of min(H, W)
    bool large = false;
    TrajectoryKind trajectory = TrajectoryKind::kLinear;
    // linear: start + velocity * frame; circular: center + radius * (cos, sin)
    float start_x = 0, start_y = 0;
    float vel_x = 0, vel_y = 0;
    float orbit_radius = 0, orbit_phase = 0, orbit_rate = 0;
    float edge_width = 1.0f;  // soft-edge width in pixels, >= 1
    std::string motion_word;  // from the caption vocabulary
};

struct BackgroundSpec {
    PatternKind pattern = PatternKind::kGradient;
    Color color_a, color_b;
    std::string color_a_name, color_b_name;
    float drift_x = 0, drift_y = 0;  // pixels per frame
    bool drifting = false;
};

// Deterministic captions over a closed vocabulary. The blended prompt is the
// fg prompt joined to the bg prompt with "over", which lets copy-paste
// re-derive it from its sources.
struct CaptionRule {
    static std::string fg_prompt(const SpriteSpec& s);
    static std::string bg_prompt(const BackgroundSpec& b);
    static std::string blended_prompt(const std::string& fg, const std::string& bg);
};

// Every word the caption templates can emit, plus the index prefixes.
std::vector<std::string> caption_vocabulary();

LayerQuadruple gen_quadruple(const SpriteSpec& sprite, const BackgroundSpec& bg, int frames,
                             int height, int width, uint64_t seed);

// One uniformly drawn frame repeated F times; prompts unchanged.
LayerQuadruple freeze(const LayerQuadruple& q, uint64_t seed);

// fg/alpha from one source, background from the other, blended recomposited.
LayerQuadruple copy_paste(const LayerQuadruple& fg_source, const LayerQuadruple& bg_source);

// Stage-1 coarseness: binarize alpha at 0.5, add N(0, 0.02^2) noise to the
// background, recomposite, then 3-tap temporal blur on the blended clip.
LayerQuadruple degrade(const LayerQuadruple& q, uint64_t seed);

// Deterministic spec grid; index wraps around the full attribute product.
int spec_grid_size();
SpriteSpec sprite_from_grid(int index, int frames, int height, int width, Rng& rng);
BackgroundSpec background_from_grid(int index, Rng& rng);

// Dataset tiers: coarse (stage 1), frozen (stage 2), mix_static / mix_dynamic
// (stage 3). One manifest row per sample: file, tier, grid coordinate, seed.
struct ManifestRow {
    std::string file;
    std::string tier;
    int grid = 0;
    uint64_t seed = 0;
};

struct DatasetParams {
    int frames = 4;
    int height = 16;
    int width = 16;
    int samples_per_tier = 64;
    double dynamic_fraction = 0.2;  // share of mix tier that keeps motion
};

std::vector<ManifestRow> generate_dataset(const DatasetParams& params, uint64_t seed,
                                          const std::string& out_dir);
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::string& path);

}  // namespace lf
