#include "lf/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lf {

namespace {

constexpr double kPi = 3.141592653589793;

struct Palette {
    const char* name;
    Color color;
};

constexpr Palette kSpriteColors[] = {
    {"red", {0.90f, 0.15f, 0.15f}},
    {"green", {0.15f, 0.85f, 0.20f}},
    {"blue", {0.20f, 0.30f, 0.95f}},
    {"yellow", {0.95f, 0.90f, 0.15f}},
};

constexpr Palette kBgColors[] = {
    {"teal", {0.10f, 0.55f, 0.55f}},
    {"purple", {0.50f, 0.20f, 0.60f}},
    {"orange", {0.90f, 0.55f, 0.15f}},
    {"gray", {0.45f, 0.45f, 0.45f}},
};

const char* sprite_kind_word(SpriteKind k) {
    switch (k) {
        case SpriteKind::kDisc: return "disc";
        case SpriteKind::kSquare: return "square";
        case SpriteKind::kTriangle: return "triangle";
    }
    return "disc";
}

const char* pattern_word(PatternKind k) {
    switch (k) {
        case PatternKind::kGradient: return "gradient";
        case PatternKind::kStripes: return "stripes";
        case PatternKind::kChecker: return "checker";
    }
    return "gradient";
}

// signed distance to the sprite boundary, negative inside
float sprite_sdf(const SpriteSpec& s, float dx, float dy, float radius) {
    switch (s.kind) {
        case SpriteKind::kDisc:
            return std::sqrt(dx * dx + dy * dy) - radius;
        case SpriteKind::kSquare:
            return std::max(std::fabs(dx), std::fabs(dy)) - radius;
        case SpriteKind::kTriangle: {
            // equilateral triangle pointing up, circumradius = radius
            float best = -1e9f;
            for (int e = 0; e < 3; ++e) {
                const double ang = -kPi / 2.0 + 2.0 * kPi * e / 3.0;
                // outward normal of each edge
                const float nx = static_cast<float>(std::cos(ang + kPi));
                const float ny = static_cast<float>(std::sin(ang + kPi));
                const float d = nx * dx + ny * dy - radius * 0.5f;
                best = std::max(best, d);
            }
            return best;
        }
    }
    return 1e9f;
}

void sprite_center(const SpriteSpec& s, int frame, float& cx, float& cy) {
    if (s.trajectory == TrajectoryKind::kLinear) {
        cx = s.start_x + s.vel_x * frame;
        cy = s.start_y + s.vel_y * frame;
    } else {
        const double ang = s.orbit_phase + s.orbit_rate * frame;
        cx = s.start_x + s.orbit_radius * static_cast<float>(std::cos(ang));
        cy = s.start_y + s.orbit_radius * static_cast<float>(std::sin(ang));
    }
}

// triangle wave with period 2, tri(0)=0, tri(1)=1
float tri_wave(float u) {
    float m = std::fmod(u, 2.0f);
    if (m < 0.0f) m += 2.0f;
    return m <= 1.0f ? m : 2.0f - m;
}

void render_background(const BackgroundSpec& b, Video& bg) {
    for (int f = 0; f < bg.frames; ++f) {
        const float ox = b.drift_x * f;
        const float oy = b.drift_y * f;
        for (int y = 0; y < bg.height; ++y) {
            for (int x = 0; x < bg.width; ++x) {
                float w;
                switch (b.pattern) {
                    case PatternKind::kGradient:
                        w = tri_wave((x + 0.5f + ox) / bg.width);
                        break;
                    case PatternKind::kStripes:
                        w = 0.5f + 0.5f * static_cast<float>(
                                       std::sin(2.0 * kPi * (x + 0.5f + ox) / (bg.width / 2.0)));
                        break;
                    case PatternKind::kChecker: {
                        const int cell = 4;
                        const int cx = static_cast<int>(std::floor((x + 0.5f + ox) / cell));
                        const int cy = static_cast<int>(std::floor((y + 0.5f + oy) / cell));
                        w = ((cx + cy) % 2 + 2) % 2 == 0 ? 0.0f : 1.0f;
                        break;
                    }
                    default:
                        w = 0.0f;
                }
                bg.at(f, y, x, 0) = b.color_a.r + (b.color_b.r - b.color_a.r) * w;
                bg.at(f, y, x, 1) = b.color_a.g + (b.color_b.g - b.color_a.g) * w;
                bg.at(f, y, x, 2) = b.color_a.b + (b.color_b.b - b.color_a.b) * w;
            }
        }
    }
}

}  // namespace

// ---- captions ---------------------------------------------------------------

std::string CaptionRule::fg_prompt(const SpriteSpec& s) {
    std::string out = "a ";
    out += s.large ? "large " : "small ";
    out += s.color_name + " " + sprite_kind_word(s.kind) + " " + s.motion_word;
    return out;
}

std::string CaptionRule::bg_prompt(const BackgroundSpec& b) {
    std::string out = "a " + b.color_a_name + " and " + b.color_b_name + " ";
    out += pattern_word(b.pattern);
    out += " backdrop ";
    out += b.drifting ? "flowing" : "still";
    return out;
}

std::string CaptionRule::blended_prompt(const std::string& fg, const std::string& bg) {
    return fg + " over " + bg;
}

std::vector<std::string> caption_vocabulary() {
    std::vector<std::string> words = {"1,",      "2,",      "3,",     "a",        "small",
                                      "large",   "disc",    "square", "triangle", "gliding",
                                      "circling","resting", "and",    "gradient", "stripes",
                                      "checker", "backdrop","flowing", "still",    "over"};
    for (const auto& p : kSpriteColors) words.push_back(p.name);
    for (const auto& p : kBgColors) words.push_back(p.name);
    return words;
}

// ---- spec grid ----------------------------------------------------------------

int spec_grid_size() {
    // 3 shapes x 4 colors x 2 sizes x 2 trajectories for the sprite; the
    // background cycles its own 3 x (4*3) x 2 product from the same index
    return 3 * 4 * 2 * 2;
}

SpriteSpec sprite_from_grid(int index, int frames, int height, int width, Rng& rng) {
    SpriteSpec s;
    int i = index % spec_grid_size();
    s.kind = static_cast<SpriteKind>(i % 3);
    i /= 3;
    const Palette& pal = kSpriteColors[i % 4];
    s.color = pal.color;
    s.color_name = pal.name;
    i /= 4;
    s.large = (i % 2) == 1;
    s.size_frac = s.large ? 0.24f : 0.16f;
    i /= 2;
    s.trajectory = (i % 2) == 0 ? TrajectoryKind::kLinear : TrajectoryKind::kCircular;
    s.edge_width = 1.5f;

    const float mind = static_cast<float>(std::min(height, width));
    const float radius = s.size_frac * mind;
    const float margin = radius + s.edge_width * 0.5f + 0.5f;
    const float free_x = width - 2.0f * margin;
    const float free_y = height - 2.0f * margin;
    if (free_x <= 0.0f || free_y <= 0.0f)
        throw std::invalid_argument("sprite_from_grid: sprite does not fit the frame");

    if (s.trajectory == TrajectoryKind::kLinear) {
        s.motion_word = "gliding";
        // aim for ~1 px/frame, capped so the full path stays inside
        const double ang = rng.uniform() * 2.0 * kPi;
        float speed = 0.6f + 0.8f * static_cast<float>(rng.uniform());
        const float steps = static_cast<float>(std::max(frames - 1, 1));
        const float max_speed = 0.8f * std::min(free_x, free_y) / steps;
        speed = std::min(speed, max_speed);
        s.vel_x = speed * static_cast<float>(std::cos(ang));
        s.vel_y = speed * static_cast<float>(std::sin(ang));
        const float travel_x = s.vel_x * steps;
        const float travel_y = s.vel_y * steps;
        const float lo_x = margin + std::max(0.0f, -travel_x);
        const float hi_x = width - margin - std::max(0.0f, travel_x);
        const float lo_y = margin + std::max(0.0f, -travel_y);
        const float hi_y = height - margin - std::max(0.0f, travel_y);
        s.start_x = lo_x + (hi_x - lo_x) * static_cast<float>(rng.uniform());
        s.start_y = lo_y + (hi_y - lo_y) * static_cast<float>(rng.uniform());
    } else {
        s.motion_word = "circling";
        const float max_orbit = 0.45f * std::min(free_x, free_y);
        s.orbit_radius = std::min(0.8f + 1.2f * static_cast<float>(rng.uniform()), max_orbit);
        s.orbit_phase = static_cast<float>(rng.uniform() * 2.0 * kPi);
        s.orbit_rate = static_cast<float>((0.25 + 0.35 * rng.uniform()) * 2.0 * kPi /
                                          std::max(frames, 2));
        const float reach = margin + s.orbit_radius;
        s.start_x = reach + (width - 2.0f * reach) * static_cast<float>(rng.uniform());
        s.start_y = reach + (height - 2.0f * reach) * static_cast<float>(rng.uniform());
    }
    return s;
}

BackgroundSpec background_from_grid(int index, Rng& rng) {
    BackgroundSpec b;
    int i = index;
    b.pattern = static_cast<PatternKind>(i % 3);
    i /= 3;
    const int a_idx = i % 4;
    i /= 4;
    const int b_idx = (a_idx + 1 + i % 3) % 4;  // always differs from a
    b.color_a = kBgColors[a_idx].color;
    b.color_a_name = kBgColors[a_idx].name;
    b.color_b = kBgColors[b_idx].color;
    b.color_b_name = kBgColors[b_idx].name;
    b.drifting = (index % 2) == 0;
    if (b.drifting) {
        b.drift_x = 0.25f + 0.5f * static_cast<float>(rng.uniform());
        b.drift_y = 0.0f;
    }
    return b;
}

// ---- generators -----------------------------------------------------------------

LayerQuadruple gen_quadruple(const SpriteSpec& sprite, const BackgroundSpec& bgspec, int frames,
                             int height, int width, uint64_t seed) {
    if (frames <= 0 || height <= 0 || width <= 0)
        throw std::invalid_argument("gen_quadruple: bad geometry");
    if (sprite.edge_width < 1.0f)
        throw std::invalid_argument("gen_quadruple: soft-edge width must be >= 1");
    (void)seed;  // specs carry all randomness; the seed names the sample

    const float mind = static_cast<float>(std::min(height, width));
    const float radius = sprite.size_frac * mind;

    LayerQuadruple q;
    q.fg = Video::zeros(frames, height, width, 3);
    q.alpha = Video::zeros(frames, height, width, 1);
    q.bg = Video::zeros(frames, height, width, 3);
    q.blended = Video::zeros(frames, height, width, 3);

    for (int f = 0; f < frames; ++f) {
        float cx, cy;
        sprite_center(sprite, f, cx, cy);
        const float outer = radius + sprite.edge_width * 0.5f;
        if (cx - outer < 0.0f || cx + outer > width || cy - outer < 0.0f || cy + outer > height)
            throw std::invalid_argument("gen_quadruple: sprite leaves the frame at frame " +
                                        std::to_string(f));
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const float sd =
                    sprite_sdf(sprite, x + 0.5f - cx, y + 0.5f - cy, radius);
                const float a = std::clamp(0.5f - sd / sprite.edge_width, 0.0f, 1.0f);
                q.alpha.at(f, y, x, 0) = a;
                if (a > 0.0f) {
                    q.fg.at(f, y, x, 0) = sprite.color.r;
                    q.fg.at(f, y, x, 1) = sprite.color.g;
                    q.fg.at(f, y, x, 2) = sprite.color.b;
                }
            }
        }
    }
    render_background(bgspec, q.bg);
    q.blended = composite(q.fg, q.alpha, q.bg);

    const std::string fgp = CaptionRule::fg_prompt(sprite);
    const std::string bgp = CaptionRule::bg_prompt(bgspec);
    q.prompts = {fgp, bgp, CaptionRule::blended_prompt(fgp, bgp)};
    return q;
}

LayerQuadruple freeze(const LayerQuadruple& q, uint64_t seed) {
    q.validate();
    Rng rng(seed);
    const int pick = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(q.fg.frames)));
    LayerQuadruple out = q;
    auto repeat_frame = [pick](Video& v) {
        const size_t frame_size = v.data.size() / static_cast<size_t>(v.frames);
        const std::vector<float> frame(v.data.begin() + pick * frame_size,
                                       v.data.begin() + (pick + 1) * frame_size);
        for (int f = 0; f < v.frames; ++f)
            std::copy(frame.begin(), frame.end(), v.data.begin() + f * frame_size);
    };
    repeat_frame(out.fg);
    repeat_frame(out.alpha);
    repeat_frame(out.bg);
    repeat_frame(out.blended);
    return out;
}

LayerQuadruple copy_paste(const LayerQuadruple& fg_source, const LayerQuadruple& bg_source) {
    fg_source.validate();
    bg_source.validate();
    if (!fg_source.fg.same_geometry(bg_source.fg))
        throw std::invalid_argument("copy_paste: sources must share F, H, W");
    LayerQuadruple out;
    out.fg = fg_source.fg;
    out.alpha = fg_source.alpha;
    out.bg = bg_source.bg;
    out.blended = composite(out.fg, out.alpha, out.bg);
    out.prompts = {fg_source.prompts[0], bg_source.prompts[1],
                   CaptionRule::blended_prompt(fg_source.prompts[0], bg_source.prompts[1])};
    return out;
}

LayerQuadruple degrade(const LayerQuadruple& q, uint64_t seed) {
    q.validate();
    Rng rng(seed);
    LayerQuadruple out = q;
    for (auto& a : out.alpha.data) a = a >= 0.5f ? 1.0f : 0.0f;
    for (auto& v : out.bg.data) v = std::clamp(v + rng.normal(0.0f, 0.02f), 0.0f, 1.0f);
    Video recomposited = composite(out.fg, out.alpha, out.bg);
    // 3-tap temporal blur with clamped neighbor indices
    out.blended = recomposited;
    const int frames = recomposited.frames;
    const size_t frame_size = recomposited.data.size() / static_cast<size_t>(frames);
    for (int f = 0; f < frames; ++f) {
        const int fm = std::max(0, f - 1);
        const int fp = std::min(frames - 1, f + 1);
        for (size_t i = 0; i < frame_size; ++i) {
            const double s = static_cast<double>(recomposited.data[fm * frame_size + i]) +
                             recomposited.data[f * frame_size + i] +
                             recomposited.data[fp * frame_size + i];
            out.blended.data[f * frame_size + i] = static_cast<float>(s / 3.0);
        }
    }
    return out;
}

// ---- dataset ---------------------------------------------------------------------

namespace {

std::string tier_file(const std::string& tier, int idx) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03d.lfq", tier.c_str(), idx);
    return buf;
}

LayerQuadruple clean_sample(const DatasetParams& p, int grid, uint64_t seed) {
    Rng rng(seed);
    SpriteSpec sprite = sprite_from_grid(grid, p.frames, p.height, p.width, rng);
    BackgroundSpec bg = background_from_grid(grid, rng);
    return gen_quadruple(sprite, bg, p.frames, p.height, p.width, seed);
}

}  // namespace

std::vector<ManifestRow> generate_dataset(const DatasetParams& params, uint64_t seed,
                                          const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<ManifestRow> rows;
    const int n = params.samples_per_tier;
    const int grid_n = spec_grid_size();

    // coarse tier: degraded moving-sprite quadruples
    for (int i = 0; i < n; ++i) {
        const uint64_t s = seed ^ static_cast<uint64_t>(i);
        const int grid = i % grid_n;
        LayerQuadruple q = degrade(clean_sample(params, grid, s), s ^ 0x9e3779b97f4a7c15ull);
        const std::string file = tier_file("coarse", i);
        write_quadruple((fs::path(out_dir) / file).string(), q);
        rows.push_back({file, "coarse", grid, s});
    }

    // frozen tier: copy-paste pairs frozen to a single frame
    for (int i = 0; i < n; ++i) {
        const uint64_t s = seed ^ static_cast<uint64_t>(i + n);
        const int grid_a = i % grid_n;
        const int grid_b = (i + 7) % grid_n;
        LayerQuadruple a = clean_sample(params, grid_a, s);
        LayerQuadruple b = clean_sample(params, grid_b, s ^ 0x517cc1b727220a95ull);
        LayerQuadruple q = freeze(copy_paste(a, b), s ^ 0x2545f4914f6cdd1dull);
        const std::string file = tier_file("frozen", i);
        write_quadruple((fs::path(out_dir) / file).string(), q);
        rows.push_back({file, "frozen", grid_a, s});
    }

    // mix tier: mostly frozen clean quadruples, a dynamic copy-paste minority
    const int n_dynamic = static_cast<int>(std::lround(params.dynamic_fraction * n));
    for (int i = 0; i < n; ++i) {
        const uint64_t s = seed ^ static_cast<uint64_t>(i + 2 * n);
        const int grid = i % grid_n;
        const bool dynamic = i < n_dynamic;
        LayerQuadruple q;
        if (dynamic) {
            LayerQuadruple a = clean_sample(params, grid, s);
            LayerQuadruple b = clean_sample(params, (grid + 11) % grid_n, s ^ 0x6a09e667f3bcc909ull);
            q = copy_paste(a, b);
        } else {
            q = freeze(clean_sample(params, grid, s), s ^ 0xbb67ae8584caa73bull);
        }
        const std::string tier = dynamic ? "mix_dynamic" : "mix_static";
        const std::string file = tier_file(tier, i);
        write_quadruple((fs::path(out_dir) / file).string(), q);
        rows.push_back({file, tier, grid, s});
    }
    return rows;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "file,tier,grid,seed\n";
    for (const auto& r : rows) os << r.file << ',' << r.tier << ',' << r.grid << ',' << r.seed << '\n';
    if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<ManifestRow> rows;
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("manifest is empty: " + path);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ManifestRow r;
        std::string grid, seed;
        if (!std::getline(ss, r.file, ',') || !std::getline(ss, r.tier, ',') ||
            !std::getline(ss, grid, ',') || !std::getline(ss, seed, ','))
            throw std::runtime_error("malformed manifest row: " + line);
        r.grid = std::stoi(grid);
        r.seed = std::stoull(seed);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace lf
