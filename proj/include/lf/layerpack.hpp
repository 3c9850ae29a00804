#pragma once

#include <array>
#include <string>
#include <vector>

#include "lf/tensor.hpp"

namespace lf {

// Segment order is a fixed public contract: fg, alpha, bg, blended.
enum Clip : int { kFg = 0, kAlpha = 1, kBg = 2, kBlended = 3 };
constexpr int kNumClips = 4;

// Frame-major pixel video, row-major F x H x W x C, values nominally [0,1].
struct Video {
    int frames = 0;
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    static Video zeros(int frames, int height, int width, int channels);
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    float& at(int f, int y, int x, int c);
    float at(int f, int y, int x, int c) const;
    bool same_geometry(const Video& other) const {
        return frames == other.frames && height == other.height && width == other.width;
    }
};

// The unit of training data: four aligned sub-clips plus the three
// per-layer prompts (fg, bg, blended).
struct LayerQuadruple {
    Video fg;       // 3 channels
    Video alpha;    // 1 channel
    Video bg;       // 3 channels
    Video blended;  // 3 channels
    std::array<std::string, 3> prompts;

    void validate() const;  // geometry + channel counts
};

// alpha-over: alpha*fg + (1-alpha)*bg, clamped to [0,1]
Video composite(const Video& fg, const Video& alpha, const Video& bg);

// Per-segment flags marking sub-clips held noise-free and loss-excluded.
struct ConditionMask {
    std::array<bool, kNumClips> fixed{false, false, false, false};

    ConditionMask() = default;
    ConditionMask(bool fg, bool alpha, bool bg, bool blended);

    static ConditionMask generation() { return ConditionMask(false, false, false, false); }
    static ConditionMask fg_conditioned() { return ConditionMask(true, true, false, false); }
    static ConditionMask bg_conditioned() { return ConditionMask(false, false, true, false); }
    static ConditionMask decomposition() { return ConditionMask(false, false, false, true); }
    static ConditionMask from_variant(const std::string& name);

    std::string to_string() const;  // e.g. "TTFF"
    bool any_fixed() const;
};

// Linear per-patch map between pixel patches (p*p*3 floats) and tokens.
// The model path uses the identity embedding; tests exercise an invertible
// scaling to prove the unembedder is applied.
class PatchEmbedding {
public:
    virtual ~PatchEmbedding() = default;
    virtual int token_dim(int patch_dim) const = 0;
    virtual void embed(const float* patch, float* token, int patch_dim) const = 0;
    virtual void unembed(const float* token, float* patch, int patch_dim) const = 0;
};

class IdentityEmbedding final : public PatchEmbedding {
public:
    int token_dim(int patch_dim) const override { return patch_dim; }
    void embed(const float* patch, float* token, int patch_dim) const override;
    void unembed(const float* token, float* patch, int patch_dim) const override;
};

// Multiplies by a power of two, so the round trip is bit-exact.
class Pow2ScaleEmbedding final : public PatchEmbedding {
public:
    explicit Pow2ScaleEmbedding(float factor) : factor_(factor) {}
    int token_dim(int patch_dim) const override { return patch_dim; }
    void embed(const float* patch, float* token, int patch_dim) const override;
    void unembed(const float* token, float* patch, int patch_dim) const override;

private:
    float factor_;
};

struct PositionId {
    int clip = 0;
    int frame = 0;
    int patch = 0;
};

// Concatenated token sequence of all four sub-clips. Tokens are [L, d_tok]
// with L = 4 * F * grid_h * grid_w and equal-length segments in clip order.
struct PackedSequence {
    Tensor tokens;
    std::array<int, kNumClips> segment_offsets{};
    int frames_per_clip = 0;
    int grid_h = 0;
    int grid_w = 0;
    int token_dim = 0;
    std::vector<PositionId> position_ids;

    int tokens_per_clip() const { return frames_per_clip * grid_h * grid_w; }
    int total_tokens() const { return kNumClips * tokens_per_clip(); }
    void validate() const;
};

PackedSequence pack(const LayerQuadruple& q, int patch, const PatchEmbedding& embedder);
LayerQuadruple unpack(const PackedSequence& s, int patch, const PatchEmbedding& unembedder);

// For every fixed segment the output rows equal x0 bit-exactly; other
// segments pass through xt. Pure data movement, no tape involvement.
std::vector<float> apply_condition(const std::vector<float>& xt, const std::vector<float>& x0,
                                   const ConditionMask& mask, int tokens_per_clip, int token_dim);
Tensor apply_condition(const Tensor& xt, const Tensor& x0, const ConditionMask& mask,
                       int tokens_per_clip);

// Dataset file format: magic "LFQ1", u32 F/H/W, four raw f32 video blobs in
// clip order, three length-prefixed UTF-8 prompt strings. Little-endian.
void write_quadruple(const std::string& path, const LayerQuadruple& q);
LayerQuadruple read_quadruple(const std::string& path);

}  // namespace lf
