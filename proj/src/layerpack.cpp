#include "lf/layerpack.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lf {

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(buf), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw std::runtime_error("quadruple read: truncated file");
    return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
           (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
}

void write_f32_blob(std::ostream& os, const std::vector<float>& v) {
    for (float x : v) {
        uint32_t bits;
        std::memcpy(&bits, &x, 4);
        write_u32(os, bits);
    }
}

void read_f32_blob(std::istream& is, std::vector<float>& v) {
    for (auto& x : v) {
        uint32_t bits = read_u32(is);
        std::memcpy(&x, &bits, 4);
    }
}

}  // namespace

// ---- Video / LayerQuadruple -------------------------------------------------

Video Video::zeros(int frames, int height, int width, int channels) {
    if (frames <= 0 || height <= 0 || width <= 0 || channels <= 0)
        throw std::invalid_argument("Video::zeros: extents must be positive");
    Video v;
    v.frames = frames;
    v.height = height;
    v.width = width;
    v.channels = channels;
    v.data.assign(static_cast<size_t>(frames) * height * width * channels, 0.0f);
    return v;
}

float& Video::at(int f, int y, int x, int c) {
    return data[(((static_cast<size_t>(f) * height + y) * width) + x) * channels + c];
}

float Video::at(int f, int y, int x, int c) const {
    return data[(((static_cast<size_t>(f) * height + y) * width) + x) * channels + c];
}

void LayerQuadruple::validate() const {
    if (fg.channels != 3 || alpha.channels != 1 || bg.channels != 3 || blended.channels != 3)
        throw std::invalid_argument("LayerQuadruple: bad channel counts");
    if (!fg.same_geometry(alpha) || !fg.same_geometry(bg) || !fg.same_geometry(blended))
        throw std::invalid_argument("LayerQuadruple: sub-clips must share F, H, W");
}

Video composite(const Video& fg, const Video& alpha, const Video& bg) {
    if (!fg.same_geometry(alpha) || !fg.same_geometry(bg) || fg.channels != 3 ||
        bg.channels != 3 || alpha.channels != 1)
        throw std::invalid_argument("composite: shape mismatch");
    Video out = Video::zeros(fg.frames, fg.height, fg.width, 3);
    const size_t pixels = static_cast<size_t>(fg.frames) * fg.height * fg.width;
    for (size_t p = 0; p < pixels; ++p) {
        const float a = alpha.data[p];
        for (int c = 0; c < 3; ++c) {
            float v = a * fg.data[p * 3 + c] + (1.0f - a) * bg.data[p * 3 + c];
            out.data[p * 3 + c] = std::clamp(v, 0.0f, 1.0f);
        }
    }
    return out;
}

// ---- ConditionMask -----------------------------------------------------------

ConditionMask::ConditionMask(bool fg, bool alpha, bool bg, bool blended)
    : fixed{fg, alpha, bg, blended} {
    if (fg && alpha && bg && blended)
        throw std::invalid_argument("ConditionMask: at least one segment must be generated");
}

ConditionMask ConditionMask::from_variant(const std::string& name) {
    if (name == "generate") return generation();
    if (name == "fg_cond") return fg_conditioned();
    if (name == "bg_cond") return bg_conditioned();
    if (name == "decompose") return decomposition();
    throw std::invalid_argument("unknown variant: " + name);
}

std::string ConditionMask::to_string() const {
    std::string s;
    for (bool f : fixed) s += f ? 'T' : 'F';
    return s;
}

bool ConditionMask::any_fixed() const {
    return fixed[0] || fixed[1] || fixed[2] || fixed[3];
}

// ---- patch embeddings ----------------------------------------------------------

void IdentityEmbedding::embed(const float* patch, float* token, int patch_dim) const {
    std::memcpy(token, patch, sizeof(float) * static_cast<size_t>(patch_dim));
}

void IdentityEmbedding::unembed(const float* token, float* patch, int patch_dim) const {
    std::memcpy(patch, token, sizeof(float) * static_cast<size_t>(patch_dim));
}

void Pow2ScaleEmbedding::embed(const float* patch, float* token, int patch_dim) const {
    for (int i = 0; i < patch_dim; ++i) token[i] = patch[i] * factor_;
}

void Pow2ScaleEmbedding::unembed(const float* token, float* patch, int patch_dim) const {
    for (int i = 0; i < patch_dim; ++i) patch[i] = token[i] / factor_;
}

// ---- pack / unpack --------------------------------------------------------------

void PackedSequence::validate() const {
    if (frames_per_clip <= 0 || grid_h <= 0 || grid_w <= 0 || token_dim <= 0)
        throw std::invalid_argument("PackedSequence: bad geometry");
    const int per_clip = tokens_per_clip();
    for (int c = 0; c < kNumClips; ++c) {
        if (segment_offsets[static_cast<size_t>(c)] != c * per_clip)
            throw std::invalid_argument("PackedSequence: segment offsets inconsistent");
    }
    if (!tokens.defined() || tokens.rank() != 2 || tokens.extent(0) != total_tokens() ||
        tokens.extent(1) != token_dim)
        throw std::invalid_argument("PackedSequence: token tensor shape inconsistent");
    if (position_ids.size() != static_cast<size_t>(total_tokens()))
        throw std::invalid_argument("PackedSequence: position id count inconsistent");
}

namespace {

// Gathers the p x p x 3 pixel block (y-major, then x, then channel) of one
// clip frame. Alpha is replicated to three channels so every segment goes
// through the same embedder.
void fill_patch(const Video& v, int f, int py, int px, int patch, float* out) {
    int idx = 0;
    for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
            if (v.channels == 3) {
                for (int c = 0; c < 3; ++c)
                    out[idx++] = v.at(f, py * patch + dy, px * patch + dx, c);
            } else {
                const float a = v.at(f, py * patch + dy, px * patch + dx, 0);
                out[idx++] = a;
                out[idx++] = a;
                out[idx++] = a;
            }
        }
    }
}

void scatter_patch(Video& v, int f, int py, int px, int patch, const float* in) {
    int idx = 0;
    for (int dy = 0; dy < patch; ++dy) {
        for (int dx = 0; dx < patch; ++dx) {
            if (v.channels == 3) {
                for (int c = 0; c < 3; ++c)
                    v.at(f, py * patch + dy, px * patch + dx, c) = in[idx++];
            } else {
                // channel average in double so replicated values survive bit-exactly
                double s = static_cast<double>(in[idx]) + in[idx + 1] + in[idx + 2];
                idx += 3;
                float a = static_cast<float>(s / 3.0);
                v.at(f, py * patch + dy, px * patch + dx, 0) = std::clamp(a, 0.0f, 1.0f);
            }
        }
    }
}

}  // namespace

PackedSequence pack(const LayerQuadruple& q, int patch, const PatchEmbedding& embedder) {
    q.validate();
    if (patch <= 0 || q.fg.height % patch != 0 || q.fg.width % patch != 0)
        throw std::invalid_argument("pack: H and W must be divisible by the patch size");
    PackedSequence s;
    s.frames_per_clip = q.fg.frames;
    s.grid_h = q.fg.height / patch;
    s.grid_w = q.fg.width / patch;
    const int patch_dim = patch * patch * 3;
    s.token_dim = embedder.token_dim(patch_dim);
    const int per_clip = s.tokens_per_clip();
    s.tokens = Tensor::zeros({kNumClips * per_clip, s.token_dim});
    s.position_ids.resize(static_cast<size_t>(kNumClips) * per_clip);

    const Video* clips[kNumClips] = {&q.fg, &q.alpha, &q.bg, &q.blended};
    std::vector<float> patch_buf(static_cast<size_t>(patch_dim));
    int row = 0;
    for (int c = 0; c < kNumClips; ++c) {
        s.segment_offsets[static_cast<size_t>(c)] = row;
        for (int f = 0; f < s.frames_per_clip; ++f) {
            for (int py = 0; py < s.grid_h; ++py) {
                for (int px = 0; px < s.grid_w; ++px) {
                    fill_patch(*clips[c], f, py, px, patch, patch_buf.data());
                    embedder.embed(patch_buf.data(),
                                   s.tokens.data() + static_cast<size_t>(row) * s.token_dim,
                                   patch_dim);
                    s.position_ids[static_cast<size_t>(row)] =
                        PositionId{c, f, py * s.grid_w + px};
                    ++row;
                }
            }
        }
    }
    return s;
}

LayerQuadruple unpack(const PackedSequence& s, int patch, const PatchEmbedding& unembedder) {
    s.validate();
    const int patch_dim = patch * patch * 3;
    if (unembedder.token_dim(patch_dim) != s.token_dim)
        throw std::invalid_argument("unpack: token dimension does not match the embedder");
    const int height = s.grid_h * patch;
    const int width = s.grid_w * patch;

    LayerQuadruple q;
    q.fg = Video::zeros(s.frames_per_clip, height, width, 3);
    q.alpha = Video::zeros(s.frames_per_clip, height, width, 1);
    q.bg = Video::zeros(s.frames_per_clip, height, width, 3);
    q.blended = Video::zeros(s.frames_per_clip, height, width, 3);
    Video* clips[kNumClips] = {&q.fg, &q.alpha, &q.bg, &q.blended};

    std::vector<float> patch_buf(static_cast<size_t>(patch_dim));
    int row = 0;
    for (int c = 0; c < kNumClips; ++c) {
        for (int f = 0; f < s.frames_per_clip; ++f) {
            for (int py = 0; py < s.grid_h; ++py) {
                for (int px = 0; px < s.grid_w; ++px) {
                    unembedder.unembed(s.tokens.data() + static_cast<size_t>(row) * s.token_dim,
                                       patch_buf.data(), patch_dim);
                    scatter_patch(*clips[c], f, py, px, patch, patch_buf.data());
                    ++row;
                }
            }
        }
    }
    return q;
}

// ---- apply_condition --------------------------------------------------------------

std::vector<float> apply_condition(const std::vector<float>& xt, const std::vector<float>& x0,
                                   const ConditionMask& mask, int tokens_per_clip,
                                   int token_dim) {
    const size_t seg = static_cast<size_t>(tokens_per_clip) * token_dim;
    if (xt.size() != seg * kNumClips || x0.size() != xt.size())
        throw std::invalid_argument("apply_condition: length mismatch");
    std::vector<float> out = xt;
    for (int c = 0; c < kNumClips; ++c) {
        if (mask.fixed[static_cast<size_t>(c)])
            std::memcpy(out.data() + seg * c, x0.data() + seg * c, seg * sizeof(float));
    }
    return out;
}

Tensor apply_condition(const Tensor& xt, const Tensor& x0, const ConditionMask& mask,
                       int tokens_per_clip) {
    if (xt.rank() != 2 || x0.rank() != 2 || xt.shape() != x0.shape())
        throw std::invalid_argument("apply_condition: tensors must be 2-d with equal shapes");
    std::vector<float> out =
        apply_condition(xt.vec(), x0.vec(), mask, tokens_per_clip, xt.extent(1));
    return Tensor::from_data(xt.shape(), std::move(out));
}

// ---- dataset file I/O ----------------------------------------------------------------

void write_quadruple(const std::string& path, const LayerQuadruple& q) {
    q.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write("LFQ1", 4);
    write_u32(os, static_cast<uint32_t>(q.fg.frames));
    write_u32(os, static_cast<uint32_t>(q.fg.height));
    write_u32(os, static_cast<uint32_t>(q.fg.width));
    write_f32_blob(os, q.fg.data);
    write_f32_blob(os, q.alpha.data);
    write_f32_blob(os, q.bg.data);
    write_f32_blob(os, q.blended.data);
    for (const auto& p : q.prompts) {
        write_u32(os, static_cast<uint32_t>(p.size()));
        os.write(p.data(), static_cast<std::streamsize>(p.size()));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

LayerQuadruple read_quadruple(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "LFQ1", 4) != 0)
        throw std::runtime_error("not a quadruple file (bad magic): " + path);
    const int frames = static_cast<int>(read_u32(is));
    const int height = static_cast<int>(read_u32(is));
    const int width = static_cast<int>(read_u32(is));
    if (frames <= 0 || height <= 0 || width <= 0 || frames > 4096 || height > 4096 ||
        width > 4096)
        throw std::runtime_error("quadruple read: implausible geometry in " + path);
    LayerQuadruple q;
    q.fg = Video::zeros(frames, height, width, 3);
    q.alpha = Video::zeros(frames, height, width, 1);
    q.bg = Video::zeros(frames, height, width, 3);
    q.blended = Video::zeros(frames, height, width, 3);
    read_f32_blob(is, q.fg.data);
    read_f32_blob(is, q.alpha.data);
    read_f32_blob(is, q.bg.data);
    read_f32_blob(is, q.blended.data);
    for (auto& p : q.prompts) {
        uint32_t len = read_u32(is);
        if (len > (1u << 20)) throw std::runtime_error("quadruple read: implausible prompt length");
        p.resize(len);
        is.read(p.data(), static_cast<std::streamsize>(len));
        if (!is) throw std::runtime_error("quadruple read: truncated prompt in " + path);
    }
    return q;
}

}  // namespace lf
