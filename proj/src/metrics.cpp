#include "lf/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace lf {

double frame_consistency(const Video& v) {
    if (v.frames < 2) throw std::invalid_argument("frame_consistency: need at least 2 frames");
    const size_t frame_size = v.data.size() / static_cast<size_t>(v.frames);
    auto centered_dot = [&](int fa, int fb, double& dot, double& na, double& nb) {
        double ma = 0.0, mb = 0.0;
        const float* a = v.data.data() + fa * frame_size;
        const float* b = v.data.data() + fb * frame_size;
        for (size_t i = 0; i < frame_size; ++i) {
            ma += a[i];
            mb += b[i];
        }
        ma /= static_cast<double>(frame_size);
        mb /= static_cast<double>(frame_size);
        dot = na = nb = 0.0;
        for (size_t i = 0; i < frame_size; ++i) {
            const double ca = a[i] - ma;
            const double cb = b[i] - mb;
            dot += ca * cb;
            na += ca * ca;
            nb += cb * cb;
        }
    };
    double acc = 0.0;
    for (int f = 0; f + 1 < v.frames; ++f) {
        double dot, na, nb;
        centered_dot(f, f + 1, dot, na, nb);
        acc += (na == 0.0 || nb == 0.0) ? 1.0 : dot / std::sqrt(na * nb);
    }
    return acc / (v.frames - 1);
}

double dynamic_degree(const Video& v) {
    if (v.frames < 2) throw std::invalid_argument("dynamic_degree: need at least 2 frames");
    const size_t frame_size = v.data.size() / static_cast<size_t>(v.frames);
    double acc = 0.0;
    for (int f = 0; f + 1 < v.frames; ++f) {
        const float* a = v.data.data() + f * frame_size;
        const float* b = v.data.data() + (f + 1) * frame_size;
        for (size_t i = 0; i < frame_size; ++i) acc += std::fabs(static_cast<double>(b[i]) - a[i]);
    }
    return acc / (static_cast<double>(v.frames - 1) * frame_size);
}

namespace {

double video_mse(const Video& a, const Video& b) {
    if (a.data.size() != b.data.size())
        throw std::invalid_argument("reconstruction_error: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

}  // namespace

std::array<double, kNumClips> reconstruction_error(const LayerQuadruple& predicted,
                                                   const LayerQuadruple& truth) {
    if (!predicted.fg.same_geometry(truth.fg))
        throw std::invalid_argument("reconstruction_error: shape mismatch");
    return {video_mse(predicted.fg, truth.fg), video_mse(predicted.alpha, truth.alpha),
            video_mse(predicted.bg, truth.bg), video_mse(predicted.blended, truth.blended)};
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "layer,metric,value,n\n";
    auto emit = [&os](const std::map<std::string, MetricValue>& m, const char* metric) {
        for (const auto& [layer, mv] : m) {
            os << layer << ',' << metric << ',';
            if (mv.applicable)
                os << mv.value;
            else
                os << "na";
            os << ',' << mv.n << '\n';
        }
    };
    emit(frame_consistency, "frame_consistency");
    emit(dynamic_degree, "dynamic_degree");
    emit(reconstruction, "reconstruction_mse");
    return os.str();
}

std::string MetricReport::to_json() const {
    nlohmann::json j;
    auto fill = [](const std::map<std::string, MetricValue>& m) {
        nlohmann::json out;
        for (const auto& [layer, mv] : m) {
            if (mv.applicable)
                out[layer] = {{"value", mv.value}, {"n", mv.n}};
            else
                out[layer] = {{"value", nullptr}, {"n", mv.n}};
        }
        return out;
    };
    j["frame_consistency"] = fill(frame_consistency);
    j["dynamic_degree"] = fill(dynamic_degree);
    j["reconstruction_mse"] = fill(reconstruction);
    j["sample_count"] = sample_count;
    return j.dump(2);
}

}  // namespace lf
