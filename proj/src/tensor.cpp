#include "lf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace lf {

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
        n *= e;
    }
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

// b broadcasts onto a if it is scalar (numel 1) or its shape is a suffix of
// a's shape. Returns the repeat count (numel(a) / numel(b)).
int64_t broadcast_lead(const Tensor& a, const Tensor& b, const char* op) {
    if (b.numel() == 1) return a.numel();
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sb.size() > sa.size())
        throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(sb) +
                                    " onto " + shape_str(sa));
    for (size_t i = 0; i < sb.size(); ++i) {
        if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i])
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(sa) +
                                        " vs " + shape_str(sb));
    }
    return a.numel() / b.numel();
}

bool want_tape(Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (tape == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    int64_t n = shape_numel(shape);
    node->shape = std::move(shape);
    node->data.assign(static_cast<size_t>(n), 0.0f);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(data.size()))
        throw std::invalid_argument("from_data: data length does not match shape");
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.vec()) v = stddev * rng.normal();
    return t;
}

int Tensor::extent(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw std::out_of_range("extent: axis out of range");
    return node_->shape[static_cast<size_t>(axis)];
}

float Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return node_->data[0];
}

std::vector<float>& Tensor::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
    return node_->grad;
}

const std::vector<float>& Tensor::grad() const {
    if (node_->grad.empty())
        throw std::runtime_error("grad: no gradient has been accumulated for this tensor");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

// ---- Tape -----------------------------------------------------------------

void Tape::push(std::vector<detail::NodePtr> inputs, detail::NodePtr output,
                std::function<void(Tape&)> backward_fn) {
    for (const auto& in : inputs) keep_alive(in);
    keep_alive(output);
    outputs_.insert(output.get());
    recs_.push_back(Rec{std::move(inputs), std::move(output), std::move(backward_fn)});
}

void Tape::keep_alive(const detail::NodePtr& n) {
    alive_.emplace(n.get(), n);
}

std::vector<float>& Tape::lg(const detail::TensorNode* n, size_t numel) {
    auto it = index_.find(n);
    if (it == index_.end()) {
        int idx = static_cast<int>(local_.size());
        index_.emplace(n, idx);
        if (!recycle_.empty() && recycle_.front().size() == numel) {
            local_.push_back(std::move(recycle_.front()));
            recycle_.pop_front();
            std::fill(local_.back().begin(), local_.back().end(), 0.0f);
        } else {
            local_.emplace_back(numel, 0.0f);
        }
        auto alive_it = alive_.find(n);
        if (alive_it == alive_.end())
            throw std::logic_error("Tape::lg: node is not tracked by this tape");
        touched_.push_back(alive_it->second);
        return local_.back();
    }
    return local_[static_cast<size_t>(it->second)];
}

const std::vector<float>* Tape::lg_if_present(const detail::TensorNode* n) const {
    auto it = index_.find(n);
    if (it == index_.end()) return nullptr;
    return &local_[static_cast<size_t>(it->second)];
}

const std::vector<float>* Tape::local_grad_of(const Tensor& t) const {
    return lg_if_present(t.node().get());
}

void Tape::backward_local(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (swept_) throw std::logic_error("backward: tape has already been swept");
    swept_ = true;
    if (alive_.find(loss.node().get()) == alive_.end())
        throw std::invalid_argument("backward: loss is not on this tape");
    lg(loss.node().get(), 1)[0] = 1.0f;
    for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) it->backward_fn(*this);
}

void Tape::flush_grads() {
    // only leaves (parameters and inputs) receive master-gradient
    // accumulation; intermediate grads stay tape-local (local_grad_of)
    for (const auto& node : touched_) {
        if (!node->requires_grad) continue;
        if (outputs_.count(node.get())) continue;
        const std::vector<float>& local = local_[static_cast<size_t>(index_.at(node.get()))];
        if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0f);
        for (size_t i = 0; i < local.size(); ++i) node->grad[i] += local[i];
    }
}

void Tape::backward(const Tensor& loss) {
    backward_local(loss);
    flush_grads();
}

void Tape::clear() {
    recs_.clear();
    index_.clear();
    outputs_.clear();
    for (auto& buf : local_) recycle_.push_back(std::move(buf));
    local_.clear();
    touched_.clear();
    alive_.clear();
    swept_ = false;
}

// ---- op helpers -------------------------------------------------------------

namespace {

Tensor make_output(const std::vector<int>& shape, bool requires_grad) {
    return Tensor::zeros(shape, requires_grad);
}

// accumulate g (shaped like a) into the buffer of b under suffix/scalar broadcast
void reduce_into(const std::vector<float>& g, std::vector<float>& gb, int64_t nb) {
    int64_t lead = static_cast<int64_t>(g.size()) / nb;
    for (int64_t i = 0; i < lead; ++i) {
        const float* gi = g.data() + i * nb;
        for (int64_t j = 0; j < nb; ++j) gb[static_cast<size_t>(j)] += gi[j];
    }
}

}  // namespace

// ---- elementwise binary ops -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    broadcast_lead(a, b, "add");
    const int64_t nb = b.numel();
    Tensor out = make_output(a.shape(), want_tape(tape, {&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    const int64_t lead = a.numel() / nb;
    for (int64_t o = 0; o < lead; ++o)
        for (int64_t j = 0; j < nb; ++j) po[o * nb + j] = pa[o * nb + j] + pb[j];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tape->push({an, bn}, on, [an, bn, on, nb](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            if (an->requires_grad) {
                auto& ga = t.lg(an.get(), an->data.size());
                for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.lg(bn.get(), bn->data.size());
                reduce_into(*go, gb, nb);
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
    broadcast_lead(a, b, "sub");
    const int64_t nb = b.numel();
    Tensor out = make_output(a.shape(), want_tape(tape, {&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    const int64_t lead = a.numel() / nb;
    for (int64_t o = 0; o < lead; ++o)
        for (int64_t j = 0; j < nb; ++j) po[o * nb + j] = pa[o * nb + j] - pb[j];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tape->push({an, bn}, on, [an, bn, on, nb](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            if (an->requires_grad) {
                auto& ga = t.lg(an.get(), an->data.size());
                for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.lg(bn.get(), bn->data.size());
                int64_t lead = static_cast<int64_t>(go->size()) / nb;
                for (int64_t i = 0; i < lead; ++i)
                    for (int64_t j = 0; j < nb; ++j)
                        gb[static_cast<size_t>(j)] -= (*go)[static_cast<size_t>(i * nb + j)];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    broadcast_lead(a, b, "mul");
    const int64_t nb = b.numel();
    Tensor out = make_output(a.shape(), want_tape(tape, {&a, &b}));
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    const int64_t lead = a.numel() / nb;
    for (int64_t o = 0; o < lead; ++o)
        for (int64_t j = 0; j < nb; ++j) po[o * nb + j] = pa[o * nb + j] * pb[j];
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tape->push({an, bn}, on, [an, bn, on, nb](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            if (an->requires_grad) {
                auto& ga = t.lg(an.get(), an->data.size());
                const int64_t lead = static_cast<int64_t>(go->size()) / nb;
                for (int64_t o = 0; o < lead; ++o)
                    for (int64_t j = 0; j < nb; ++j)
                        ga[static_cast<size_t>(o * nb + j)] +=
                            (*go)[static_cast<size_t>(o * nb + j)] * bn->data[static_cast<size_t>(j)];
            }
            if (bn->requires_grad) {
                auto& gb = t.lg(bn.get(), bn->data.size());
                int64_t lead = static_cast<int64_t>(go->size()) / nb;
                for (int64_t i = 0; i < lead; ++i)
                    for (int64_t j = 0; j < nb; ++j)
                        gb[static_cast<size_t>(j)] += (*go)[static_cast<size_t>(i * nb + j)] *
                                                      an->data[static_cast<size_t>(i * nb + j)];
            }
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, float c, Tape* tape) {
    Tensor out = make_output(a.shape(), want_tape(tape, {&a}));
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + c;
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
        });
    }
    return out;
}

Tensor scale(const Tensor& a, float c, Tape* tape) {
    Tensor out = make_output(a.shape(), want_tape(tape, {&a}));
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on, c](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (size_t i = 0; i < go->size(); ++i) ga[i] += c * (*go)[i];
        });
    }
    return out;
}

// ---- elementwise unary ops --------------------------------------------------

Tensor gelu(const Tensor& a, Tape* tape) {
    Tensor out = make_output(a.shape(), want_tape(tape, {&a}));
    const float* pa = a.data();
    float* po = out.data();
    constexpr float kInvSqrt2 = 0.70710678f;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const float x = pa[i];
        po[i] = 0.5f * x * (1.0f + ::erff(x * kInvSqrt2));
    }
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            constexpr float kInvSqrt2Pi = 0.39894228f;
            for (size_t i = 0; i < go->size(); ++i) {
                const float x = an->data[i];
                const float d = 0.5f * (1.0f + ::erff(x * 0.70710678f)) +
                                x * kInvSqrt2Pi * ::expf(-0.5f * x * x);
                ga[i] += d * (*go)[i];
            }
        });
    }
    return out;
}

Tensor sqrt(const Tensor& a, Tape* tape) {
    Tensor out = make_output(a.shape(), want_tape(tape, {&a}));
    for (int64_t i = 0; i < a.numel(); ++i) {
        float x = a.data()[i];
        if (x < 0.0f) throw std::invalid_argument("sqrt: negative input");
        out.data()[i] = std::sqrt(x);
    }
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (size_t i = 0; i < go->size(); ++i)
                ga[i] += (*go)[i] * 0.5f / on->data[i];
        });
    }
    return out;
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a, Tape* tape) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    Tensor out = Tensor::scalar(static_cast<float>(acc), want_tape(tape, {&a}));
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[0];
        });
    }
    return out;
}

Tensor mean(const Tensor& a, Tape* tape) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(static_cast<float>(acc * inv_n), want_tape(tape, {&a}));
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        float invf = static_cast<float>(inv_n);
        tape->push({an}, on, [an, on, invf](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += invf * (*go)[0];
        });
    }
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mse: shape mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        acc += d * d;
    }
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(static_cast<float>(acc * inv_n), want_tape(tape, {&a, &b}));
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        float invf = static_cast<float>(inv_n);
        tape->push({an, bn}, on, [an, bn, on, invf](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            float g = (*go)[0] * 2.0f * invf;
            if (an->requires_grad) {
                auto& ga = t.lg(an.get(), an->data.size());
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g * (an->data[i] - bn->data[i]);
            }
            if (bn->requires_grad) {
                auto& gb = t.lg(bn.get(), bn->data.size());
                for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (an->data[i] - bn->data[i]);
            }
        });
    }
    return out;
}

// ---- matmul / transpose -------------------------------------------------------

namespace {

// All three kernels run in saxpy form (contiguous fused multiply-adds with no
// cross-lane reduction) so -O3 auto-vectorizes them; accumulation order is
// fixed, keeping results bit-stable across runs.

// c[m,n] += a[m,k] * b[k,n]
void matmul_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<int64_t>(i) * k;
        float* ci = c + static_cast<int64_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const float ail = ai[l];
            const float* bl = b + static_cast<int64_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
void matmul_bt_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    std::vector<float> bt(static_cast<size_t>(k) * n);
    for (int j = 0; j < n; ++j)
        for (int l = 0; l < k; ++l)
            bt[static_cast<size_t>(l) * n + j] = b[static_cast<size_t>(j) * k + l];
    matmul_acc(a, bt.data(), c, m, k, n);
}

// c[k,n] += a[m,k]^T * b[m,n]
void matmul_at_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* ai = a + static_cast<int64_t>(i) * k;
        const float* bi = b + static_cast<int64_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const float ail = ai[l];
            float* cl = c + static_cast<int64_t>(l) * n;
            for (int j = 0; j < n; ++j) cl[j] += ail * bi[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: operands must be 2-d");
    const int m = a.extent(0), k = a.extent(1);
    if (b.extent(0) != k)
        throw std::invalid_argument("matmul: inner extents differ (" + std::to_string(k) + " vs " +
                                    std::to_string(b.extent(0)) + ")");
    const int n = b.extent(1);
    Tensor out = make_output({m, n}, want_tape(tape, {&a, &b}));
    matmul_acc(a.data(), b.data(), out.data(), m, k, n);
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        tape->push({an, bn}, on, [an, bn, on, m, k, n](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            if (an->requires_grad) {
                auto& ga = t.lg(an.get(), an->data.size());
                matmul_bt_acc(go->data(), bn->data.data(), ga.data(), m, n, k);
            }
            if (bn->requires_grad) {
                auto& gb = t.lg(bn.get(), bn->data.size());
                matmul_at_acc(an->data.data(), go->data(), gb.data(), m, k, n);
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a, Tape* tape) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: operand must be 2-d");
    const int m = a.extent(0), n = a.extent(1);
    Tensor out = make_output({n, m}, want_tape(tape, {&a}));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.data()[static_cast<int64_t>(j) * m + i] = a.data()[static_cast<int64_t>(i) * n + j];
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on, m, n](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    ga[static_cast<size_t>(i) * n + static_cast<size_t>(j)] +=
                        (*go)[static_cast<size_t>(j) * m + static_cast<size_t>(i)];
        });
    }
    return out;
}

// ---- softmax / layer_norm ----------------------------------------------------

Tensor softmax(const Tensor& a, int axis, Tape* tape) {
    if (a.rank() == 0) throw std::invalid_argument("softmax: rank-0 input");
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("softmax: axis out of range");
    const int n = a.extent(axis);
    int64_t inner = 1;
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);
    int64_t outer = a.numel() / (n * inner);

    Tensor out = make_output(a.shape(), want_tape(tape, {&a}));
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            float mx = pa[base];
            for (int j = 1; j < n; ++j) mx = std::max(mx, pa[base + j * inner]);
            double denom = 0.0;
            for (int j = 0; j < n; ++j) {
                float e = std::exp(pa[base + j * inner] - mx);
                po[base + j * inner] = e;
                denom += e;
            }
            const float inv = static_cast<float>(1.0 / denom);
            for (int j = 0; j < n; ++j) po[base + j * inner] *= inv;
        }
    }
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on, n, inner, outer](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            if (inner == 1) {
                // contiguous rows: product pass, short reduction, update pass
                std::vector<float> prod(static_cast<size_t>(n));
                for (int64_t o = 0; o < outer; ++o) {
                    const float* y = on->data.data() + o * n;
                    const float* g = go->data() + o * n;
                    float* out_g = ga.data() + o * n;
                    for (int j = 0; j < n; ++j) prod[static_cast<size_t>(j)] = g[j] * y[j];
                    float dot = 0.0f;
                    for (int j = 0; j < n; ++j) dot += prod[static_cast<size_t>(j)];
                    for (int j = 0; j < n; ++j) out_g[j] += y[j] * (g[j] - dot);
                }
                return;
            }
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const int64_t idx = base + j * inner;
                        dot += static_cast<double>((*go)[static_cast<size_t>(idx)]) *
                               on->data[static_cast<size_t>(idx)];
                    }
                    for (int j = 0; j < n; ++j) {
                        const int64_t idx = base + j * inner;
                        ga[static_cast<size_t>(idx)] +=
                            on->data[static_cast<size_t>(idx)] *
                            ((*go)[static_cast<size_t>(idx)] - static_cast<float>(dot));
                    }
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps,
                  Tape* tape) {
    if (x.rank() == 0) throw std::invalid_argument("layer_norm: rank-0 input");
    const int d = x.extent(x.rank() - 1);
    if (gain.numel() != d || bias.numel() != d)
        throw std::invalid_argument("layer_norm: gain/bias must have last-axis extent");
    if (eps <= 0.0f) throw std::invalid_argument("layer_norm: eps must be positive");
    const int64_t rows = x.numel() / d;

    Tensor out = make_output(x.shape(), want_tape(tape, {&x, &gain, &bias}));
    // stash per-row inverse stddev and normalized values for the backward rule
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    auto xhat = std::make_shared<std::vector<float>>(x.vec().size());

    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = px + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = row[j] - mu;
            var += c * c;
        }
        var /= d;
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*inv_std)[static_cast<size_t>(r)] = inv;
        for (int j = 0; j < d; ++j) {
            float xh = (row[j] - static_cast<float>(mu)) * inv;
            (*xhat)[static_cast<size_t>(r * d + j)] = xh;
            po[r * d + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    if (out.requires_grad()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        tape->push({xn, gn, bn}, on, [xn, gn, bn, on, d, rows, inv_std, xhat](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            if (gn->requires_grad) {
                auto& gg = t.lg(gn.get(), gn->data.size());
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j)
                        gg[static_cast<size_t>(j)] += (*go)[static_cast<size_t>(r * d + j)] *
                                                      (*xhat)[static_cast<size_t>(r * d + j)];
            }
            if (bn->requires_grad) {
                auto& gb = t.lg(bn.get(), bn->data.size());
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j)
                        gb[static_cast<size_t>(j)] += (*go)[static_cast<size_t>(r * d + j)];
            }
            if (xn->requires_grad) {
                auto& gx = t.lg(xn.get(), xn->data.size());
                for (int64_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const size_t idx = static_cast<size_t>(r * d + j);
                        double dxh = static_cast<double>((*go)[idx]) * gn->data[static_cast<size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * (*xhat)[idx];
                    }
                    m1 /= d;
                    m2 /= d;
                    const float inv = (*inv_std)[static_cast<size_t>(r)];
                    for (int j = 0; j < d; ++j) {
                        const size_t idx = static_cast<size_t>(r * d + j);
                        double dxh = static_cast<double>((*go)[idx]) * gn->data[static_cast<size_t>(j)];
                        gx[idx] += static_cast<float>(inv * (dxh - m1 - (*xhat)[idx] * m2));
                    }
                }
            }
        });
    }
    return out;
}

// ---- structural ops ----------------------------------------------------------

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids, Tape* tape) {
    if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be 2-d");
    const int rows = table.extent(0), d = table.extent(1);
    for (int id : ids)
        if (id < 0 || id >= rows) throw std::out_of_range("gather_rows: id out of range");
    Tensor out = make_output({static_cast<int>(ids.size()), d}, want_tape(tape, {&table}));
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + i * static_cast<size_t>(d),
                    table.data() + static_cast<size_t>(ids[i]) * d,
                    sizeof(float) * static_cast<size_t>(d));
    if (out.requires_grad()) {
        auto tn = table.node(), on = out.node();
        auto ids_copy = std::make_shared<std::vector<int>>(ids);
        tape->push({tn}, on, [tn, on, ids_copy, d](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& gt = t.lg(tn.get(), tn->data.size());
            for (size_t i = 0; i < ids_copy->size(); ++i) {
                float* dst = gt.data() + static_cast<size_t>((*ids_copy)[i]) * d;
                const float* src = go->data() + i * static_cast<size_t>(d);
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b, Tape* tape) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(1))
        throw std::invalid_argument("concat_rows: operands must be 2-d with equal widths");
    const int ma = a.extent(0), mb = b.extent(0), d = a.extent(1);
    Tensor out = make_output({ma + mb, d}, want_tape(tape, {&a, &b}));
    std::memcpy(out.data(), a.data(), sizeof(float) * static_cast<size_t>(a.numel()));
    std::memcpy(out.data() + a.numel(), b.data(), sizeof(float) * static_cast<size_t>(b.numel()));
    if (out.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = out.node();
        const size_t na = static_cast<size_t>(a.numel());
        tape->push({an, bn}, on, [an, bn, on, na](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            if (an->requires_grad) {
                auto& ga = t.lg(an.get(), an->data.size());
                for (size_t i = 0; i < na; ++i) ga[i] += (*go)[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.lg(bn.get(), bn->data.size());
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*go)[na + i];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int row_begin, int row_end, Tape* tape) {
    if (a.rank() != 2) throw std::invalid_argument("slice_rows: operand must be 2-d");
    if (row_begin < 0 || row_end > a.extent(0) || row_begin >= row_end)
        throw std::out_of_range("slice_rows: bad row range");
    const int d = a.extent(1);
    Tensor out = make_output({row_end - row_begin, d}, want_tape(tape, {&a}));
    std::memcpy(out.data(), a.data() + static_cast<size_t>(row_begin) * d,
                sizeof(float) * static_cast<size_t>(out.numel()));
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        const size_t off = static_cast<size_t>(row_begin) * d;
        tape->push({an}, on, [an, on, off](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (size_t i = 0; i < go->size(); ++i) ga[off + i] += (*go)[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& a, int col_begin, int col_end, Tape* tape) {
    if (a.rank() != 2) throw std::invalid_argument("slice_cols: operand must be 2-d");
    if (col_begin < 0 || col_end > a.extent(1) || col_begin >= col_end)
        throw std::out_of_range("slice_cols: bad column range");
    const int m = a.extent(0), n = a.extent(1), w = col_end - col_begin;
    Tensor out = make_output({m, w}, want_tape(tape, {&a}));
    for (int i = 0; i < m; ++i)
        std::memcpy(out.data() + static_cast<size_t>(i) * w,
                    a.data() + static_cast<size_t>(i) * n + col_begin,
                    sizeof(float) * static_cast<size_t>(w));
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on, m, n, w, col_begin](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    ga[static_cast<size_t>(i) * n + static_cast<size_t>(col_begin + j)] +=
                        (*go)[static_cast<size_t>(i) * w + static_cast<size_t>(j)];
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const int m = parts[0].extent(0);
    int total = 0;
    bool grad = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.extent(0) != m)
            throw std::invalid_argument("concat_cols: parts must be 2-d with equal row counts");
        total += p.extent(1);
        grad = grad || p.requires_grad();
    }
    Tensor out = make_output({m, total}, tape != nullptr && grad);
    int col = 0;
    for (const auto& p : parts) {
        const int w = p.extent(1);
        for (int i = 0; i < m; ++i)
            std::memcpy(out.data() + static_cast<size_t>(i) * total + col,
                        p.data() + static_cast<size_t>(i) * w, sizeof(float) * static_cast<size_t>(w));
        col += w;
    }
    if (out.requires_grad()) {
        std::vector<detail::NodePtr> inputs;
        std::vector<int> widths;
        for (const auto& p : parts) {
            inputs.push_back(p.node());
            widths.push_back(p.extent(1));
        }
        auto on = out.node();
        tape->push(inputs, on, [inputs, on, widths, m, total](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            int col = 0;
            for (size_t pi = 0; pi < inputs.size(); ++pi) {
                const int w = widths[pi];
                if (inputs[pi]->requires_grad) {
                    auto& gp = t.lg(inputs[pi].get(), inputs[pi]->data.size());
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            gp[static_cast<size_t>(i) * w + static_cast<size_t>(j)] +=
                                (*go)[static_cast<size_t>(i) * total + static_cast<size_t>(col + j)];
                }
                col += w;
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape, Tape* tape) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    if (n != a.numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor out = Tensor::from_data(std::move(shape), a.vec(), want_tape(tape, {&a}));
    if (out.requires_grad()) {
        auto an = a.node(), on = out.node();
        tape->push({an}, on, [an, on](Tape& t) {
            const auto* go = t.lg_if_present(on.get());
            if (go == nullptr) return;
            auto& ga = t.lg(an.get(), an->data.size());
            for (size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
        });
    }
    return out;
}

bool all_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t.data()[i])) return false;
    return true;
}

// ---- finite differences --------------------------------------------------------

FdReport finite_diff_check(const std::function<Tensor(const Tensor&, Tape*)>& f, Tensor x,
                           float h, float tol) {
    if (h <= 0.0f) throw std::invalid_argument("finite_diff_check: h must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    Tape tape;
    Tensor y = f(x, &tape);
    if (y.numel() != 1) throw std::invalid_argument("finite_diff_check: f must return a scalar");
    tape.backward(y);
    std::vector<float> analytic = x.grad();

    // relative error floored at the RMS gradient scale: components near zero
    // are compared against the gradient's own magnitude rather than ULP noise
    double sq = 0.0;
    for (float a : analytic) sq += static_cast<double>(a) * a;
    const float grad_scale =
        std::max(1e-2f, static_cast<float>(std::sqrt(sq / static_cast<double>(analytic.size()))));

    FdReport report;
    Tensor probe = Tensor::from_data(x.shape(), x.vec(), false);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const float saved = probe.data()[i];
        probe.data()[i] = saved + h;
        float fp = f(probe, nullptr).item();
        probe.data()[i] = saved - h;
        float fm = f(probe, nullptr).item();
        probe.data()[i] = saved;
        float numeric = (fp - fm) / (2.0f * h);
        float a = analytic[static_cast<size_t>(i)];
        float denom = std::max({std::fabs(a), std::fabs(numeric), grad_scale});
        float rel = std::fabs(a - numeric) / denom;
        report.max_rel_err = std::max(report.max_rel_err, rel);
    }
    report.passed = report.max_rel_err < tol;
    return report;
}

// ---- serialization ---------------------------------------------------------------

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
    if (!is) throw std::runtime_error("tensor read: truncated stream");
    return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
           (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<uint32_t>(t.extent(i)));
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint32_t bits;
        std::memcpy(&bits, &t.data()[i], 4);
        write_u32(os, bits);
    }
}

Tensor read_tensor(std::istream& is, bool requires_grad) {
    uint32_t rank = read_u32(is);
    if (rank > 8) throw std::runtime_error("tensor read: implausible rank");
    std::vector<int> shape;
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t e = read_u32(is);
        if (e == 0 || e > (1u << 28)) throw std::runtime_error("tensor read: bad extent");
        shape.push_back(static_cast<int>(e));
        n *= e;
    }
    std::vector<float> data(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        uint32_t bits = read_u32(is);
        std::memcpy(&data[static_cast<size_t>(i)], &bits, 4);
    }
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace lf
