#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lf/rng.hpp"

namespace lf {

class Tape;

namespace detail {
struct TensorNode {
    std::vector<int> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;  // master gradient buffer, empty until first flush
};
using NodePtr = std::shared_ptr<TensorNode>;
}  // namespace detail

// Dense row-major f32 tensor. A Tensor is a cheap handle onto a shared node;
// copies alias the same storage. Data is immutable once an op has consumed
// the tensor; gradient buffers accumulate until zero_grad().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
    int extent(int axis) const;

    float* data() { return node_->data.data(); }
    const float* data() const { return node_->data.data(); }
    std::vector<float>& vec() { return node_->data; }
    const std::vector<float>& vec() const { return node_->data; }
    float item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    // allocates a zero buffer on first access
    std::vector<float>& grad();
    const std::vector<float>& grad() const;
    void zero_grad();

    detail::NodePtr node() const { return node_; }

private:
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}
    detail::NodePtr node_;
    friend class Tape;
};

// Reverse-mode tape. Ops are recorded in execution order (inputs always
// precede their consumers); backward() does one reverse sweep, accumulating
// into tape-local buffers, then flushes leaf (parameter/input) gradients in
// a deterministic order. Gradients of intermediate tensors are available via
// local_grad_of. backward_local/flush_grads are split so a trainer can run
// several per-sample tapes in parallel and still reduce bit-identically.
class Tape {
public:
    void backward(const Tensor& loss);
    void backward_local(const Tensor& loss);
    void flush_grads();

    std::size_t op_count() const { return recs_.size(); }
    // resets the tape for a fresh recording; grad buffers are retained and
    // recycled, which matters when the same graph is rebuilt every step
    void clear();

    // tape-local gradient of a tensor after backward_local (empty if unreached)
    const std::vector<float>* local_grad_of(const Tensor& t) const;

    // --- recording machinery (used by the op implementations) ---
    void push(std::vector<detail::NodePtr> inputs, detail::NodePtr output,
              std::function<void(Tape&)> backward_fn);
    std::vector<float>& lg(const detail::TensorNode* n, size_t numel);
    const std::vector<float>* lg_if_present(const detail::TensorNode* n) const;

private:
    struct Rec {
        std::vector<detail::NodePtr> inputs;
        detail::NodePtr output;
        std::function<void(Tape&)> backward_fn;
    };
    std::vector<Rec> recs_;
    std::unordered_map<const detail::TensorNode*, int> index_;
    std::unordered_set<const detail::TensorNode*> outputs_;
    // deque: buffer references stay valid while new ones are allocated mid-sweep
    std::deque<std::vector<float>> local_;
    std::deque<std::vector<float>> recycle_;
    std::vector<detail::NodePtr> touched_;  // first-touch order, for deterministic flush
    bool swept_ = false;

    void keep_alive(const detail::NodePtr& n);
    std::unordered_map<const detail::TensorNode*, detail::NodePtr> alive_;
};

// ---- differentiable ops ------------------------------------------------
// All ops take an optional tape; with tape == nullptr (or when no input
// requires grad) they are pure forward computations.
// Elementwise binary ops support same-shape operands, suffix ("trailing
// axis") broadcast of b onto a, and scalar b.

Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor add_scalar(const Tensor& a, float c, Tape* tape);
Tensor scale(const Tensor& a, float c, Tape* tape);
Tensor gelu(const Tensor& a, Tape* tape);
Tensor sqrt(const Tensor& a, Tape* tape);  // pre: a > 0 where gradients are needed
Tensor sum(const Tensor& a, Tape* tape);
Tensor mean(const Tensor& a, Tape* tape);
Tensor mse(const Tensor& a, const Tensor& b, Tape* tape);
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor transpose(const Tensor& a, Tape* tape);
Tensor softmax(const Tensor& a, int axis, Tape* tape);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps,
                  Tape* tape);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids, Tape* tape);
Tensor concat_rows(const Tensor& a, const Tensor& b, Tape* tape);
Tensor slice_rows(const Tensor& a, int row_begin, int row_end, Tape* tape);
Tensor slice_cols(const Tensor& a, int col_begin, int col_end, Tape* tape);
Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape);
Tensor reshape(const Tensor& a, std::vector<int> shape, Tape* tape);

bool all_finite(const Tensor& t);

// ---- gradient checking ---------------------------------------------------

struct FdReport {
    float max_rel_err = 0.0f;
    bool passed = false;
};

// Compares the analytic gradient of f w.r.t. x against central finite
// differences. f must be deterministic; it receives the tensor to evaluate
// and a tape (ignored for the perturbed evaluations, which pass nullptr).
FdReport finite_diff_check(const std::function<Tensor(const Tensor&, Tape*)>& f, Tensor x,
                           float h, float tol);

// ---- serialization: little-endian u32 rank, u32 extents, raw f32 data ----

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is, bool requires_grad = false);

}  // namespace lf
