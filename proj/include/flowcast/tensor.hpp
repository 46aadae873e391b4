#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flowcast/error.hpp"

namespace flowcast {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct TensorImpl;

/// Dense row-major tensor of doubles with reverse-mode autodiff.
///
/// Tensor is a cheap shared handle: copies alias the same storage and tape
/// node. Values are immutable after construction except for gradient
/// accumulation. Ops record a backward closure when any input participates
/// in the tape; calling backward() on a scalar accumulates gradients into
/// every reachable leaf with requires_grad set.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t ndim() const;
    int64_t numel() const;
    int64_t dim(int64_t axis) const;

    const std::vector<double>& data() const;
    std::vector<double>& mutable_data();
    double item() const;  // scalar tensors only
    double at(int64_t flat_index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);
    bool is_leaf() const;

    /// Accumulated gradient; empty until a backward pass reaches this leaf.
    const std::vector<double>& grad() const;
    bool has_grad() const;
    void zero_grad();

    // Applies p -= step elementwise, bypassing the tape (optimizer use).
    void apply_update(const std::vector<double>& step);

    uint64_t node_id() const;
    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  private:
    std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    uint64_t id = 0;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(TensorImpl&)> backward_fn;

    void ensure_grad();
};

/// Runs reverse-mode accumulation from a scalar loss. Traversal order is
/// reverse topological with ties broken by node creation index, so repeated
/// runs are bit-identical. Leaf gradients accumulate across calls.
void backward(const Tensor& loss);

/// Disables tape recording in scope (inference paths).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled();

// ---- primitive operations (each differentiable) ----

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor concat_last_axis(const std::vector<Tensor>& parts);
Tensor slice_last_axis(const Tensor& a, int64_t start, int64_t length);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose_axes(const Tensor& a, const std::vector<int64_t>& perm);

Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Per-last-axis standardization followed by gamma/beta affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Softmax over the unmasked entries of a vector; masked outputs are exactly 0.
Tensor softmax_masked(const Tensor& logits, const std::vector<uint8_t>& mask);

/// Gathers blocks along axis 0; backward scatter-adds into the source.
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices);

/// out[r] = sum of x[k] over k with indices[k] == r. Adjoint of gather_rows.
Tensor scatter_add_rows(const Tensor& x, const std::vector<int64_t>& indices, int64_t num_rows);

/// Scales each axis-0 block of x by s[r].
Tensor scale_rows(const Tensor& x, const Tensor& s);

/// Adds a vector over the last axis (bias broadcast).
Tensor add_rowvec(const Tensor& x, const Tensor& b);

/// outer_add(col, row)[i][j] = col[i] + row[j].
Tensor outer_add(const Tensor& col, const Tensor& row);

/// Independent softmax over each segment of a score vector. Segment ids must
/// be in [0, num_segments); empty segments are allowed and produce nothing.
Tensor segment_softmax(const Tensor& scores, const std::vector<int64_t>& segments,
                       int64_t num_segments);

/// Depthwise causal convolution over [S, L, C] with kernel w[C, K] and bias
/// b[C]; position l sees inputs l-K+1..l (zero padded on the left).
Tensor causal_depthwise_conv(const Tensor& u, const Tensor& w, const Tensor& b);

/// Mean of the per-step transition exp(delta * A) over sequences and steps;
/// filled in by ssm_scan when requested.
struct ScanCapture {
    // [C * G] row-major: channel-major mean of the discretized transition.
    std::vector<double> abar_mean;
    int64_t d_inner = 0;
    int64_t d_state = 0;
};

/// Batched selective-state-space recurrence.
///   u, delta: [S, L, C]; b_in, c_out: [S, L, G]; a: [C, G]; d_skip: [C]
/// Per sequence: h_t = exp(delta_t*a) .* h_{t-1} + (delta_t*b_t) u_t,
/// y_t = c_t . h_t + d_skip .* u_t, with h_0 = 0.
Tensor ssm_scan(const Tensor& u, const Tensor& delta, const Tensor& b_in, const Tensor& c_out,
                const Tensor& a, const Tensor& d_skip, ScanCapture* capture = nullptr);

}  // namespace flowcast
