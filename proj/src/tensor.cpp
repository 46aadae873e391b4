#include "flowcast/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace flowcast {

namespace {

std::atomic<uint64_t> g_next_node_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->id = g_next_node_id.fetch_add(1);
    return impl;
}

bool tracked(const Tensor& t) {
    return g_grad_enabled && t.requires_grad();
}

// Builds the result node; records parents/backward only when some input is
// on the tape.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
    auto impl = new_impl(std::move(shape), std::move(data));
    bool any = false;
    for (const auto& in : inputs) {
        if (tracked(in)) any = true;
    }
    if (any) {
        impl->requires_grad = true;
        impl->parents.reserve(inputs.size());
        for (const auto& in : inputs) impl->parents.push_back(in.impl_ptr());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(impl));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

// Size of one axis-0 block (product of trailing dims).
int64_t row_block(const Tensor& t) {
    if (t.ndim() == 0) throw ShapeError("expected tensor with at least 1 axis");
    int64_t block = 1;
    for (size_t i = 1; i < t.shape().size(); ++i) block *= t.shape()[i];
    return block;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void TensorImpl::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape) {
    int64_t n = shape_numel(shape);
    return Tensor(new_impl(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double value) {
    int64_t n = shape_numel(shape);
    return Tensor(new_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("from_data: " + shape_to_string(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
    }
    return Tensor(new_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }
int64_t Tensor::dim(int64_t axis) const { return impl_->shape.at(axis); }

const std::vector<double>& Tensor::data() const { return impl_->data; }
std::vector<double>& Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) {
        throw ValueError("item(): tensor " + shape_to_string(shape()) + " is not scalar");
    }
    return impl_->data[0];
}

double Tensor::at(int64_t flat_index) const { return impl_->data.at(flat_index); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
}

bool Tensor::is_leaf() const { return !impl_->backward_fn; }

const std::vector<double>& Tensor::grad() const { return impl_->grad; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

void Tensor::apply_update(const std::vector<double>& step) {
    if (step.size() != impl_->data.size()) {
        throw ShapeError("apply_update: step size mismatch");
    }
    for (size_t i = 0; i < step.size(); ++i) impl_->data[i] -= step[i];
}

uint64_t Tensor::node_id() const { return impl_->id; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ValueError("backward: loss must be scalar, got " + shape_to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ValueError("backward: loss is not connected to any tracked tensor");
    }

    // Creation ids are already a topological order (parents precede
    // children), so descending id is a valid reverse-topological schedule.
    std::vector<TensorImpl*> nodes;
    std::unordered_set<TensorImpl*> seen;
    std::vector<TensorImpl*> stack{loss.impl()};
    seen.insert(loss.impl());
    while (!stack.empty()) {
        TensorImpl* node = stack.back();
        stack.pop_back();
        nodes.push_back(node);
        for (const auto& parent : node->parents) {
            if (parent->requires_grad && seen.insert(parent.get()).second) {
                stack.push_back(parent.get());
            }
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorImpl* a, const TensorImpl* b) { return a->id > b->id; });

    // Interior grads are scratch per pass; leaf grads accumulate across calls.
    for (TensorImpl* node : nodes) {
        if (node->backward_fn) node->grad.assign(node->data.size(), 0.0);
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;

    for (TensorImpl* node : nodes) {
        if (node->backward_fn) node->backward_fn(*node);
    }
}

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_to_string(a.shape()) +
                         " and " + shape_to_string(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = pa + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = pb + kk * n;
            for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_result(
        {m, n}, std::move(out), {a, b},
        [a, b, m, k, n](TensorImpl& self) {
            const double* dy = self.grad.data();
            if (a.requires_grad()) {
                a.impl()->ensure_grad();
                double* da = a.impl()->grad.data();
                const double* pb = b.data().data();
                // dA = dY . B^T
                for (int64_t i = 0; i < m; ++i) {
                    for (int64_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        const double* dyr = dy + i * n;
                        const double* br = pb + kk * n;
                        for (int64_t j = 0; j < n; ++j) acc += dyr[j] * br[j];
                        da[i * k + kk] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                b.impl()->ensure_grad();
                double* db = b.impl()->grad.data();
                const double* pa = a.data().data();
                // dB = A^T . dY
                for (int64_t i = 0; i < m; ++i) {
                    const double* arow = pa + i * k;
                    const double* dyr = dy + i * n;
                    for (int64_t kk = 0; kk < k; ++kk) {
                        const double av = arow[kk];
                        if (av == 0.0) continue;
                        double* dbr = db + kk * n;
                        for (int64_t j = 0; j < n; ++j) dbr[j] += av * dyr[j];
                    }
                }
            }
        });
}

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          double (*fwd)(double, double),
                          void (*bwd)(double dy, double av, double bv, double* da, double* db)) {
    check_same_shape(a, b, name);
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i], b.data()[i]);
    return make_result(a.shape(), std::move(out), {a, b}, [a, b, bwd](TensorImpl& self) {
        const bool need_a = a.requires_grad();
        const bool need_b = b.requires_grad();
        if (need_a) a.impl()->ensure_grad();
        if (need_b) b.impl()->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double da = 0.0, db = 0.0;
            bwd(self.grad[i], a.data()[i], b.data()[i], &da, &db);
            if (need_a) a.impl()->grad[i] += da;
            if (need_b) b.impl()->grad[i] += db;
        }
    });
}

Tensor unary_elementwise(const Tensor& a, double (*fwd)(double),
                         double (*dfdx)(double x, double y)) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
    return make_result(a.shape(), std::move(out), {a}, [a, dfdx](TensorImpl& self) {
        a.impl()->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            a.impl()->grad[i] += self.grad[i] * dfdx(a.data()[i], self.data[i]);
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double dy, double, double, double* da, double* db) {
            *da = dy;
            *db = dy;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double dy, double, double, double* da, double* db) {
            *da = dy;
            *db = -dy;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double dy, double av, double bv, double* da, double* db) {
            *da = dy * bv;
            *db = dy * av;
        });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    return make_result(a.shape(), std::move(out), {a}, [a, factor](TensorImpl& self) {
        a.impl()->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) a.impl()->grad[i] += self.grad[i] * factor;
    });
}

Tensor add_scalar(const Tensor& a, double value) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + value;
    return make_result(a.shape(), std::move(out), {a}, [a](TensorImpl& self) {
        a.impl()->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) a.impl()->grad[i] += self.grad[i];
    });
}

Tensor concat_last_axis(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValueError("concat_last_axis: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    int64_t total_last = 0;
    for (const auto& p : parts) {
        Shape plead(p.shape().begin(), p.shape().end() - 1);
        if (plead != lead) {
            throw ShapeError("concat_last_axis: leading dims differ, " +
                             shape_to_string(parts[0].shape()) + " vs " +
                             shape_to_string(p.shape()));
        }
        total_last += p.shape().back();
    }
    int64_t rows = 1;
    for (int64_t d : lead) rows *= d;
    std::vector<double> out(static_cast<size_t>(rows * total_last));
    int64_t offset = 0;
    for (const auto& p : parts) {
        const int64_t w = p.shape().back();
        for (int64_t r = 0; r < rows; ++r) {
            std::memcpy(out.data() + r * total_last + offset, p.data().data() + r * w,
                        sizeof(double) * w);
        }
        offset += w;
    }
    Shape out_shape = lead;
    out_shape.push_back(total_last);
    return make_result(std::move(out_shape), std::move(out), parts,
                       [parts, rows, total_last](TensorImpl& self) {
                           int64_t offset = 0;
                           for (const auto& p : parts) {
                               const int64_t w = p.shape().back();
                               if (p.requires_grad()) {
                                   p.impl()->ensure_grad();
                                   for (int64_t r = 0; r < rows; ++r) {
                                       const double* src = self.grad.data() + r * total_last + offset;
                                       double* dst = p.impl()->grad.data() + r * w;
                                       for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
                                   }
                               }
                               offset += w;
                           }
                       });
}

Tensor slice_last_axis(const Tensor& a, int64_t start, int64_t length) {
    const int64_t last = a.shape().back();
    if (start < 0 || length <= 0 || start + length > last) {
        throw ShapeError("slice_last_axis: [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range for last dim " +
                         std::to_string(last));
    }
    int64_t rows = a.numel() / last;
    std::vector<double> out(static_cast<size_t>(rows * length));
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.data() + r * length, a.data().data() + r * last + start,
                    sizeof(double) * length);
    }
    Shape out_shape = a.shape();
    out_shape.back() = length;
    return make_result(std::move(out_shape), std::move(out), {a},
                       [a, start, length, rows, last](TensorImpl& self) {
                           a.impl()->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                               const double* src = self.grad.data() + r * length;
                               double* dst = a.impl()->grad.data() + r * last + start;
                               for (int64_t j = 0; j < length; ++j) dst[j] += src[j];
                           }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(shape));
    }
    std::vector<double> out = a.data();
    return make_result(std::move(shape), std::move(out), {a}, [a](TensorImpl& self) {
        a.impl()->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) a.impl()->grad[i] += self.grad[i];
    });
}

namespace {

std::vector<int64_t> strides_of(const Shape& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

// Maps each output flat index to the input flat index under a permutation.
std::vector<int64_t> permute_index_map(const Shape& in_shape, const std::vector<int64_t>& perm) {
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
    auto in_strides = strides_of(in_shape);
    auto out_strides = strides_of(out_shape);
    const int64_t n = shape_numel(in_shape);
    std::vector<int64_t> map(n);
    std::vector<int64_t> coord(perm.size(), 0);
    for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat;
        int64_t src = 0;
        for (size_t ax = 0; ax < perm.size(); ++ax) {
            const int64_t c = rem / out_strides[ax];
            rem %= out_strides[ax];
            src += c * in_strides[perm[ax]];
        }
        map[flat] = src;
    }
    return map;
}

}  // namespace

Tensor transpose_axes(const Tensor& a, const std::vector<int64_t>& perm) {
    if (static_cast<int64_t>(perm.size()) != a.ndim()) {
        throw ShapeError("transpose_axes: permutation rank " + std::to_string(perm.size()) +
                         " does not match tensor rank " + std::to_string(a.ndim()));
    }
    std::vector<bool> used(perm.size(), false);
    for (int64_t p : perm) {
        if (p < 0 || p >= a.ndim() || used[p]) throw ValueError("transpose_axes: invalid permutation");
        used[p] = true;
    }
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.shape()[perm[i]];
    auto map = permute_index_map(a.shape(), perm);
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[map[i]];
    return make_result(std::move(out_shape), std::move(out), {a},
                       [a, map = std::move(map)](TensorImpl& self) {
                           a.impl()->ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               a.impl()->grad[map[i]] += self.grad[i];
                           }
                       });
}

Tensor silu(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return x / (1.0 + std::exp(-x)); },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor softplus(const Tensor& a) {
    return unary_elementwise(
        a,
        [](double x) {
            // log1p(exp(x)) with overflow guard
            return x > 30.0 ? x : std::log1p(std::exp(x));
        },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    std::vector<double> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = x > 0.0 ? x : slope * x;
    }
    return make_result(a.shape(), std::move(out), {a}, [a, slope](TensorImpl& self) {
        a.impl()->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            a.impl()->grad[i] += self.grad[i] * (a.data()[i] > 0.0 ? 1.0 : slope);
        }
    });
}

Tensor exp(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_result({1}, {acc}, {a}, [a](TensorImpl& self) {
        a.impl()->ensure_grad();
        const double dy = self.grad[0];
        for (size_t i = 0; i < a.data().size(); ++i) a.impl()->grad[i] += dy;
    });
}

Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_result({1}, {acc * inv}, {a}, [a, inv](TensorImpl& self) {
        a.impl()->ensure_grad();
        const double dy = self.grad[0] * inv;
        for (size_t i = 0; i < a.data().size(); ++i) a.impl()->grad[i] += dy;
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw ValueError("layer_norm: eps must be > 0");
    const int64_t d = x.shape().back();
    if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d) {
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         shape_to_string(gamma.shape()) + " and " + shape_to_string(beta.shape()));
    }
    const int64_t rows = x.numel() / d;
    std::vector<double> out(x.data().size());
    std::vector<double> xhat(x.data().size());
    std::vector<double> inv_std(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (int64_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * istd;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    return make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, rows, d, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](TensorImpl& self) {
            const bool need_x = x.requires_grad();
            const bool need_g = gamma.requires_grad();
            const bool need_b = beta.requires_grad();
            if (need_x) x.impl()->ensure_grad();
            if (need_g) gamma.impl()->ensure_grad();
            if (need_b) beta.impl()->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * d;
                const double* h = xhat.data() + r * d;
                if (need_g || need_b) {
                    for (int64_t j = 0; j < d; ++j) {
                        if (need_g) gamma.impl()->grad[j] += dy[j] * h[j];
                        if (need_b) beta.impl()->grad[j] += dy[j];
                    }
                }
                if (need_x) {
                    // dx = istd/d * (d*dh - sum(dh) - h*sum(dh*h)), dh = dy*gamma
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        const double dh = dy[j] * gamma.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    const double istd = inv_std[r];
                    double* dx = x.impl()->grad.data() + r * d;
                    for (int64_t j = 0; j < d; ++j) {
                        const double dh = dy[j] * gamma.data()[j];
                        dx[j] += istd * (dh - (sum_dh + h[j] * sum_dh_h) / static_cast<double>(d));
                    }
                }
            }
        });
}

Tensor softmax_masked(const Tensor& logits, const std::vector<uint8_t>& mask) {
    if (logits.ndim() != 1) {
        throw ShapeError("softmax_masked: expected rank-1 logits, got " +
                         shape_to_string(logits.shape()));
    }
    const int64_t n = logits.dim(0);
    if (static_cast<int64_t>(mask.size()) != n) {
        throw ShapeError("softmax_masked: mask size " + std::to_string(mask.size()) +
                         " does not match logits " + shape_to_string(logits.shape()));
    }
    double max_val = -std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < n; ++i) {
        if (mask[i] && logits.data()[i] > max_val) max_val = logits.data()[i];
    }
    if (!std::isfinite(max_val)) {
        throw ValueError("softmax_masked: degenerate neighborhood, mask has no true entry");
    }
    std::vector<double> out(n, 0.0);
    double denom = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (mask[i]) {
            out[i] = std::exp(logits.data()[i] - max_val);
            denom += out[i];
        }
    }
    for (int64_t i = 0; i < n; ++i) out[i] /= denom;
    return make_result(logits.shape(), std::move(out), {logits}, [logits, mask, n](TensorImpl& self) {
        logits.impl()->ensure_grad();
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) dot += self.grad[i] * self.data[i];
        for (int64_t i = 0; i < n; ++i) {
            if (mask[i]) logits.impl()->grad[i] += self.data[i] * (self.grad[i] - dot);
        }
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices) {
    const int64_t rows = x.dim(0);
    const int64_t block = row_block(x);
    for (int64_t idx : indices) {
        if (idx < 0 || idx >= rows) {
            throw ValueError("gather_rows: index " + std::to_string(idx) + " out of range [0, " +
                             std::to_string(rows) + ")");
        }
    }
    const int64_t k = static_cast<int64_t>(indices.size());
    std::vector<double> out(static_cast<size_t>(k * block));
    for (int64_t i = 0; i < k; ++i) {
        std::memcpy(out.data() + i * block, x.data().data() + indices[i] * block,
                    sizeof(double) * block);
    }
    Shape out_shape = x.shape();
    out_shape[0] = k;
    return make_result(std::move(out_shape), std::move(out), {x},
                       [x, indices, block, k](TensorImpl& self) {
                           x.impl()->ensure_grad();
                           for (int64_t i = 0; i < k; ++i) {
                               const double* src = self.grad.data() + i * block;
                               double* dst = x.impl()->grad.data() + indices[i] * block;
                               for (int64_t j = 0; j < block; ++j) dst[j] += src[j];
                           }
                       });
}

Tensor scatter_add_rows(const Tensor& x, const std::vector<int64_t>& indices, int64_t num_rows) {
    const int64_t k = x.dim(0);
    if (static_cast<int64_t>(indices.size()) != k) {
        throw ShapeError("scatter_add_rows: " + std::to_string(indices.size()) +
                         " indices for " + std::to_string(k) + " rows");
    }
    const int64_t block = row_block(x);
    for (int64_t idx : indices) {
        if (idx < 0 || idx >= num_rows) {
            throw ValueError("scatter_add_rows: index " + std::to_string(idx) +
                             " out of range [0, " + std::to_string(num_rows) + ")");
        }
    }
    std::vector<double> out(static_cast<size_t>(num_rows * block), 0.0);
    for (int64_t i = 0; i < k; ++i) {
        const double* src = x.data().data() + i * block;
        double* dst = out.data() + indices[i] * block;
        for (int64_t j = 0; j < block; ++j) dst[j] += src[j];
    }
    Shape out_shape = x.shape();
    out_shape[0] = num_rows;
    return make_result(std::move(out_shape), std::move(out), {x},
                       [x, indices, block, k](TensorImpl& self) {
                           x.impl()->ensure_grad();
                           for (int64_t i = 0; i < k; ++i) {
                               const double* src = self.grad.data() + indices[i] * block;
                               double* dst = x.impl()->grad.data() + i * block;
                               for (int64_t j = 0; j < block; ++j) dst[j] += src[j];
                           }
                       });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    const int64_t rows = x.dim(0);
    if (s.ndim() != 1 || s.dim(0) != rows) {
        throw ShapeError("scale_rows: scale " + shape_to_string(s.shape()) +
                         " does not match rows of " + shape_to_string(x.shape()));
    }
    const int64_t block = row_block(x);
    std::vector<double> out(x.data().size());
    for (int64_t r = 0; r < rows; ++r) {
        const double sv = s.data()[r];
        const double* src = x.data().data() + r * block;
        double* dst = out.data() + r * block;
        for (int64_t j = 0; j < block; ++j) dst[j] = src[j] * sv;
    }
    return make_result(x.shape(), std::move(out), {x, s}, [x, s, rows, block](TensorImpl& self) {
        const bool need_x = x.requires_grad();
        const bool need_s = s.requires_grad();
        if (need_x) x.impl()->ensure_grad();
        if (need_s) s.impl()->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const double sv = s.data()[r];
            const double* dy = self.grad.data() + r * block;
            const double* xv = x.data().data() + r * block;
            double acc = 0.0;
            for (int64_t j = 0; j < block; ++j) {
                if (need_x) x.impl()->grad[r * block + j] += dy[j] * sv;
                acc += dy[j] * xv[j];
            }
            if (need_s) s.impl()->grad[r] += acc;
        }
    });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    const int64_t d = x.shape().back();
    if (b.ndim() != 1 || b.dim(0) != d) {
        throw ShapeError("add_rowvec: bias " + shape_to_string(b.shape()) +
                         " does not match last dim of " + shape_to_string(x.shape()));
    }
    const int64_t rows = x.numel() / d;
    std::vector<double> out(x.data().size());
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = x.data().data() + r * d;
        double* dst = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dst[j] = src[j] + b.data()[j];
    }
    return make_result(x.shape(), std::move(out), {x, b}, [x, b, rows, d](TensorImpl& self) {
        if (x.requires_grad()) {
            x.impl()->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) x.impl()->grad[i] += self.grad[i];
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * d;
                for (int64_t j = 0; j < d; ++j) b.impl()->grad[j] += dy[j];
            }
        }
    });
}

Tensor outer_add(const Tensor& col, const Tensor& row) {
    if (col.ndim() != 1 || row.ndim() != 1) {
        throw ShapeError("outer_add: expected rank-1 inputs, got " + shape_to_string(col.shape()) +
                         " and " + shape_to_string(row.shape()));
    }
    const int64_t r = col.dim(0), c = row.dim(0);
    std::vector<double> out(static_cast<size_t>(r * c));
    for (int64_t i = 0; i < r; ++i) {
        const double cv = col.data()[i];
        for (int64_t j = 0; j < c; ++j) out[i * c + j] = cv + row.data()[j];
    }
    return make_result({r, c}, std::move(out), {col, row}, [col, row, r, c](TensorImpl& self) {
        if (col.requires_grad()) {
            col.impl()->ensure_grad();
            for (int64_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int64_t j = 0; j < c; ++j) acc += self.grad[i * c + j];
                col.impl()->grad[i] += acc;
            }
        }
        if (row.requires_grad()) {
            row.impl()->ensure_grad();
            for (int64_t j = 0; j < c; ++j) {
                double acc = 0.0;
                for (int64_t i = 0; i < r; ++i) acc += self.grad[i * c + j];
                row.impl()->grad[j] += acc;
            }
        }
    });
}

Tensor segment_softmax(const Tensor& scores, const std::vector<int64_t>& segments,
                       int64_t num_segments) {
    if (scores.ndim() != 1) {
        throw ShapeError("segment_softmax: expected rank-1 scores, got " +
                         shape_to_string(scores.shape()));
    }
    const int64_t n = scores.dim(0);
    if (static_cast<int64_t>(segments.size()) != n) {
        throw ShapeError("segment_softmax: segment ids size mismatch");
    }
    std::vector<double> seg_max(num_segments, -std::numeric_limits<double>::infinity());
    for (int64_t i = 0; i < n; ++i) {
        const int64_t s = segments[i];
        if (s < 0 || s >= num_segments) throw ValueError("segment_softmax: segment id out of range");
        seg_max[s] = std::max(seg_max[s], scores.data()[i]);
    }
    std::vector<double> out(n);
    std::vector<double> seg_sum(num_segments, 0.0);
    for (int64_t i = 0; i < n; ++i) {
        out[i] = std::exp(scores.data()[i] - seg_max[segments[i]]);
        seg_sum[segments[i]] += out[i];
    }
    for (int64_t i = 0; i < n; ++i) out[i] /= seg_sum[segments[i]];
    return make_result(scores.shape(), std::move(out), {scores},
                       [scores, segments, num_segments, n](TensorImpl& self) {
                           scores.impl()->ensure_grad();
                           std::vector<double> seg_dot(num_segments, 0.0);
                           for (int64_t i = 0; i < n; ++i) {
                               seg_dot[segments[i]] += self.grad[i] * self.data[i];
                           }
                           for (int64_t i = 0; i < n; ++i) {
                               scores.impl()->grad[i] +=
                                   self.data[i] * (self.grad[i] - seg_dot[segments[i]]);
                           }
                       });
}

Tensor causal_depthwise_conv(const Tensor& u, const Tensor& w, const Tensor& b) {
    if (u.ndim() != 3) {
        throw ShapeError("causal_depthwise_conv: expected [S, L, C] input, got " +
                         shape_to_string(u.shape()));
    }
    const int64_t S = u.dim(0), L = u.dim(1), C = u.dim(2);
    if (w.ndim() != 2 || w.dim(0) != C) {
        throw ShapeError("causal_depthwise_conv: kernel " + shape_to_string(w.shape()) +
                         " does not match channels " + std::to_string(C));
    }
    if (b.ndim() != 1 || b.dim(0) != C) {
        throw ShapeError("causal_depthwise_conv: bias shape " + shape_to_string(b.shape()));
    }
    const int64_t K = w.dim(1);
    std::vector<double> out(u.data().size());
    const double* pu = u.data().data();
    for (int64_t s = 0; s < S; ++s) {
        for (int64_t l = 0; l < L; ++l) {
            double* dst = out.data() + (s * L + l) * C;
            for (int64_t c = 0; c < C; ++c) {
                double acc = b.data()[c];
                for (int64_t k = 0; k < K; ++k) {
                    const int64_t src_l = l - (K - 1) + k;
                    if (src_l < 0) continue;
                    acc += w.data()[c * K + k] * pu[(s * L + src_l) * C + c];
                }
                dst[c] = acc;
            }
        }
    }
    return make_result(
        u.shape(), std::move(out), {u, w, b}, [u, w, b, S, L, C, K](TensorImpl& self) {
            const bool need_u = u.requires_grad();
            const bool need_w = w.requires_grad();
            const bool need_b = b.requires_grad();
            if (need_u) u.impl()->ensure_grad();
            if (need_w) w.impl()->ensure_grad();
            if (need_b) b.impl()->ensure_grad();
            const double* pu = u.data().data();
            for (int64_t s = 0; s < S; ++s) {
                for (int64_t l = 0; l < L; ++l) {
                    const double* dy = self.grad.data() + (s * L + l) * C;
                    for (int64_t c = 0; c < C; ++c) {
                        if (need_b) b.impl()->grad[c] += dy[c];
                        for (int64_t k = 0; k < K; ++k) {
                            const int64_t src_l = l - (K - 1) + k;
                            if (src_l < 0) continue;
                            const int64_t src = (s * L + src_l) * C + c;
                            if (need_w) w.impl()->grad[c * K + k] += dy[c] * pu[src];
                            if (need_u) u.impl()->grad[src] += dy[c] * w.data()[c * K + k];
                        }
                    }
                }
            }
        });
}

Tensor ssm_scan(const Tensor& u, const Tensor& delta, const Tensor& b_in, const Tensor& c_out,
                const Tensor& a, const Tensor& d_skip, ScanCapture* capture) {
    if (u.ndim() != 3 || delta.ndim() != 3 || b_in.ndim() != 3 || c_out.ndim() != 3) {
        throw ShapeError("ssm_scan: expected rank-3 sequence tensors");
    }
    const int64_t S = u.dim(0), L = u.dim(1), C = u.dim(2);
    check_same_shape(u, delta, "ssm_scan(u, delta)");
    const int64_t G = b_in.dim(2);
    if (b_in.dim(0) != S || b_in.dim(1) != L || c_out.dim(0) != S || c_out.dim(1) != L ||
        c_out.dim(2) != G) {
        throw ShapeError("ssm_scan: b/c shapes " + shape_to_string(b_in.shape()) + ", " +
                         shape_to_string(c_out.shape()) + " do not match " +
                         shape_to_string(u.shape()));
    }
    if (a.ndim() != 2 || a.dim(0) != C || a.dim(1) != G) {
        throw ShapeError("ssm_scan: transition shape " + shape_to_string(a.shape()));
    }
    if (d_skip.ndim() != 1 || d_skip.dim(0) != C) {
        throw ShapeError("ssm_scan: skip shape " + shape_to_string(d_skip.shape()));
    }

    // Full state history kept for the adjoint pass: h[(s*L + t)*C*G + c*G + g].
    auto history = std::make_shared<std::vector<double>>(static_cast<size_t>(S * L * C * G));
    std::vector<double> out(static_cast<size_t>(S * L * C));
    const double* pu = u.data().data();
    const double* pd = delta.data().data();
    const double* pb = b_in.data().data();
    const double* pc = c_out.data().data();
    const double* pa = a.data().data();
    const double* pk = d_skip.data().data();
    std::vector<double> h(static_cast<size_t>(C * G));
    std::vector<double> abar_accum;
    if (capture) abar_accum.assign(static_cast<size_t>(C * G), 0.0);

    for (int64_t s = 0; s < S; ++s) {
        std::fill(h.begin(), h.end(), 0.0);
        for (int64_t t = 0; t < L; ++t) {
            const int64_t step = s * L + t;
            const double* ut = pu + step * C;
            const double* dt = pd + step * C;
            const double* bt = pb + step * G;
            const double* ct = pc + step * G;
            double* yt = out.data() + step * C;
            double* ht_store = history->data() + step * C * G;
            for (int64_t c = 0; c < C; ++c) {
                const double dtc = dt[c];
                const double uc = ut[c];
                double* hc = h.data() + c * G;
                const double* ac = pa + c * G;
                double y = pk[c] * uc;
                for (int64_t g = 0; g < G; ++g) {
                    const double abar = std::exp(dtc * ac[g]);
                    const double hv = abar * hc[g] + dtc * bt[g] * uc;
                    hc[g] = hv;
                    ht_store[c * G + g] = hv;
                    y += ct[g] * hv;
                    if (capture) abar_accum[c * G + g] += abar;
                }
                yt[c] = y;
            }
        }
    }
    if (capture) {
        const double inv = 1.0 / static_cast<double>(S * L);
        capture->abar_mean.resize(abar_accum.size());
        for (size_t i = 0; i < abar_accum.size(); ++i) capture->abar_mean[i] = abar_accum[i] * inv;
        capture->d_inner = C;
        capture->d_state = G;
    }

    return make_result(
        u.shape(), std::move(out), {u, delta, b_in, c_out, a, d_skip},
        [u, delta, b_in, c_out, a, d_skip, history, S, L, C, G](TensorImpl& self) {
            const bool need_u = u.requires_grad();
            const bool need_d = delta.requires_grad();
            const bool need_b = b_in.requires_grad();
            const bool need_c = c_out.requires_grad();
            const bool need_a = a.requires_grad();
            const bool need_k = d_skip.requires_grad();
            if (need_u) u.impl()->ensure_grad();
            if (need_d) delta.impl()->ensure_grad();
            if (need_b) b_in.impl()->ensure_grad();
            if (need_c) c_out.impl()->ensure_grad();
            if (need_a) a.impl()->ensure_grad();
            if (need_k) d_skip.impl()->ensure_grad();

            const double* pu = u.data().data();
            const double* pd = delta.data().data();
            const double* pb = b_in.data().data();
            const double* pc = c_out.data().data();
            const double* pa = a.data().data();
            const double* pk = d_skip.data().data();
            const double* ph = history->data();

            std::vector<double> gh(static_cast<size_t>(C * G));  // running dL/dh_t
            for (int64_t s = 0; s < S; ++s) {
                std::fill(gh.begin(), gh.end(), 0.0);
                for (int64_t t = L - 1; t >= 0; --t) {
                    const int64_t step = s * L + t;
                    const double* dy = self.grad.data() + step * C;
                    const double* ut = pu + step * C;
                    const double* dt = pd + step * C;
                    const double* bt = pb + step * G;
                    const double* ct = pc + step * G;
                    const double* ht = ph + step * C * G;
                    const double* ht_prev = t > 0 ? ph + (step - 1) * C * G : nullptr;
                    for (int64_t c = 0; c < C; ++c) {
                        const double dyc = dy[c];
                        const double uc = ut[c];
                        const double dtc = dt[c];
                        double* ghc = gh.data() + c * G;
                        const double* ac = pa + c * G;
                        if (need_k) d_skip.impl()->grad[c] += dyc * uc;
                        double du_c = dyc * pk[c];
                        double dd_c = 0.0;
                        for (int64_t g = 0; g < G; ++g) {
                            const double hv = ht[c * G + g];
                            if (need_c) c_out.impl()->grad[step * G + g] += dyc * hv;
                            double gv = ghc[g] + dyc * ct[g];
                            const double abar = std::exp(dtc * ac[g]);
                            const double hprev = ht_prev ? ht_prev[c * G + g] : 0.0;
                            // h_t = abar*h_{t-1} + dtc*bt*uc
                            if (need_a) a.impl()->grad[c * G + g] += gv * hprev * abar * dtc;
                            dd_c += gv * (hprev * abar * ac[g] + bt[g] * uc);
                            if (need_b) b_in.impl()->grad[step * G + g] += gv * dtc * uc;
                            du_c += gv * dtc * bt[g];
                            ghc[g] = gv * abar;  // dL/dh_{t-1}
                        }
                        if (need_u) u.impl()->grad[step * C + c] += du_c;
                        if (need_d) delta.impl()->grad[step * C + c] += dd_c;
                    }
                }
            }
        });
}

}  // namespace flowcast
