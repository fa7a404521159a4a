#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace reettt {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Raised whenever a NaN or Inf appears at an operation boundary.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Misuse of the differentiation graph (double backward, non-scalar loss, ...).
struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

struct TensorImpl;

// One recorded primitive. `backward` receives the gradient of the node's
// output and accumulates into the parents that require grad.
struct Node {
    std::string name;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(std::span<const double> grad_out)> backward;
    bool consumed = false;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    std::shared_ptr<Node> grad_fn;

    std::vector<double>& grad_buffer();
};

/// Dense row-major float64 array with optional participation in reverse-mode
/// differentiation. Copies share storage (handle semantics, like a
/// reference-counted tensor); use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value) { return full({}, value); }
    static Tensor eye(std::size_t n, double scale = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Write access to the values. Only legal on graph leaves.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag = true);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    bool is_leaf() const;
    /// Same values, detached from any graph, independent storage.
    Tensor clone() const;
    Tensor detach() const { return clone(); }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Graph control

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Reverse sweep from a scalar loss. Nodes are consumed: running a second
/// backward over the same recorded graph raises TapeError.
void backward(const Tensor& loss);

void check_finite(std::span<const double> values, const char* where);

namespace detail {
// Builds an output tensor; records a node when any input requires grad and
// grad mode is on. `make_backward` is only invoked when recording.
Tensor make_result(const char* name, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   const std::function<std::function<void(std::span<const double>)>()>& make_backward);
void accumulate(const std::shared_ptr<TensorImpl>& target, std::span<const double> delta);
bool needs_grad(const Tensor& t);
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
/// Derivative of gelu, differentiable itself (used when inner gradients are unrolled).
Tensor gelu_grad(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Reductions and layout

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
/// Softmax along axis 0 of a 2-D tensor (each column sums to one).
Tensor softmax_columns(const Tensor& a);

// ---------------------------------------------------------------------------
// Linear algebra and neural operators

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// x[M,K] * w[N,K]^T + b[N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Per-position channel mixing in row-vector form: x[N,C,...] -> [N,Co,...],
/// out[:, j] = sum_i x[:, i] * w[i, j].
Tensor channel_mix(const Tensor& x, const Tensor& w);
/// x[N,C,...] + b[C]
Tensor channel_bias(const Tensor& x, const Tensor& b);
/// x[N,C,...] * w[C]
Tensor channel_weight(const Tensor& x, const Tensor& w);
/// x[N,C,...] * g[N,C]
Tensor channel_scale(const Tensor& x, const Tensor& g);

/// Cross-correlation, no kernel flip. x[N,C,H,W], k[O,C,KH,KW].
Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad);
/// Adjoint of conv2d with the same kernel layout: x[N,O,H,W] -> [N,C,Ho,Wo] with
/// Ho = (H-1)*stride - 2*pad + KH + output_padding.
Tensor conv_transpose2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad,
                        std::size_t output_padding = 0);

/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Averages the last two axes: [..., H, W] -> [...].
Tensor global_avg_pool_spatial(const Tensor& x);
/// d_t = x_t - x_{t-1}, d_0 = 0, along axis 1 of x[B,T,...].
Tensor temporal_diff(const Tensor& x);

/// Unnormalized 2-D DFT over the last two axes: [..., H, W] -> [..., 2, H, W]
/// (real plane then imaginary plane).
Tensor dft2(const Tensor& x);

}  // namespace reettt
