#include "reettt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace reettt {

namespace {
thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
    std::size_t p = 1;
    for (std::size_t i = from; i < to; ++i) p *= s[i];
    return p;
}

// Unary elementwise op with derivative expressed through input and output.
template <class F, class D>
Tensor unary(const char* name, const Tensor& a, F f, D dfdx) {
    auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return detail::make_result(name, a.shape(), std::move(out), {a}, [&] {
        return [a, dfdx](std::span<const double> g) {
            auto x = a.data();
            std::vector<double> dx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * dfdx(x[i]);
            detail::accumulate(a.impl(), dx);
        };
    });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_fn(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_d1(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
double gelu_d2(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x) * (2.0 - x * x); }
double sigmoid_fn(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace

std::size_t numel_of(const Shape& shape) { return prod(shape, 0, shape.size()); }

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<TensorImpl>()) {
    impl_->data.assign(numel_of(shape), 0.0);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    if (numel_of(shape) != data.size())
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    check_finite(data, "tensor construction");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::eye(std::size_t n, double s) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = s;
    return Tensor({n, n}, std::move(d));
}

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) throw TapeError("use of undefined tensor");
    return impl_->shape;
}
std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[axis];
}
std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }
std::span<const double> Tensor::data() const {
    if (!impl_) throw TapeError("use of undefined tensor");
    return impl_->data;
}
std::span<double> Tensor::mutable_data() {
    if (!impl_) throw TapeError("use of undefined tensor");
    if (impl_->grad_fn) throw TapeError("in-place write to a non-leaf tensor");
    return impl_->data;
}
double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
Tensor& Tensor::set_requires_grad(bool flag) {
    if (impl_->grad_fn) throw TapeError("requires_grad can only be set on leaves");
    impl_->requires_grad = flag;
    return *this;
}
bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw TapeError("tensor has no accumulated gradient");
    return impl_->grad;
}
void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}
bool Tensor::is_leaf() const { return !impl_->grad_fn; }
Tensor Tensor::clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
}

// ---------------------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void check_finite(std::span<const double> values, const char* where) {
    for (double v : values)
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + where);
}

namespace detail {

bool needs_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

Tensor make_result(const char* name, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   const std::function<std::function<void(std::span<const double>)>()>& make_backward) {
    check_finite(data, name);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool record = false;
    if (g_grad_enabled)
        for (const auto& in : inputs) record = record || in.requires_grad();
    if (record) {
        auto node = std::make_shared<Node>();
        node->name = name;
        for (const auto& in : inputs) node->parents.push_back(in.impl());
        node->backward = make_backward();
        impl->requires_grad = true;
        impl->grad_fn = std::move(node);
    }
    return Tensor::from_impl(std::move(impl));
}

void accumulate(const std::shared_ptr<TensorImpl>& target, std::span<const double> delta) {
    if (!target->requires_grad) return;
    auto& g = target->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw TapeError("backward requires a scalar loss");
    if (!loss.requires_grad()) throw TapeError("loss does not depend on any tensor requiring grad");

    // Post-order DFS gives a topological order (parents before children).
    std::vector<TensorImpl*> order;
    std::vector<std::shared_ptr<TensorImpl>> keep;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
    stack.emplace_back(loss.impl(), 0);
    seen.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const auto& fn = impl->grad_fn;
        if (fn && fn->consumed)
            throw TapeError("graph already consumed by a previous backward pass; re-run the forward pass");
        if (fn && next < fn->parents.size()) {
            auto parent = fn->parents[next++];
            if (parent->requires_grad && seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
            continue;
        }
        order.push_back(impl.get());
        keep.push_back(impl);
        stack.pop_back();
    }

    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        auto fn = impl->grad_fn;
        if (!fn) continue;
        if (!impl->grad.empty()) {
            check_finite(impl->grad, fn->name.c_str());
            fn->backward(impl->grad);
        }
        fn->consumed = true;
        fn->backward = nullptr;
        impl->grad.clear();
        impl->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return detail::make_result("add", a.shape(), std::move(out), {a, b}, [&] {
        return [a, b](std::span<const double> g) {
            detail::accumulate(a.impl(), g);
            detail::accumulate(b.impl(), g);
        };
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [&] {
        return [a, b](std::span<const double> g) {
            detail::accumulate(a.impl(), g);
            if (b.requires_grad()) {
                std::vector<double> neg(g.begin(), g.end());
                for (auto& v : neg) v = -v;
                detail::accumulate(b.impl(), neg);
            }
        };
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [&] {
        return [a, b](std::span<const double> g) {
            auto x = a.data(), y = b.data();
            std::vector<double> d(g.size());
            if (a.requires_grad()) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * y[i];
                detail::accumulate(a.impl(), d);
            }
            if (b.requires_grad()) {
                for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * x[i];
                detail::accumulate(b.impl(), d);
            }
        };
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}
Tensor add_scalar(const Tensor& a, double s) {
    return unary("add_scalar", a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}
Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}
Tensor abs(const Tensor& a) {
    return unary("abs", a, [](double x) { return std::fabs(x); },
                 [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
Tensor relu(const Tensor& a) {
    return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                 [](double x) { return x > 0 ? 1.0 : 0.0; });
}
Tensor gelu(const Tensor& a) { return unary("gelu", a, gelu_fn, gelu_d1); }
Tensor gelu_grad(const Tensor& a) { return unary("gelu_grad", a, gelu_d1, gelu_d2); }
Tensor sigmoid(const Tensor& a) {
    return unary("sigmoid", a, sigmoid_fn, [](double x) {
        const double s = sigmoid_fn(x);
        return s * (1.0 - s);
    });
}
Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions and layout

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::make_result("sum", {}, {s}, {a}, [&] {
        return [a](std::span<const double> g) {
            std::vector<double> d(a.numel(), g[0]);
            detail::accumulate(a.impl(), d);
        };
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel_of(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [&] {
        return [a](std::span<const double> g) { detail::accumulate(a.impl(), g); };
    });
}

namespace {
// Maps every flat index of the permuted tensor to its source flat index.
std::vector<std::size_t> permutation_index(const Shape& in, const std::vector<std::size_t>& axes, Shape& out) {
    const std::size_t r = in.size();
    if (axes.size() != r) throw ShapeError("permute: axes rank mismatch");
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
    out.resize(r);
    std::vector<bool> used(r, false);
    for (std::size_t i = 0; i < r; ++i) {
        if (axes[i] >= r || used[axes[i]]) throw ShapeError("permute: invalid axes");
        used[axes[i]] = true;
        out[i] = in[axes[i]];
    }
    const std::size_t n = numel_of(in);
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t s = 0;
        for (std::size_t i = 0; i < r; ++i) s += idx[i] * in_stride[axes[i]];
        src[flat] = s;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out[i]) break;
            idx[i] = 0;
        }
    }
    return src;
}
}  // namespace

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
    Shape out_shape;
    auto src = std::make_shared<std::vector<std::size_t>>(permutation_index(a.shape(), axes, out_shape));
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*src)[i]];
    return detail::make_result("permute", std::move(out_shape), std::move(out), {a}, [&] {
        return [a, src](std::span<const double> g) {
            std::vector<double> d(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) d[(*src)[i]] = g[i];
            detail::accumulate(a.impl(), d);
        };
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of nothing");
    Shape out_shape = parts[0].shape();
    if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != out_shape[i]) throw ShapeError("concat: extent mismatch");
        out_shape[axis] += s[axis];
    }
    const std::size_t outer = prod(out_shape, 0, axis);
    const std::size_t inner = prod(out_shape, axis + 1, out_shape.size());
    const std::size_t row = out_shape[axis] * inner;
    std::vector<double> out(numel_of(out_shape));
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * inner;
        auto x = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(x.begin() + o * chunk, chunk, out.begin() + o * row + offset);
        offsets.push_back(offset);
        offset += chunk;
    }
    return detail::make_result("concat", out_shape, std::move(out), parts, [&] {
        return [parts, offsets, outer, inner, row, axis](std::span<const double> g) {
            for (std::size_t k = 0; k < parts.size(); ++k) {
                if (!parts[k].requires_grad()) continue;
                const std::size_t chunk = parts[k].dim(axis) * inner;
                std::vector<double> d(parts[k].numel());
                for (std::size_t o = 0; o < outer; ++o)
                    std::copy_n(g.begin() + o * row + offsets[k], chunk, d.begin() + o * chunk);
                detail::accumulate(parts[k].impl(), d);
            }
        };
    });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    Shape s = a.shape();
    if (axis >= s.size() || start + length > s[axis]) throw ShapeError("slice out of range");
    const std::size_t outer = prod(s, 0, axis);
    const std::size_t inner = prod(s, axis + 1, s.size());
    const std::size_t row = s[axis] * inner, chunk = length * inner, off = start * inner;
    s[axis] = length;
    auto x = a.data();
    std::vector<double> out(outer * chunk);
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.begin() + o * row + off, chunk, out.begin() + o * chunk);
    return detail::make_result("slice", std::move(s), std::move(out), {a}, [&] {
        return [a, outer, row, chunk, off](std::span<const double> g) {
            std::vector<double> d(a.numel(), 0.0);
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(g.begin() + o * chunk, chunk, d.begin() + o * row + off);
            detail::accumulate(a.impl(), d);
        };
    });
}

Tensor softmax_columns(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("softmax_columns expects a 2-D tensor");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t c = 0; c < cols; ++c) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < rows; ++r) mx = std::max(mx, x[r * cols + c]);
        double z = 0.0;
        for (std::size_t r = 0; r < rows; ++r) z += (out[r * cols + c] = std::exp(x[r * cols + c] - mx));
        for (std::size_t r = 0; r < rows; ++r) out[r * cols + c] /= z;
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return detail::make_result("softmax_columns", a.shape(), std::move(out), {a}, [&] {
        return [a, y, rows, cols](std::span<const double> g) {
            std::vector<double> d(g.size());
            for (std::size_t c = 0; c < cols; ++c) {
                double dot = 0.0;
                for (std::size_t r = 0; r < rows; ++r) dot += g[r * cols + c] * (*y)[r * cols + c];
                for (std::size_t r = 0; r < rows; ++r)
                    d[r * cols + c] = (*y)[r * cols + c] * (g[r * cols + c] - dot);
            }
            detail::accumulate(a.impl(), d);
        };
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    check_finite(a.data(), "matmul input");
    check_finite(b.data(), "matmul input");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    MapMat(out.data(), m, n).noalias() = CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
    return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [&] {
        return [a, b, m, k, n](std::span<const double> g) {
            CMapMat G(g.data(), m, n);
            if (a.requires_grad()) {
                std::vector<double> d(m * k);
                MapMat(d.data(), m, k).noalias() = G * CMapMat(b.data().data(), k, n).transpose();
                detail::accumulate(a.impl(), d);
            }
            if (b.requires_grad()) {
                std::vector<double> d(k * n);
                MapMat(d.data(), k, n).noalias() = CMapMat(a.data().data(), m, k).transpose() * G;
                detail::accumulate(b.impl(), d);
            }
        };
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a 2-D tensor");
    return permute(a, {1, 0});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) || b.numel() != w.dim(0))
        throw ShapeError("linear: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
                         shape_str(b.shape()));
    const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(0);
    std::vector<double> out(m * n);
    MapMat O(out.data(), m, n);
    O.noalias() = CMapMat(x.data().data(), m, k) * CMapMat(w.data().data(), n, k).transpose();
    O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), n);
    return detail::make_result("linear", {m, n}, std::move(out), {x, w, b}, [&] {
        return [x, w, b, m, k, n](std::span<const double> g) {
            CMapMat G(g.data(), m, n);
            if (x.requires_grad()) {
                std::vector<double> d(m * k);
                MapMat(d.data(), m, k).noalias() = G * CMapMat(w.data().data(), n, k);
                detail::accumulate(x.impl(), d);
            }
            if (w.requires_grad()) {
                std::vector<double> d(n * k);
                MapMat(d.data(), n, k).noalias() = G.transpose() * CMapMat(x.data().data(), m, k);
                detail::accumulate(w.impl(), d);
            }
            if (b.requires_grad()) {
                // Plain row order; Eigen's vectorized column sum rounds by buffer alignment.
                std::vector<double> d(n, 0.0);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
                detail::accumulate(b.impl(), d);
            }
        };
    });
}

Tensor channel_mix(const Tensor& x, const Tensor& w) {
    if (x.rank() < 2 || w.rank() != 2 || w.dim(0) != x.dim(1))
        throw ShapeError("channel_mix: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), co = w.dim(1), s = x.numel() / (n * c);
    Shape out_shape = x.shape();
    out_shape[1] = co;
    std::vector<double> out(n * co * s);
    CMapMat W(w.data().data(), c, co);
    for (std::size_t i = 0; i < n; ++i)
        MapMat(out.data() + i * co * s, co, s).noalias() =
            W.transpose() * CMapMat(x.data().data() + i * c * s, c, s);
    return detail::make_result("channel_mix", std::move(out_shape), std::move(out), {x, w}, [&] {
        return [x, w, n, c, co, s](std::span<const double> g) {
            CMapMat W(w.data().data(), c, co);
            std::vector<double> dx(x.requires_grad() ? x.numel() : 0);
            std::vector<double> dw(w.requires_grad() ? w.numel() : 0, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                CMapMat G(g.data() + i * co * s, co, s);
                if (!dx.empty()) MapMat(dx.data() + i * c * s, c, s).noalias() = W * G;
                if (!dw.empty())
                    MapMat(dw.data(), c, co).noalias() += CMapMat(x.data().data() + i * c * s, c, s) * G.transpose();
            }
            if (!dx.empty()) detail::accumulate(x.impl(), dx);
            if (!dw.empty()) detail::accumulate(w.impl(), dw);
        };
    });
}

Tensor channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() < 2 || b.numel() != x.dim(1)) throw ShapeError("channel_bias: channel mismatch");
    const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
    auto xv = x.data(), bv = b.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t p = 0; p < s; ++p) out[(i * c + j) * s + p] = xv[(i * c + j) * s + p] + bv[j];
    return detail::make_result("channel_bias", x.shape(), std::move(out), {x, b}, [&] {
        return [x, b, n, c, s](std::span<const double> g) {
            detail::accumulate(x.impl(), g);
            if (b.requires_grad()) {
                std::vector<double> d(c, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        for (std::size_t p = 0; p < s; ++p) d[j] += g[(i * c + j) * s + p];
                detail::accumulate(b.impl(), d);
            }
        };
    });
}

Tensor channel_weight(const Tensor& x, const Tensor& w) {
    if (x.rank() < 2 || w.numel() != x.dim(1)) throw ShapeError("channel_weight: channel mismatch");
    const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
    auto xv = x.data(), wv = w.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t p = 0; p < s; ++p) out[(i * c + j) * s + p] = xv[(i * c + j) * s + p] * wv[j];
    return detail::make_result("channel_weight", x.shape(), std::move(out), {x, w}, [&] {
        return [x, w, n, c, s](std::span<const double> g) {
            auto xv = x.data(), wv = w.data();
            std::vector<double> dx(x.requires_grad() ? xv.size() : 0);
            std::vector<double> dw(c, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    for (std::size_t p = 0; p < s; ++p) {
                        const std::size_t f = (i * c + j) * s + p;
                        if (!dx.empty()) dx[f] = g[f] * wv[j];
                        dw[j] += g[f] * xv[f];
                    }
            if (!dx.empty()) detail::accumulate(x.impl(), dx);
            detail::accumulate(w.impl(), dw);
        };
    });
}

Tensor channel_scale(const Tensor& x, const Tensor& gate) {
    if (x.rank() < 2 || gate.numel() != x.dim(0) * x.dim(1))
        throw ShapeError("channel_scale: gate " + shape_str(gate.shape()) + " vs x " + shape_str(x.shape()));
    const std::size_t nc = x.dim(0) * x.dim(1), s = x.numel() / nc;
    auto xv = x.data(), gv = gate.data();
    std::vector<double> out(xv.size());
    for (std::size_t q = 0; q < nc; ++q)
        for (std::size_t p = 0; p < s; ++p) out[q * s + p] = xv[q * s + p] * gv[q];
    return detail::make_result("channel_scale", x.shape(), std::move(out), {x, gate}, [&] {
        return [x, gate, nc, s](std::span<const double> g) {
            auto xv = x.data(), gv = gate.data();
            std::vector<double> dx(x.requires_grad() ? xv.size() : 0);
            std::vector<double> dg(nc, 0.0);
            for (std::size_t q = 0; q < nc; ++q)
                for (std::size_t p = 0; p < s; ++p) {
                    if (!dx.empty()) dx[q * s + p] = g[q * s + p] * gv[q];
                    dg[q] += g[q * s + p] * xv[q * s + p];
                }
            if (!dx.empty()) detail::accumulate(x.impl(), dx);
            detail::accumulate(gate.impl(), dg);
        };
    });
}

}  // namespace reettt
