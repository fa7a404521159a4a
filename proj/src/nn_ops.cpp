#include "reettt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>

namespace reettt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct ConvGeometry {
    std::size_t channels, in_h, in_w, kh, kw, stride, pad, out_h, out_w;
    std::size_t rows() const { return channels * kh * kw; }
    std::size_t cols() const { return out_h * out_w; }
};

// Output columns ox whose input column ox*stride+kx-pad lies inside [0, in_w).
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
    std::size_t lo = 0;
    if (kx < g.pad) lo = (g.pad - kx + g.stride - 1) / g.stride;
    std::size_t hi = 0;  // exclusive
    if (g.in_w + g.pad > kx) hi = (g.in_w + g.pad - kx - 1) / g.stride + 1;
    hi = std::min(hi, g.out_w);
    return {std::min(lo, hi), hi};
}

// cols[(c,ky,kx), (oy,ox)] = img[c, oy*stride+ky-pad, ox*stride+kx-pad]
void im2col(const double* img, const ConvGeometry& g, double* cols) {
    const std::size_t ncol = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncol;
                const auto [lo, hi] = valid_columns(g, kx);
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    double* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
                        std::fill_n(dst, g.out_w, 0.0);
                        continue;
                    }
                    const double* src = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + kx - g.pad;
                    std::fill(dst, dst + lo, 0.0);
                    for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
                    std::fill(dst + hi, dst + g.out_w, 0.0);
                }
            }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(const double* cols, const ConvGeometry& g, double* img) {
    const std::size_t ncol = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncol;
                const auto [lo, hi] = valid_columns(g, kx);
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
                    double* dst = img + (c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w + kx - g.pad;
                    const double* src = row + oy * g.out_w;
                    for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
                }
            }
}

void check_kernel(const Tensor& k, const char* op) {
    if (k.rank() != 4) throw ShapeError(std::string(op) + ": kernel must be [O,C,KH,KW]");
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
    check_kernel(k, "conv2d");
    if (x.rank() != 4 || x.dim(1) != k.dim(1))
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " kernel " + shape_str(k.shape()));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t n = x.dim(0), o = k.dim(0);
    ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), k.dim(2), k.dim(3), stride, pad, 0, 0};
    if (g.in_h + 2 * pad < g.kh || g.in_w + 2 * pad < g.kw)
        throw ShapeError("conv2d: kernel larger than padded input");
    g.out_h = (g.in_h + 2 * pad - g.kh) / stride + 1;
    g.out_w = (g.in_w + 2 * pad - g.kw) / stride + 1;
    check_finite(x.data(), "conv2d input");

    const std::size_t in_sz = g.channels * g.in_h * g.in_w, out_sz = o * g.cols();
    std::vector<double> out(n * out_sz);
    std::vector<double> cols(g.rows() * g.cols());
    CMapMat K(k.data().data(), o, g.rows());
    for (std::size_t i = 0; i < n; ++i) {
        im2col(x.data().data() + i * in_sz, g, cols.data());
        MapMat(out.data() + i * out_sz, o, g.cols()).noalias() = K * CMapMat(cols.data(), g.rows(), g.cols());
    }
    return detail::make_result("conv2d", {n, o, g.out_h, g.out_w}, std::move(out), {x, k}, [&] {
        return [x, k, g, n, o, in_sz, out_sz](std::span<const double> grad) {
            CMapMat K(k.data().data(), o, g.rows());
            std::vector<double> cols(g.rows() * g.cols());
            std::vector<double> dx(x.requires_grad() ? x.numel() : 0, 0.0);
            std::vector<double> dk(k.requires_grad() ? k.numel() : 0, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                CMapMat G(grad.data() + i * out_sz, o, g.cols());
                if (!dk.empty()) {
                    im2col(x.data().data() + i * in_sz, g, cols.data());
                    MapMat(dk.data(), o, g.rows()).noalias() +=
                        G * CMapMat(cols.data(), g.rows(), g.cols()).transpose();
                }
                if (!dx.empty()) {
                    MapMat(cols.data(), g.rows(), g.cols()).noalias() = K.transpose() * G;
                    col2im(cols.data(), g, dx.data() + i * in_sz);
                }
            }
            if (!dx.empty()) detail::accumulate(x.impl(), dx);
            if (!dk.empty()) detail::accumulate(k.impl(), dk);
        };
    });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad,
                        std::size_t output_padding) {
    check_kernel(k, "conv_transpose2d");
    if (x.rank() != 4 || x.dim(1) != k.dim(0))
        throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " kernel " + shape_str(k.shape()));
    if (stride == 0 || output_padding >= stride)
        throw ShapeError("conv_transpose2d: need stride > output_padding");
    const std::size_t n = x.dim(0), o = k.dim(0), h = x.dim(2), w = x.dim(3);
    const std::size_t kh = k.dim(2), kw = k.dim(3);
    if ((h - 1) * stride + kh + output_padding < 2 * pad + 1 || (w - 1) * stride + kw + output_padding < 2 * pad + 1)
        throw ShapeError("conv_transpose2d: padding leaves an empty output");
    // Geometry of the conv2d this operator is the adjoint of.
    ConvGeometry g{k.dim(1), (h - 1) * stride + kh + output_padding - 2 * pad,
                   (w - 1) * stride + kw + output_padding - 2 * pad, kh, kw, stride, pad, h, w};
    check_finite(x.data(), "conv_transpose2d input");

    const std::size_t in_sz = o * h * w, out_sz = g.channels * g.in_h * g.in_w;
    std::vector<double> out(n * out_sz, 0.0);
    std::vector<double> cols(g.rows() * g.cols());
    CMapMat K(k.data().data(), o, g.rows());
    for (std::size_t i = 0; i < n; ++i) {
        MapMat(cols.data(), g.rows(), g.cols()).noalias() = K.transpose() * CMapMat(x.data().data() + i * in_sz, o, h * w);
        col2im(cols.data(), g, out.data() + i * out_sz);
    }
    return detail::make_result("conv_transpose2d", {n, g.channels, g.in_h, g.in_w}, std::move(out), {x, k}, [&] {
        return [x, k, g, n, o, in_sz, out_sz](std::span<const double> grad) {
            CMapMat K(k.data().data(), o, g.rows());
            std::vector<double> cols(g.rows() * g.cols());
            std::vector<double> dx(x.requires_grad() ? x.numel() : 0, 0.0);
            std::vector<double> dk(k.requires_grad() ? k.numel() : 0, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                im2col(grad.data() + i * out_sz, g, cols.data());
                CMapMat C(cols.data(), g.rows(), g.cols());
                if (!dx.empty()) MapMat(dx.data() + i * in_sz, o, g.cols()).noalias() = K * C;
                if (!dk.empty())
                    MapMat(dk.data(), o, g.rows()).noalias() +=
                        CMapMat(x.data().data() + i * in_sz, o, g.cols()) * C.transpose();
            }
            if (!dx.empty()) detail::accumulate(x.impl(), dx);
            if (!dk.empty()) detail::accumulate(k.impl(), dk);
        };
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (!(eps > 0)) throw ShapeError("layer_norm: eps must be positive");
    if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("layer_norm: zero-length normalization axis");
    const std::size_t f = x.shape().back(), rows = x.numel() / f;
    if (gamma.numel() != f || beta.numel() != f) throw ShapeError("layer_norm: affine size mismatch");
    auto xv = x.data(), gv = gamma.data(), bv = beta.data();
    std::vector<double> out(xv.size());
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * f;
        double mu = 0.0;
        for (std::size_t j = 0; j < f; ++j) mu += row[j];
        mu /= static_cast<double>(f);
        double var = 0.0;
        for (std::size_t j = 0; j < f; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(f);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < f; ++j) {
            const double h = (row[j] - mu) * rs;
            (*xhat)[r * f + j] = h;
            out[r * f + j] = h * gv[j] + bv[j];
        }
    }
    return detail::make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta}, [&] {
        return [x, gamma, beta, xhat, rstd, f, rows](std::span<const double> g) {
            auto gv = gamma.data();
            std::vector<double> dx(x.requires_grad() ? x.numel() : 0);
            std::vector<double> dgamma(f, 0.0), dbeta(f, 0.0);
            for (std::size_t r = 0; r < rows; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < f; ++j) {
                    const double gj = g[r * f + j], h = (*xhat)[r * f + j];
                    dgamma[j] += gj * h;
                    dbeta[j] += gj;
                    const double dh = gj * gv[j];
                    m1 += dh;
                    m2 += dh * h;
                }
                if (dx.empty()) continue;
                m1 /= static_cast<double>(f);
                m2 /= static_cast<double>(f);
                for (std::size_t j = 0; j < f; ++j) {
                    const double dh = g[r * f + j] * gv[j];
                    dx[r * f + j] = (*rstd)[r] * (dh - m1 - (*xhat)[r * f + j] * m2);
                }
            }
            if (!dx.empty()) detail::accumulate(x.impl(), dx);
            detail::accumulate(gamma.impl(), dgamma);
            detail::accumulate(beta.impl(), dbeta);
        };
    });
}

Tensor global_avg_pool_spatial(const Tensor& x) {
    if (x.rank() < 3) throw ShapeError("global_avg_pool_spatial: need at least [N,H,W]");
    const std::size_t hw = x.shape()[x.rank() - 2] * x.shape()[x.rank() - 1];
    if (hw == 0) throw ShapeError("global_avg_pool_spatial: empty spatial extent");
    Shape out_shape(x.shape().begin(), x.shape().end() - 2);
    const std::size_t m = x.numel() / hw;
    auto xv = x.data();
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += xv[i * hw + p];
        out[i] = s / static_cast<double>(hw);
    }
    return detail::make_result("global_avg_pool_spatial", std::move(out_shape), std::move(out), {x}, [&] {
        return [x, m, hw](std::span<const double> g) {
            std::vector<double> d(x.numel());
            for (std::size_t i = 0; i < m; ++i)
                std::fill_n(d.begin() + i * hw, hw, g[i] / static_cast<double>(hw));
            detail::accumulate(x.impl(), d);
        };
    });
}

Tensor temporal_diff(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("temporal_diff: need [B,T,...]");
    const std::size_t b = x.dim(0), t = x.dim(1), r = x.numel() / std::max<std::size_t>(b * t, 1);
    auto xv = x.data();
    std::vector<double> out(xv.size(), 0.0);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t s = 1; s < t; ++s)
            for (std::size_t p = 0; p < r; ++p)
                out[(i * t + s) * r + p] = xv[(i * t + s) * r + p] - xv[(i * t + s - 1) * r + p];
    return detail::make_result("temporal_diff", x.shape(), std::move(out), {x}, [&] {
        return [x, b, t, r](std::span<const double> g) {
            std::vector<double> d(x.numel(), 0.0);
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t s = 1; s < t; ++s)
                    for (std::size_t p = 0; p < r; ++p) {
                        d[(i * t + s) * r + p] += g[(i * t + s) * r + p];
                        d[(i * t + s - 1) * r + p] -= g[(i * t + s) * r + p];
                    }
            detail::accumulate(x.impl(), d);
        };
    });
}

}  // namespace reettt
