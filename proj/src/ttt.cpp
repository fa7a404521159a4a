#include "reettt/ttt.hpp"

#include <Eigen/Core>

#include <cmath>

namespace reettt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_eta(double eta) {
    if (!(eta > 0)) throw std::invalid_argument("inner learning rate must be positive");
}

void check_fast_weights(std::span<const double> w) {
    for (double v : w)
        if (!std::isfinite(v)) throw NumericError("inner loop diverged: non-finite fast weights (reduce inner_lr)");
}

}  // namespace

std::string to_string(InnerModel m) { return m == InnerModel::linear ? "linear" : "mlp"; }
std::string to_string(InnerGradMode m) { return m == InnerGradMode::unrolled ? "unrolled" : "stop_gradient"; }

TTTLayerParams TTTLayerParams::init(std::size_t d, std::size_t steps, const TTTConfig& cfg, Rng& rng) {
    TTTLayerParams p;
    p.config = cfg;
    p.theta_k = add(Tensor::eye(d), uniform_init({d, d}, 0.1 * fan_in_bound(d), rng, false)).detach();
    p.theta_k.set_requires_grad();
    p.theta_v = TemporalAttentionParams::init(steps * d, cfg.reduction, rng);
    p.theta_q = MotionAttentionParams::init(d, rng);
    if (cfg.linear_views) {
        p.theta_v_linear = Tensor::eye(d, 0.5);
        p.theta_v_linear.set_requires_grad();
        p.theta_q_linear = Tensor::eye(d, 1.5);
        p.theta_q_linear.set_requires_grad();
    }
    p.w0 = Tensor::eye(d, cfg.w0_scale);
    p.w0.set_requires_grad();
    if (cfg.inner_model == InnerModel::mlp) {
        p.w0_second = Tensor::eye(d);
        p.w0_second.set_requires_grad();
    }
    p.validate();
    return p;
}

void TTTLayerParams::validate() const {
    check_eta(config.inner_lr);
    const std::size_t d = width();
    if (theta_k.shape() != Shape{d, d} || w0.shape() != Shape{d, d})
        throw ShapeError("TTT layer: view width mismatch");
    if (config.linear_views) {
        if (theta_v_linear.shape() != Shape{d, d} || theta_q_linear.shape() != Shape{d, d})
            throw ShapeError("TTT layer: linear view width mismatch");
    } else if (theta_q.channels() != d || theta_v.time_channels() % d != 0) {
        throw ShapeError("TTT layer: attention view width mismatch");
    }
    if (config.inner_model == InnerModel::mlp && w0_second.shape() != Shape{d, d})
        throw ShapeError("TTT layer: mlp second layer missing");
}

InnerState InnerState::from(const Tensor& w0) {
    if (w0.rank() != 2 || w0.dim(0) != w0.dim(1)) throw ShapeError("inner state: W0 must be square");
    return {w0.dim(0), std::vector<double>(w0.data().begin(), w0.data().end()), 0};
}

Views make_views(const Tensor& h, const TTTLayerParams& p) {
    if (h.rank() != 5 || h.dim(2) != p.width())
        throw ShapeError("make_views: expected [B,T," + std::to_string(p.width()) + ",H,W], got " + shape_str(h.shape()));
    const auto& s = h.shape();
    const Shape frames{s[0] * s[1], s[2], s[3], s[4]};
    auto mix = [&](const Tensor& w) { return reshape(channel_mix(reshape(h, frames), w), s); };
    Views v;
    v.key = mix(p.theta_k);
    if (p.config.linear_views) {
        v.value = mix(p.theta_v_linear);
        v.query = mix(p.theta_q_linear);
    } else {
        v.value = temporal_attention(h, p.theta_v);
        v.query = motion_attention(h, p.theta_q);
    }
    return v;
}

// ---------------------------------------------------------------------------
// Closed-form inner loop

double inner_loss(std::span<const double> k, std::span<const double> v, std::span<const double> w) {
    return inner_batch_loss(k, v, 1, w);
}

double inner_batch_loss(std::span<const double> k, std::span<const double> v, std::size_t n,
                        std::span<const double> w) {
    const std::size_t d = k.size() / n;
    const RowMat r = CMapMat(k.data(), n, d) * CMapMat(w.data(), d, d) - CMapMat(v.data(), n, d);
    return r.squaredNorm();
}

InnerState inner_step(InnerState state, std::span<const double> k, std::span<const double> v, double eta) {
    return inner_batch_step(std::move(state), k, v, 1, eta);
}

InnerState inner_batch_step(InnerState state, std::span<const double> k, std::span<const double> v, std::size_t n,
                            double eta) {
    check_eta(eta);
    const std::size_t d = state.d;
    if (k.size() != n * d || v.size() != n * d || state.w.size() != d * d)
        throw ShapeError("inner step: token width does not match fast weights");
    MapMat W(state.w.data(), d, d);
    CMapMat K(k.data(), n, d);
    const RowMat residual = K * W - CMapMat(v.data(), n, d);
    W.noalias() -= (2.0 * eta) * (K.transpose() * residual);
    check_fast_weights(state.w);
    state.tokens_consumed += n;
    return state;
}

// ---------------------------------------------------------------------------
// Token layout

Tensor to_tokens(const Tensor& h) {
    const auto& s = h.shape();
    if (s.size() != 5) throw ShapeError("to_tokens expects [B,T,C,H,W]");
    return reshape(permute(h, {0, 1, 3, 4, 2}), {s[0], s[1] * s[3] * s[4], s[2]});
}

Tensor from_tokens(const Tensor& tokens, const Shape& s) {
    return permute(reshape(tokens, {s[0], s[1], s[3], s[4], s[2]}), {0, 1, 4, 2, 3});
}

Tensor fold_time(const Tensor& h) {
    const auto& s = h.shape();
    if (s.size() != 5) throw ShapeError("fold_time expects [B,T,C,H,W]");
    return reshape(permute(h, {0, 3, 4, 1, 2}), {s[0], s[3] * s[4], s[1] * s[2]});
}

Tensor unfold_time(const Tensor& x, const TokenGrid& g) {
    return permute(reshape(x, {x.dim(0), g.height, g.width, g.steps, g.channels}), {0, 3, 4, 1, 2});
}

// ---------------------------------------------------------------------------
// Fused scan

Tensor ttt_scan(const Tensor& key, const Tensor& value, const Tensor& query, const Tensor& w0, double eta,
                std::size_t steps, InnerGradMode mode) {
    check_eta(eta);
    if (key.rank() != 3 || key.shape() != value.shape() || key.shape() != query.shape())
        throw ShapeError("ttt_scan: key/value/query must share shape [B,N,d]");
    const std::size_t b = key.dim(0), n = key.dim(1), d = key.dim(2);
    if (w0.shape() != Shape{d, d}) throw ShapeError("ttt_scan: W0 must be [d,d]");
    const std::size_t dd = d * d, per = n * d;

    // Fast-weight trajectory: W before every inner step plus the final W, per batch element.
    const bool keep = grad_enabled() && (key.requires_grad() || value.requires_grad() || query.requires_grad() ||
                                         w0.requires_grad());
    auto history = std::make_shared<std::vector<double>>();
    if (keep) history->resize(b * (n * steps + 1) * dd);

    std::vector<double> out(b * per);
    std::vector<double> w(dd);
    for (std::size_t e = 0; e < b; ++e) {
        std::copy(w0.data().begin(), w0.data().end(), w.begin());
        MapMat W(w.data(), d, d);
        double* hist = keep ? history->data() + e * (n * steps + 1) * dd : nullptr;
        for (std::size_t t = 0; t < n; ++t) {
            // Token rows as dynamic 1 x d maps: the fixed row-vector kernels round
            // differently depending on buffer alignment.
            CMapMat k(key.data().data() + e * per + t * d, 1, d);
            CMapMat v(value.data().data() + e * per + t * d, 1, d);
            for (std::size_t s = 0; s < steps; ++s) {
                if (hist) std::copy(w.begin(), w.end(), hist + (t * steps + s) * dd);
                const RowMat r = k * W - v;
                W.noalias() -= (2.0 * eta) * (k.transpose() * r);
            }
            check_fast_weights(w);
            MapMat(out.data() + e * per + t * d, 1, d).noalias() = CMapMat(query.data().data() + e * per + t * d, 1, d) * W;
        }
        if (hist) std::copy(w.begin(), w.end(), hist + n * steps * dd);
    }

    return detail::make_result("ttt_scan", key.shape(), std::move(out), {key, value, query, w0}, [&] {
        return [key, value, query, w0, history, eta, steps, mode, b, n, d, dd, per](std::span<const double> g) {
            std::vector<double> dk(b * per, 0.0), dv(b * per, 0.0), dq(b * per, 0.0), dw0(dd, 0.0);
            RowMat dW(d, d);
            RowMat a(1, d), r(1, d);
            for (std::size_t e = 0; e < b; ++e) {
                const double* hist = history->data() + e * (n * steps + 1) * dd;
                dW.setZero();
                for (std::size_t t = n; t-- > 0;) {
                    // W after token t is the W before token t+1's first step.
                    CMapMat w_after(hist + ((t + 1) * steps) * dd, d, d);
                    CMapMat gq(g.data() + e * per + t * d, 1, d);
                    CMapMat q(query.data().data() + e * per + t * d, 1, d);
                    MapMat(dq.data() + e * per + t * d, 1, d).noalias() = gq * w_after.transpose();
                    dW.noalias() += q.transpose() * gq;
                    if (mode == InnerGradMode::stop_gradient) continue;
                    CMapMat k(key.data().data() + e * per + t * d, 1, d);
                    CMapMat v(value.data().data() + e * per + t * d, 1, d);
                    MapMat dk_t(dk.data() + e * per + t * d, 1, d);
                    MapMat dv_t(dv.data() + e * per + t * d, 1, d);
                    for (std::size_t s = steps; s-- > 0;) {
                        CMapMat w_before(hist + (t * steps + s) * dd, d, d);
                        r.noalias() = k * w_before - v;
                        a.noalias() = k * dW;
                        dv_t.noalias() += (2.0 * eta) * a;
                        dk_t.noalias() -= (2.0 * eta) * (r * dW.transpose() + a * w_before.transpose());
                        dW.noalias() -= (2.0 * eta) * (k.transpose() * a);
                    }
                }
                MapMat(dw0.data(), d, d) += dW;
            }
            detail::accumulate(key.impl(), dk);
            detail::accumulate(value.impl(), dv);
            detail::accumulate(query.impl(), dq);
            detail::accumulate(w0.impl(), dw0);
        };
    });
}

// ---------------------------------------------------------------------------
// Composed reference scan

namespace {

struct FastWeights {
    Tensor first;
    Tensor second;  // mlp only
};

Tensor apply_inner(const Tensor& x, const FastWeights& w, InnerModel model) {
    if (model == InnerModel::linear) return matmul(x, w.first);
    return matmul(gelu(matmul(x, w.first)), w.second);
}

// One gradient step on |f(k) - v|^2 with the gradient written out in primitive
// ops, so the outer loop can differentiate through it.
FastWeights inner_update(const Tensor& k, const Tensor& v, const FastWeights& w, InnerModel model, double eta) {
    if (model == InnerModel::linear) {
        Tensor r = sub(matmul(k, w.first), v);
        return {sub(w.first, scale(matmul(transpose(k), r), 2.0 * eta)), {}};
    }
    Tensor z = matmul(k, w.first);
    Tensor a = gelu(z);
    Tensor dy = scale(sub(matmul(a, w.second), v), 2.0);
    Tensor d_second = matmul(transpose(a), dy);
    Tensor dz = mul(matmul(dy, transpose(w.second)), gelu_grad(z));
    Tensor d_first = matmul(transpose(k), dz);
    return {sub(w.first, scale(d_first, eta)), sub(w.second, scale(d_second, eta))};
}

}  // namespace

Tensor ttt_scan_composed(const Tensor& key, const Tensor& value, const Tensor& query, const TTTLayerParams& p) {
    const auto& cfg = p.config;
    check_eta(cfg.inner_lr);
    if (key.rank() != 3 || key.shape() != value.shape() || key.shape() != query.shape())
        throw ShapeError("ttt_scan_composed: key/value/query must share shape [B,N,d]");
    const std::size_t b = key.dim(0), n = key.dim(1), d = key.dim(2);
    std::vector<Tensor> rows;
    rows.reserve(b * n);
    for (std::size_t e = 0; e < b; ++e) {
        Tensor ke = reshape(slice(key, 0, e, 1), {n, d});
        Tensor ve = reshape(slice(value, 0, e, 1), {n, d});
        Tensor qe = reshape(slice(query, 0, e, 1), {n, d});
        FastWeights w{p.w0, p.w0_second};
        for (std::size_t t = 0; t < n; ++t) {
            Tensor k = slice(ke, 0, t, 1), v = slice(ve, 0, t, 1);
            for (std::size_t s = 0; s < cfg.steps_per_token; ++s) {
                if (cfg.grad_mode == InnerGradMode::unrolled) {
                    w = inner_update(k, v, w, cfg.inner_model, cfg.inner_lr);
                } else {
                    FastWeights next;
                    {
                        NoGradGuard ng;
                        next = inner_update(k.detach(), v.detach(), {w.first.detach(), w.second.defined() ? w.second.detach() : Tensor{}},
                                            cfg.inner_model, cfg.inner_lr);
                    }
                    // W_t = W0 + (constant accumulated change)
                    w.first = add(p.w0, sub(next.first, p.w0.detach()).detach());
                    if (next.second.defined()) w.second = add(p.w0_second, sub(next.second, p.w0_second.detach()).detach());
                }
                check_fast_weights(w.first.data());
                if (w.second.defined()) check_fast_weights(w.second.data());
            }
            rows.push_back(apply_inner(slice(qe, 0, t, 1), w, cfg.inner_model));
        }
    }
    return reshape(concat(rows, 0), key.shape());
}

Tensor forward_sequence(const Tensor& h, const TTTLayerParams& p) {
    p.validate();
    Views views = make_views(h, p);
    Tensor k = to_tokens(views.key), v = to_tokens(views.value), q = to_tokens(views.query);
    Tensor o = p.config.inner_model == InnerModel::linear
                   ? ttt_scan(k, v, q, p.w0, p.config.inner_lr, p.config.steps_per_token, p.config.grad_mode)
                   : ttt_scan_composed(k, v, q, p);
    return from_tokens(o, h.shape());
}

// ---------------------------------------------------------------------------
// Residual block

TTTBlockParams TTTBlockParams::init(const TokenGrid& grid, std::size_t ff_hidden, const TTTConfig& cfg, Rng& rng) {
    const std::size_t f = grid.features();
    auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0).set_requires_grad(); };
    auto zeros = [](std::size_t n) { return Tensor({n}, true); };
    TTTBlockParams p;
    p.norm1_gamma = ones(f);
    p.norm1_beta = zeros(f);
    p.ttt = TTTLayerParams::init(grid.channels, grid.steps, cfg, rng);
    p.norm2_gamma = ones(f);
    p.norm2_beta = zeros(f);
    p.ff.w1 = uniform_init({ff_hidden, f}, fan_in_bound(f), rng);
    p.ff.b1 = zeros(ff_hidden);
    p.ff.w2 = uniform_init({f, ff_hidden}, fan_in_bound(ff_hidden), rng);
    p.ff.b2 = zeros(f);
    return p;
}

Tensor ttt_block(const Tensor& x, const TokenGrid& grid, const TTTBlockParams& p) {
    if (x.rank() != 3 || x.dim(1) != grid.positions() || x.dim(2) != grid.features())
        throw ShapeError("ttt_block: expected [B," + std::to_string(grid.positions()) + "," +
                         std::to_string(grid.features()) + "], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), f = grid.features();
    Tensor normed = layer_norm(x, p.norm1_gamma, p.norm1_beta);
    Tensor adapted = forward_sequence(unfold_time(normed, grid), p.ttt);
    Tensor mid = add(x, fold_time(adapted));
    Tensor rows = reshape(layer_norm(mid, p.norm2_gamma, p.norm2_beta), {b * grid.positions(), f});
    Tensor ff = linear(gelu(linear(rows, p.ff.w1, p.ff.b1)), p.ff.w2, p.ff.b2);
    return add(mid, reshape(ff, x.shape()));
}

}  // namespace reettt
