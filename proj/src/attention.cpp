#include "reettt/attention.hpp"

#include <cmath>

namespace reettt {

Tensor uniform_init(Shape shape, double bound, Rng& rng, bool requires_grad) {
    std::vector<double> d(numel_of(shape));
    for (auto& v : d) v = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

double fan_in_bound(std::size_t fan_in) { return std::sqrt(1.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1))); }

namespace {
void check_reduction(std::size_t tc, std::size_t r) {
    if (r == 0 || tc % r != 0)
        throw ShapeError("temporal attention: reduction ratio " + std::to_string(r) + " does not divide TC=" +
                         std::to_string(tc));
}

Tensor zeros_param(Shape s) { return Tensor(std::move(s), true); }
}  // namespace

TemporalAttentionParams TemporalAttentionParams::init(std::size_t tc, std::size_t r, Rng& rng) {
    check_reduction(tc, r);
    const std::size_t hidden = tc / r;
    return {uniform_init({hidden, tc}, fan_in_bound(tc), rng), zeros_param({hidden}),
            uniform_init({tc, hidden}, fan_in_bound(hidden), rng), zeros_param({tc}), r};
}

TemporalAttentionParams TemporalAttentionParams::neutral(std::size_t tc, std::size_t r) {
    check_reduction(tc, r);
    const std::size_t hidden = tc / r;
    return {zeros_param({hidden, tc}), zeros_param({hidden}), zeros_param({tc, hidden}), zeros_param({tc}), r};
}

MotionAttentionParams MotionAttentionParams::init(std::size_t c, Rng& rng) {
    return {uniform_init({c, c, 3, 3}, fan_in_bound(9 * c), rng), zeros_param({c})};
}

MotionAttentionParams MotionAttentionParams::neutral(std::size_t c) { return {zeros_param({c, c, 3, 3}), zeros_param({c})}; }

Tensor temporal_attention(const Tensor& h, const TemporalAttentionParams& p) {
    if (h.rank() != 5) throw ShapeError("temporal_attention expects [B,T,C,H,W], got " + shape_str(h.shape()));
    const auto& s = h.shape();
    const std::size_t tc = s[1] * s[2];
    check_reduction(tc, p.reduction);
    if (tc != p.time_channels())
        throw ShapeError("temporal_attention: TC=" + std::to_string(tc) + " but params expect " +
                         std::to_string(p.time_channels()));
    Tensor merged = reshape(h, {s[0], tc, s[3], s[4]});
    Tensor descriptor = global_avg_pool_spatial(merged);  // [B, TC]
    Tensor gate = sigmoid(linear(relu(linear(descriptor, p.reduce_w, p.reduce_b)), p.expand_w, p.expand_b));
    return reshape(channel_scale(merged, gate), s);
}

Tensor motion_attention(const Tensor& h, const MotionAttentionParams& p) {
    if (h.rank() != 5) throw ShapeError("motion_attention expects [B,T,C,H,W], got " + shape_str(h.shape()));
    const auto& s = h.shape();
    if (s[2] != p.channels())
        throw ShapeError("motion_attention: C=" + std::to_string(s[2]) + " but params expect " +
                         std::to_string(p.channels()));
    Tensor diffs = reshape(temporal_diff(h), {s[0] * s[1], s[2], s[3], s[4]});
    Tensor gate = sigmoid(channel_bias(conv2d(diffs, p.kernel, 1, 1), p.bias));
    return add(h, mul(h, reshape(gate, s)));
}

Tensor skip_branch(const Tensor& h_low, const MotionAttentionParams& pm, const TemporalAttentionParams& pt) {
    return scale(add(motion_attention(h_low, pm), temporal_attention(h_low, pt)), 0.5);
}

}  // namespace reettt
