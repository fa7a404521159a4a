#pragma once

#include "reettt/random.hpp"
#include "reettt/tensor.hpp"

namespace reettt {

/// Squeeze-and-excitation over the merged time-channel axis (TC = T*C).
struct TemporalAttentionParams {
    Tensor reduce_w;  // [TC/r, TC]
    Tensor reduce_b;  // [TC/r]
    Tensor expand_w;  // [TC, TC/r]
    Tensor expand_b;  // [TC]
    std::size_t reduction = 4;

    static TemporalAttentionParams init(std::size_t time_channels, std::size_t reduction, Rng& rng);
    /// All weights zero: every gate is sigmoid(0) = 0.5.
    static TemporalAttentionParams neutral(std::size_t time_channels, std::size_t reduction);
    std::size_t time_channels() const { return expand_b.numel(); }
};

/// Difference-driven sigmoid gate with residual form h * (1 + m).
struct MotionAttentionParams {
    Tensor kernel;  // [C, C, 3, 3] over difference frames
    Tensor bias;    // [C]

    static MotionAttentionParams init(std::size_t channels, Rng& rng);
    static MotionAttentionParams neutral(std::size_t channels);
    std::size_t channels() const { return bias.numel(); }
};

/// h[B,T,C,H,W] scaled per (t, c) by sigmoid(expand(relu(reduce(GAP(h))))).
Tensor temporal_attention(const Tensor& h, const TemporalAttentionParams& p);

/// h[B,T,C,H,W] -> h * (1 + sigmoid(conv3x3(h_t - h_{t-1}) + bias)), with h_{-1} := h_0.
Tensor motion_attention(const Tensor& h, const MotionAttentionParams& p);

/// Unweighted mean of the motion and temporal branches.
Tensor skip_branch(const Tensor& h_low, const MotionAttentionParams& pm, const TemporalAttentionParams& pt);

// Initialization helpers shared by the model.
Tensor uniform_init(Shape shape, double bound, Rng& rng, bool requires_grad = true);
/// He-uniform bound for a layer with `fan_in` inputs.
double fan_in_bound(std::size_t fan_in);

}  // namespace reettt
