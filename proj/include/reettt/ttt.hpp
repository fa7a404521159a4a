#pragma once

#include "reettt/attention.hpp"
#include "reettt/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace reettt {

enum class InnerModel { linear, mlp };
/// How the outer loop sees the inner updates: differentiate through the
/// unrolled updates, or treat the accumulated fast-weight change as constant.
enum class InnerGradMode { unrolled, stop_gradient };

struct TTTConfig {
    double inner_lr = 0.02;
    std::size_t steps_per_token = 1;
    InnerModel inner_model = InnerModel::linear;
    InnerGradMode grad_mode = InnerGradMode::unrolled;
    /// Replace the attention views by plain linear projections.
    bool linear_views = false;
    std::size_t reduction = 4;
    double w0_scale = 0.9;
};

/// Slow (outer-loop) parameters of one TTT layer over d-dimensional tokens.
struct TTTLayerParams {
    Tensor theta_k;  // [d, d], training view
    TemporalAttentionParams theta_v;
    MotionAttentionParams theta_q;
    Tensor theta_v_linear;  // [d, d], only with linear_views
    Tensor theta_q_linear;  // [d, d], only with linear_views
    Tensor w0;              // [d, d], inner model initialization
    Tensor w0_second;       // [d, d], second layer of the mlp inner model
    TTTConfig config;

    static TTTLayerParams init(std::size_t d, std::size_t steps, const TTTConfig& cfg, Rng& rng);
    std::size_t width() const { return theta_k.dim(0); }
    void validate() const;
};

/// Fast weights of one sequence. Created from W0 at sequence start and
/// discarded at sequence end.
struct InnerState {
    std::size_t d = 0;
    std::vector<double> w;  // d x d, row-major
    std::size_t tokens_consumed = 0;

    static InnerState from(const Tensor& w0);
};

/// h^K (linear), h^V (temporal attention), h^Q (motion attention); all shaped like h.
struct Views {
    Tensor key;
    Tensor value;
    Tensor query;
};

Views make_views(const Tensor& h, const TTTLayerParams& p);

/// |k W - v|^2 for the linear inner model.
double inner_loss(std::span<const double> k, std::span<const double> v, std::span<const double> w);
/// W <- W - eta * 2 k^T (k W - v). Throws NumericError when W leaves the finite range.
InnerState inner_step(InnerState state, std::span<const double> k, std::span<const double> v, double eta);
/// Full-batch variant over n tokens (rows of k and v): W <- W - eta * 2 K^T (K W - V).
InnerState inner_batch_step(InnerState state, std::span<const double> k, std::span<const double> v, std::size_t n,
                            double eta);
double inner_batch_loss(std::span<const double> k, std::span<const double> v, std::size_t n,
                        std::span<const double> w);

/// [B,T,C,H,W] -> [B, T*H*W, C], spatial-major: all positions of frame t
/// (row-major) before frame t+1.
Tensor to_tokens(const Tensor& h);
Tensor from_tokens(const Tensor& tokens, const Shape& shape);

/// Online scan over token streams key/value/query [B,N,d]: per token,
/// `steps` inner updates on (k, v), then emit f_in(q; W). Linear inner model,
/// fused into one recorded node with an exact reverse sweep.
Tensor ttt_scan(const Tensor& key, const Tensor& value, const Tensor& query, const Tensor& w0, double eta,
                std::size_t steps, InnerGradMode mode);

/// The same scan assembled from primitive ops, one token at a time. Supports
/// both inner models; used for the mlp variant and as the autodiff reference.
Tensor ttt_scan_composed(const Tensor& key, const Tensor& value, const Tensor& query, const TTTLayerParams& p);

/// Builds views, scans them, returns o with the layout of h.
Tensor forward_sequence(const Tensor& h, const TTTLayerParams& p);

struct TokenGrid {
    std::size_t steps = 0, channels = 0, height = 0, width = 0;
    std::size_t features() const { return steps * channels; }
    std::size_t positions() const { return height * width; }
};

/// [B,T,C,H,W] <-> [B, H*W, T*C] (time folded into the feature axis).
Tensor fold_time(const Tensor& h);
Tensor unfold_time(const Tensor& x, const TokenGrid& grid);

struct FeedForwardParams {
    Tensor w1, b1;  // [hidden, F], [hidden]
    Tensor w2, b2;  // [F, hidden], [F]
};

struct TTTBlockParams {
    Tensor norm1_gamma, norm1_beta;
    TTTLayerParams ttt;
    Tensor norm2_gamma, norm2_beta;
    FeedForwardParams ff;

    static TTTBlockParams init(const TokenGrid& grid, std::size_t ff_hidden, const TTTConfig& cfg, Rng& rng);
};

/// x[B, H*W, T*C]: x + TTT(LN(x)), then + FF(LN(.)) with a gelu feedforward.
Tensor ttt_block(const Tensor& x, const TokenGrid& grid, const TTTBlockParams& p);

std::string to_string(InnerModel m);
std::string to_string(InnerGradMode m);

}  // namespace reettt
