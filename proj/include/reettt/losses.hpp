#pragma once

#include "reettt/tensor.hpp"

#include <string>

namespace reettt {

/// Which spectral bins the frequency loss keeps.
enum class MaskType { combined, radial, magnitude, all_pass };

MaskType mask_from_string(const std::string& s);
std::string to_string(MaskType m);

struct LossConfig {
    double alpha = 1.0;    // focal exponent
    double lambda = 0.1;   // frequency-loss weight
    double weight_base = 16.0;
    double weight_cap = 30.0;
    MaskType mask = MaskType::combined;
    /// Radial cutoff as a fraction of Nyquist.
    double radial_cutoff = 0.125;

    void validate() const;
};

/// min(10^(dbz / base), cap). Throws for dbz outside [0, 70].
double mae_weight(double dbz, const LossConfig& cfg);

/// pred, target: normalized [B,T,1,H,W] (or [B,T,H,W]). Sum over lead times of
/// the batch-and-pixel mean of w(target dBZ) * |pred - target|.
Tensor weighted_mae(const Tensor& pred, const Tensor& target, const LossConfig& cfg);

/// Constant per-bin coefficient mask * |dF|^alpha * |F{y}| / max|F{y}| / (HW),
/// laid out like dft2 output ([...,2,H,W], same value on both planes).
Tensor hffl_coefficients(const Tensor& pred, const Tensor& target, const LossConfig& cfg);
/// Sum over frames of sum(coef * |F{pred} - F{target}|^2); gradient flows
/// through the spectral difference only.
Tensor hffl_with_coefficients(const Tensor& pred, const Tensor& target, const Tensor& coef);
/// Frequency loss summed over all leading frames of [..., H, W].
Tensor hffl(const Tensor& pred, const Tensor& target, const LossConfig& cfg);

struct LossTerms {
    Tensor total;
    Tensor mae;
    Tensor frequency;  // already divided by batch size; undefined when lambda = 0
};

/// weighted_mae + lambda * hffl / B.
LossTerms composite_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg);

}  // namespace reettt
