#include "reettt/losses.hpp"

#include "reettt/data.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reettt {

MaskType mask_from_string(const std::string& s) {
    if (s == "combined") return MaskType::combined;
    if (s == "radial") return MaskType::radial;
    if (s == "magnitude") return MaskType::magnitude;
    if (s == "all_pass") return MaskType::all_pass;
    throw std::invalid_argument("unknown mask type '" + s + "' (combined, radial, magnitude, all_pass)");
}

std::string to_string(MaskType m) {
    switch (m) {
        case MaskType::combined: return "combined";
        case MaskType::radial: return "radial";
        case MaskType::magnitude: return "magnitude";
        case MaskType::all_pass: return "all_pass";
    }
    return "?";
}

void LossConfig::validate() const {
    if (!(alpha >= 0)) throw std::invalid_argument("loss config: alpha must be >= 0");
    if (!(lambda >= 0)) throw std::invalid_argument("loss config: lambda must be >= 0");
    if (!(weight_base > 0)) throw std::invalid_argument("loss config: weight_base must be positive");
    if (!(weight_cap >= 1)) throw std::invalid_argument("loss config: weight_cap must be >= 1");
    if (!(radial_cutoff >= 0)) throw std::invalid_argument("loss config: radial_cutoff must be >= 0");
}

double mae_weight(double dbz, const LossConfig& cfg) {
    if (!(dbz >= 0.0 && dbz <= kMaxDbz)) throw std::invalid_argument("mae_weight: dBZ out of range");
    return std::min(std::pow(10.0, dbz / cfg.weight_base), cfg.weight_cap);
}

namespace {

void check_pair(const Tensor& pred, const Tensor& target, const char* op) {
    if (pred.shape() != target.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    if (pred.rank() < 2) throw ShapeError(std::string(op) + ": expected [..., H, W]");
}

// Spectra of real fields come in conjugate pairs of equal magnitude, so the
// median often coincides with a bin; the margin keeps the comparison
// independent of last-bit rounding in the transform.
constexpr double kTieMargin = 1e-9;

// Bin k of an n-point transform in cycles per sample, negative above n/2.
double signed_frequency(std::size_t k, std::size_t n) {
    const double kd = static_cast<double>(k), nd = static_cast<double>(n);
    return (k <= n / 2 ? kd : kd - nd) / nd;
}

// Normalized values may carry rounding just past the range ends.
double to_dbz(double normalized) { return std::clamp(normalized * kMaxDbz, 0.0, kMaxDbz); }

}  // namespace

Tensor weighted_mae(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    check_pair(pred, target, "weighted_mae");
    if (pred.rank() < 3) throw ShapeError("weighted_mae: expected [B,T,...]");
    const std::size_t b = pred.dim(0), t = pred.dim(1);
    const std::size_t pixels = pred.numel() / (b * t);
    std::vector<double> w(target.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = mae_weight(to_dbz(target.at(i)), cfg);
    Tensor weights(target.shape(), std::move(w));
    Tensor err = mul(weights, abs(sub(pred, target.detach())));
    return scale(sum(err), 1.0 / static_cast<double>(b * pixels));
}

Tensor hffl_coefficients(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    check_pair(pred, target, "hffl");
    NoGradGuard ng;
    const std::size_t h = pred.dim(pred.rank() - 2), w = pred.dim(pred.rank() - 1), hw = h * w;
    const std::size_t frames = pred.numel() / hw;
    Tensor fp = dft2(pred.detach()), ft = dft2(target.detach());
    std::vector<double> coef(2 * pred.numel(), 0.0);
    std::vector<double> mag(hw), sorted(hw);
    for (std::size_t f = 0; f < frames; ++f) {
        const double* tre = ft.data().data() + f * 2 * hw;
        const double* tim = tre + hw;
        const double* pre = fp.data().data() + f * 2 * hw;
        const double* pim = pre + hw;
        double peak = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
            mag[i] = std::hypot(tre[i], tim[i]);
            peak = std::max(peak, mag[i]);
        }
        if (peak == 0.0) continue;  // degenerate target spectrum: loss 0
        double median = 0.0;
        if (cfg.mask == MaskType::combined || cfg.mask == MaskType::magnitude) {
            sorted = mag;
            auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(hw / 2);
            std::nth_element(sorted.begin(), mid, sorted.end());
            median = *mid;
            if (hw % 2 == 0) median = 0.5 * (median + *std::max_element(sorted.begin(), mid));
        }
        double* c_re = coef.data() + f * 2 * hw;
        double* c_im = c_re + hw;
        for (std::size_t u = 0; u < h; ++u) {
            // Signed frequency in cycles per sample, as after an fftshift.
            const double fu = signed_frequency(u, h);
            for (std::size_t v = 0; v < w; ++v) {
                const std::size_t i = u * w + v;
                const double fv = signed_frequency(v, w);
                const bool high = std::sqrt(fu * fu + fv * fv) / 0.5 > cfg.radial_cutoff;
                const bool strong = mag[i] > median + kTieMargin * peak;
                bool keep = true;
                switch (cfg.mask) {
                    case MaskType::combined: keep = high || strong; break;
                    case MaskType::radial: keep = high; break;
                    case MaskType::magnitude: keep = strong; break;
                    case MaskType::all_pass: keep = true; break;
                }
                if (!keep) continue;
                const double diff = std::hypot(pre[i] - tre[i], pim[i] - tim[i]);
                const double focal = cfg.alpha == 0.0 ? 1.0 : std::pow(diff, cfg.alpha);
                c_re[i] = c_im[i] = focal * mag[i] / peak / static_cast<double>(hw);
            }
        }
    }
    Shape s = pred.shape();
    s.insert(s.end() - 2, 2);
    return Tensor(std::move(s), std::move(coef));
}

Tensor hffl_with_coefficients(const Tensor& pred, const Tensor& target, const Tensor& coef) {
    check_pair(pred, target, "hffl");
    Tensor ft;
    {
        NoGradGuard ng;
        ft = dft2(target.detach());
    }
    Tensor diff = sub(dft2(pred), ft);
    if (coef.shape() != diff.shape()) throw ShapeError("hffl: coefficient shape mismatch");
    return sum(mul(coef, square(diff)));
}

Tensor hffl(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    return hffl_with_coefficients(pred, target, hffl_coefficients(pred, target, cfg));
}

LossTerms composite_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    cfg.validate();
    LossTerms terms;
    terms.mae = weighted_mae(pred, target, cfg);
    if (cfg.lambda == 0.0) {
        terms.total = terms.mae;
        return terms;
    }
    terms.frequency = scale(hffl(pred, target, cfg), 1.0 / static_cast<double>(pred.dim(0)));
    terms.total = add(terms.mae, scale(terms.frequency, cfg.lambda));
    return terms;
}

}  // namespace reettt
