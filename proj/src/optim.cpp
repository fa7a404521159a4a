#include "reettt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace reettt {

double LrSchedule::at(std::size_t step) const {
    if (horizon == 0) return final;
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(horizon));
    return final + (initial - final) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg, LrSchedule schedule)
    : params_(std::move(params)), cfg_(cfg), schedule_(schedule) {
    for (const auto& p : params_) {
        if (!p.is_leaf()) throw TapeError("optimizer parameters must be leaves");
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::step() {
    bool any = std::any_of(params_.begin(), params_.end(), [](const Tensor& p) { return p.has_grad(); });
    if (!any) throw TapeError("optimizer step without accumulated gradients (call backward first)");

    const double lr = schedule_.at(step_);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            w[j] *= 1.0 - lr * cfg_.weight_decay;
            w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        }
        check_finite(w, "optimizer step");
    }
    zero_grad();
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace reettt
