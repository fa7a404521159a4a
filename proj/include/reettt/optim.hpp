#pragma once

#include "reettt/tensor.hpp"

#include <vector>

namespace reettt {

/// Cosine decay from `initial` to `final` over `horizon` steps, then flat.
struct LrSchedule {
    double initial = 5e-3;
    double final = 1e-4;
    std::size_t horizon = 1;

    double at(std::size_t step) const;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Adaptive moment estimation with decoupled weight decay.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg, LrSchedule schedule);

    /// Applies one update from the accumulated gradients, clears them and
    /// advances the schedule. Throws TapeError if no gradient is present.
    void step();
    void zero_grad();

    std::size_t step_count() const { return step_; }
    double current_lr() const { return schedule_.at(step_); }
    const std::vector<Tensor>& params() const { return params_; }
    const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
    const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

private:
    std::vector<Tensor> params_;
    AdamWConfig cfg_;
    LrSchedule schedule_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t step_ = 0;
};

}  // namespace reettt
