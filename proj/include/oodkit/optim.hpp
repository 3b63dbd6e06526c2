#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "oodkit/error.hpp"

namespace oodkit {

/// Adam with decoupled weight decay. With weight_decay = 0 this is plain Adam.
/// Each step first shrinks parameters by (1 − lr·weight_decay), then applies
/// the bias-corrected moment update.
class AdamW {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    explicit AdamW(std::size_t n_params, double weight_decay = 0.0)
        : m_(n_params, 0.0), v_(n_params, 0.0), weight_decay_(weight_decay) {}

    void step(std::span<double> params, std::span<const double> grad, double lr) {
        require(params.size() == m_.size() && grad.size() == m_.size(),
                ErrorCode::DimensionMismatch, "optimizer parameter count mismatch");
        ++t_;
        const double c1 = 1.0 - std::pow(kBeta1, double(t_));
        const double c2 = 1.0 - std::pow(kBeta2, double(t_));
        const double decay = 1.0 - lr * weight_decay_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grad[i];
            v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grad[i] * grad[i];
            const double m_hat = m_[i] / c1;
            const double v_hat = v_[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (std::sqrt(v_hat) + kEps);
        }
    }

    std::size_t steps_taken() const noexcept { return t_; }

private:
    std::vector<double> m_;
    std::vector<double> v_;
    double weight_decay_;
    std::size_t t_ = 0;
};

}  // namespace oodkit
