#pragma once

// AdamW with decoupled weight decay and bias-corrected moments.
//
//   m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
//   w <- w - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * w )
//
// A step with any non-finite gradient is skipped entirely (and throws when
// debug checks are on); the step counter does not advance for skipped steps.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sesm/errors.hpp"
#include "sesm/model.hpp"

namespace sesm {

template <typename T>
class AdamWT {
public:
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0.01);

    explicit AdamWT(const ParamStoreT<T>& params) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (const auto& [name, t] : params.items()) {
            m_.emplace_back(t.numel(), T(0));
            v_.emplace_back(t.numel(), T(0));
        }
    }

    std::uint64_t step_count() const { return t_; }
    std::uint64_t skipped_steps() const { return skipped_; }

    // Scales all gradients so their global L2 norm is at most max_norm.
    // Returns the pre-clip norm. Non-finite norms are left for step() to
    // reject.
    static double clip_grad_norm(ParamStoreT<T>& params, double max_norm) {
        double sq = 0;
        for (const auto& [name, t] : params.items()) {
            for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        if (std::isfinite(norm) && norm > max_norm && norm > 0) {
            const T scale = static_cast<T>(max_norm / norm);
            for (auto& [name, t] : params.items()) {
                for (T& g : t.grad()) g *= scale;
            }
        }
        return norm;
    }

    // Applies one update from the gradients currently held by the params.
    // Returns false if the step was skipped because of non-finite gradients.
    bool step(ParamStoreT<T>& params, T lr) {
        if (params.size() != m_.size()) {
            throw std::invalid_argument("optimizer: parameter count changed");
        }
        for (const auto& [name, t] : params.items()) {
            for (T g : t.grad()) {
                if (!std::isfinite(static_cast<double>(g))) {
                    if (debug_checks()) {
                        throw NumericError("optimizer: non-finite gradient in " + name);
                    }
                    ++skipped_;
                    return false;
                }
            }
        }
        ++t_;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(t_));
        std::size_t pi = 0;
        for (auto& [name, t] : params.items()) {
            auto& w = t.data();
            const auto& g = t.grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
                v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
            }
            ++pi;
        }
        return true;
    }

    // Checkpoint access: moments are exposed as named tensors so they ride
    // in the same blob as the parameters.
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    const std::vector<std::vector<T>>& first_moments() const { return m_; }
    const std::vector<std::vector<T>>& second_moments() const { return v_; }
    void set_step_count(std::uint64_t t) { t_ = t; }

private:
    std::uint64_t t_ = 0;
    std::uint64_t skipped_ = 0;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
};

using AdamW = AdamWT<float>;

} // namespace sesm
