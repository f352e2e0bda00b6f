#pragma once

// Verifies analytic gradients against central finite differences.
//
// The function under test maps the current values of `params` to a scalar
// tensor. Each call must rebuild the graph from the parameter values (the
// checker perturbs them in place between calls).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sesm/tensor.hpp"

namespace sesm {

template <typename T>
struct GradCheckResult {
    T max_rel_error = 0;
    std::size_t worst_param = 0;   // index into params
    std::size_t worst_coord = 0;   // flat index within that parameter
    T analytic = 0;
    T numeric = 0;
};

// rel = |analytic - central| / max(|analytic|, |central|, 1e-8)
template <typename T>
GradCheckResult<T> grad_check(const std::function<TensorT<T>()>& f,
                              std::vector<TensorT<T>> params,
                              T eps = T(1e-5)) {
    for (auto& p : params) p.set_requires_grad(true);

    {
        TapeT<T> tape;
        TensorT<T> loss = f();
        if (loss.numel() != 1) {
            throw std::invalid_argument("grad_check: function must return a scalar, got " +
                                        shape_str(loss.shape()));
        }
        for (auto& p : params) p.zero_grad();
        tape.backward(loss);
    }

    GradCheckResult<T> res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T saved = p.data()[i];
            p.data()[i] = saved + eps;
            const T up = f().item();
            p.data()[i] = saved - eps;
            const T down = f().item();
            p.data()[i] = saved;

            const T numeric = (up - down) / (T(2) * eps);
            const T analytic = p.grad()[i];
            const T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-8)});
            const T rel = std::abs(analytic - numeric) / denom;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = pi;
                res.worst_coord = i;
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

} // namespace sesm
