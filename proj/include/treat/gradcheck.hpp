#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "treat/errors.hpp"
#include "treat/tensor.hpp"

namespace treat {

/// A differentiable scalar-valued function of a set of input tensors.
using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central-difference gradient verification. Runs one analytic backward pass,
/// then perturbs every coordinate of every input by +-step and compares.
/// Returns the maximum of |analytic - numeric| / max(1, |numeric|).
inline double grad_check(const TensorFn& f, std::vector<Tensor> inputs, double step = 1e-6) {
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = f(inputs);
    if (loss.size() != 1) throw ValueError("grad_check: function must return a scalar");
    backward(loss);

    std::vector<std::vector<double>> analytic;
    for (Tensor& t : inputs)
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0));

    double max_err = 0.0;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& data = inputs[k].values();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double orig = data[j];
            data[j] = orig + step;
            const double lp = f(inputs).item();
            data[j] = orig - step;
            const double lm = f(inputs).item();
            data[j] = orig;
            const double numeric = (lp - lm) / (2.0 * step);
            const double err = std::abs(analytic[k][j] - numeric) / std::max(1.0, std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace treat
