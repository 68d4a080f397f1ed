#pragma once

// Central finite-difference gradient checking, done in double precision.
// Used by the unit tests and the acceptance suite; independent of the tape's
// backward implementation.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "forla/tensor.hpp"

namespace forla::testing {

struct GradcheckResult {
    double max_rel_err = 0.0;
    size_t checked = 0;
    std::string worst;
};

// loss_fn must rebuild the forward pass from the current parameter values on
// every call and return a scalar tensor.
template <class LossFn>
GradcheckResult gradcheck(LossFn&& loss_fn, std::span<TensorT<double>* const> params, double h = 1e-4) {
    GradcheckResult res;
    for (auto* p : params) p->zero_grad();
    {
        TapeT<double> tape;
        TensorT<double> loss = loss_fn();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto* p : params) analytic.push_back(p->grad());

    auto eval = [&]() {
        NoGradGuard ng;
        return double(loss_fn().item());
    };

    for (size_t pi = 0; pi < params.size(); ++pi) {
        TensorT<double>& p = *params[pi];
        for (size_t i = 0; i < p.numel(); ++i) {
            const double save = p.data()[i];
            p.data()[i] = save + h;
            const double f1 = eval();
            p.data()[i] = save - h;
            const double f0 = eval();
            p.data()[i] = save;
            const double num = (f1 - f0) / (2.0 * h);
            const double ana = analytic[pi].empty() ? 0.0 : analytic[pi][i];
            const double rel = std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)});
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "param " + std::to_string(pi) + "[" + std::to_string(i) + "] analytic " +
                            std::to_string(ana) + " numeric " + std::to_string(num);
            }
        }
    }
    return res;
}

inline TensorT<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                   bool requires_grad = true) {
    size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
    auto t = TensorT<double>::from(std::move(shape), std::move(v));
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

}  // namespace forla::testing
