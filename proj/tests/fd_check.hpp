#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"

#include "cram/rng.hpp"
#include "cram/tape.hpp"
#include "cram/tensor.hpp"

namespace cram::testutil {

inline Tensor rand_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0,
                          bool grad = true) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data()) v = rng.normal() * scale;
    t.requires_grad = grad;
    return t;
}

// Central-difference check of every element of every parameter against the
// tape's analytic gradient. `build` must be a deterministic function of the
// parameter values.
inline void check_gradients(std::vector<Tensor> params,
                            const std::function<Tensor(Tape&)>& build,
                            double tol = 1e-4, double h = 1e-5) {
    Tape tape;
    Tensor loss = build(tape);
    GradMap gm = tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) analytic.push_back(gm.grad(p).data());

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            double orig = data[i];
            data[i] = orig + h;
            Tape tp;
            double lp = build(tp).value();
            data[i] = orig - h;
            Tape tm;
            double lm = build(tm).value();
            data[i] = orig;
            double num = (lp - lm) / (2.0 * h);
            double ana = analytic[pi][i];
            double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            INFO("param " << pi << " elem " << i << ": analytic " << ana << " numeric "
                          << num);
            CHECK(err < tol);
        }
    }
}

}  // namespace cram::testutil
