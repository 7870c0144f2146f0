#pragma once

#include <functional>
#include <random>
#include <vector>

#include "icfd/autograd.hpp"

namespace icfd::test {

// Central-difference gradient check. `build` must construct a fresh scalar
// loss graph from the supplied leaves each time it is called; the checker
// compares reverse-mode gradients against (f(x+h)-f(x-h))/2h element-wise.
// max_elems > 0 subsamples the coordinates (seeded) to keep large checks fast.
struct GradCheckResult {
    double max_err = 0;
    std::int64_t checked = 0;
};

inline GradCheckResult check_gradients(
    std::vector<Tensor<double>> inputs,
    const std::function<ag::Var<double>(std::vector<ag::Var<double>>&)>& build, double h = 1e-5,
    double tol = 1e-4, std::int64_t max_elems = 0) {
    std::vector<ag::Var<double>> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs) leaves.push_back(ag::Var<double>::leaf(t, true));
    ag::Var<double> loss = build(leaves);
    loss.backward();
    std::vector<Tensor<double>> grads;
    for (auto& l : leaves) grads.push_back(l.grad());

    GradCheckResult res;
    std::mt19937_64 pick(12345);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::int64_t n = inputs[i].numel();
        std::vector<std::int64_t> coords;
        if (max_elems > 0 && n > max_elems) {
            for (std::int64_t c = 0; c < max_elems; ++c)
                coords.push_back(static_cast<std::int64_t>(pick() % static_cast<std::uint64_t>(n)));
        } else {
            for (std::int64_t c = 0; c < n; ++c) coords.push_back(c);
        }
        for (std::int64_t j : coords) {
            const double orig = inputs[i][j];
            const auto eval = [&](double v) {
                inputs[i][j] = v;
                std::vector<ag::Var<double>> probe;
                probe.reserve(inputs.size());
                for (auto& t : inputs) probe.push_back(ag::Var<double>::leaf(t, false));
                return build(probe).item();
            };
            const double fp = eval(orig + h);
            const double fm = eval(orig - h);
            inputs[i][j] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double an = grads[i].numel() == inputs[i].numel() ? grads[i][j] : 0.0;
            const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0});
            res.max_err = std::max(res.max_err, err);
            ++res.checked;
            if (err > tol)
                throw std::runtime_error("gradient mismatch at input " + std::to_string(i) + " elem " +
                                         std::to_string(j) + ": analytic " + std::to_string(an) + " vs fd " +
                                         std::to_string(fd));
        }
    }
    return res;
}

inline Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

} // namespace icfd::test
