#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icfd/common.hpp"

namespace icfd::adv {

struct ScheduleConfig {
    double epsilon = 8.0 / 255.0; // base perturbation budget
    double beta = 6.0;            // base robust-regularization strength
    double sigma = 0.5;           // budget floor multiplier
    double mu = 0.5;              // weight floor multiplier
    bool adaptive = true;         // false: constant eps/beta baseline

    void validate() const {
        if (epsilon < 0) throw DomainError("schedule: epsilon must be >= 0");
        if (beta < 0) throw DomainError("schedule: beta must be >= 0");
        if (sigma < 0) throw DomainError("schedule: sigma must be >= 0");
        if (mu < 0) throw DomainError("schedule: mu must be >= 0");
    }
};

// Per-class perturbation budget, proportional to how well the class already
// resists attacks. Lies in [sigma*eps, (sigma+1)*eps].
inline double class_epsilon(double acc, double sigma, double eps) {
    if (!(acc >= 0.0 && acc <= 1.0))
        throw DomainError("class_epsilon: Acc must lie in [0,1], got " + std::to_string(acc));
    if (sigma < 0) throw DomainError("class_epsilon: sigma must be >= 0");
    if (eps < 0) throw DomainError("class_epsilon: epsilon must be >= 0");
    return (sigma + acc) * eps;
}

// Per-class robust-loss weight, saturating in (mu+acc)*beta. Always in [0,1)
// so the clean/robust combination stays convex.
inline double class_beta(double acc, double mu, double beta) {
    if (!(acc >= 0.0 && acc <= 1.0))
        throw DomainError("class_beta: Acc must lie in [0,1], got " + std::to_string(acc));
    if (mu < 0) throw DomainError("class_beta: mu must be >= 0");
    if (beta < 0) throw DomainError("class_beta: beta must be >= 0");
    const double s = (mu + acc) * beta;
    return s / (1.0 + s);
}

// Per-class running adversarial accuracy with the budgets and weights derived
// from it. eps_i and beta_i are always recomputed together from acc.
struct ClassState {
    std::vector<double> acc;
    std::vector<double> eps_i;
    std::vector<double> beta_i;

    int num_classes() const { return static_cast<int>(acc.size()); }
};

inline void refresh(ClassState& s, const ScheduleConfig& c) {
    c.validate();
    for (int i = 0; i < s.num_classes(); ++i) {
        if (c.adaptive) {
            s.eps_i[i] = class_epsilon(s.acc[i], c.sigma, c.epsilon);
            s.beta_i[i] = class_beta(s.acc[i], c.mu, c.beta);
        } else {
            s.eps_i[i] = c.epsilon;
            s.beta_i[i] = c.beta / (1.0 + c.beta);
        }
    }
}

inline ClassState initial_state(int num_classes, const ScheduleConfig& c) {
    if (num_classes < 1) throw ConfigError("schedule: class count must be >= 1");
    ClassState s;
    s.acc.assign(num_classes, 0.0);
    s.eps_i.assign(num_classes, 0.0);
    s.beta_i.assign(num_classes, 0.0);
    refresh(s, c);
    return s;
}

// End-of-epoch accuracy update from adversarial predictions accumulated over
// the epoch. Classes absent from the stream keep their previous accuracy.
inline void update_class_stats(ClassState& s, const std::vector<int>& adv_predictions,
                               const std::vector<int>& labels, const ScheduleConfig& c) {
    if (adv_predictions.size() != labels.size())
        throw ShapeError("update_class_stats: prediction/label count mismatch");
    const int K = s.num_classes();
    std::vector<std::int64_t> correct(K, 0), total(K, 0);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        const int y = labels[j];
        if (y < 0 || y >= K)
            throw DomainError("update_class_stats: label " + std::to_string(y) + " out of range [0," +
                              std::to_string(K) + ")");
        ++total[y];
        if (adv_predictions[j] == y) ++correct[y];
    }
    for (int i = 0; i < K; ++i)
        if (total[i] > 0) s.acc[i] = static_cast<double>(correct[i]) / static_cast<double>(total[i]);
    refresh(s, c);
}

} // namespace icfd::adv
