#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "aeseg/common.hpp"

namespace aeseg {

struct ObjectiveConfig {
    double epsilon = 1e-6;      // Dice smoothing constant
    double prob_clamp = 1e-7;   // bounds p inside logarithms

    void validate() const {
        if (!(epsilon > 0.0 && epsilon <= 1e-3))
            throw data_error("objective config: epsilon must lie in (0, 1e-3]");
        if (!(prob_clamp > 0.0 && prob_clamp <= 1e-4))
            throw data_error("objective config: prob_clamp must lie in (0, 1e-4]");
    }
};

// Numerically stable logistic function; sign-split so exp never overflows.
template <typename T>
inline T sigmoid(T z) {
    if (z >= T(0)) {
        const T e = std::exp(-z);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(z);
    return e / (T(1) + e);
}

template <typename T>
inline void sigmoid_map(std::span<const T> z, std::span<T> p) {
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = sigmoid(z[i]);
}

namespace detail {

inline double clamp_prob(double p, double c) { return p < c ? c : (p > 1.0 - c ? 1.0 - c : p); }

}  // namespace detail

// Mean binary cross-entropy over valid pixels. Probabilities are clamped into
// [prob_clamp, 1 - prob_clamp] before the logarithms; accumulation is double.
template <typename T>
inline double masked_bce(std::span<const T> p, std::span<const std::uint8_t> y,
                         std::span<const std::uint8_t> m, const ObjectiveConfig& cfg = {}) {
    cfg.validate();
    double sum = 0.0;
    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!m[i]) continue;
        ++n_valid;
        const double pc = detail::clamp_prob(static_cast<double>(p[i]), cfg.prob_clamp);
        sum += y[i] ? std::log(pc) : std::log(1.0 - pc);
    }
    if (n_valid == 0) throw data_error("masked_bce: empty valid mask");
    return -sum / static_cast<double>(n_valid);
}

// Soft Dice loss: 1 - (2*sum(m p y) + eps) / (sum(m p) + sum(m y) + eps).
template <typename T>
inline double soft_dice(std::span<const T> p, std::span<const std::uint8_t> y,
                        std::span<const std::uint8_t> m, const ObjectiveConfig& cfg = {}) {
    cfg.validate();
    double inter = 0.0, psum = 0.0, ysum = 0.0;
    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!m[i]) continue;
        ++n_valid;
        const double pv = static_cast<double>(p[i]);
        inter += pv * (y[i] ? 1.0 : 0.0);
        psum += pv;
        ysum += y[i] ? 1.0 : 0.0;
    }
    if (n_valid == 0) throw data_error("soft_dice: empty valid mask");
    return 1.0 - (2.0 * inter + cfg.epsilon) / (psum + ysum + cfg.epsilon);
}

struct LossValue {
    double total = 0.0;
    double bce = 0.0;
    double dice = 0.0;
};

template <typename T>
inline LossValue total_loss(std::span<const T> p, std::span<const std::uint8_t> y,
                            std::span<const std::uint8_t> m, const ObjectiveConfig& cfg = {}) {
    LossValue v;
    v.bce = masked_bce(p, y, m, cfg);
    v.dice = soft_dice(p, y, m, cfg);
    v.total = v.bce + v.dice;
    return v;
}

// Composite loss straight from logits, with the exact gradient d(total)/dz.
// The clamp is honored in the gradient: where it is active the BCE term
// contributes zero slope through the clamped probability.
template <typename T>
inline LossValue loss_and_logit_grad(std::span<const T> z, std::span<const std::uint8_t> y,
                                     std::span<const std::uint8_t> m, const ObjectiveConfig& cfg,
                                     std::span<T> dz) {
    cfg.validate();
    const std::size_t n = z.size();
    std::vector<double> p(n, 0.0);
    double inter = 0.0, psum = 0.0, ysum = 0.0, bce_sum = 0.0;
    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < n; ++i) {
        dz[i] = T(0);
        if (!m[i]) continue;
        ++n_valid;
        p[i] = sigmoid(static_cast<double>(z[i]));
        const double pc = detail::clamp_prob(p[i], cfg.prob_clamp);
        bce_sum += y[i] ? std::log(pc) : std::log(1.0 - pc);
        inter += p[i] * (y[i] ? 1.0 : 0.0);
        psum += p[i];
        ysum += y[i] ? 1.0 : 0.0;
    }
    if (n_valid == 0) throw data_error("loss_and_logit_grad: empty valid mask");

    LossValue v;
    v.bce = -bce_sum / static_cast<double>(n_valid);
    const double denom = psum + ysum + cfg.epsilon;
    v.dice = 1.0 - (2.0 * inter + cfg.epsilon) / denom;
    v.total = v.bce + v.dice;
    if (!std::isfinite(v.total)) throw numeric_error("loss is not finite");

    const double inv_n = 1.0 / static_cast<double>(n_valid);
    for (std::size_t i = 0; i < n; ++i) {
        if (!m[i]) continue;
        const double pi = p[i];
        const double yi = y[i] ? 1.0 : 0.0;
        // Where the clamp is active the log argument is constant in p, so the
        // BCE term contributes no slope.
        const bool clamped = pi <= cfg.prob_clamp || pi >= 1.0 - cfg.prob_clamp;
        const double g_bce = clamped ? 0.0 : (pi - yi) * inv_n;
        // dDice/dp = -(2 y denom - (2 inter + eps)) / denom^2, chained with
        // dp/dz = p (1 - p).
        const double g_dice = -(2.0 * yi * denom - (2.0 * inter + cfg.epsilon)) / (denom * denom) *
                              pi * (1.0 - pi);
        dz[i] = static_cast<T>(g_bce + g_dice);
    }
    return v;
}

}  // namespace aeseg
