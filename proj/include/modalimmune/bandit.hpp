#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "model.hpp"

namespace modalimmune {

// ----- EXP3.P over modalities --------------------------------------------------

struct BanditState {
    std::vector<double> weights;  // positive
    double gamma = 0.05;
    double eta_exp = 0.0;
    double beta_bias = 0.0;
    std::size_t round = 0;
    std::size_t horizon = 0;
    std::size_t arms = 0;
};

inline double exp3p_learning_rate(std::size_t arms, std::size_t horizon) {
    return std::min(0.5, std::log(static_cast<double>(arms)) /
                             (static_cast<double>(arms) * static_cast<double>(horizon)));
}

inline BanditState exp3p_init(std::size_t arms, std::size_t horizon, double gamma = 0.05) {
    if (arms < 2) throw StructuralError("exp3p_init: need at least 2 arms");
    if (horizon < 1) throw StructuralError("exp3p_init: horizon < 1");
    BanditState s;
    s.arms = arms;
    s.horizon = horizon;
    s.gamma = gamma;
    s.weights.assign(arms, 1.0);
    s.eta_exp = exp3p_learning_rate(arms, horizon);
    const double delta_conf = 0.05;
    s.beta_bias = std::sqrt(std::log(static_cast<double>(arms) / delta_conf) /
                            (static_cast<double>(arms) * static_cast<double>(horizon)));
    return s;
}

inline std::vector<double> exp3p_probabilities(const BanditState& s) {
    double sum = 0.0;
    for (double w : s.weights) sum += w;
    if (!(sum > 0.0)) throw NumericalError("exp3p: weight sum underflow");
    std::vector<double> p(s.arms);
    for (std::size_t i = 0; i < s.arms; ++i)
        p[i] = (1.0 - s.gamma) * s.weights[i] / sum + s.gamma / static_cast<double>(s.arms);
    return p;
}

inline std::size_t exp3p_select(const BanditState& s, Rng& rng) {
    const std::vector<double> p = exp3p_probabilities(s);
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return i;
    }
    return p.size() - 1;
}

// Importance-weighted update with additive confidence bias, applied to the
// played arm only. Rewards must already be normalized into [0, 1].
inline void exp3p_update(BanditState& s, std::size_t arm, double reward) {
    if (arm >= s.arms) throw StructuralError("exp3p_update: arm out of range");
    reward = std::min(1.0, std::max(0.0, reward));
    const std::vector<double> p = exp3p_probabilities(s);
    if (p[arm] < 1e-300) throw NumericalError("exp3p_update: probability underflow");
    const double xhat = (reward + s.beta_bias) / p[arm];
    s.weights[arm] *= std::exp(s.eta_exp * xhat);
    s.round += 1;

    double mx = 0.0;
    for (double w : s.weights) mx = std::max(mx, w);
    if (mx > 1e100 || mx < 1e-100) {
        for (double& w : s.weights) w /= mx;
    }
}

// Running-max reward normalization: preserves the per-round argmax of the raw
// surrogate values.
struct RewardNormalizer {
    double running_max = 0.0;

    double normalize(double raw) {
        running_max = std::max(running_max, raw);
        if (running_max <= 0.0) return 0.0;
        return std::min(1.0, std::max(0.0, raw / running_max));
    }
};

// ----- information-gain surrogate ----------------------------------------------

struct InfoGainEstimate {
    std::vector<double> ell;                 // per-arm surrogate, >= 0
    std::size_t batch_size = 0;
    std::vector<double> cached_full_loss;    // per-sample task loss, all modalities
};

// Squared per-sample task-loss difference between the full modality set and
// the leave-one-out set. Embeddings are encoded once and reused; only the
// fusion input changes per arm. `arms` (optional) restricts the evaluation to
// a subset, the sub-sampling path for large modality counts.
inline InfoGainEstimate info_gain_surrogate(const ModelParams& params,
                                            const ModalityBatch& batch,
                                            const std::vector<std::size_t>* arms = nullptr) {
    validate_batch(batch, params.dims);
    const std::size_t n = batch.size();
    const std::size_t m_count = params.dims.modalities;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < m_count; ++m)
            if (!batch.availability.at(i, m))
                throw StructuralError(
                    "info_gain_surrogate: batch must have all modalities available");

    const std::vector<Matrix> z = encode(params, batch);

    auto per_sample_loss = [&](const SlotMask& active) {
        const Matrix logits = fuse_and_classify(params, z, active);
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (std::size_t c = 0; c < params.dims.classes; ++c)
                mx = std::max(mx, logits(i, c));
            double denom = 0.0;
            for (std::size_t c = 0; c < params.dims.classes; ++c)
                denom += std::exp(logits(i, c) - mx);
            out[i] = -(logits(i, batch.labels[i]) - mx) + std::log(denom);
        }
        return out;
    };

    InfoGainEstimate est;
    est.batch_size = n;
    est.ell.assign(m_count, 0.0);
    est.cached_full_loss = per_sample_loss(SlotMask(n, m_count, true));

    std::vector<std::size_t> all;
    if (arms == nullptr) {
        all.resize(m_count);
        for (std::size_t m = 0; m < m_count; ++m) all[m] = m;
        arms = &all;
    }
    for (std::size_t m : *arms) {
        SlotMask minus(n, m_count, true);
        for (std::size_t i = 0; i < n; ++i) minus.set(i, m, false);
        const std::vector<double> loo = per_sample_loss(minus);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double diff = est.cached_full_loss[i] - loo[i];
            acc += diff * diff;
        }
        est.ell[m] = acc / static_cast<double>(n);
    }
    return est;
}

}  // namespace modalimmune
