#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "curvature.hpp"
#include "model.hpp"

namespace modalimmune {

// ----- meta-parameters ---------------------------------------------------------

struct MetaParams {
    double lambda = 0.5;  // collapse weight
    double eta = 0.1;     // stable-rank penalty
    double kappa = 0.5;   // negative-feedback scale
};

// Upper bounds taken from the sensitivity-sweep ranges.
inline constexpr double kMetaLambdaMax = 1.0;
inline constexpr double kMetaEtaMax = 0.2;
inline constexpr double kMetaKappaMax = 1.0;

// ----- Hessian-vector products --------------------------------------------------

// H v via central differences of the gradient closure at theta. Step
// 1e-4 (1 + ||theta||)/||v||; rejects zero directions.
inline Vector hvp(const std::function<Vector(const Vector&)>& grad_fn, const Vector& theta,
                  const Vector& v) {
    return hessian_fd_matvec(grad_fn, theta)(v);
}

// ----- certified Neumann truncation ---------------------------------------------

struct NeumannCertificate {
    std::size_t depth = 0;       // K
    double alpha = 0.0;
    double beta_est = 0.0;       // ||H||_2 estimate
    double tail_bound = 0.0;     // (alpha beta)^K / (1 - alpha beta) * ||v||
    double epsilon = 0.0;
    std::size_t doublings = 0;
    bool accepted = false;
};

inline double neumann_tail_bound(double alpha, double beta, std::size_t depth, double v_norm) {
    const double q = alpha * beta;
    return std::pow(q, static_cast<double>(depth)) / (1.0 - q) * v_norm;
}

// Smallest K from the geometric-tail bound; at least 1.
inline std::size_t neumann_closed_form_depth(double alpha, double beta, double v_norm,
                                             double epsilon) {
    const double q = alpha * beta;
    if (q <= 0.0) return 1;
    if (!(epsilon > 0.0)) throw StructuralError("neumann_closed_form_depth: epsilon <= 0");
    const double k = std::log(v_norm / (epsilon * (1.0 - q))) / std::log(1.0 / q);
    return static_cast<std::size_t>(std::max(1.0, std::ceil(k)));
}

// Truncated series sum_{k=0}^{K-1} (alpha H)^k v, with K grown by the online
// doubling rule (K0 = 1) until the geometric tail bound meets the tolerance
// or the depth cap is hit. The returned certificate records acceptance.
inline std::pair<Vector, NeumannCertificate> neumann_apply(const Matvec& h_apply,
                                                           const Vector& v, double alpha,
                                                           double beta_est, double epsilon,
                                                           std::size_t k_max = 10) {
    if (!(alpha > 0.0)) throw StructuralError("neumann_apply: alpha must be > 0");
    if (beta_est < 0.0) throw StructuralError("neumann_apply: negative beta estimate");
    const double q = alpha * beta_est;
    if (q >= 1.0)
        throw NumericalError("neumann_apply: alpha*beta >= 1, series divergent");

    NeumannCertificate cert;
    cert.alpha = alpha;
    cert.beta_est = beta_est;
    cert.epsilon = epsilon;

    const double vn = v.norm2();
    std::size_t depth = 1;
    std::size_t doublings = 0;
    while (neumann_tail_bound(alpha, beta_est, depth, vn) > epsilon && depth < k_max) {
        depth = std::min(depth * 2, k_max);
        ++doublings;
    }
    cert.depth = depth;
    cert.doublings = doublings;
    cert.tail_bound = neumann_tail_bound(alpha, beta_est, depth, vn);
    cert.accepted = cert.tail_bound <= epsilon;

    Vector term = v;
    Vector sum = v;
    for (std::size_t k = 1; k < depth; ++k) {
        term = h_apply(term);
        term *= alpha;
        sum += term;
    }
    return {sum, cert};
}

// Truncation tolerance recomputed once per epoch from the validation
// gradient norm.
inline double epoch_tolerance(const Vector& val_grad) {
    for (std::size_t i = 0; i < val_grad.dim(); ++i)
        if (!std::isfinite(val_grad[i]))
            throw NumericalError("epoch_tolerance: non-finite validation gradient");
    return 0.02 * val_grad.norm2();
}

// ----- hyper-gradient -----------------------------------------------------------

enum class HyperGradMethod { AnalyticNeumann, FiniteDifference };

struct HyperGradient {
    double d_lambda = 0.0;
    double d_eta = 0.0;
    double d_kappa = 0.0;
    NeumannCertificate certificate;
    HyperGradMethod lambda_method = HyperGradMethod::AnalyticNeumann;
    HyperGradMethod eta_method = HyperGradMethod::AnalyticNeumann;
    HyperGradMethod kappa_method = HyperGradMethod::FiniteDifference;
    bool confident = false;
};

// The inner problem seen by the meta-optimizer, expressed as closures over
// the flat parameter vector.
struct InnerProblem {
    std::function<Vector(const Vector&)> train_grad;
    std::function<double(const Vector&)> val_loss;
    std::function<Vector(const Vector&)> val_grad;
    // mixed partials of the training gradient:
    //   d(train_grad)/d lambda        = collapse_grad
    //   d(train_grad)/d eta           = lambda * stable_rank_grad
    std::function<Vector(const Vector&)> collapse_grad;
    std::function<Vector(const Vector&)> stable_rank_grad;
    // one gated update at a given kappa (fixed mask randomness inside)
    std::function<Vector(const Vector&, double)> gated_step;
};

// Descent-direction hyper-gradient. lambda and eta use the Neumann-resolvent
// contraction u = truncated (I - alpha H)^{-1} val_grad:
//   d_lambda = -<u, collapse_grad>,  d_eta = -lambda <u, stable_rank_grad>.
// The inner update theta+ = theta - alpha grad makes the response of theta to
// a meta-parameter move anti-parallel to the resolvent-weighted mixed
// partial, hence the sign. kappa enters through the gradient mask, not the
// loss, so its component is a central finite difference of the validation
// loss around one gated update.
inline HyperGradient hyper_gradient(const InnerProblem& problem, const Vector& theta,
                                    const MetaParams& meta, double alpha, double beta_est,
                                    double epsilon, std::size_t k_max = 10,
                                    double kappa_fd_step = 0.05) {
    HyperGradient hg;
    const Vector v = problem.val_grad(theta);

    const Matvec h_apply = hessian_fd_matvec(problem.train_grad, theta);
    auto [u, cert] = neumann_apply(h_apply, v, alpha, beta_est, epsilon, k_max);
    hg.certificate = cert;
    hg.confident = cert.accepted;

    hg.d_lambda = -u.dot(problem.collapse_grad(theta));
    hg.d_eta = -meta.lambda * u.dot(problem.stable_rank_grad(theta));

    const double h = kappa_fd_step;
    const double lv_plus = problem.val_loss(problem.gated_step(theta, meta.kappa + h));
    const double lv_minus = problem.val_loss(problem.gated_step(theta, meta.kappa - h));
    hg.d_kappa = (lv_plus - lv_minus) / (2.0 * h);
    return hg;
}

// Projected meta update: xi <- clamp(xi - lr * d, [0, upper]).
inline MetaParams bhgd_step(const MetaParams& meta, const HyperGradient& hg, double lr_meta) {
    auto clamp = [](double x, double hi) { return std::min(hi, std::max(0.0, x)); };
    MetaParams out;
    out.lambda = clamp(meta.lambda - lr_meta * hg.d_lambda, kMetaLambdaMax);
    out.eta = clamp(meta.eta - lr_meta * hg.d_eta, kMetaEtaMax);
    out.kappa = clamp(meta.kappa - lr_meta * hg.d_kappa, kMetaKappaMax);
    return out;
}

// Conservative stability projection after encoder substitution: when any
// per-modality spectral proxy exceeds its bound, kappa is scaled down by the
// worst bound/proxy ratio.
inline MetaParams project_meta(const MetaParams& meta, const std::vector<double>& proxies,
                               const std::vector<double>& proxy_bounds) {
    if (proxies.size() != proxy_bounds.size())
        throw StructuralError("project_meta: proxy/bound size mismatch");
    double worst = 1.0;
    for (std::size_t m = 0; m < proxies.size(); ++m)
        if (proxies[m] > proxy_bounds[m]) worst = std::min(worst, proxy_bounds[m] / proxies[m]);
    MetaParams out = meta;
    out.kappa *= worst;
    return out;
}

// ----- model-coupled inner problem ----------------------------------------------

// Backpropagate a d(loss)/dZ matrix through one encoder into a flat full-size
// gradient vector (zeros outside that encoder's block).
inline Vector encoder_grad_to_flat(const ModelParams& params, const ModalityBatch& batch,
                                   std::size_t modality, const Matrix& dz) {
    ModelParams grads = zeros_like_params(params.dims);
    const EncoderCache cache = encode_one(params.encoders[modality], batch.inputs[modality]);
    detail::encoder_backward(params.encoders[modality], batch.inputs[modality], cache, dz,
                             grads.encoders[modality]);
    return flatten_params(grads);
}

struct ModelInnerConfig {
    int m_star = 0;
    double inner_lr = 1e-3;          // alpha, the inner step size
    std::uint64_t mask_seed = 1;     // fixed across the kappa FD pair
    double gate_tau = 1.0;
    LossWeights weights;             // alpha/beta/gamma fixed; lambda/eta from meta
};

// Builds the closure view of the real model: SDL training loss on the train
// batch (fixed collapse noise), task-only validation loss, analytic mixed
// partials through the collapse term, and a gated SDL update for the kappa
// path.
inline InnerProblem model_inner_problem(const ModelDims& dims, const ModalityBatch& train_batch,
                                        const ModalityBatch& val_batch,
                                        const CollapseSample& sample, const MetaParams& meta,
                                        const ModelInnerConfig& cfg) {
    InnerProblem p;
    LossWeights train_w = cfg.weights;
    train_w.lambda = meta.lambda;
    train_w.eta = meta.eta;

    p.train_grad = [dims, &train_batch, &sample, train_w, cfg](const Vector& flat) {
        const ModelParams params = unflatten_params(dims, flat);
        ModeSpec mode;
        mode.kind = TrainMode::Sdl;
        mode.m_star = cfg.m_star;
        mode.collapse = &sample;
        return flatten_params(compute_losses(params, train_batch, mode, train_w).grads);
    };

    auto val_weights = LossWeights{0.0, 0.0, 0.0, 0.0, 0.0};
    p.val_loss = [dims, &val_batch, val_weights](const Vector& flat) {
        const ModelParams params = unflatten_params(dims, flat);
        ModeSpec mode;
        mode.kind = TrainMode::Reconstruction;
        mode.recon_mask = SlotMask(val_batch.size(), dims.modalities, false);
        return compute_losses(params, val_batch, mode, val_weights).breakdown.task;
    };
    p.val_grad = [dims, &val_batch, val_weights](const Vector& flat) {
        const ModelParams params = unflatten_params(dims, flat);
        ModeSpec mode;
        mode.kind = TrainMode::Reconstruction;
        mode.recon_mask = SlotMask(val_batch.size(), dims.modalities, false);
        return flatten_params(compute_losses(params, val_batch, mode, val_weights).grads);
    };

    p.collapse_grad = [dims, &train_batch, &sample, cfg, meta](const Vector& flat) {
        const ModelParams params = unflatten_params(dims, flat);
        const EncoderCache cache =
            encode_one(params.encoders[cfg.m_star], train_batch.inputs[cfg.m_star]);
        const CollapseValue cv = collapse_loss(cache.z, meta.eta, sample);
        return encoder_grad_to_flat(params, train_batch, cfg.m_star, cv.grad_z);
    };
    p.stable_rank_grad = [dims, &train_batch, &sample, cfg, meta](const Vector& flat) {
        const ModelParams params = unflatten_params(dims, flat);
        const EncoderCache cache =
            encode_one(params.encoders[cfg.m_star], train_batch.inputs[cfg.m_star]);
        const CollapseValue cv = collapse_loss(cache.z, meta.eta, sample);
        return encoder_grad_to_flat(params, train_batch, cfg.m_star, cv.grad_z_stable_rank);
    };

    p.gated_step = [dims, &train_batch, &sample, train_w, cfg](const Vector& flat,
                                                               double kappa) {
        const ModelParams params = unflatten_params(dims, flat);
        ModeSpec mode;
        mode.kind = TrainMode::Sdl;
        mode.m_star = cfg.m_star;
        mode.collapse = &sample;
        Vector g = flatten_params(compute_losses(params, train_batch, mode, train_w).grads);

        const auto [off, len] = encoder_span(dims, cfg.m_star);
        Vector block(len);
        for (std::size_t i = 0; i < len; ++i) block[i] = g[off + i];
        CurvatureQuery q;  // kappa path only varies rho; keep the open branch
        q.lambda_min = 0.0;
        const GateDecision d = gate(q, cfg.gate_tau, std::max(kappa, 1e-12));
        const GatedGradient gg = apply_gated_mask(block, d, cfg.mask_seed);
        for (std::size_t i = 0; i < len; ++i) g[off + i] = gg.g_tilde[i];

        Vector out = flat;
        g *= cfg.inner_lr;
        out -= g;
        return out;
    };
    return p;
}

}  // namespace modalimmune
