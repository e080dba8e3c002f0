#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "linalg.hpp"

namespace modalimmune {

// ----- curvature-gated counter-gradient ---------------------------------------

enum class CurvatureOperator { EmpiricalFisher, HessianFd };

struct CurvatureQuery {
    CurvatureOperator operator_kind = CurvatureOperator::HessianFd;
    double lambda_min = 0.0;
    double lambda_max = 0.0;
    std::size_t iterations_used = 0;  // per phase
};

// Curvature threshold tied to the instantaneous learning rate: tau = 0.01/lr.
inline double curvature_threshold(double lr) {
    if (!(lr > 0.0)) throw StructuralError("curvature_threshold: lr must be > 0");
    return 0.01 / lr;
}

using Matvec = std::function<Vector(const Vector&)>;

// Extremal eigenvalue estimates of a symmetric operator given as a matvec.
// lambda_max comes from power iteration with a positivity shift; lambda_min
// from power iteration on (c I - A) with c = 1.1 * lambda_max (clamped at 0
// for negative-definite operators).
inline CurvatureQuery extremal_eigs(const Matvec& apply, std::size_t dim,
                                    CurvatureOperator kind, std::size_t cap,
                                    std::uint64_t seed) {
    if (dim == 0) throw StructuralError("extremal_eigs: zero dimension");
    if (cap < 1) throw StructuralError("extremal_eigs: cap < 1");

    CurvatureQuery q;
    q.operator_kind = kind;
    q.iterations_used = cap;

    // dominant magnitude, for the shift
    const double radius = operator_power_iter(apply, dim, cap, seed);
    const double shift = 1.1 * radius + 1e-12;

    // lambda_max(A) = dominant(A + shift I) - shift
    auto shifted_up = [&](const Vector& v) {
        Vector out = apply(v);
        for (std::size_t i = 0; i < dim; ++i) out[i] += shift * v[i];
        return out;
    };
    const double lam_max = operator_power_iter(shifted_up, dim, cap, seed + 1) - shift;
    q.lambda_max = lam_max;

    // lambda_min(A) = c - dominant(c I - A), c >= lambda_max keeps cI - A PSD
    const double c = std::max(1.1 * lam_max, 0.0);
    auto shifted_down = [&](const Vector& v) {
        Vector out = apply(v);
        for (std::size_t i = 0; i < dim; ++i) out[i] = c * v[i] - out[i];
        return out;
    };
    q.lambda_min = c - operator_power_iter(shifted_down, dim, cap, seed + 2);
    if (q.lambda_min > q.lambda_max) q.lambda_min = q.lambda_max;
    return q;
}

// Empirical Fisher matvec from per-sample gradients: F v = (1/n) sum g_i <g_i, v>.
inline Matvec fisher_matvec(std::vector<Vector> per_sample_grads) {
    return [grads = std::move(per_sample_grads)](const Vector& v) {
        Vector out(v.dim());
        for (const auto& g : grads) {
            const double c = g.dot(v) / static_cast<double>(grads.size());
            for (std::size_t i = 0; i < v.dim(); ++i) out[i] += c * g[i];
        }
        return out;
    };
}

// Finite-difference Hessian-vector product of a gradient closure:
//   H v ~ (grad(theta + eps v) - grad(theta - eps v)) / (2 eps),
// eps = 1e-4 (1 + ||theta||) / ||v||.
inline Matvec hessian_fd_matvec(std::function<Vector(const Vector&)> grad_fn, Vector theta) {
    return [grad_fn = std::move(grad_fn), theta = std::move(theta)](const Vector& v) {
        const double vn = v.norm2();
        if (vn < 1e-300) throw StructuralError("hessian_fd_matvec: zero direction");
        const double eps = 1e-4 * (1.0 + theta.norm2()) / vn;
        Vector tp = theta, tm = theta;
        for (std::size_t i = 0; i < theta.dim(); ++i) {
            tp[i] += eps * v[i];
            tm[i] -= eps * v[i];
        }
        Vector gp = grad_fn(tp);
        const Vector gm = grad_fn(tm);
        gp -= gm;
        gp *= 1.0 / (2.0 * eps);
        for (std::size_t i = 0; i < gp.dim(); ++i)
            if (!std::isfinite(gp[i]))
                throw NumericalError("hessian_fd_matvec: non-finite gradient");
        return gp;
    };
}

struct GateDecision {
    double tau = 0.0;
    double rho = 0.0;  // 0 (frozen) or -kappa
    double kappa = 0.0;
    bool frozen = false;
};

// The piecewise gate: rho = 0 when lambda_min < -tau (freeze), -kappa
// otherwise. The boundary lambda_min == -tau takes the -kappa branch.
inline GateDecision gate(const CurvatureQuery& query, double tau, double kappa) {
    if (!(tau > 0.0)) throw StructuralError("gate: tau must be > 0");
    if (!(kappa > 0.0)) throw StructuralError("gate: kappa must be > 0");
    GateDecision d;
    d.tau = tau;
    d.kappa = kappa;
    d.frozen = query.lambda_min < -tau;
    d.rho = d.frozen ? 0.0 : -kappa;
    return d;
}

enum class MaskFamily { HaarRotation, ConstantIdentity };

// Random symmetric mask M = kappa Q D Q^T with Q a random rotation (QR of a
// Gaussian matrix, sign-fixed) and D diagonal uniform on [-1, 1]; operator
// norm is kappa * max|D| <= kappa.
struct RandomMask {
    Matrix q;            // orthogonal
    std::vector<double> d;
    double kappa = 0.0;

    Vector apply(const Vector& v) const {
        const std::size_t n = d.size();
        Vector t(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t r = 0; r < n; ++r) s += q(r, i) * v[r];
            t[i] = s * d[i] * kappa;
        }
        Vector out(n);
        for (std::size_t r = 0; r < n; ++r) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += q(r, i) * t[i];
            out[r] = s;
        }
        return out;
    }

    double operator_norm() const {
        double mx = 0.0;
        for (double x : d) mx = std::max(mx, std::abs(x));
        return kappa * mx;
    }
};

inline RandomMask draw_mask(std::size_t dim, double kappa, MaskFamily family,
                            std::uint64_t seed) {
    RandomMask m;
    m.kappa = kappa;
    m.d.resize(dim);
    if (family == MaskFamily::ConstantIdentity) {
        m.q = Matrix::identity(dim);
        for (auto& x : m.d) x = 1.0;
        return m;
    }
    Rng rng(seed);
    // QR of a Gaussian matrix via modified Gram-Schmidt, diag(R) sign fix
    Matrix a(dim, dim);
    for (double& x : a.data()) x = rng.normal();
    m.q = Matrix(dim, dim);
    for (std::size_t j = 0; j < dim; ++j) {
        Vector v(dim);
        for (std::size_t i = 0; i < dim; ++i) v[i] = a(i, j);
        for (std::size_t k = 0; k < j; ++k) {
            double dot = 0.0;
            for (std::size_t i = 0; i < dim; ++i) dot += m.q(i, k) * v[i];
            for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * m.q(i, k);
        }
        double nv = v.norm2();
        if (nv < 1e-12) {
            v = Vector(dim);
            v[j] = 1.0;
            nv = 1.0;
        }
        const double sign = v[j] >= 0.0 ? 1.0 : -1.0;  // deterministic sign fix
        for (std::size_t i = 0; i < dim; ++i) m.q(i, j) = sign * v[i] / nv;
    }
    for (auto& x : m.d) x = rng.uniform(-1.0, 1.0);
    return m;
}

struct GatedGradient {
    Vector g0;
    std::uint64_t mask_seed = 0;
    Vector g_tilde;
};

// Gated estimator for the attacked encoder block: zero when frozen, otherwise
// (I + rho M) g0 with a freshly drawn mask.
inline GatedGradient apply_gated_mask(const Vector& g0, const GateDecision& decision,
                                      std::uint64_t mask_seed,
                                      MaskFamily family = MaskFamily::HaarRotation) {
    GatedGradient out;
    out.g0 = g0;
    out.mask_seed = mask_seed;
    if (decision.frozen) {
        out.g_tilde = Vector(g0.dim());
        return out;
    }
    const RandomMask m = draw_mask(g0.dim(), decision.kappa, family, mask_seed);
    Vector mg = m.apply(g0);  // M g0 with ||M||_2 <= kappa
    mg *= decision.rho;
    out.g_tilde = g0;
    out.g_tilde += mg;
    return out;
}

// ----- Monte-Carlo validation of the bias/variance bounds ---------------------

struct GradientDistribution {
    Vector mean;
    Vector stddev;  // per-coordinate, independent Gaussian
};

struct BiasVarianceReport {
    double empirical_bias = 0.0;
    double empirical_trace_variance = 0.0;
    double bias_bound = 0.0;       // kappa * G * tau_m
    double variance_bound = 0.0;   // (1 + kappa^2)^2 * V
    double bias_standard_error = 0.0;
    double variance_standard_error = 0.0;
    double measured_tau_m = 0.0;   // mean ||M||_2 over draws
    std::size_t draws = 0;
};

// Draw g0 ~ N(mean, diag(stddev^2)) and a fresh mask per draw, apply the
// rho = -kappa gate, and compare empirical bias / trace variance against the
// configured bounds.
inline BiasVarianceReport bias_variance_validator(const GradientDistribution& dist,
                                                  double kappa, double tau_m, double g_bound,
                                                  double v_bound, MaskFamily family,
                                                  std::size_t draws, std::uint64_t seed) {
    if (draws < 1) throw StructuralError("bias_variance_validator: draws < 1");
    const std::size_t dim = dist.mean.dim();
    Rng rng(seed);

    Vector sum(dim);
    Vector sum_sq(dim);
    double tau_sum = 0.0;
    // second pass accumulators for the bias standard error
    double norm_sq_sum = 0.0;

    for (std::size_t t = 0; t < draws; ++t) {
        Vector g(dim);
        for (std::size_t i = 0; i < dim; ++i) g[i] = dist.mean[i] + dist.stddev[i] * rng.normal();
        Vector gt;
        if (kappa == 0.0) {
            gt = g;
        } else {
            const RandomMask m = draw_mask(dim, kappa, family, rng.next_u64());
            tau_sum += m.operator_norm();
            Vector mg = m.apply(g);  // M g with ||M||_2 <= kappa
            mg *= -kappa;            // rho = -kappa
            gt = g;
            gt += mg;
        }
        for (std::size_t i = 0; i < dim; ++i) {
            sum[i] += gt[i];
            sum_sq[i] += gt[i] * gt[i];
        }
        norm_sq_sum += gt.dot(gt);
    }

    BiasVarianceReport rep;
    rep.draws = draws;
    rep.measured_tau_m = kappa == 0.0 ? 0.0 : tau_sum / static_cast<double>(draws);

    Vector mean_emp(dim);
    for (std::size_t i = 0; i < dim; ++i) mean_emp[i] = sum[i] / static_cast<double>(draws);
    Vector bias_vec = mean_emp;
    bias_vec -= dist.mean;
    rep.empirical_bias = bias_vec.norm2();

    double trace_var = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        const double m1 = mean_emp[i];
        trace_var += sum_sq[i] / static_cast<double>(draws) - m1 * m1;
    }
    rep.empirical_trace_variance = trace_var;

    rep.bias_bound = kappa * g_bound * tau_m;
    rep.variance_bound = (1.0 + kappa * kappa) * (1.0 + kappa * kappa) * v_bound;

    // rough sampling errors: ||mean|| error ~ sqrt(trace_var/draws); trace
    // variance error ~ trace_var * sqrt(2/draws)
    rep.bias_standard_error = std::sqrt(std::max(trace_var, 0.0) / static_cast<double>(draws));
    rep.variance_standard_error = trace_var * std::sqrt(2.0 / static_cast<double>(draws));
    return rep;
}

}  // namespace modalimmune
