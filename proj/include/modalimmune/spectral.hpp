#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "linalg.hpp"

namespace modalimmune {

// ----- spectrum-adaptive collapse machinery --------------------------------

// Largest singular value of the n x d batch embedding matrix.
inline double spectral_radius(const Matrix& z) {
    if (z.empty()) throw StructuralError("spectral_radius: empty batch");
    return singular_values(z)[0];
}

// Noise scale tied to embedding magnitude: sigma_B = rho_B / sqrt(d).
inline double noise_scale(double rho_b, std::size_t d) {
    if (rho_b < 0.0) throw StructuralError("noise_scale: negative spectral radius");
    if (d < 1) throw StructuralError("noise_scale: d < 1");
    return rho_b / std::sqrt(static_cast<double>(d));
}

// Uncentered batch second-moment matrix (1/n) Z^T Z.
inline Matrix batch_covariance(const Matrix& z) {
    if (z.empty()) throw StructuralError("batch_covariance: empty batch");
    Matrix c = gram(z);
    c *= 1.0 / static_cast<double>(z.rows());
    return c;
}

// Noise draw for one SDL batch: rows i.i.d. N(0, sigma_B^2 I_d), sigma_B
// derived from the batch spectral radius. Drawn once and held fixed for the
// whole forward/backward of that batch.
struct CollapseSample {
    Matrix epsilon;  // n x d
    double sigma_b = 0.0;
    double rho_b = 0.0;
    std::uint64_t seed = 0;
};

inline CollapseSample make_collapse_sample(const Matrix& z, std::uint64_t seed) {
    CollapseSample s;
    s.rho_b = spectral_radius(z);
    s.sigma_b = noise_scale(s.rho_b, z.cols());
    s.seed = seed;
    s.epsilon = Matrix(z.rows(), z.cols());
    Rng rng(seed);
    for (std::size_t i = 0; i < z.rows(); ++i)
        for (std::size_t j = 0; j < z.cols(); ++j) s.epsilon(i, j) = rng.normal(0.0, s.sigma_b);
    return s;
}

// Nuclear over operator norm; for PSD inputs equals trace / lambda_max.
inline double stable_rank(const Matrix& cov) {
    if (cov.rows() != cov.cols() || cov.empty())
        throw StructuralError("stable_rank: covariance must be square and non-empty");
    SymEig eig = sym_eig(cov);
    const double lam_max = eig.eigenvalues[0];
    const double lam_min = eig.eigenvalues[eig.eigenvalues.dim() - 1];
    if (lam_min < -1e-10 * std::max(1.0, std::abs(lam_max)))
        throw StructuralError("stable_rank: matrix not PSD within tolerance");
    if (lam_max <= 0.0)
        throw DegenerateInputError("stable_rank: zero covariance (undefined ratio)");
    double trace = 0.0;
    for (std::size_t i = 0; i < eig.eigenvalues.dim(); ++i)
        trace += std::max(0.0, eig.eigenvalues[i]);
    return trace / lam_max;
}

// Gradient of stable_rank(Cov) w.r.t. Cov for PSD Cov:
//   (lam_max I - trace * u1 u1^T) / lam_max^2
// with u1 the top eigenvector. When the top eigenvalue is (near-)degenerate
// the first eigenvector of the deterministic solver defines the subgradient.
inline Matrix stable_rank_grad_cov(const Matrix& cov) {
    SymEig eig = sym_eig(cov);
    const double lam_max = eig.eigenvalues[0];
    if (lam_max <= 0.0)
        throw DegenerateInputError("stable_rank_grad_cov: zero covariance");
    double trace = 0.0;
    for (std::size_t i = 0; i < eig.eigenvalues.dim(); ++i) trace += eig.eigenvalues[i];
    const std::size_t d = cov.rows();
    Matrix g(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        const double u1i = eig.eigenvectors(i, 0);
        for (std::size_t j = 0; j < d; ++j)
            g(i, j) = (-trace * u1i * eig.eigenvectors(j, 0)) / (lam_max * lam_max);
        g(i, i) += 1.0 / lam_max;
    }
    return g;
}

struct CollapseValue {
    double loss = 0.0;
    double mse_term = 0.0;
    double stable_rank_term = 0.0;  // the raw stable-rank value
    Matrix grad_z;                  // d(mse + eta*sr)/dZ
    Matrix grad_z_stable_rank;      // d(sr)/dZ alone, for meta-gradient contractions
};

// Collapse regularizer on a batch:
//   (1/n) sum_i ||z_i - eps_i||^2 + eta * stable_rank(Cov_B)
// with the analytic gradient in Z. eps comes from the sample drawn against
// this batch.
inline CollapseValue collapse_loss(const Matrix& z, double eta, const CollapseSample& sample) {
    if (z.empty()) throw StructuralError("collapse_loss: empty batch");
    if (sample.epsilon.rows() != z.rows() || sample.epsilon.cols() != z.cols())
        throw StructuralError("collapse_loss: sample shape mismatch");
    if (eta < 0.0) throw StructuralError("collapse_loss: eta < 0");

    const std::size_t n = z.rows(), d = z.cols();
    CollapseValue out;
    out.grad_z = Matrix(n, d);
    out.grad_z_stable_rank = Matrix(n, d);

    double mse = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = z(i, j) - sample.epsilon(i, j);
            mse += diff * diff;
            out.grad_z(i, j) = 2.0 * diff / static_cast<double>(n);
        }
    mse /= static_cast<double>(n);
    out.mse_term = mse;

    const Matrix cov = batch_covariance(z);
    double sr = 0.0;
    bool have_sr = false;
    if (cov.frobenius_norm() > 0.0) {
        sr = stable_rank(cov);
        have_sr = true;
    }
    out.stable_rank_term = sr;
    out.loss = mse + eta * sr;

    if (have_sr) {
        // chain rule through Cov = (1/n) Z^T Z: dSr/dZ = (2/n) Z * dSr/dCov
        const Matrix gc = stable_rank_grad_cov(cov);
        Matrix gz = matmul(z, gc);
        gz *= 2.0 / static_cast<double>(n);
        out.grad_z_stable_rank = gz;
        gz *= eta;
        out.grad_z += gz;
    }
    return out;
}

// Shifted covariance certificate: delta = eta * nuclear/operator, shifted =
// Cov + delta I, with lambda_min(shifted) >= delta >= eta for covariance
// (PSD) inputs.
struct ShiftedCovariance {
    Matrix cov;
    double delta = 0.0;
    Matrix shifted;
};

inline ShiftedCovariance shifted_covariance(const Matrix& cov, double eta) {
    if (cov.rows() != cov.cols() || cov.empty())
        throw StructuralError("shifted_covariance: matrix must be square and non-empty");
    if (!(eta > 0.0)) throw StructuralError("shifted_covariance: eta must be > 0");
    if (cov.frobenius_norm() == 0.0)
        throw DegenerateInputError("shifted_covariance: zero matrix");

    SymEig eig = sym_eig(cov);
    double nuclear = 0.0, op = 0.0;
    for (std::size_t i = 0; i < eig.eigenvalues.dim(); ++i) {
        nuclear += std::abs(eig.eigenvalues[i]);
        op = std::max(op, std::abs(eig.eigenvalues[i]));
    }
    ShiftedCovariance out;
    out.cov = cov;
    out.delta = eta * nuclear / op;
    out.shifted = cov;
    for (std::size_t i = 0; i < cov.rows(); ++i) out.shifted(i, i) += out.delta;

    const double lam_min_shifted =
        eig.eigenvalues[eig.eigenvalues.dim() - 1] + out.delta;
    if (lam_min_shifted < out.delta - 1e-10 || out.delta < eta - 1e-10)
        throw NumericalError("shifted_covariance: certificate inequality violated "
                             "(input not PSD?)");
    return out;
}

// ----- divided-difference derivatives of spectral sums ---------------------

enum class SpectralFn { Identity, Square, Log1p };

inline double spectral_fn_value(SpectralFn f, double lam) {
    switch (f) {
        case SpectralFn::Identity: return lam;
        case SpectralFn::Square: return lam * lam;
        case SpectralFn::Log1p:
            if (lam <= -1.0)
                throw NumericalError("spectral function log1p: eigenvalue <= -1");
            return std::log1p(lam);
    }
    throw StructuralError("unknown spectral function");
}

inline double spectral_fn_deriv(SpectralFn f, double lam) {
    switch (f) {
        case SpectralFn::Identity: return 1.0;
        case SpectralFn::Square: return 2.0 * lam;
        case SpectralFn::Log1p:
            if (lam <= -1.0)
                throw NumericalError("spectral function log1p: eigenvalue <= -1");
            return 1.0 / (1.0 + lam);
    }
    throw StructuralError("unknown spectral function");
}

struct DKDerivative {
    Matrix h;         // divided-difference matrix, H_ii = f'(lambda_i)
    Matrix grad_cov;  // U diag(f'(lambda)) U^T
};

// Directional derivative of sum_i f(lambda_i(Cov)) along a symmetric E and
// the matrix-form gradient. Near-equal eigenvalues (gap < 1e-10) use f'.
inline std::pair<DKDerivative, double> dk_derivative(const Matrix& cov, SpectralFn f,
                                                     const Matrix& direction) {
    if (!is_symmetric(cov, 1e-10)) throw StructuralError("dk_derivative: cov not symmetric");
    if (direction.rows() != cov.rows() || direction.cols() != cov.cols())
        throw StructuralError("dk_derivative: direction shape mismatch");

    SymEig eig = sym_eig(cov);
    const std::size_t d = cov.rows();

    DKDerivative out;
    out.h = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double li = eig.eigenvalues[i], lj = eig.eigenvalues[j];
            if (std::abs(li - lj) < 1e-10) {
                out.h(i, j) = spectral_fn_deriv(f, li);
            } else {
                out.h(i, j) =
                    (spectral_fn_value(f, li) - spectral_fn_value(f, lj)) / (li - lj);
            }
        }
    }

    // grad = U diag(f'(lambda)) U^T
    Matrix fprime(d, d);
    for (std::size_t i = 0; i < d; ++i)
        fprime(i, i) = spectral_fn_deriv(f, eig.eigenvalues[i]);
    out.grad_cov = matmul(matmul(eig.eigenvectors, fprime), eig.eigenvectors.transposed());

    // scalar = tr(H o E') where E' = U^T E U; only the diagonal survives
    const Matrix eprime = matmul(matmul(eig.eigenvectors.transposed(), direction),
                                 eig.eigenvectors);
    double scalar = 0.0;
    for (std::size_t i = 0; i < d; ++i) scalar += out.h(i, i) * eprime(i, i);
    return {out, scalar};
}

// ----- concentration diagnostics --------------------------------------------

struct ConcentrationTrial {
    double frequency = 0.0;        // empirical P(lambda_min(Cov_B) <= lambda_min(Sigma) - t)
    double bernstein_bound = 0.0;  // d * exp(-C n t^2 / sigma_x^4)
    double population_lambda_min = 0.0;
    double t = 0.0;
    std::size_t deviations = 0;
};

// Monte-Carlo check of the minimal-eigenvalue deviation probability for
// Gaussian batches with population covariance sigma_x^2 I.
inline ConcentrationTrial covariance_concentration_trial(std::size_t d, std::size_t n,
                                                         double sigma_x, double t, double c_const,
                                                         std::size_t trials,
                                                         std::uint64_t seed) {
    if (n < 2) throw StructuralError("covariance_concentration_trial: n < 2");
    if (trials < 1) throw StructuralError("covariance_concentration_trial: trials < 1");
    if (d < 1) throw StructuralError("covariance_concentration_trial: d < 1");

    ConcentrationTrial out;
    out.population_lambda_min = sigma_x * sigma_x;
    out.t = t;
    const double threshold = out.population_lambda_min - t;

    Rng rng(seed);
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Matrix z(n, d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) z(i, j) = rng.normal(0.0, sigma_x);
        const Matrix cov = batch_covariance(z);
        SymEig eig = sym_eig(cov);
        if (eig.eigenvalues[d - 1] <= threshold) ++out.deviations;
    }
    out.frequency = static_cast<double>(out.deviations) / static_cast<double>(trials);
    out.bernstein_bound =
        static_cast<double>(d) *
        std::exp(-c_const * static_cast<double>(n) * t * t / std::pow(sigma_x, 4));
    return out;
}

}  // namespace modalimmune
