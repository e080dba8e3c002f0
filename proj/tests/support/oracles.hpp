#pragma once

// Test-only oracles, independent of the library implementation paths they
// check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "modalimmune/linalg.hpp"
#include "modalimmune/rng.hpp"

namespace oracles {

using modalimmune::Matrix;
using modalimmune::Rng;
using modalimmune::Vector;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
    return m;
}

inline Matrix random_symmetric(std::size_t n, Rng& rng, double scale = 1.0) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const double v = scale * rng.normal();
            m(i, j) = v;
            m(j, i) = v;
        }
    return m;
}

inline Matrix random_psd(std::size_t n, Rng& rng, double scale = 1.0) {
    const Matrix a = random_matrix(n + 2, n, rng, scale);
    Matrix g = modalimmune::gram(a);
    g *= 1.0 / static_cast<double>(n + 2);
    return g;
}

// Plain unshifted QR iteration on a symmetric matrix (Gram-Schmidt QR).
// Slow but entirely independent of the Jacobi path; returns eigenvalues in
// descending order.
inline std::vector<double> qr_iteration_eigenvalues(const Matrix& a, int iters = 2000) {
    const std::size_t n = a.rows();
    Matrix m = a;
    for (int it = 0; it < iters; ++it) {
        // QR via modified Gram-Schmidt on columns of m
        Matrix q(n, n), r(n, n);
        for (std::size_t j = 0; j < n; ++j) {
            Vector v(n);
            for (std::size_t i = 0; i < n; ++i) v[i] = m(i, j);
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += q(i, k) * v[i];
                r(k, j) = dot;
                for (std::size_t i = 0; i < n; ++i) v[i] -= dot * q(i, k);
            }
            const double nv = v.norm2();
            r(j, j) = nv;
            if (nv > 0.0)
                for (std::size_t i = 0; i < n; ++i) q(i, j) = v[i] / nv;
            else
                q(j, j) = 1.0;
        }
        m = modalimmune::matmul(r, q);
        // converged when off-diagonal mass is negligible
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j) off += m(i, j) * m(i, j);
        if (std::sqrt(off) < 1e-12 * std::max(1.0, a.frobenius_norm())) break;
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = m(i, i);
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

// Central finite difference of a scalar function of a vector.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                          double step = 1e-5) {
    Vector g(x.dim());
    Vector xp = x;
    for (std::size_t i = 0; i < x.dim(); ++i) {
        const double orig = x[i];
        xp[i] = orig + step;
        const double fp = f(xp);
        xp[i] = orig - step;
        const double fm = f(xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

inline double rel_error(const Vector& a, const Vector& b) {
    Vector d = a;
    d -= b;
    return d.norm2() / std::max(b.norm2(), 1e-12);
}

}  // namespace oracles
