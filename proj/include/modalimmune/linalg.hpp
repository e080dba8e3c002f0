#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace modalimmune {

class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
    explicit Vector(std::vector<double> entries) : data_(std::move(entries)) {
        for (double x : data_)
            if (!std::isfinite(x)) throw StructuralError("Vector: non-finite entry");
    }
    Vector(std::initializer_list<double> entries)
        : Vector(std::vector<double>(entries)) {}

    std::size_t dim() const { return data_.size(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    double norm2() const {
        double s = 0.0;
        for (double x : data_) s += x * x;
        return std::sqrt(s);
    }

    double dot(const Vector& o) const {
        if (o.dim() != dim()) throw StructuralError("Vector::dot: dimension mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * o[i];
        return s;
    }

    Vector& operator+=(const Vector& o) {
        if (o.dim() != dim()) throw StructuralError("Vector::+=: dimension mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o[i];
        return *this;
    }

    Vector& operator-=(const Vector& o) {
        if (o.dim() != dim()) throw StructuralError("Vector::-=: dimension mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o[i];
        return *this;
    }

    Vector& operator*=(double c) {
        for (double& x : data_) x *= c;
        return *this;
    }

    friend Vector operator+(Vector a, const Vector& b) { return a += b; }
    friend Vector operator-(Vector a, const Vector& b) { return a -= b; }
    friend Vector operator*(double c, Vector v) { return v *= c; }

private:
    std::vector<double> data_;
};

// Dense row-major matrix of 64-bit floats.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries)
        : rows_(rows), cols_(cols), data_(std::move(entries)) {
        if (data_.size() != rows_ * cols_)
            throw StructuralError("Matrix: entry count != rows*cols");
        for (double x : data_)
            if (!std::isfinite(x)) throw StructuralError("Matrix: non-finite entry");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return rows_ == 0 || cols_ == 0; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(const std::vector<double>& d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    Vector row(std::size_t i) const {
        Vector v(cols_);
        for (std::size_t j = 0; j < cols_; ++j) v[j] = (*this)(i, j);
        return v;
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double x : data_) s += x * x;
        return std::sqrt(s);
    }

    Matrix& operator+=(const Matrix& o) {
        if (o.rows_ != rows_ || o.cols_ != cols_)
            throw StructuralError("Matrix::+=: shape mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Matrix& operator-=(const Matrix& o) {
        if (o.rows_ != rows_ || o.cols_ != cols_)
            throw StructuralError("Matrix::-=: shape mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }

    Matrix& operator*=(double c) {
        for (double& x : data_) x *= c;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(double c, Matrix m) { return m *= c; }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw StructuralError("matmul: inner dimension mismatch");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

// a^T * a, the Gram matrix
inline Matrix gram(const Matrix& a) {
    Matrix g(a.cols(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            for (std::size_t q = 0; q < a.cols(); ++q) g(p, q) += aip * a(i, q);
        }
    return g;
}

inline Vector matvec(const Matrix& a, const Vector& x) {
    if (a.cols() != x.dim()) throw StructuralError("matvec: dimension mismatch");
    Vector y(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

inline bool is_symmetric(const Matrix& a, double tol = 1e-12) {
    if (a.rows() != a.cols()) return false;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j)
            if (std::abs(a(i, j) - a(j, i)) > tol) return false;
    return true;
}

struct SymEig {
    Vector eigenvalues;   // descending
    Matrix eigenvectors;  // orthonormal columns, same order
};

// Symmetric eigendecomposition via cyclic Jacobi rotations. Deterministic,
// robust at the small sizes used here. Off-diagonal Frobenius tolerance
// 1e-12 relative to the input scale, 100-sweep cap.
inline SymEig sym_eig(const Matrix& a) {
    if (a.rows() != a.cols()) throw StructuralError("sym_eig: matrix not square");
    if (a.empty()) throw StructuralError("sym_eig: empty matrix");
    if (!is_symmetric(a, 1e-12))
        throw StructuralError("sym_eig: matrix not symmetric within 1e-12");

    const std::size_t n = a.rows();
    Matrix m = a;
    Matrix u = Matrix::identity(n);
    const double scale = std::max(a.frobenius_norm(), 1e-300);
    const double tol = 1e-12 * scale;

    auto off_norm = [&]() {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * m(i, j) * m(i, j);
        return std::sqrt(s);
    };

    const int max_sweeps = 100;
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        if (off_norm() <= tol) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m(p, q);
                if (std::abs(apq) <= tol / (n * n)) continue;
                const double app = m(p, p), aqq = m(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double mkp = m(k, p), mkq = m(k, q);
                    m(k, p) = c * mkp - s * mkq;
                    m(k, q) = s * mkp + c * mkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double mpk = m(p, k), mqk = m(q, k);
                    m(p, k) = c * mpk - s * mqk;
                    m(q, k) = s * mpk + c * mqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double ukp = u(k, p), ukq = u(k, q);
                    u(k, p) = c * ukp - s * ukq;
                    u(k, q) = s * ukp + c * ukq;
                }
            }
        }
    }
    if (sweep == max_sweeps && off_norm() > tol)
        throw NumericalError("sym_eig: no convergence after 100 sweeps, off-diagonal residual " +
                             std::to_string(off_norm()));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return m(i, i) > m(j, j); });

    SymEig out;
    out.eigenvalues = Vector(n);
    out.eigenvectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.eigenvalues[k] = m(order[k], order[k]);
        for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, k) = u(r, order[k]);
    }
    return out;
}

// Singular values of a general matrix, non-negative descending.
inline Vector singular_values(const Matrix& a) {
    if (a.empty()) throw StructuralError("singular_values: empty matrix");
    // work with the smaller Gram side
    const bool tall = a.rows() >= a.cols();
    const Matrix g = tall ? gram(a) : gram(a.transposed());
    SymEig eig = sym_eig(g);
    Vector sv(g.rows());
    for (std::size_t i = 0; i < sv.dim(); ++i)
        sv[i] = std::sqrt(std::max(0.0, eig.eigenvalues[i]));
    return sv;
}

inline double operator_norm(const Matrix& a) { return singular_values(a)[0]; }

inline double nuclear_norm(const Matrix& a) {
    const Vector sv = singular_values(a);
    double s = 0.0;
    for (std::size_t i = 0; i < sv.dim(); ++i) s += sv[i];
    return s;
}

// Power iteration estimate of the largest |eigenvalue| of a symmetric operator
// given as a matvec closure. The estimate is the final |Rayleigh quotient|;
// on PSD operators it is monotone non-decreasing in the iteration count and
// never exceeds the true value.
inline double operator_power_iter(const std::function<Vector(const Vector&)>& apply,
                                  std::size_t dim, std::size_t max_iters,
                                  std::uint64_t seed) {
    if (max_iters < 1) throw StructuralError("operator_power_iter: max_iters < 1");
    if (dim == 0) throw StructuralError("operator_power_iter: zero dimension");
    Rng rng(seed);
    Vector x(dim);
    for (std::size_t i = 0; i < dim; ++i) x[i] = rng.normal();
    double xn = x.norm2();
    if (xn == 0.0) x[0] = 1.0, xn = 1.0;
    x *= 1.0 / xn;

    double rayleigh = 0.0;
    for (std::size_t it = 0; it < max_iters; ++it) {
        Vector y = apply(x);
        for (std::size_t i = 0; i < y.dim(); ++i)
            if (!std::isfinite(y[i]))
                throw NumericalError("operator_power_iter: non-finite matvec output");
        rayleigh = x.dot(y);
        const double yn = y.norm2();
        if (yn == 0.0) return 0.0;  // x in the kernel; operator effectively zero there
        y *= 1.0 / yn;
        x = y;
    }
    return std::abs(rayleigh);
}

// Operator (spectral) norm estimate of a general matrix by power iteration on
// A^T A. Lower bound on the true norm; within 1% for gapped spectra at ~50
// iterations.
inline double op_norm_power_iter(const Matrix& a, std::size_t max_iters, std::uint64_t seed) {
    if (a.empty()) throw StructuralError("op_norm_power_iter: empty matrix");
    if (max_iters < 1) throw StructuralError("op_norm_power_iter: max_iters < 1");
    auto apply = [&a](const Vector& v) {
        // A^T (A v)
        Vector av = matvec(a, v);
        Vector out(a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
            const double avi = av[i];
            if (avi == 0.0) continue;
            for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a(i, j) * avi;
        }
        return out;
    };
    const double lam = operator_power_iter(apply, a.cols(), max_iters, seed);
    return std::sqrt(std::max(0.0, lam));
}

// Direct dense solve (Gaussian elimination, partial pivoting). Oracle-grade
// for the small systems used in certificate tests.
inline Vector solve_dense(const Matrix& a, const Vector& b) {
    if (a.rows() != a.cols()) throw StructuralError("solve_dense: matrix not square");
    if (a.rows() != b.dim()) throw StructuralError("solve_dense: rhs dimension mismatch");
    const std::size_t n = a.rows();
    Matrix m = a;
    Vector x = b;

    double max_abs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) max_abs = std::max(max_abs, std::abs(m(i, j)));
    if (max_abs == 0.0) throw NumericalError("solve_dense: zero matrix");

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(m(r, col)) > std::abs(m(piv, col))) piv = r;
        if (std::abs(m(piv, col)) < 1e-13 * max_abs)
            throw NumericalError("solve_dense: singular or ill-conditioned matrix");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(m(col, j), m(piv, j));
            std::swap(x[col], x[piv]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = m(r, col) / m(col, col);
            if (f == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) m(r, j) -= f * m(col, j);
            x[r] -= f * x[col];
        }
    }
    for (std::size_t i = n; i-- > 0;) {
        double s = x[i];
        for (std::size_t j = i + 1; j < n; ++j) s -= m(i, j) * x[j];
        x[i] = s / m(i, i);
    }

    Vector residual = matvec(a, x);
    residual -= b;
    if (residual.norm2() > 1e-9 * std::max(b.norm2(), 1e-300) + 1e-14)
        throw NumericalError("solve_dense: residual exceeds tolerance (condition too high)");
    return x;
}

}  // namespace modalimmune
