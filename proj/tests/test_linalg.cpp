#include <catch2/catch_amalgamated.hpp>

#include "modalimmune/linalg.hpp"
#include "support/oracles.hpp"

using namespace modalimmune;

namespace {

double reconstruction_residual(const Matrix& a, const SymEig& eig) {
    const std::size_t n = a.rows();
    Matrix lam(n, n);
    for (std::size_t i = 0; i < n; ++i) lam(i, i) = eig.eigenvalues[i];
    Matrix rec = matmul(matmul(eig.eigenvectors, lam), eig.eigenvectors.transposed());
    rec -= a;
    return rec.frobenius_norm();
}

}  // namespace

TEST_CASE("sym_eig identity") {
    const Matrix a = Matrix::identity(3);
    SymEig eig = sym_eig(a);
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(eig.eigenvalues[i] == Catch::Approx(1.0).margin(1e-14));
    REQUIRE(reconstruction_residual(a, eig) <= 1e-10);
}

TEST_CASE("sym_eig diagonal ordering") {
    const Matrix a = Matrix::diagonal({1.0, 2.0});
    SymEig eig = sym_eig(a);
    REQUIRE(eig.eigenvalues[0] == Catch::Approx(2.0).margin(1e-14));
    REQUIRE(eig.eigenvalues[1] == Catch::Approx(1.0).margin(1e-14));
    // columns are axis permutations up to sign
    REQUIRE(std::abs(eig.eigenvectors(1, 0)) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(std::abs(eig.eigenvectors(0, 1)) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("sym_eig random 8x8 vs independent QR iteration") {
    Rng rng(42);
    for (int rep = 0; rep < 5; ++rep) {
        const Matrix a = oracles::random_symmetric(8, rng);
        SymEig eig = sym_eig(a);
        const auto oracle = oracles::qr_iteration_eigenvalues(a);
        for (std::size_t i = 0; i < 8; ++i)
            REQUIRE(eig.eigenvalues[i] == Catch::Approx(oracle[i]).margin(1e-9));
        REQUIRE(reconstruction_residual(a, eig) <= 1e-10 * a.frobenius_norm());
        // orthonormality
        Matrix utu = gram(eig.eigenvectors);
        utu -= Matrix::identity(8);
        REQUIRE(utu.frobenius_norm() <= 1e-10);
    }
}

TEST_CASE("sym_eig rejects bad input") {
    REQUIRE_THROWS_AS(sym_eig(Matrix(2, 3)), StructuralError);
    Matrix asym(2, 2);
    asym(0, 1) = 1.0;
    asym(1, 0) = 0.5;
    REQUIRE_THROWS_AS(sym_eig(asym), StructuralError);
}

TEST_CASE("singular_values zero and diagonal") {
    const Matrix zero(3, 2);
    const Vector sv = singular_values(zero);
    for (std::size_t i = 0; i < sv.dim(); ++i) REQUIRE(sv[i] == 0.0);

    const Matrix d = Matrix::diagonal({3.0, 4.0});
    const Vector sv2 = singular_values(d);
    REQUIRE(sv2[0] == Catch::Approx(4.0).margin(1e-12));
    REQUIRE(sv2[1] == Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("singular_values match sqrt eigenvalues of A^T A") {
    Rng rng(7);
    const Matrix a = oracles::random_matrix(5, 3, rng);
    const Vector sv = singular_values(a);
    SymEig eig = sym_eig(gram(a));
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(sv[i] == Catch::Approx(std::sqrt(std::max(0.0, eig.eigenvalues[i])))
                             .margin(1e-9));
}

TEST_CASE("singular values of A equal singular values of A^T") {
    Rng rng(11);
    for (int rep = 0; rep < 8; ++rep) {
        const Matrix a = oracles::random_matrix(2 + rng.uniform_int(5), 2 + rng.uniform_int(5), rng);
        const Vector s1 = singular_values(a);
        const Vector s2 = singular_values(a.transposed());
        const std::size_t k = std::min(s1.dim(), s2.dim());
        for (std::size_t i = 0; i < k; ++i)
            REQUIRE(s1[i] == Catch::Approx(s2[i]).margin(1e-9));
    }
}

TEST_CASE("nuclear norm dominates operator norm") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        const Matrix a = oracles::random_matrix(4, 6, rng);
        REQUIRE(nuclear_norm(a) >= operator_norm(a) - 1e-12);
    }
}

TEST_CASE("op_norm_power_iter identity converges in one step") {
    const Matrix eye = Matrix::identity(5);
    REQUIRE(op_norm_power_iter(eye, 1, 123) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("op_norm_power_iter on diag(6.1, 1.0)") {
    const Matrix a = Matrix::diagonal({6.1, 1.0});
    REQUIRE(op_norm_power_iter(a, 50, 5) == Catch::Approx(6.1).margin(1e-6));
}

TEST_CASE("op_norm_power_iter agrees with full SVD on random PSD") {
    Rng rng(21);
    const Matrix a = oracles::random_psd(10, rng);
    const double est = op_norm_power_iter(a, 200, 9);
    REQUIRE(est == Catch::Approx(singular_values(a)[0]).margin(1e-6));
}

TEST_CASE("power iteration estimate is monotone and a lower bound") {
    Rng rng(33);
    const Matrix a = oracles::random_matrix(6, 6, rng);
    const double truth = singular_values(a)[0];
    double prev = 0.0;
    for (std::size_t iters : {1u, 2u, 5u, 10u, 25u, 60u}) {
        const double est = op_norm_power_iter(a, iters, 77);
        REQUIRE(est >= prev - 1e-12);
        REQUIRE(est <= truth + 1e-9);
        prev = est;
    }
}

TEST_CASE("solve_dense basic cases") {
    const Vector b({1.0, 2.0, 3.0});
    const Vector x = solve_dense(Matrix::identity(3), b);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(x[i] == Catch::Approx(b[i]));

    const Vector x2 = solve_dense(Matrix::diagonal({2.0, 4.0}), Vector({2.0, 4.0}));
    REQUIRE(x2[0] == Catch::Approx(1.0));
    REQUIRE(x2[1] == Catch::Approx(1.0));
}

TEST_CASE("solve_dense random well-conditioned residual") {
    Rng rng(55);
    Matrix a = oracles::random_matrix(6, 6, rng);
    for (std::size_t i = 0; i < 6; ++i) a(i, i) += 4.0;  // keep well-conditioned
    const Vector b = oracles::random_matrix(6, 1, rng).row(0);
    Vector b6(6);
    for (std::size_t i = 0; i < 6; ++i) b6[i] = rng.normal();
    const Vector x = solve_dense(a, b6);
    Vector r = matvec(a, x);
    r -= b6;
    REQUIRE(r.norm2() <= 1e-9 * b6.norm2());
}

TEST_CASE("solve_dense rejects singular matrices") {
    Matrix s(2, 2);
    s(0, 0) = 1.0;
    s(0, 1) = 2.0;
    s(1, 0) = 2.0;
    s(1, 1) = 4.0;
    REQUIRE_THROWS_AS(solve_dense(s, Vector({1.0, 1.0})), NumericalError);
}

TEST_CASE("matrix constructor validates") {
    REQUIRE_THROWS_AS(Matrix(2, 2, {1.0, 2.0, 3.0}), StructuralError);
    REQUIRE_THROWS_AS(Matrix(1, 2, {1.0, std::nan("")}), StructuralError);
}
