#include <catch2/catch_amalgamated.hpp>

#include "modalimmune/curvature.hpp"
#include "support/oracles.hpp"

using namespace modalimmune;

namespace {

Matvec explicit_matvec(const Matrix& a) {
    return [a](const Vector& v) { return matvec(a, v); };
}

}  // namespace

TEST_CASE("curvature_threshold") {
    REQUIRE(curvature_threshold(0.01) == Catch::Approx(1.0));
    REQUIRE(curvature_threshold(0.001) == Catch::Approx(10.0));
    REQUIRE(curvature_threshold(5e-3) == Catch::Approx(2.0));
    REQUIRE_THROWS_AS(curvature_threshold(0.0), StructuralError);
    REQUIRE_THROWS_AS(curvature_threshold(-1.0), StructuralError);
}

TEST_CASE("extremal_eigs identity") {
    const CurvatureQuery q =
        extremal_eigs(explicit_matvec(Matrix::identity(4)), 4, CurvatureOperator::HessianFd, 5, 3);
    REQUIRE(q.lambda_max == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(q.lambda_min == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("extremal_eigs explicit indefinite matrix") {
    const Matrix a = Matrix::diagonal({3.0, -2.0});
    const CurvatureQuery q =
        extremal_eigs(explicit_matvec(a), 2, CurvatureOperator::HessianFd, 50, 5);
    REQUIRE(q.lambda_max == Catch::Approx(3.0).margin(1e-6));
    REQUIRE(q.lambda_min == Catch::Approx(-2.0).margin(1e-6));

    // vs the dense eigensolver oracle on a random symmetric matrix
    Rng rng(9);
    const Matrix s = oracles::random_symmetric(6, rng);
    SymEig eig = sym_eig(s);
    const CurvatureQuery q2 =
        extremal_eigs(explicit_matvec(s), 6, CurvatureOperator::HessianFd, 80, 7);
    REQUIRE(q2.lambda_max == Catch::Approx(eig.eigenvalues[0]).margin(1e-5));
    REQUIRE(q2.lambda_min == Catch::Approx(eig.eigenvalues[5]).margin(1e-5));
}

TEST_CASE("empirical Fisher is PSD and never freezes") {
    Rng rng(11);
    std::vector<Vector> grads;
    for (int i = 0; i < 8; ++i) {
        Vector g(5);
        for (std::size_t j = 0; j < 5; ++j) g[j] = rng.normal();
        grads.push_back(g);
    }
    const CurvatureQuery q = extremal_eigs(fisher_matvec(grads), 5,
                                           CurvatureOperator::EmpiricalFisher, 30, 13);
    REQUIRE(q.lambda_min >= -1e-8);
    // regression: the gate cannot take the frozen branch on a PSD operator
    for (double tau : {0.01, 0.5, 10.0})
        REQUIRE_FALSE(gate(q, tau, 0.5).frozen);
}

TEST_CASE("gate truth table") {
    CurvatureQuery q;
    q.lambda_min = 0.3;
    GateDecision d = gate(q, 0.1, 0.5);
    REQUIRE(d.rho == -0.5);
    REQUIRE_FALSE(d.frozen);

    q.lambda_min = -0.5;
    d = gate(q, 0.1, 0.5);
    REQUIRE(d.rho == 0.0);
    REQUIRE(d.frozen);

    // boundary lands on the >= branch
    q.lambda_min = -0.1;
    d = gate(q, 0.1, 0.5);
    REQUIRE(d.rho == -0.5);
    REQUIRE_FALSE(d.frozen);

    q.lambda_min = 0.0;
    REQUIRE(gate(q, 1e-9, 1.0).rho == -1.0);
}

TEST_CASE("apply_gated_mask frozen and identity-mask cases") {
    Vector g0({1.0, -2.0, 3.0});
    GateDecision frozen;
    frozen.frozen = true;
    frozen.rho = 0.0;
    frozen.kappa = 0.5;
    frozen.tau = 1.0;
    const GatedGradient gg = apply_gated_mask(g0, frozen, 7);
    REQUIRE(gg.g_tilde.norm2() == 0.0);

    GateDecision open;
    open.frozen = false;
    open.kappa = 0.5;
    open.rho = -0.5;
    open.tau = 1.0;
    const GatedGradient gi =
        apply_gated_mask(g0, open, 7, MaskFamily::ConstantIdentity);
    // M = kappa I: g_tilde = (1 - kappa^2) g0
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(gi.g_tilde[i] == Catch::Approx((1.0 - 0.25) * g0[i]).margin(1e-12));
}

TEST_CASE("mask operator norm stays within kappa and rotation is orthogonal") {
    Rng rng(17);
    for (int rep = 0; rep < 20; ++rep) {
        const RandomMask m = draw_mask(6, 0.7, MaskFamily::HaarRotation, 100 + rep);
        REQUIRE(m.operator_norm() <= 0.7 + 1e-12);
        Matrix qtq = gram(m.q);
        qtq -= Matrix::identity(6);
        REQUIRE(qtq.frobenius_norm() <= 1e-10);
    }
}

TEST_CASE("gated mask respects g_tilde = (I + rho M) g0") {
    Rng rng(19);
    Vector g0(6);
    for (std::size_t i = 0; i < 6; ++i) g0[i] = rng.normal();
    GateDecision open;
    open.frozen = false;
    open.kappa = 0.4;
    open.rho = -0.4;
    const GatedGradient gg = apply_gated_mask(g0, open, 21);
    const RandomMask m = draw_mask(6, 0.4, MaskFamily::HaarRotation, 21);
    Vector expect = g0;
    Vector mg = m.apply(g0);
    mg *= -0.4;
    expect += mg;
    for (std::size_t i = 0; i < 6; ++i)
        REQUIRE(gg.g_tilde[i] == Catch::Approx(expect[i]).margin(1e-12));
}

TEST_CASE("bias and trace variance stay within the theorem bounds") {
    GradientDistribution dist;
    dist.mean = Vector({1.0, -0.5, 0.8, 0.3, -1.2, 0.6, 0.1, -0.9, 0.4, 0.7});
    dist.stddev = Vector(10, 2.0);
    double trace_sigma = 0.0;
    for (std::size_t i = 0; i < 10; ++i) trace_sigma += 4.0;
    double mean_norm = dist.mean.norm2();
    // configured constants: G >= E||g0||, V = trace
    const double g_bound = std::sqrt(mean_norm * mean_norm + trace_sigma);
    const double v_bound = trace_sigma;

    for (MaskFamily family : {MaskFamily::HaarRotation, MaskFamily::ConstantIdentity}) {
        for (double kappa : {0.1, 0.5, 1.0}) {
            const double tau_m = kappa;  // E||M|| <= kappa for both families
            const BiasVarianceReport rep = bias_variance_validator(
                dist, kappa, tau_m, g_bound, v_bound, family, 20000, 29);
            INFO("family " << static_cast<int>(family) << " kappa " << kappa);
            REQUIRE(rep.empirical_bias <=
                    rep.bias_bound + 3.0 * rep.bias_standard_error);
            REQUIRE(rep.empirical_trace_variance <=
                    rep.variance_bound + 3.0 * rep.variance_standard_error);
        }
    }
}

TEST_CASE("kappa = 0 reduces to the baseline estimator") {
    GradientDistribution dist;
    dist.mean = Vector({0.5, -0.5, 1.0});
    dist.stddev = Vector(3, 1.0);
    const BiasVarianceReport rep = bias_variance_validator(
        dist, 0.0, 0.0, 10.0, 3.0, MaskFamily::HaarRotation, 20000, 31);
    REQUIRE(rep.bias_bound == 0.0);
    REQUIRE(rep.empirical_bias <= 3.0 * rep.bias_standard_error);
    REQUIRE(rep.empirical_trace_variance ==
            Catch::Approx(3.0).epsilon(0.05));  // baseline trace
}

TEST_CASE("adversarial constant mask bias matches the closed form") {
    GradientDistribution dist;
    dist.mean = Vector({1.0, 2.0, -1.0, 0.5});
    dist.stddev = Vector(4, 0.5);
    const double kappa = 0.5;
    const BiasVarianceReport rep = bias_variance_validator(
        dist, kappa, kappa, 5.0, 1.0, MaskFamily::ConstantIdentity, 40000, 37);
    // bias = kappa^2 ||E g0|| exactly for M = kappa I
    REQUIRE(rep.empirical_bias ==
            Catch::Approx(kappa * kappa * dist.mean.norm2()).epsilon(0.05));
    REQUIRE(rep.empirical_bias <= rep.bias_bound + 3.0 * rep.bias_standard_error);
}

TEST_CASE("paper-constant bound arithmetic") {
    const double g_const = 4.2, v_const = 190.0, kappa = 0.5, tau_m = 0.5;
    GradientDistribution dist;
    dist.mean = Vector(4, 0.1);
    dist.stddev = Vector(4, 0.1);
    const BiasVarianceReport rep = bias_variance_validator(
        dist, kappa, tau_m, g_const, v_const, MaskFamily::HaarRotation, 100, 41);
    REQUIRE(rep.bias_bound == Catch::Approx(1.05));
    REQUIRE(rep.variance_bound == Catch::Approx(296.875));
}

TEST_CASE("hessian_fd_matvec on an explicit quadratic") {
    // loss = 0.5 theta^T A theta -> grad = A theta, H v = A v exactly
    Rng rng(43);
    const Matrix a = oracles::random_symmetric(5, rng);
    auto grad_fn = [&a](const Vector& th) { return matvec(a, th); };
    Vector theta(5);
    for (std::size_t i = 0; i < 5; ++i) theta[i] = rng.normal();
    const Matvec hv = hessian_fd_matvec(grad_fn, theta);
    Vector v(5);
    for (std::size_t i = 0; i < 5; ++i) v[i] = rng.normal();
    const Vector hv_v = hv(v);
    const Vector exact = matvec(a, v);
    for (std::size_t i = 0; i < 5; ++i)
        REQUIRE(hv_v[i] == Catch::Approx(exact[i]).margin(1e-8));

    REQUIRE_THROWS_AS(hv(Vector(5)), StructuralError);
}
