#include <doctest.h>

#include "sam/operators.hpp"
#include "support.hpp"

using namespace sam;

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace

TEST_CASE("pure L2 kernels are the identity") {
    const Grid g{8, 8};
    const auto ks = OperatorKernel::make_scalar(g, {1.0, 0.0, 0.0});
    const auto kv = OperatorKernel::make_vector(g, {1.0, 0.0, 0.0, 0.0, 0.0});
    Rng rng(1);
    const auto a = testsup::random_field(static_cast<std::size_t>(g.voxels()), rng);
    const auto v = testsup::random_field(2 * static_cast<std::size_t>(g.voxels()), rng);
    CHECK(testsup::max_abs_diff(ks.apply(a, 1), a) < 1e-12);
    CHECK(testsup::max_abs_diff(kv.apply(v, 2), v) < 1e-12);
}

TEST_CASE("constant fields see only omega0") {
    const Grid g{6, 4};
    const auto ks = OperatorKernel::make_scalar(g, {2.0, 5.0, 7.0});
    std::vector<double> ones(static_cast<std::size_t>(g.voxels()), 1.0);
    const auto out = ks.apply(ones, 1);
    for (double x : out) CHECK(x == doctest::Approx(2.0).epsilon(1e-12));

    const auto kv = OperatorKernel::make_vector(g, {1e-3, 1.0, 1.0, 1.0, 1.0});
    std::vector<double> cfield(2 * static_cast<std::size_t>(g.voxels()));
    for (std::size_t i = 0; i < cfield.size(); ++i)
        cfield[i] = i < cfield.size() / 2 ? 0.3 : -1.7;
    const auto vo = kv.apply(cfield, 2);
    for (std::size_t i = 0; i < vo.size(); ++i)
        CHECK(vo[i] == doctest::Approx(1e-3 * cfield[i]).epsilon(1e-9));
}

TEST_CASE("invalid weights are rejected") {
    const Grid g{4, 4};
    CHECK_THROWS_AS(OperatorKernel::make_vector(g, {0.0, 1, 1, 1, 1}), Error);
    CHECK_THROWS_AS(OperatorKernel::make_vector(g, {1.0, -1, 1, 1, 1}), Error);
    CHECK_THROWS_AS(OperatorKernel::make_scalar(g, {1.0, -0.1, 0}), Error);
    // omega0 = 0 is fine for a scalar kernel until inversion is requested
    const auto k = OperatorKernel::make_scalar(g, {0.0, 0.2, 0});
    Rng rng(2);
    const auto u = testsup::random_field(static_cast<std::size_t>(g.voxels()), rng);
    CHECK_THROWS_AS(k.greens(u, 1), Error);
}

TEST_CASE("reference spectra: eigenvalue bounds") {
    const Grid g{16, 16};
    const auto kv = OperatorKernel::make_vector(g, {1e-3, 0.0, 16.0, 1.0, 1.0});
    CHECK(kv.min_eigenvalue() >= 1e-3);
    const auto ks = OperatorKernel::make_scalar(g, {0.002, 0.2, 0.0});
    CHECK(ks.min_eigenvalue() == doctest::Approx(0.002)); // the zero-frequency bin
}

TEST_CASE("apply is symmetric") {
    const Grid g{8, 6};
    const auto kv = OperatorKernel::make_vector(g, {0.01, 0.1, 2.0, 0.5, 0.25});
    Rng rng(3);
    const std::size_t n = 2 * static_cast<std::size_t>(g.voxels());
    const auto u = testsup::random_field(n, rng);
    const auto w = testsup::random_field(n, rng);
    const auto lu = kv.apply(u, 2);
    const auto lw = kv.apply(w, 2);
    double a = 0, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
        a += lu[i] * w[i];
        b += u[i] * lw[i];
    }
    CHECK(a == doctest::Approx(b).epsilon(1e-8));
}

TEST_CASE("apply matches the dense stencil oracle on 8x8") {
    const Grid g{8, 8};
    Rng rng(4);

    SUBCASE("scalar") {
        const std::array<double, 3> w{0.7, 1.3, 0.4};
        const auto k = OperatorKernel::make_scalar(g, w);
        const Eigen::MatrixXd dense = testsup::scalar_operator_matrix(g, w);
        const auto f = testsup::random_field(static_cast<std::size_t>(g.voxels()), rng);
        const Eigen::VectorXd want = dense * to_eigen(f);
        CHECK(testsup::max_abs_diff(k.apply(f, 1), to_vec(want)) < 1e-10);
    }
    SUBCASE("vector with elasticity and divergence terms") {
        const std::array<double, 5> w{0.05, 0.3, 1.1, 0.8, 0.6};
        const auto k = OperatorKernel::make_vector(g, w);
        const Eigen::MatrixXd dense = testsup::vector_operator_matrix(g, w);
        const auto f = testsup::random_field(2 * static_cast<std::size_t>(g.voxels()), rng);
        const Eigen::VectorXd want = dense * to_eigen(f);
        CHECK(testsup::max_abs_diff(k.apply(f, 2), to_vec(want)) < 1e-10);
    }
}

TEST_CASE("greens inverts apply") {
    Rng rng(5);
    SUBCASE("2-D vector kernel") {
        const Grid g{32, 32};
        const auto k = OperatorKernel::make_vector(g, {1e-3, 0, 16, 1, 1});
        const auto v = testsup::random_field(2 * static_cast<std::size_t>(g.voxels()), rng);
        const auto back = k.greens(k.apply(v, 2), 2);
        double rel = 0, norm = 0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            rel += (back[i] - v[i]) * (back[i] - v[i]);
            norm += v[i] * v[i];
        }
        CHECK(std::sqrt(rel / norm) < 1e-8);
    }
    SUBCASE("3-D scalar kernel") {
        const Grid g{16, 16, 16};
        const auto k = OperatorKernel::make_scalar(g, {0.01, 0.5, 1.0});
        const auto v = testsup::random_field(static_cast<std::size_t>(g.voxels()), rng);
        const auto back = k.apply(k.greens(v, 1), 1);
        double rel = 0, norm = 0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            rel += (back[i] - v[i]) * (back[i] - v[i]);
            norm += v[i] * v[i];
        }
        CHECK(std::sqrt(rel / norm) < 1e-8);
    }
    SUBCASE("constant momentum divides by omega0") {
        const Grid g{8, 8};
        const auto k = OperatorKernel::make_vector(g, {2.0, 1, 1, 1, 1});
        std::vector<double> c(2 * static_cast<std::size_t>(g.voxels()), 3.0);
        const auto v = k.greens(c, 2);
        for (double x : v) CHECK(x == doctest::Approx(1.5).epsilon(1e-10));
    }
}

TEST_CASE("positive definiteness of the quadratic form") {
    const Grid g{12, 10};
    const auto k = OperatorKernel::make_vector(g, {0.01, 0.2, 1.5, 0.7, 0.3});
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const auto v = testsup::random_field(2 * static_cast<std::size_t>(g.voxels()), rng);
        const auto lv = k.apply(v, 2);
        double vlv = 0, vv = 0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            vlv += v[i] * lv[i];
            vv += v[i] * v[i];
        }
        CHECK(vlv >= 0.01 * vv * (1 - 1e-9));
    }
}

TEST_CASE("solve_regularised basics") {
    const Grid g{8, 8};
    const std::size_t m = static_cast<std::size_t>(g.voxels());
    const auto id = OperatorKernel::make_scalar(g, {1.0, 0, 0});

    SUBCASE("(I + I) x = 2 gives ones") {
        BlockField h;
        h.ncomp = 1;
        h.h.assign(m, 1.0);
        std::vector<double> rhs(m, 2.0);
        const auto x = solve_regularised(h, id, 1.0, rhs);
        for (double v : x) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    }
    SUBCASE("H = 0 reduces to the Green's function") {
        const auto k = OperatorKernel::make_scalar(g, {0.5, 0.8, 0.1});
        BlockField h;
        h.ncomp = 1;
        h.h.assign(m, 0.0);
        Rng rng(7);
        const auto rhs = testsup::random_field(m, rng);
        const auto x = solve_regularised(h, k, 1.0, rhs);
        const auto want = k.greens(rhs, 1);
        double num = 0, den = 0;
        for (std::size_t i = 0; i < m; ++i) {
            num += (x[i] - want[i]) * (x[i] - want[i]);
            den += want[i] * want[i];
        }
        CHECK(std::sqrt(num / den) < 1e-6);
    }
}

TEST_CASE("solve_regularised matches a dense direct solve") {
    const Grid g{8, 8};
    const std::size_t m = static_cast<std::size_t>(g.voxels());
    Rng rng(8);

    SUBCASE("vector kernel with full blocks") {
        const std::array<double, 5> w{0.05, 0.4, 0.9, 0.5, 0.2};
        const auto k = OperatorKernel::make_vector(g, w);
        BlockField h;
        h.ncomp = 2;
        h.full = true;
        h.h.resize(3 * m);
        for (std::size_t v = 0; v < m; ++v) {
            // random SPD 2x2 block per voxel
            const double a = 0.2 + rng.uniform(), b = 0.2 + rng.uniform();
            const double c = 0.5 * std::min(a, b) * (2 * rng.uniform() - 1);
            h.h[BlockField::packed_index(0, 0, 2) * m + v] = a;
            h.h[BlockField::packed_index(0, 1, 2) * m + v] = c;
            h.h[BlockField::packed_index(1, 1, 2) * m + v] = b;
        }
        const double weight = 0.7;
        const auto rhs = testsup::random_field(2 * m, rng);
        const auto x = solve_regularised(h, k, weight, rhs, {1e-10, 400});

        Eigen::MatrixXd dense = weight * testsup::vector_operator_matrix(g, w);
        for (std::size_t v = 0; v < m; ++v) {
            dense(v, v) += h.h[BlockField::packed_index(0, 0, 2) * m + v];
            dense(v, m + v) += h.h[BlockField::packed_index(0, 1, 2) * m + v];
            dense(m + v, v) += h.h[BlockField::packed_index(0, 1, 2) * m + v];
            dense(m + v, m + v) += h.h[BlockField::packed_index(1, 1, 2) * m + v];
        }
        const Eigen::VectorXd want = dense.ldlt().solve(to_eigen(rhs));
        double num = 0, den = 0;
        for (std::size_t i = 0; i < 2 * m; ++i) {
            num += (x[i] - want[i]) * (x[i] - want[i]);
            den += want[i] * want[i];
        }
        CHECK(std::sqrt(num / den) < 1e-5);
    }
}

TEST_CASE("solve_regularised scales linearly with the rhs") {
    const Grid g{8, 8};
    const std::size_t m = static_cast<std::size_t>(g.voxels());
    const auto k = OperatorKernel::make_scalar(g, {0.01, 0.3, 0.0});
    BlockField h;
    h.ncomp = 1;
    h.h.assign(m, 0.0);
    Rng rng(9);
    for (std::size_t v = 0; v < m; ++v) h.h[v] = rng.uniform();
    const auto rhs = testsup::random_field(m, rng);
    std::vector<double> rhs5(m);
    for (std::size_t i = 0; i < m; ++i) rhs5[i] = 5.0 * rhs[i];
    const auto x1 = solve_regularised(h, k, 1.0, rhs);
    const auto x5 = solve_regularised(h, k, 1.0, rhs5);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < m; ++i) {
        num += (x5[i] - 5.0 * x1[i]) * (x5[i] - 5.0 * x1[i]);
        den += x5[i] * x5[i];
    }
    CHECK(std::sqrt(num / den) < 2e-6);
}

TEST_CASE("solver reports non-convergence with the achieved residual") {
    const Grid g{8, 8};
    const std::size_t m = static_cast<std::size_t>(g.voxels());
    const auto k = OperatorKernel::make_scalar(g, {1e-9, 1.0, 0.0});
    BlockField h;
    h.ncomp = 1;
    h.h.assign(m, 0.0);
    // highly indefinite-looking rhs with a 1-iteration budget
    Rng rng(10);
    const auto rhs = testsup::random_field(m, rng);
    try {
        solve_regularised(h, k, 1.0, rhs, {1e-14, 1});
        FAIL("expected SolveError");
    } catch (const SolveError& e) {
        CHECK(e.residual > 0.0);
    }
}
