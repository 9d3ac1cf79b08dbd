#include "doctest.h"
#include "oracles.hpp"

#include "stmvr/diagnostics.hpp"
#include "stmvr/errors.hpp"
#include "stmvr/simulation.hpp"
#include "stmvr/special_functions.hpp"

#include <cmath>
#include <random>

using namespace stmvr;

namespace {

struct Truth {
    MatrixXd e, sigma, psp, ptp;
};

Truth at_truth(std::size_t l, std::size_t t, std::size_t rep) {
    const auto sc = reference_scenario(SpatialFamily::Exponential, l, t);
    const auto rd = draw_replication(sc, rep);
    Truth out;
    out.e = rd.data.y - rd.mean;
    out.sigma = sc.true_sigma;
    out.psp = sc.params.sigma_s2 * build_spatial_matrix(rd.data.layout, sc.family, sc.params);
    out.ptp = build_temporal_matrix(t, sc.params.rho);
    return out;
}

}  // namespace

TEST_CASE("identity covariances leave residuals unchanged") {
    std::mt19937_64 rng(1);
    const MatrixXd e = oracle::random_matrix(3, 6, rng);
    const auto rep = diagnose(e, MatrixXd::Identity(3, 3), MatrixXd::Identity(2, 2), MatrixXd::Identity(3, 3));
    CHECK((rep.e_star - e).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((rep.z - e).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(rep.global_stat == doctest::Approx(e.squaredNorm()));
}

TEST_CASE("standardized residuals match the dense whitening oracle") {
    std::mt19937_64 rng(2);
    const MatrixXd e = oracle::random_matrix(2, 6, rng);
    const MatrixXd s = oracle::random_spd(2, rng), a = oracle::random_spd(2, rng), b = oracle::random_spd(3, rng);
    const MatrixXd want = inverse_sqrt_spd(s) * e * inverse_sqrt_spd(oracle::kron(a, b));
    CHECK((standardize_residuals(e, s, a, b) - want).cwiseAbs().maxCoeff() < 1e-10);
    // Whitening two-sided: Sigma^{-1/2} Sigma Sigma^{-1/2} = I.
    const MatrixXd w = inverse_sqrt_spd(s);
    CHECK((w * s * w - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS((void)inverse_sqrt_spd(MatrixXd::Zero(2, 2)), NumericalError);
}

TEST_CASE("quadratic forms against dense oracles") {
    std::mt19937_64 rng(3);
    const MatrixXd e = oracle::random_matrix(3, 8, rng);
    const MatrixXd s = oracle::random_spd(3, rng), a = oracle::random_spd(2, rng), b = oracle::random_spd(4, rng);
    const auto rep = diagnose(e, s, a, b);
    const MatrixXd psi = oracle::kron(a, b);
    const MatrixXd sinv = s.inverse(), pinv = psi.inverse();
    for (int j = 0; j < 8; ++j) {
        CHECK(rep.d_sq(j) == doctest::Approx(e.col(j).dot(sinv * e.col(j)) / psi(j, j)));
        for (int i = 0; i < 3; ++i) CHECK(rep.z(i, j) == doctest::Approx(e(i, j) / std::sqrt(s(i, i) * psi(j, j))));
    }
    for (int i = 0; i < 3; ++i) {
        CHECK(rep.r_sq(i) == doctest::Approx(e.row(i).dot(pinv * e.row(i).transpose()) / s(i, i)));
    }
    CHECK(rep.global_stat == doctest::Approx(oracle::vec(e).dot(oracle::kron(pinv, sinv) * oracle::vec(e))));
}

TEST_CASE("column distance equals the norm of the standardized column when Psi is diagonal") {
    std::mt19937_64 rng(4);
    const MatrixXd e = oracle::random_matrix(3, 6, rng);
    const MatrixXd s = oracle::random_spd(3, rng);
    const MatrixXd a = VectorXd::LinSpaced(2, 0.5, 2.0).asDiagonal();
    const MatrixXd b = VectorXd::LinSpaced(3, 1.0, 3.0).asDiagonal();
    const auto rep = diagnose(e, s, a, b);
    for (int j = 0; j < 6; ++j) CHECK(rep.d_sq(j) == doctest::Approx(rep.e_star.col(j).squaredNorm()));
    // With correlated Psi they differ.
    const MatrixXd ac = oracle::random_spd(2, rng);
    const auto rc = diagnose(e, s, ac, b);
    double gap = 0.0;
    for (int j = 0; j < 6; ++j) gap = std::max(gap, std::abs(rc.d_sq(j) - rc.e_star.col(j).squaredNorm()));
    CHECK(gap > 1e-6);
}

TEST_CASE("zero residuals give zero distances") {
    MatrixXd e = MatrixXd::Ones(2, 4);
    e.col(1).setZero();
    e.row(0).setZero();
    const auto rep = diagnose(e, MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
    CHECK(rep.d_sq(1) == 0.0);
    CHECK(rep.r_sq(0) == 0.0);
    CHECK(rep.z(0, 3) == 0.0);
}

TEST_CASE("diagnostics are invariant to the (a Sigma, Psi / a) rescaling") {
    std::mt19937_64 rng(5);
    const MatrixXd e = oracle::random_matrix(3, 6, rng);
    const MatrixXd s = oracle::random_spd(3, rng), a = oracle::random_spd(2, rng), b = oracle::random_spd(3, rng);
    const auto base = diagnose(e, s, a, b);
    for (double k : {0.1, 3.0, 10.0}) {
        const auto r = diagnose(e, k * s, a / k, b);
        CHECK((r.d_sq - base.d_sq).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((r.r_sq - base.r_sq).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((r.z - base.z).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("thresholds and flags") {
    std::mt19937_64 rng(6);
    MatrixXd e = oracle::random_matrix(3, 12, rng) * 0.1;
    e(1, 5) = 10.0;
    const auto rep = diagnose(e, MatrixXd::Identity(3, 3), MatrixXd::Identity(3, 3), MatrixXd::Identity(4, 4));
    CHECK(rep.column_threshold == doctest::Approx(chi_square_quantile(0.975, 3)));
    CHECK(rep.row_threshold == doctest::Approx(chi_square_quantile(0.975, 12)));
    CHECK(rep.global_lower == doctest::Approx(chi_square_quantile(0.005, 36)));
    CHECK(rep.global_upper == doctest::Approx(chi_square_quantile(0.995, 36)));
    REQUIRE(rep.column_flags.size() == 1);
    CHECK(rep.column_flags[0] == 5);
    REQUIRE(rep.row_flags.size() == 1);
    CHECK(rep.row_flags[0] == 1);
    REQUIRE(rep.cell_flags.size() == 1);
    CHECK(rep.cell_flags[0] == std::make_pair<std::size_t, std::size_t>(1, 5));
    DiagnosticsOptions o;
    o.column_level = 0.95;
    CHECK(diagnose(e, MatrixXd::Identity(3, 3), MatrixXd::Identity(3, 3), MatrixXd::Identity(4, 4), o)
              .column_threshold == doctest::Approx(7.8147).epsilon(1e-4));
}

TEST_CASE("Q-Q pairs") {
    MatrixXd e(1, 4);
    e << 0.3, -1.0, 2.0, 0.0;
    const auto qq = qq_pairs(e);
    REQUIRE(qq.size() == 4);
    CHECK(qq[0].second == -1.0);
    CHECK(qq[3].second == 2.0);
    CHECK(qq[0].first == doctest::Approx(standard_normal_quantile(0.125)));
    CHECK(qq[1].first < qq[2].first);
}

TEST_CASE("fitted-model residuals apply the fitted augmentation") {
    const auto sc = reference_scenario(SpatialFamily::Exponential, 5, 6);
    const auto rd = draw_replication(sc, 0);
    AugmentationRules ic;
    ic.intercept = true;
    const auto m = fit(rd.data, CoefficientStructure::dense().with_augmentation(ic), SpatialFamily::Exponential);
    const MatrixXd res = model_residuals(rd.data, m);
    MatrixXd xa(4, rd.data.x.cols());
    xa << rd.data.x, MatrixXd::Ones(1, rd.data.x.cols());
    CHECK((res - (rd.data.y - m.b_hat * xa)).cwiseAbs().maxCoeff() < 1e-12);
    const auto rep = diagnose(rd.data, m);
    CHECK(rep.d_sq.size() == 30);
}

TEST_CASE("calibration at the true parameters") {
    const int n = 100;
    double sum = 0.0, sum_sq = 0.0, count = 0.0;
    int global_in = 0, d_exceed = 0, d_total = 0, z_exceed = 0, z_total = 0;
    double r_mean = 0.0;
    const double q95 = chi_square_quantile(0.95, 3);
    for (int rep = 0; rep < n; ++rep) {
        const auto t = at_truth(6, 20, static_cast<std::size_t>(rep));
        const auto d = diagnose(t.e, t.sigma, t.psp, t.ptp);
        sum += d.e_star.sum();
        sum_sq += d.e_star.squaredNorm();
        count += static_cast<double>(d.e_star.size());
        if (d.global_stat >= d.global_lower && d.global_stat <= d.global_upper) ++global_in;
        for (Eigen::Index j = 0; j < d.d_sq.size(); ++j) d_exceed += d.d_sq(j) > q95;
        d_total += static_cast<int>(d.d_sq.size());
        z_exceed += static_cast<int>((d.z.array().abs() > 1.96).count());
        z_total += static_cast<int>(d.z.size());
        r_mean += d.r_sq.mean();
    }
    const double mean = sum / count;
    CHECK(std::abs(mean) < 0.05);
    CHECK(sum_sq / count - mean * mean == doctest::Approx(1.0).epsilon(0.2));
    CHECK(global_in >= 95);
    CHECK(std::abs(double(d_exceed) / d_total - 0.05) <= 0.03);
    CHECK(std::abs(double(z_exceed) / z_total - 0.05) <= 0.02);
    CHECK(std::abs(r_mean / n - 120.0) <= 10.0);
}
