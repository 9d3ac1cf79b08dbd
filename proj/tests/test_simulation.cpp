#include "doctest.h"
#include "oracles.hpp"

#include "stmvr/simulation.hpp"

#include <cmath>
#include <set>

using namespace stmvr;

namespace {

// Empirical covariance of vec(Y) over n draws.
MatrixXd empirical_vec_cov(const MatrixXd& sigma, const MatrixXd& psp, const MatrixXd& ptp, int n,
                           std::uint64_t seed) {
    NormalRng rng(seed);
    const auto p = sigma.rows();
    const auto r = psp.rows() * ptp.rows();
    const MatrixXd zero = MatrixXd::Zero(p, r);
    MatrixXd acc = MatrixXd::Zero(p * r, p * r);
    for (int k = 0; k < n; ++k) {
        const VectorXd v = oracle::vec(sample_matrix_normal(zero, sigma, psp, ptp, rng));
        acc += v * v.transpose();
    }
    return acc / n;
}

}  // namespace

TEST_CASE("iid standard normal draws") {
    NormalRng rng(2024);
    const int n = 100000;
    double sum = 0.0;
    const MatrixXd one = MatrixXd::Identity(1, 1);
    for (int k = 0; k < n; ++k) sum += sample_matrix_normal(MatrixXd::Zero(1, 1), one, one, one, rng)(0, 0);
    CHECK(std::abs(sum / n) < 4.0 / std::sqrt(double(n)));
}

TEST_CASE("vec(Y) covariance is Psi (x) Sigma") {
    MatrixXd sigma(2, 2), ptp(2, 2), psp(1, 1);
    sigma << 1.0, 0.5, 0.5, 2.0;
    ptp << 1.0, 0.6, 0.6, 1.0;
    psp << 1.5;
    const MatrixXd want = oracle::kron(oracle::kron(psp, ptp), sigma);
    const MatrixXd got = empirical_vec_cov(sigma, psp, ptp, 200000, 7);
    for (Eigen::Index i = 0; i < want.rows(); ++i) {
        for (Eigen::Index j = 0; j < want.cols(); ++j) {
            INFO(i, ",", j);
            CHECK(std::abs(got(i, j) - want(i, j)) <= 0.03 * std::abs(want(i, j)));
        }
    }
}

TEST_CASE("space-time ordering of the sampled covariance") {
    // L = 2, T = 2, p = 1: entry (j, j') must be Psi_sp(l, l') Psi_tp(t, t').
    MatrixXd psp(2, 2), ptp(2, 2);
    psp << 1.0, 0.2, 0.2, 1.0;
    ptp << 1.0, 0.8, 0.8, 1.0;
    const MatrixXd got = empirical_vec_cov(MatrixXd::Identity(1, 1), psp, ptp, 100000, 8);
    CHECK(got(0, 1) == doctest::Approx(0.8).epsilon(0.05));   // same location, adjacent times
    CHECK(got(0, 2) == doctest::Approx(0.2).epsilon(0.15));   // same time, other location
    CHECK(got(0, 3) == doctest::Approx(0.16).epsilon(0.15));
}

TEST_CASE("single column reduces to a vector normal") {
    MatrixXd sigma(2, 2);
    sigma << 2.0, -0.4, -0.4, 0.5;
    const MatrixXd psi = MatrixXd::Constant(1, 1, 3.0);
    const MatrixXd got = empirical_vec_cov(sigma, psi, MatrixXd::Identity(1, 1), 100000, 9);
    CHECK(std::abs(got(0, 0) - 6.0) < 0.1);
    CHECK(std::abs(got(0, 1) + 1.2) < 0.05);
    CHECK(std::abs(got(1, 1) - 1.5) < 0.03);
}

TEST_CASE("streams are reproducible and distinct") {
    NormalRng a(5, 3, 1), b(5, 3, 1), c(5, 3, 2), d(5, 4, 1);
    const MatrixXd ma = a.normal_matrix(2, 3);
    CHECK(ma == b.normal_matrix(2, 3));
    CHECK(ma != c.normal_matrix(2, 3));
    CHECK(ma != d.normal_matrix(2, 3));
}

TEST_CASE("lattice sampling draws distinct cells") {
    NormalRng rng(10);
    const auto locs = sample_lattice_locations(30, rng);
    std::set<std::pair<double, double>> seen;
    for (const auto& l : locs) {
        CHECK(l.x >= 1);
        CHECK(l.x <= 10);
        CHECK(l.y >= 1);
        CHECK(l.y <= 10);
        CHECK(l.x == std::round(l.x));
        seen.insert({l.x, l.y});
    }
    CHECK(seen.size() == 30);
    CHECK(sample_lattice_locations(100, rng).size() == 100);
    CHECK_THROWS_AS((void)sample_lattice_locations(101, rng), std::invalid_argument);
    CHECK_THROWS_AS((void)sample_lattice_locations(0, rng), std::invalid_argument);
}

TEST_CASE("reference scenario") {
    const auto sc = reference_scenario(SpatialFamily::Matern, 10, 12);
    CHECK(sc.true_b(0, 2) == 2.0);
    CHECK(sc.true_b(2, 0) == 2.0);
    CHECK(sc.true_sigma(0, 2) == doctest::Approx(0.16));
    CHECK(sc.params.nu.value() == 1.5);
    CHECK_NOTHROW(sc.validate());
    const auto rd = draw_replication(sc, 0);
    CHECK(rd.data.y.rows() == 3);
    CHECK(rd.data.y.cols() == 120);
    CHECK(rd.data.layout.num_locations() == 10);
}

TEST_CASE("replications are common random numbers") {
    const auto sc = reference_scenario(SpatialFamily::Exponential, 5, 4);
    const auto a = draw_replication(sc, 2);
    const auto b = draw_replication(sc, 2);
    CHECK(a.data.x == b.data.x);
    CHECK(a.data.y == b.data.y);
    CHECK(a.data.y != draw_replication(sc, 3).data.y);
    // Switching the fitted family does not change the data.
    auto other = sc;
    other.fit_family = SpatialFamily::Gaussian;
    CHECK(draw_replication(other, 2).data.y == a.data.y);
}

TEST_CASE("error metrics") {
    MatrixXd a(2, 2), b(2, 2);
    a << 1, 2, 3, 4;
    b << 1, 2, 3, 7;
    CHECK(frobenius_error(a, b) == doctest::Approx(3.0));
    CHECK(mean_squared_error({1.0, 3.0}, 2.0) == doctest::Approx(1.0));
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS_AS((void)median({}), std::invalid_argument);
    CHECK_THROWS_AS((void)frobenius_error(a, MatrixXd::Zero(1, 2)), std::invalid_argument);
}

TEST_CASE("study results do not depend on the thread count") {
    auto sc = reference_scenario(SpatialFamily::Exponential, 5, 6);
    sc.replications = 6;
    const auto one = run_study(sc, {1, false});
    const auto many = run_study(sc, {3, false});
    REQUIRE(one.records.size() == many.records.size());
    for (std::size_t i = 0; i < one.records.size(); ++i) {
        CHECK(one.records[i].index == i);
        CHECK(one.records[i].ok);
        CHECK(one.records[i].b_error == many.records[i].b_error);
        CHECK(one.records[i].log_lik == many.records[i].log_lik);
    }
    CHECK(one.summary.median_b_error == many.summary.median_b_error);
    CHECK(one.summary.completed == 6);
    CHECK_FALSE(one.study_failed);
}

TEST_CASE("near-deterministic scenario recovers B") {
    auto sc = reference_scenario(SpatialFamily::Exponential, 5, 6);
    sc.true_sigma = 1e-6 * MatrixXd::Identity(3, 3);
    sc.replications = 5;
    const auto res = run_study(sc, {1, false});
    for (const auto& r : res.records) {
        CHECK(r.ok);
        CHECK(r.b_error < 1e-2);
    }
}

TEST_CASE("separate arm with independent responses") {
    auto sc = reference_scenario(SpatialFamily::Exponential, 8, 8);
    sc.true_sigma = MatrixXd::Identity(3, 3);
    sc.replications = 20;
    const auto res = compare_joint_vs_separate(sc, 1);
    REQUIRE(res.summary.median_separate_b_error.has_value());
    const double joint = res.summary.median_b_error;
    const double sep = *res.summary.median_separate_b_error;
    CHECK(std::abs(joint - sep) <= 0.2 * std::max(joint, sep));
    for (const auto& r : res.records) CHECK(r.separate_b_error.has_value());
}

TEST_CASE("separate fit is the per-row p = 1 model") {
    const auto sc = reference_scenario(SpatialFamily::Exponential, 5, 6);
    const auto rd = draw_replication(sc, 0);
    const MatrixXd b = fit_separate(rd.data, SpatialFamily::Exponential);
    Dataset row1(rd.data.y.row(1), rd.data.x, rd.data.layout);
    CHECK(b.row(1) == fit(row1, CoefficientStructure::dense(), SpatialFamily::Exponential).b_hat);
}

TEST_CASE("a study with mostly failing replications is flagged") {
    auto sc = reference_scenario(SpatialFamily::Exponential, 2, 6);
    // Coincident locations make Psi_sp singular in every replication.
    sc.locations = {{"a", 1, 1}, {"b", 1, 1}};
    sc.replications = 4;
    const auto res = run_study(sc, {1, false});
    CHECK(res.summary.failed == 4);
    CHECK(res.study_failed);
    for (const auto& r : res.records) CHECK_FALSE(r.error.empty());
}

TEST_CASE("scenario validation") {
    auto sc = reference_scenario(SpatialFamily::Exponential, 5, 6);
    sc.true_sigma = MatrixXd::Identity(2, 2);
    CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
    sc = reference_scenario(SpatialFamily::Exponential, 101, 6);
    CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
    sc = reference_scenario(SpatialFamily::Exponential, 5, 6);
    sc.params.rho = 1.2;
    CHECK_THROWS_AS(sc.validate(), std::invalid_argument);
}
