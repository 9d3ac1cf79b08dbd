#include "doctest.h"
#include "oracles.hpp"

#include "stmvr/errors.hpp"
#include "stmvr/estimation.hpp"
#include "stmvr/simulation.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace stmvr;

namespace {

struct Instance {
    MatrixXd y, x, b, sigma, psi_sp, psi_tp;
};

Instance random_instance(std::mt19937_64& rng, int p, int q, int l, int t) {
    Instance in;
    in.x = oracle::random_matrix(q, l * t, rng);
    in.b = oracle::random_matrix(p, q, rng);
    in.y = in.b * in.x + oracle::random_matrix(p, l * t, rng);
    in.sigma = oracle::random_spd(p, rng);
    in.psi_sp = oracle::random_spd(l, rng);
    in.psi_tp = oracle::random_spd(t, rng);
    return in;
}

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

MatrixXd symmetric(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

ReplicationData reference_data(SpatialFamily family, std::size_t l, std::size_t t, std::size_t rep,
                               std::uint64_t seed = 1) {
    auto sc = reference_scenario(family, l, t);
    sc.seed = seed;
    return draw_replication(sc, rep);
}

}  // namespace

TEST_CASE("log-likelihood examples") {
    CHECK(log_likelihood(MatrixXd::Zero(1, 1), MatrixXd::Zero(1, 1), MatrixXd::Ones(1, 1),
                         MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1)) ==
          doctest::Approx(-0.9189385).epsilon(1e-7));
    const MatrixXd y = MatrixXd::Constant(2, 2, 0.3);
    CHECK(log_likelihood(y, y, MatrixXd::Identity(2, 2), MatrixXd::Identity(1, 1),
                         MatrixXd::Identity(2, 2)) == doctest::Approx(-3.6757541).epsilon(1e-7));
}

TEST_CASE("log-likelihood equals the dense vectorized normal density") {
    std::mt19937_64 rng(21);
    for (int rep = 0; rep < 30; ++rep) {
        const int p = 1 + rep % 3, l = 1 + rep % 2, t = 1 + (rep / 2) % 3;
        const auto in = random_instance(rng, p, 2, l, t);
        const MatrixXd mean = in.b * in.x;
        const double want = oracle::vec_normal_logpdf(in.y, mean, in.sigma, oracle::kron(in.psi_sp, in.psi_tp));
        CHECK(std::abs(log_likelihood(in.y, mean, in.sigma, in.psi_sp, in.psi_tp) - want) < 1e-8);
    }
}

TEST_CASE("rescaling (a Sigma, Psi / a) leaves the log-likelihood unchanged") {
    std::mt19937_64 rng(4);
    const auto in = random_instance(rng, 3, 2, 2, 3);
    const MatrixXd mean = in.b * in.x;
    const double base = log_likelihood(in.y, mean, in.sigma, in.psi_sp, in.psi_tp);
    for (double a : {0.1, 3.0, 10.0}) {
        CHECK(std::abs(log_likelihood(in.y, mean, a * in.sigma, in.psi_sp / a, in.psi_tp) - base) < 1e-10);
        CHECK(std::abs(log_likelihood(in.y, mean, a * in.sigma, in.psi_sp, in.psi_tp / a) - base) < 1e-10);
    }
}

TEST_CASE("dataset log-likelihood uses sigma_s2 R_sp and R_tp") {
    const auto rd = reference_data(SpatialFamily::Exponential, 4, 3, 0);
    const auto sc = reference_scenario(SpatialFamily::Exponential, 4, 3);
    const CovarianceSpec cov{SpatialFamily::Exponential, sc.params};
    const MatrixXd psp = sc.params.sigma_s2 *
                         spatial_correlation_matrix(rd.data.layout.distance_matrix(),
                                                    SpatialFamily::Exponential, sc.params.phi_s, {});
    const MatrixXd ptp = build_temporal_matrix(3, sc.params.rho);
    CHECK(log_likelihood(rd.data, sc.true_b, sc.true_sigma, cov) ==
          doctest::Approx(oracle::vec_normal_logpdf(rd.data.y, sc.true_b * rd.data.x, sc.true_sigma,
                                                    oracle::kron(psp, ptp))));
}

TEST_CASE("dense B update") {
    std::mt19937_64 rng(8);
    for (int rep = 0; rep < 10; ++rep) {
        const auto in = random_instance(rng, 3, 2, 2, 3);
        const KroneckerFactor psi(in.psi_sp, in.psi_tp);
        const MatrixXd b = update_b_dense(in.y, in.x, psi);
        const BoolMatrix all = BoolMatrix::Constant(3, 2, true);
        CHECK(max_abs(b - oracle::vec_gls(in.y, in.x, in.sigma, oracle::kron(in.psi_sp, in.psi_tp), all)) < 1e-8);
        // No Sigma in the formula: any SPD Sigma gives the same B in the vec oracle.
        const MatrixXd other = oracle::random_spd(3, rng);
        CHECK(max_abs(b - oracle::vec_gls(in.y, in.x, other, oracle::kron(in.psi_sp, in.psi_tp), all)) < 1e-8);
    }
    const auto in = random_instance(rng, 2, 3, 2, 2);
    const MatrixXd exact = in.b * in.x;
    const KroneckerFactor eye(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
    CHECK(max_abs(update_b_dense(exact, in.x, eye) - in.b) < 1e-10);
}

TEST_CASE("dense B update rejects q > r and collinear covariates") {
    std::mt19937_64 rng(9);
    const KroneckerFactor eye(MatrixXd::Identity(1, 1), MatrixXd::Identity(2, 2));
    CHECK_THROWS_AS((void)update_b_dense(oracle::random_matrix(2, 2, rng), oracle::random_matrix(3, 2, rng), eye),
                    DataError);
    const KroneckerFactor eye4(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
    MatrixXd x4 = oracle::random_matrix(2, 4, rng);
    x4.row(1) = 2.0 * x4.row(0);
    CHECK_THROWS((void)update_b_dense(oracle::random_matrix(2, 4, rng), x4, eye4));
}

TEST_CASE("diagonal B update") {
    std::mt19937_64 rng(12);
    // Sigma = Psi = I: per-row least squares.
    {
        const auto in = random_instance(rng, 3, 3, 2, 4);
        const KroneckerFactor eye(MatrixXd::Identity(2, 2), MatrixXd::Identity(4, 4));
        const VectorXd beta = update_b_diagonal(in.y, in.x, MatrixXd::Identity(3, 3), eye, 1e-12);
        for (int i = 0; i < 3; ++i) {
            CHECK(beta(i) == doctest::Approx(in.x.row(i).dot(in.y.row(i)) / in.x.row(i).squaredNorm()));
        }
    }
    // Coupled case against the masked GLS oracle.
    for (int rep = 0; rep < 5; ++rep) {
        const auto in = random_instance(rng, 3, 3, 2, 3);
        const KroneckerFactor psi(in.psi_sp, in.psi_tp);
        const VectorXd beta = update_b_diagonal(in.y, in.x, in.sigma.inverse(), psi, 1e-13);
        const BoolMatrix diag = MatrixXd::Identity(3, 3).cast<bool>();
        const MatrixXd want = oracle::vec_gls(in.y, in.x, in.sigma, oracle::kron(in.psi_sp, in.psi_tp), diag);
        CHECK(max_abs(MatrixXd(beta.asDiagonal()) - want) < 1e-8);
    }
    // Exact fit for any Sigma, Psi.
    const auto in = random_instance(rng, 3, 3, 2, 3);
    const VectorXd b0 = VectorXd::LinSpaced(3, 0.5, 2.0);
    const MatrixXd y = b0.asDiagonal() * in.x;
    const VectorXd beta =
        update_b_diagonal(y, in.x, in.sigma.inverse(), KroneckerFactor(in.psi_sp, in.psi_tp), 1e-13);
    CHECK(max_abs(beta - b0) < 1e-9);
}

TEST_CASE("sparse B update") {
    std::mt19937_64 rng(13);
    for (int rep = 0; rep < 5; ++rep) {
        const auto in = random_instance(rng, 3, 3, 2, 3);
        const KroneckerFactor psi(in.psi_sp, in.psi_tp);
        const MatrixXd sinv = in.sigma.inverse();
        const BoolMatrix all = BoolMatrix::Constant(3, 3, true);
        CHECK(max_abs(update_b_sparse(in.y, in.x, sinv, psi, all, 0.0) - update_b_dense(in.y, in.x, psi)) < 1e-8);
        BoolMatrix mask = all;
        mask(1, 2) = false;
        mask(0, 0) = false;
        const MatrixXd b = update_b_sparse(in.y, in.x, sinv, psi, mask, 0.0);
        CHECK(b(1, 2) == 0.0);
        CHECK(b(0, 0) == 0.0);
        CHECK(max_abs(b - oracle::vec_gls(in.y, in.x, in.sigma, oracle::kron(in.psi_sp, in.psi_tp), mask)) < 1e-8);
    }
    // One free entry, Sigma = Psi = I: scalar ridge.
    const auto in = random_instance(rng, 2, 2, 1, 5);
    BoolMatrix one = BoolMatrix::Constant(2, 2, false);
    one(0, 0) = true;
    const KroneckerFactor eye(MatrixXd::Identity(1, 1), MatrixXd::Identity(5, 5));
    const double lambda = 0.3;
    const MatrixXd b = update_b_sparse(in.y, in.x, MatrixXd::Identity(2, 2), eye, one, lambda);
    CHECK(b(0, 0) == doctest::Approx(in.x.row(0).dot(in.y.row(0)) / (in.x.row(0).squaredNorm() + lambda)));
    CHECK((b.array() != 0.0).count() == 1);
}

TEST_CASE("block B update") {
    std::mt19937_64 rng(14);
    const auto in = random_instance(rng, 4, 3, 2, 3);
    const KroneckerFactor psi(in.psi_sp, in.psi_tp);
    CHECK(max_abs(update_b_block(in.y, in.x, psi, {{{0, 3}, {0, 2}}}) - update_b_dense(in.y, in.x, psi)) < 1e-12);

    const std::vector<CoefficientBlock> blocks{{{0, 1}, {0, 1}}, {{2, 3}, {2, 2}}};
    const MatrixXd b = update_b_block(in.y, in.x, psi, blocks);
    CHECK(b.block(0, 2, 2, 1).isZero(0.0));
    CHECK(b.block(2, 0, 2, 2).isZero(0.0));
    CHECK(max_abs(b.block(0, 0, 2, 2) - update_b_dense(in.y.topRows(2), in.x.topRows(2), psi)) < 1e-12);

    MatrixXd b0 = MatrixXd::Zero(4, 3);
    b0.block(0, 0, 2, 2) << 1, 2, -1, 0.5;
    b0.block(2, 2, 2, 1) << 3, -2;
    const MatrixXd exact = b0 * in.x;
    CHECK(max_abs(update_b_block(exact, in.x, psi, blocks) - b0) < 1e-10);
}

TEST_CASE("Sigma update") {
    const KroneckerFactor eye(MatrixXd::Identity(1, 1), MatrixXd::Identity(2, 2));
    MatrixXd e(2, 2);
    e << 1, -1, 0, 0;
    const auto su = update_sigma(e, eye);
    MatrixXd want(2, 2);
    want << 1, 0, 0, 0;
    CHECK(su.raw == want);
    CHECK(su.normalized == want);
    CHECK(su.scale == 1.0);

    std::mt19937_64 rng(15);
    const MatrixXd g = oracle::random_matrix(3, 8, rng);
    const KroneckerFactor eye8(MatrixXd::Identity(2, 2), MatrixXd::Identity(4, 4));
    const auto gs = update_sigma(g, eye8);
    CHECK(max_abs(gs.raw - g * g.transpose() / 8.0) < 1e-12);
    CHECK(gs.raw == gs.raw.transpose());
    CHECK(gs.normalized(0, 0) == 1.0);
    CHECK(max_abs(gs.normalized * gs.scale - gs.raw) < 1e-12);
    CHECK_THROWS_AS((void)update_sigma(MatrixXd::Zero(2, 8), eye8), DataError);
}

TEST_CASE("Sigma and sigma_s2 updates are stationary points") {
    std::mt19937_64 rng(16);
    for (int rep = 0; rep < 5; ++rep) {
        const auto in = random_instance(rng, 3, 2, 2, 3);
        const MatrixXd mean = in.b * in.x;
        const MatrixXd e = in.y - mean;
        const MatrixXd sig = update_sigma(e, KroneckerFactor(in.psi_sp, in.psi_tp)).raw;
        const auto ll_sigma = [&](const MatrixXd& s) {
            return log_likelihood(in.y, mean, symmetric(s), in.psi_sp, in.psi_tp);
        };
        CHECK(max_abs(oracle::matrix_gradient(ll_sigma, sig, 1e-6)) < 1e-5);

        const MatrixXd r_sp = in.psi_sp / in.psi_sp(0, 0);
        const double s2 = update_sigma_s2(e, SpdFactor(in.sigma), KroneckerFactor(r_sp, in.psi_tp));
        CHECK(s2 > 0.0);
        const auto ll_s2 = [&](double v) { return log_likelihood(in.y, mean, in.sigma, v * r_sp, in.psi_tp); };
        CHECK(std::abs(oracle::central_difference(ll_s2, s2, 1e-6)) < 1e-5);
        for (double f : {0.8, 0.95, 1.05, 1.25}) CHECK(ll_s2(s2) >= ll_s2(f * s2));
    }
    const MatrixXd e = MatrixXd::Constant(1, 1, 1.7);
    const KroneckerFactor one(MatrixXd::Ones(1, 1), MatrixXd::Ones(1, 1));
    CHECK(update_sigma_s2(e, SpdFactor(MatrixXd::Ones(1, 1)), one) == doctest::Approx(1.7 * 1.7));
}

TEST_CASE("profiled evaluations agree with the direct likelihood and its derivative") {
    for (auto family : kAllSpatialFamilies) {
        const auto sc = reference_scenario(family, 6, 5);
        const auto rd = draw_replication(sc, 0);
        const MatrixXd e = rd.data.y - rd.mean;
        const MatrixXd dist = rd.data.layout.distance_matrix();
        const ScoreEquationState state(e, sc.true_sigma, dist, 5, family, sc.params);
        INFO(to_string(family));

        const auto ev = state.evaluate_phi(1.3);
        const MatrixXd rsp = spatial_correlation_matrix(dist, family, 1.3, sc.params.nu);
        const MatrixXd rtp = build_temporal_matrix(5, sc.params.rho);
        CHECK(ev.sigma_s2 == doctest::Approx(update_sigma_s2(e, SpdFactor(sc.true_sigma), KroneckerFactor(rsp, rtp))));
        CHECK(ev.log_lik == doctest::Approx(log_likelihood(rd.data.y, rd.mean, sc.true_sigma, ev.sigma_s2 * rsp, rtp)));

        const auto prof_phi = [&](double v) { return state.evaluate_phi(v, false).log_lik; };
        CHECK(ev.score == doctest::Approx(oracle::central_difference(prof_phi, 1.3, 1e-5)).epsilon(1e-5));
        const auto prof_rho = [&](double v) { return state.evaluate_rho(v, false).log_lik; };
        CHECK(state.evaluate_rho(0.4).score ==
              doctest::Approx(oracle::central_difference(prof_rho, 0.4, 1e-6)).epsilon(1e-5));
        if (family == SpatialFamily::Matern) {
            const auto prof_nu = [&](double v) { return state.evaluate_nu(v, false).log_lik; };
            CHECK(state.evaluate_nu(1.1).score ==
                  doctest::Approx(oracle::central_difference(prof_nu, 1.1, 1e-5)).epsilon(1e-5));
        }
    }
}

TEST_CASE("score solves land on roots without lowering the profile") {
    for (auto family : {SpatialFamily::Exponential, SpatialFamily::Gaussian, SpatialFamily::Matern}) {
        const auto sc = reference_scenario(family, 10, 12);
        const auto rd = draw_replication(sc, 3);
        const MatrixXd e = rd.data.y - rd.mean;
        const MatrixXd dist = rd.data.layout.distance_matrix();
        CovarianceParams start = sc.params;
        start.phi_s = 0.7;
        start.rho = 0.3;
        const ScoreEquationState state(e, sc.true_sigma, dist, 12, family, start);
        const ScoreSolveOptions opt{default_phi_bounds(dist), 1e-9, 16, false};

        const auto phi = solve_score_phi(state, opt);
        INFO(to_string(family), " phi=", phi.value);
        CHECK(phi.root_found);
        CHECK(std::abs(phi.score) <= 1e-6 * phi.scale);
        CHECK(phi.log_lik >= state.evaluate_phi(start.phi_s, false).log_lik);
        CHECK(phi.value == doctest::Approx(1.2).epsilon(0.5));

        const auto rho = solve_score_rho(state, {{-0.999, 0.999}, 1e-9, 16, false});
        CHECK(rho.root_found);
        CHECK(std::abs(rho.score) <= 1e-6 * rho.scale);
        CHECK(rho.log_lik >= state.evaluate_rho(start.rho, false).log_lik);
        CHECK(std::abs(rho.value - 0.7) < 0.15);

        if (family == SpatialFamily::Matern) {
            // With phi held at 0.7 the profile in nu runs to the upper bound.
            const auto edge = solve_score_nu(state, {{0.1, 10.0}, 1e-9, 16, false});
            if (!edge.root_found) CHECK((edge.at_boundary && edge.value == 10.0));
            CovarianceParams near = sc.params;
            near.nu = 0.8;
            const ScoreEquationState s2(e, sc.true_sigma, dist, 12, family, near);
            const auto nu = solve_score_nu(s2, {{0.1, 10.0}, 1e-9, 16, false});
            CHECK(nu.root_found);
            CHECK(std::abs(nu.score) <= 1e-6 * nu.scale);
            CHECK(nu.log_lik >= s2.evaluate_nu(0.8, false).log_lik);
        }
    }
}

TEST_CASE("rho near zero on white-noise residuals") {
    // sd of one estimate is about 0.04 at T = 200; average five.
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        NormalRng rng(99 + seed);
        const MatrixXd e = rng.normal_matrix(2, 2 * 200);
        MatrixXd dist(2, 2);
        dist << 0, 1, 1, 0;
        CovarianceParams start;
        start.rho = 0.5;
        const ScoreEquationState state(e, MatrixXd::Identity(2, 2), dist, 200, SpatialFamily::Exponential, start);
        sum += solve_score_rho(state, {{-0.999, 0.999}, 1e-9, 16, false}).value;
    }
    CHECK(std::abs(sum / 5) < 0.05);
}

TEST_CASE("score at the truth is small relative to its scale") {
    const auto sc = reference_scenario(SpatialFamily::Exponential, 20, 12);
    const auto rd = draw_replication(sc, 0);
    const ScoreEquationState state(rd.data.y - rd.mean, sc.true_sigma, rd.data.layout.distance_matrix(), 12,
                                   SpatialFamily::Exponential, sc.params);
    const auto phi = state.evaluate_phi(1.2);
    const auto rho = state.evaluate_rho(0.7);
    CHECK(std::abs(phi.score) < 0.2 * phi.scale());
    CHECK(std::abs(rho.score) < 0.2 * rho.scale());
}

TEST_CASE("parameter count and BIC") {
    CHECK(bic(0.0, 1, 10.0) == doctest::Approx(2.302585).epsilon(1e-7));
    CHECK(bic(-5.0, 3, 20.0) == doctest::Approx(3 * std::log(20.0) + 10.0));
    CHECK(parameter_count(CoefficientStructure::dense(), 3, 3, SpatialFamily::Exponential) == 9 + 5 + 3);
    CHECK(parameter_count(CoefficientStructure::dense(), 3, 3, SpatialFamily::Matern) == 9 + 5 + 4);
    CHECK(parameter_count(CoefficientStructure::identity(), 2, 2, SpatialFamily::Gaussian) == 0 + 2 + 3);
    BoolMatrix mask = BoolMatrix::Constant(3, 3, true);
    mask(1, 2) = false;
    CHECK(parameter_count(CoefficientStructure::sparse(mask), 3, 3, SpatialFamily::Exponential) == 16);

    FittedModel m;
    m.log_lik = -100.0;
    m.num_params = 17;
    const auto rd = reference_data(SpatialFamily::Exponential, 5, 4, 0);
    CHECK(bic(m, rd.data) == doctest::Approx(17 * std::log(3.0 * 20.0) + 200.0));
    CHECK(bic(m, rd.data, BicSampleSize::Columns) == doctest::Approx(17 * std::log(20.0) + 200.0));
}

TEST_CASE("default phi bounds") {
    MatrixXd d(3, 3);
    d << 0, 1, 4, 1, 0, 3, 4, 3, 0;
    const auto b = default_phi_bounds(d);
    CHECK(b.lower == doctest::Approx(0.05));
    CHECK(b.upper == doctest::Approx(20.0));
}

TEST_CASE("fit on noiseless data returns B0") {
    for (auto family : kAllSpatialFamilies) {
        const auto rd = reference_data(family, 5, 6, 0);
        const auto sc = reference_scenario(family, 5, 6);
        Dataset exact(sc.true_b * rd.data.x, rd.data.x, rd.data.layout);
        const auto m = fit(exact, CoefficientStructure::dense(), family);
        INFO(to_string(family));
        CHECK(m.converged);
        CHECK(m.num_iter <= 3);
        CHECK(max_abs(m.b_hat - sc.true_b) < 1e-8);
    }
}

TEST_CASE("fit ascends monotonically and converges") {
    for (auto family : kAllSpatialFamilies) {
        const auto rd = reference_data(family, 8, 10, 1);
        const auto m = fit(rd.data, CoefficientStructure::dense(), family);
        INFO(to_string(family));
        CHECK(m.converged);
        REQUIRE(!m.trace.empty());
        for (std::size_t i = 1; i < m.trace.size(); ++i) {
            CHECK(m.trace[i] >= m.trace[i - 1] - 1e-8 * std::max(1.0, std::abs(m.trace[i - 1])));
        }
        CHECK(m.log_lik == m.trace.back());
        CHECK(m.sigma_hat(0, 0) == 1.0);
        CHECK(m.num_params == parameter_count(CoefficientStructure::dense(), 3, 3, family));
        CHECK(m.bic == doctest::Approx(bic(m, rd.data)));
        // Reported values reproduce the reported likelihood.
        CHECK(log_likelihood(rd.data, m.b_hat, m.sigma_hat, {family, m.cov_params}) ==
              doctest::Approx(m.log_lik).epsilon(1e-12));
    }
}

TEST_CASE("the two init policies reach the same likelihood") {
    const auto rd = reference_data(SpatialFamily::Exponential, 10, 12, 2);
    FitOptions a, b;
    a.init = InitPolicy::DataDriven;
    b.init = InitPolicy::Neutral;
    a.tol_loglik = b.tol_loglik = 1e-12;
    const auto ma = fit(rd.data, CoefficientStructure::dense(), SpatialFamily::Exponential, a);
    const auto mb = fit(rd.data, CoefficientStructure::dense(), SpatialFamily::Exponential, b);
    CHECK(std::abs(ma.log_lik - mb.log_lik) < 1e-4);
}

TEST_CASE("fit with other structures") {
    const auto rd = reference_data(SpatialFamily::Exponential, 6, 8, 0);
    const auto id = fit(rd.data, CoefficientStructure::identity(), SpatialFamily::Exponential);
    CHECK(id.b_hat == MatrixXd::Identity(3, 3));
    CHECK(id.num_params == 0 + 5 + 3);

    const auto dg = fit(rd.data, CoefficientStructure::diagonal(), SpatialFamily::Exponential);
    CHECK(dg.converged);
    CHECK((dg.b_hat.array() != 0.0).count() <= 3);

    const auto blk = fit(rd.data, CoefficientStructure::block({{{0, 1}, {0, 1}}, {{2, 2}, {2, 2}}}),
                         SpatialFamily::Exponential);
    CHECK(blk.converged);
    CHECK(blk.b_hat(0, 2) == 0.0);
    CHECK(blk.b_hat(2, 0) == 0.0);

    AugmentationRules ic;
    ic.intercept = true;
    const auto aug = fit(rd.data, CoefficientStructure::dense().with_augmentation(ic), SpatialFamily::Exponential);
    CHECK(aug.b_hat.cols() == 4);
    CHECK(aug.num_params == 12 + 5 + 3);
}

TEST_CASE("fit errors") {
    const auto rd = reference_data(SpatialFamily::Exponential, 2, 1, 0);
    // q = 3 covariates, r = 2 columns.
    CHECK_THROWS_AS((void)fit(rd.data, CoefficientStructure::dense(), SpatialFamily::Exponential), DataError);
    FitOptions bad;
    bad.tol_loglik = -1.0;
    const auto ok = reference_data(SpatialFamily::Exponential, 4, 2, 0);
    CHECK_THROWS_AS((void)fit(ok.data, CoefficientStructure::dense(), SpatialFamily::Exponential, bad),
                    std::invalid_argument);
}

TEST_CASE("sparse mask with beta_23 = 0 recovers the generating coefficients") {
    auto sc = reference_scenario(SpatialFamily::Exponential, 10, 12);
    sc.true_b(1, 2) = 0.0;
    BoolMatrix mask = BoolMatrix::Constant(3, 3, true);
    mask(1, 2) = false;
    const int n = 20;
    MatrixXd sum = MatrixXd::Zero(3, 3), sum_sq = MatrixXd::Zero(3, 3);
    int constrained_wins = 0;
    for (int rep = 0; rep < n; ++rep) {
        const auto rd = draw_replication(sc, rep);
        const auto m = fit(rd.data, CoefficientStructure::sparse(mask), SpatialFamily::Exponential);
        CHECK(m.b_hat(1, 2) == 0.0);
        sum += m.b_hat;
        sum_sq += m.b_hat.cwiseProduct(m.b_hat);
        const auto d = fit(rd.data, CoefficientStructure::dense(), SpatialFamily::Exponential);
        if (m.bic <= d.bic) ++constrained_wins;
    }
    const MatrixXd mean = sum / n;
    const MatrixXd se = ((sum_sq / n - mean.cwiseProduct(mean)) / (n - 1.0)).cwiseSqrt();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            if (!mask(i, j)) continue;
            CHECK(std::abs(mean(i, j) - sc.true_b(i, j)) <= 4.0 * se(i, j) + 1e-3);
        }
    }
    CHECK(constrained_wins > n / 2);
}

TEST_CASE("4 x 3 block layout keeps off-block entries at zero") {
    auto sc = reference_scenario(SpatialFamily::Exponential, 8, 10);
    sc.true_b = MatrixXd::Zero(4, 3);
    sc.true_b.block(0, 0, 2, 2) << 1.0, 0.5, -0.7, 1.3;
    sc.true_b.block(2, 2, 2, 1) << 2.0, -1.0;
    sc.true_sigma = MatrixXd::Identity(4, 4);
    sc.true_sigma(1, 0) = sc.true_sigma(0, 1) = 0.3;
    const auto structure = CoefficientStructure::block({{{0, 1}, {0, 1}}, {{2, 3}, {2, 2}}});
    for (int rep = 0; rep < 3; ++rep) {
        const auto rd = draw_replication(sc, rep);
        const auto m = fit(rd.data, structure, SpatialFamily::Exponential);
        CHECK(m.converged);
        CHECK(m.b_hat.block(0, 2, 2, 1).isZero(0.0));
        CHECK(m.b_hat.block(2, 0, 2, 2).isZero(0.0));
        CHECK(frobenius_error(m.b_hat, sc.true_b) < 1.0);
    }
}
