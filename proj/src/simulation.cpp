#include "stmvr/simulation.hpp"

#include "stmvr/covariance.hpp"
#include "stmvr/errors.hpp"

#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <stdexcept>
#include <thread>

namespace stmvr {

NormalRng::NormalRng(std::uint64_t seed, std::uint64_t replication, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(replication),
                      static_cast<std::uint32_t>(replication >> 32),
                      static_cast<std::uint32_t>(stream)};
    engine_.seed(seq);
}

double NormalRng::normal() {
    boost::random::normal_distribution<double> dist(0.0, 1.0);
    return dist(engine_);
}

std::size_t NormalRng::index(std::size_t n) {
    boost::random::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
}

MatrixXd NormalRng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    MatrixXd z(rows, cols);
    // Row-major fill so the draw order does not depend on Eigen's storage.
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = normal();
    }
    return z;
}

MatrixXd sample_matrix_normal(const MatrixXd& mean, const MatrixXd& sigma,
                              const MatrixXd& psi_spatial, const MatrixXd& psi_temporal,
                              NormalRng& rng) {
    const auto p = mean.rows();
    const auto nl = psi_spatial.rows();
    const auto nt = psi_temporal.rows();
    if (sigma.rows() != p || mean.cols() != nl * nt) {
        throw std::invalid_argument("sample_matrix_normal: dimensions do not match");
    }
    const MatrixXd a = SpdFactor(sigma, {}, "Sigma").lower();
    const MatrixXd c_sp = SpdFactor(psi_spatial, {}, "Psi_sp").lower();
    const MatrixXd c_tp = SpdFactor(psi_temporal, {}, "Psi_tp").lower();
    const MatrixXd w = a * rng.normal_matrix(p, nl * nt);
    MatrixXd y = mean;
    for (Eigen::Index m = 0; m < p; ++m) {
        const VectorXd row = w.row(m).transpose();
        const Eigen::Map<const MatrixXd> v(row.data(), nt, nl);
        const MatrixXd mapped = c_tp * v * c_sp.transpose();
        y.row(m) += Eigen::Map<const VectorXd>(mapped.data(), nl * nt).transpose();
    }
    return y;
}

std::vector<Location> sample_lattice_locations(std::size_t k, NormalRng& rng) {
    constexpr std::size_t kSide = 10;
    if (k < 1 || k > kSide * kSide) {
        throw std::invalid_argument("lattice sampling needs 1 <= K <= 100");
    }
    std::vector<std::size_t> cells(kSide * kSide);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + rng.index(cells.size() - i);
        std::swap(cells[i], cells[j]);
    }
    std::vector<Location> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const double x = static_cast<double>(cells[i] % kSide + 1);
        const double y = static_cast<double>(cells[i] / kSide + 1);
        out.push_back({"s" + std::to_string(i + 1), x, y});
    }
    return out;
}

void SimulationScenario::validate() const {
    const auto p = true_b.rows();
    if (p < 1 || true_b.cols() < 1) throw std::invalid_argument("scenario: empty true B");
    if (true_sigma.rows() != p || true_sigma.cols() != p) {
        throw std::invalid_argument("scenario: true Sigma must be p x p");
    }
    if (!SpdFactor::is_positive_definite(true_sigma)) {
        throw std::invalid_argument("scenario: true Sigma is not positive definite");
    }
    params.validate(family);
    if (layout_locations() < 1 || num_times < 1) {
        throw std::invalid_argument("scenario: need at least one location and one time");
    }
    if (locations.empty() && num_locations > 100) {
        throw std::invalid_argument("scenario: at most 100 lattice locations");
    }
    if (replications < 1) throw std::invalid_argument("scenario: replications must be >= 1");
    structure.validate(static_cast<std::size_t>(p), static_cast<std::size_t>(true_b.cols()));
    fit_options.validate();
}

SimulationScenario reference_scenario(SpatialFamily family, std::size_t num_locations,
                                      std::size_t num_times) {
    SimulationScenario s;
    s.name = std::string(to_string(family)) + "_L" + std::to_string(num_locations) + "_T" +
             std::to_string(num_times);
    s.true_b.resize(3, 3);
    s.true_b << 1.0, 1.4, 2.0, 1.0, 1.2, 1.0, 2.0, 1.0, 1.2;
    s.true_sigma.resize(3, 3);
    s.true_sigma << 1.0, 0.4, 0.16, 0.4, 1.0, 0.4, 0.16, 0.4, 1.0;
    s.family = family;
    s.params.sigma_s2 = 1.1;
    s.params.phi_s = 1.2;
    s.params.rho = 0.7;
    if (family == SpatialFamily::Matern) s.params.nu = 1.5;
    s.num_locations = num_locations;
    s.num_times = num_times;
    return s;
}

namespace {
enum Stream : std::uint64_t { kLocations = 0, kCovariates = 1, kNoise = 2 };
}

ReplicationData draw_replication(const SimulationScenario& scenario, std::size_t replication) {
    std::vector<Location> locations = scenario.locations;
    if (locations.empty()) {
        NormalRng rng(scenario.seed, replication, kLocations);
        locations = sample_lattice_locations(scenario.num_locations, rng);
    }
    SpaceTimeLayout layout = SpaceTimeLayout::with_time_count(std::move(locations),
                                                              scenario.num_times);
    const auto r = static_cast<Eigen::Index>(layout.num_columns());
    NormalRng x_rng(scenario.seed, replication, kCovariates);
    const auto derived = static_cast<Eigen::Index>(scenario.structure.augmentation().derived_count());
    if (scenario.true_b.cols() <= derived) {
        throw std::invalid_argument("scenario: true B has no columns for base covariates");
    }
    MatrixXd x = x_rng.normal_matrix(scenario.true_b.cols() - derived, r);

    const auto augmented = augment_covariates(x, scenario.structure);
    if (augmented.x.rows() != scenario.true_b.cols()) {
        throw std::invalid_argument("scenario: true B columns must match the augmented covariates");
    }
    MatrixXd mean = scenario.true_b * augmented.x;
    const MatrixXd psi_sp =
        scenario.params.sigma_s2 * build_spatial_matrix(layout, scenario.family, scenario.params);
    const MatrixXd psi_tp = build_temporal_matrix(scenario.num_times, scenario.params.rho);
    NormalRng noise(scenario.seed, replication, kNoise);
    MatrixXd y = sample_matrix_normal(mean, scenario.true_sigma, psi_sp, psi_tp, noise);
    return {Dataset(std::move(y), std::move(x), std::move(layout)), std::move(mean)};
}

MatrixXd fit_separate(const Dataset& data, SpatialFamily family, const FitOptions& options) {
    MatrixXd b;
    for (Eigen::Index i = 0; i < data.y.rows(); ++i) {
        Dataset single(data.y.row(i), data.x, data.layout);
        const FittedModel m = fit(single, CoefficientStructure::dense(), family, options);
        if (b.size() == 0) b = MatrixXd::Zero(data.y.rows(), m.b_hat.cols());
        b.row(i) = m.b_hat.row(0);
    }
    return b;
}

double frobenius_error(const MatrixXd& estimate, const MatrixXd& truth) {
    if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
        throw std::invalid_argument("frobenius_error: shapes differ");
    }
    return (estimate - truth).norm();
}

double mean_squared_error(const std::vector<double>& estimates, double truth) {
    if (estimates.empty()) throw std::invalid_argument("mean_squared_error: empty sample");
    double s = 0.0;
    for (double e : estimates) s += (e - truth) * (e - truth);
    return s / static_cast<double>(estimates.size());
}

double median(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("median: empty sample");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

ReplicationRecord run_replication(const SimulationScenario& scenario, std::size_t index,
                                  bool separate_arm) {
    ReplicationRecord rec;
    rec.index = index;
    try {
        const ReplicationData rep = draw_replication(scenario, index);
        const SpatialFamily family = scenario.fit_family.value_or(scenario.family);
        const FittedModel m = fit(rep.data, scenario.structure, family, scenario.fit_options);
        rec.b_error = frobenius_error(m.b_hat, scenario.true_b);
        rec.sigma_error = frobenius_error(m.sigma_hat, scenario.true_sigma);
        rec.estimate = m.cov_params;
        rec.log_lik = m.log_lik;
        rec.bic = m.bic;
        rec.iterations = m.num_iter;
        rec.converged = m.converged;
        if (separate_arm) {
            rec.separate_b_error =
                frobenius_error(fit_separate(rep.data, family, scenario.fit_options),
                                scenario.true_b);
        }
        rec.ok = true;
    } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
    }
    return rec;
}

StudySummary summarize(const SimulationScenario& scenario,
                       const std::vector<ReplicationRecord>& records) {
    StudySummary s;
    std::vector<double> b, sig, sep, s2, phi, rho, nu;
    for (const auto& r : records) {
        if (!r.ok) {
            ++s.failed;
            continue;
        }
        ++s.completed;
        b.push_back(r.b_error);
        sig.push_back(r.sigma_error);
        if (r.separate_b_error) sep.push_back(*r.separate_b_error);
        s2.push_back(r.estimate.sigma_s2);
        phi.push_back(r.estimate.phi_s);
        rho.push_back(r.estimate.rho);
        if (r.estimate.nu) nu.push_back(*r.estimate.nu);
    }
    if (s.completed == 0) return s;
    s.median_b_error = median(b);
    s.median_sigma_error = median(sig);
    if (!sep.empty()) s.median_separate_b_error = median(sep);
    s.median_sigma_s2 = median(s2);
    s.median_phi_s = median(phi);
    s.median_rho = median(rho);
    s.mse_sigma_s2 = mean_squared_error(s2, scenario.params.sigma_s2);
    s.mse_phi_s = mean_squared_error(phi, scenario.params.phi_s);
    s.mse_rho = mean_squared_error(rho, scenario.params.rho);
    if (!nu.empty()) {
        s.median_nu = median(nu);
        s.mse_nu = mean_squared_error(nu, scenario.params.nu.value_or(0.0));
    }
    return s;
}

}  // namespace

StudyResult run_study(const SimulationScenario& scenario, const StudyOptions& options) {
    scenario.validate();
    const std::size_t n = scenario.replications;
    std::size_t threads = options.threads ? options.threads : std::thread::hardware_concurrency();
    threads = std::clamp<std::size_t>(threads, 1, n);

    StudyResult result;
    result.name = scenario.name;
    result.records.resize(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            result.records[i] = run_replication(scenario, i, options.separate_arm);
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(threads);
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    result.summary = summarize(scenario, result.records);
    result.study_failed = 10 * result.summary.failed > n;
    return result;
}

StudyResult compare_joint_vs_separate(const SimulationScenario& scenario, std::size_t threads) {
    return run_study(scenario, {threads, true});
}

}  // namespace stmvr
