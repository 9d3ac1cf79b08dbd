#pragma once

#include "stmvr/estimation.hpp"
#include "stmvr/model_core.hpp"

#include <boost/random/mersenne_twister.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace stmvr {

// Standard normal draws from a 64-bit Mersenne Twister. Streams are keyed by
// (seed, replication, stream) so any replication can be regenerated alone.
class NormalRng {
public:
    NormalRng(std::uint64_t seed, std::uint64_t replication = 0, std::uint64_t stream = 0);

    double normal();
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

private:
    boost::random::mt19937_64 engine_;
};

// Y = M + A Z C^T with A A^T = Sigma and C C^T = Psi_sp (x) Psi_tp; C is never
// formed: each row of A Z is reshaped T x L and mapped to Ctp V Csp^T.
[[nodiscard]] MatrixXd sample_matrix_normal(const MatrixXd& mean, const MatrixXd& sigma,
                                            const MatrixXd& psi_spatial,
                                            const MatrixXd& psi_temporal, NormalRng& rng);

// K distinct points of the integer lattice {1..10} x {1..10}.
[[nodiscard]] std::vector<Location> sample_lattice_locations(std::size_t k, NormalRng& rng);

struct SimulationScenario {
    std::string name = "scenario";
    MatrixXd true_b;
    MatrixXd true_sigma;
    SpatialFamily family = SpatialFamily::Exponential;
    CovarianceParams params;
    // Fixed coordinates; when empty, num_locations lattice points are drawn
    // per replication.
    std::vector<Location> locations;
    std::size_t num_locations = 10;
    std::size_t num_times = 12;
    std::size_t replications = 100;
    std::uint64_t seed = 1;
    CoefficientStructure structure = CoefficientStructure::dense();
    std::optional<SpatialFamily> fit_family;  // defaults to `family`
    FitOptions fit_options;

    [[nodiscard]] std::size_t layout_locations() const noexcept {
        return locations.empty() ? num_locations : locations.size();
    }
    void validate() const;
};

// B0 = [[1, 1.4, 2], [1, 1.2, 1], [2, 1, 1.2]], Sigma0 AR(1) with 0.4,
// sigma_s2 = 1.1, phi_s = 1.2, rho = 0.7 (nu = 1.5 for Matern).
[[nodiscard]] SimulationScenario reference_scenario(SpatialFamily family, std::size_t num_locations,
                                                    std::size_t num_times);

struct ReplicationData {
    Dataset data;
    MatrixXd mean;
};

// Layout, X (iid N(0,1)) and Y of one replication.
[[nodiscard]] ReplicationData draw_replication(const SimulationScenario& scenario,
                                               std::size_t replication);

struct ReplicationRecord {
    std::size_t index = 0;
    bool ok = false;
    std::string error;
    double b_error = 0.0;      // ||B_hat - B0||_F
    double sigma_error = 0.0;  // ||Sigma_hat - Sigma0||_F
    CovarianceParams estimate;
    double log_lik = 0.0;
    double bic = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    std::optional<double> separate_b_error;
};

struct StudySummary {
    std::size_t completed = 0;
    std::size_t failed = 0;
    double median_b_error = 0.0;
    double median_sigma_error = 0.0;
    std::optional<double> median_separate_b_error;
    double median_sigma_s2 = 0.0;
    double median_phi_s = 0.0;
    double median_rho = 0.0;
    std::optional<double> median_nu;
    double mse_sigma_s2 = 0.0;
    double mse_phi_s = 0.0;
    double mse_rho = 0.0;
    std::optional<double> mse_nu;
};

struct StudyResult {
    std::string name;
    std::vector<ReplicationRecord> records;  // ordered by replication index
    StudySummary summary;
    bool study_failed = false;  // more than 10% of replications failed
};

struct StudyOptions {
    std::size_t threads = 0;  // 0: hardware concurrency
    bool separate_arm = false;
};

[[nodiscard]] StudyResult run_study(const SimulationScenario& scenario,
                                    const StudyOptions& options = {});

// run_study with the separate arm enabled.
[[nodiscard]] StudyResult compare_joint_vs_separate(const SimulationScenario& scenario,
                                                    std::size_t threads = 0);

// Stacked p = 1 fits, one per response row, with the same covariates and family.
[[nodiscard]] MatrixXd fit_separate(const Dataset& data, SpatialFamily family,
                                    const FitOptions& options = {});

[[nodiscard]] double frobenius_error(const MatrixXd& estimate, const MatrixXd& truth);
[[nodiscard]] double mean_squared_error(const std::vector<double>& estimates, double truth);
// Median of a non-empty sample (mean of the two central values for even sizes).
[[nodiscard]] double median(std::vector<double> values);

}  // namespace stmvr
