#pragma once

#include "stmvr/covariance.hpp"
#include "stmvr/model_core.hpp"

#include <functional>
#include <optional>
#include <string>

namespace stmvr {

struct Bounds {
    double lower = 0.0;
    double upper = 0.0;
    [[nodiscard]] double clamp(double v) const noexcept {
        return v < lower ? lower : (v > upper ? upper : v);
    }
};

// Starting values for the covariance parameters.
//   DataDriven: phi = median pairwise distance, rho = lag-1 autocorrelation of
//               the response-averaged residuals, nu = 1.
//   Neutral:    phi = max pairwise distance / 4, rho = 0, nu = 0.5.
// Both start B from unweighted least squares and Sigma from its residual
// cross-product.
enum class InitPolicy { DataDriven, Neutral };

// Sample size in BIC: Cells uses n = p * r, Columns uses n = r.
enum class BicSampleSize { Cells, Columns };

struct FitOptions {
    std::size_t max_iter = 200;
    double tol_loglik = 1e-8;       // relative change in log-likelihood per cycle
    double ridge_lambda = 1e-8;     // sparse-structure system only
    double score_tol = 1e-9;        // root tolerance of 1-D score solves
    std::optional<Bounds> phi_bounds;  // default: [0.05 * min, 5 * max] pairwise distance
    Bounds nu_bounds{0.1, 10.0};
    Bounds rho_bounds{-0.999, 0.999};
    InitPolicy init = InitPolicy::DataDriven;
    std::optional<CovarianceParams> initial_params;  // overrides the policy's scalars
    JitterPolicy jitter;
    BicSampleSize bic_n = BicSampleSize::Cells;
    std::size_t score_grid = 16;    // bracketing points for the first score solve
    double monotone_tol = 1e-8;     // allowed per-cycle decrease, relative to max(1, |l|)

    void validate() const;
};

// Matrix-normal log density of Y with mean M, including the -(pr/2) log 2 pi term.
[[nodiscard]] double log_likelihood(const MatrixXd& y, const MatrixXd& mean, const MatrixXd& sigma,
                                    const MatrixXd& psi_spatial, const MatrixXd& psi_temporal,
                                    JitterPolicy jitter = {});

// Psi_sp = sigma_s2 R_sp, Psi_tp = R_tp from the dataset layout.
[[nodiscard]] double log_likelihood(const Dataset& data, const MatrixXd& b, const MatrixXd& sigma,
                                    const CovarianceSpec& cov, JitterPolicy jitter = {});

// Covariance factors for current parameters.
[[nodiscard]] KroneckerFactor column_covariance_factor(const MatrixXd& distances,
                                                       std::size_t num_times,
                                                       SpatialFamily family,
                                                       const CovarianceParams& params,
                                                       JitterPolicy jitter = {});

// B = Y Psi^{-1} X^T (X Psi^{-1} X^T)^{-1}.
[[nodiscard]] MatrixXd update_b_dense(const MatrixXd& y, const MatrixXd& x,
                                      const KroneckerFactor& psi);

// Diagonal coefficients by cyclic coordinate sweeps of the coupled
// estimating equations, starting from `start` (zeros when empty).
[[nodiscard]] VectorXd update_b_diagonal(const MatrixXd& y, const MatrixXd& x,
                                         const MatrixXd& sigma_inv, const KroneckerFactor& psi,
                                         double tol, const VectorXd& start = {},
                                         std::size_t max_sweeps = 10000);

// Free entries from (H + lambda I) beta = g with
// H = S^T (X Psi^{-1} X^T (x) Sigma^{-1}) S and g = S^T vec(Sigma^{-1} Y Psi^{-1} X^T).
// Returns the full p x q matrix, zeros outside the mask.
[[nodiscard]] MatrixXd update_b_sparse(const MatrixXd& y, const MatrixXd& x,
                                       const MatrixXd& sigma_inv, const KroneckerFactor& psi,
                                       const BoolMatrix& mask, double lambda);

// Dense estimator applied to each (rows, cols) block; zeros elsewhere.
[[nodiscard]] MatrixXd update_b_block(const MatrixXd& y, const MatrixXd& x,
                                      const KroneckerFactor& psi,
                                      const std::vector<CoefficientBlock>& blocks);

struct SigmaUpdate {
    MatrixXd raw;         // E Psi^{-1} E^T / r
    MatrixXd normalized;  // raw / scale, entry (0, 0) == 1
    double scale = 1.0;   // raw(0, 0); multiply sigma_s2 by this
};

[[nodiscard]] SigmaUpdate update_sigma(const MatrixXd& residuals, const KroneckerFactor& psi);

// tr(Sigma^{-1} E (R_sp^{-1} (x) R_tp^{-1}) E^T) / (p L T); `correlation`
// factors R_sp and R_tp.
[[nodiscard]] double update_sigma_s2(const MatrixXd& residuals, const SpdFactor& sigma,
                                     const KroneckerFactor& correlation);

// One profiled 1-D evaluation: sigma_s2 is replaced by its closed form at the
// candidate value, so `score` is the derivative of the profiled log-likelihood.
struct ProfileEvaluation {
    double value = 0.0;
    double log_lik = 0.0;
    double sigma_s2 = 0.0;
    double score = 0.0;
    double trace_term = 0.0;      // (p T / 2) tr(R^{-1} dR) or the temporal analogue
    double quadratic_term = 0.0;  // 1/(2 sigma_s2) tr(Sigma^{-1} E (...) E^T)
    [[nodiscard]] double scale() const noexcept;
};

struct ScoreSolution {
    double value = 0.0;
    double sigma_s2 = 0.0;
    double log_lik = 0.0;
    double score = 0.0;
    double scale = 1.0;
    bool at_boundary = false;
    bool root_found = false;
};

// Residual-side quantities of the covariance score equations, fixed while the
// covariance parameters move: E, the Sigma factor, and the whitened
// between-location and between-time cross products. Rebuild after any
// parameter block changes.
class ScoreEquationState {
public:
    ScoreEquationState(const MatrixXd& residuals, const MatrixXd& sigma, MatrixXd distances,
                       std::size_t num_times, SpatialFamily family, CovarianceParams params,
                       JitterPolicy jitter = {});

    [[nodiscard]] const MatrixXd& residuals() const noexcept { return residuals_; }
    [[nodiscard]] const CovarianceParams& params() const noexcept { return params_; }
    [[nodiscard]] SpatialFamily family() const noexcept { return family_; }
    [[nodiscard]] std::size_t num_locations() const noexcept {
        return static_cast<std::size_t>(distances_.rows());
    }
    [[nodiscard]] std::size_t num_times() const noexcept { return num_times_; }

    // Full log-likelihood at the current parameters.
    [[nodiscard]] double log_likelihood() const;
    // Closed-form sigma_s2 at the current correlation parameters.
    [[nodiscard]] double profiled_sigma_s2() const;

    [[nodiscard]] ProfileEvaluation evaluate_phi(double phi, bool with_score = true) const;
    [[nodiscard]] ProfileEvaluation evaluate_nu(double nu, bool with_score = true) const;
    [[nodiscard]] ProfileEvaluation evaluate_rho(double rho, bool with_score = true) const;

private:
    [[nodiscard]] ProfileEvaluation evaluate_spatial(double phi, std::optional<double> nu,
                                                     bool derivative_in_nu,
                                                     bool with_score) const;

    MatrixXd residuals_;
    MatrixXd distances_;
    std::size_t num_times_;
    SpatialFamily family_;
    CovarianceParams params_;
    JitterPolicy jitter_;
    std::size_t p_;
    double constant_ = 0.0;      // -(pr/2) log 2 pi - (r/2) log|Sigma|
    MatrixXd spatial_cross_;     // sum_m V_m^T R_tp^{-1} V_m   (L x L)
    MatrixXd temporal_cross_;    // sum_m V_m R_sp^{-1} V_m^T   (T x T)
    double log_det_spatial_ = 0.0;
    double log_det_temporal_ = 0.0;
};

struct ScoreSolveOptions {
    Bounds bounds;
    double tol = 1e-9;
    std::size_t grid = 16;
    // Search [current / 2, current * 2] first; fall back to the full grid.
    bool local = false;
};

[[nodiscard]] ScoreSolution solve_score_phi(const ScoreEquationState& state,
                                            const ScoreSolveOptions& options);
[[nodiscard]] ScoreSolution solve_score_nu(const ScoreEquationState& state,
                                           const ScoreSolveOptions& options);
[[nodiscard]] ScoreSolution solve_score_rho(const ScoreEquationState& state,
                                            const ScoreSolveOptions& options);

// k = free B entries + p(p+1)/2 - 1 + covariance parameter count.
[[nodiscard]] std::size_t parameter_count(const CoefficientStructure& structure, std::size_t p,
                                          std::size_t q, SpatialFamily family);

[[nodiscard]] double bic(double log_lik, std::size_t num_params, double sample_size);
[[nodiscard]] double bic(const FittedModel& model, const Dataset& data,
                         BicSampleSize convention = BicSampleSize::Cells);

[[nodiscard]] Bounds default_phi_bounds(const MatrixXd& distances);

// Alternating conditional maximization over B, Sigma, sigma_s2, phi_s, nu, rho.
[[nodiscard]] FittedModel fit(const Dataset& data, const CoefficientStructure& structure,
                              SpatialFamily family, const FitOptions& options = {});

}  // namespace stmvr
