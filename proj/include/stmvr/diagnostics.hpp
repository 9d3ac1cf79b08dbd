#pragma once

#include "stmvr/covariance.hpp"
#include "stmvr/model_core.hpp"

#include <utility>
#include <vector>

namespace stmvr {

// A^{-1/2} by symmetric eigendecomposition; throws NumericalError unless A is
// positive definite.
[[nodiscard]] MatrixXd inverse_sqrt_spd(const MatrixXd& a);

// E* = Sigma^{-1/2} E (Psi_sp^{-1/2} (x) Psi_tp^{-1/2}).
[[nodiscard]] MatrixXd standardize_residuals(const MatrixXd& residuals, const MatrixXd& sigma,
                                             const MatrixXd& psi_spatial,
                                             const MatrixXd& psi_temporal);

// psi_jj = (Psi_sp)_ll (Psi_tp)_tt for column j = (l, t).
[[nodiscard]] VectorXd column_variances(const MatrixXd& psi_spatial, const MatrixXd& psi_temporal);

// d_j^2 = E_j^T Sigma^{-1} E_j / psi_jj.
[[nodiscard]] VectorXd column_distances(const MatrixXd& residuals, const MatrixXd& sigma,
                                        const VectorXd& psi_diagonal);

// r_i^2 = E_i Psi^{-1} E_i^T / sigma_ii.
[[nodiscard]] VectorXd row_distances(const MatrixXd& residuals, const KroneckerFactor& psi,
                                     const VectorXd& sigma_diagonal);

// z_ij = e_ij / sqrt(sigma_ii psi_jj).
[[nodiscard]] MatrixXd cell_residuals(const MatrixXd& residuals, const VectorXd& sigma_diagonal,
                                      const VectorXd& psi_diagonal);

// vec(E*)^T vec(E*).
[[nodiscard]] double global_statistic(const MatrixXd& e_star);

struct DiagnosticsOptions {
    double column_level = 0.975;  // chi2_p quantile for d_j^2
    double row_level = 0.975;     // chi2_r quantile for r_i^2
    double cell_threshold = 1.96;
    double global_coverage = 0.99;  // central interval of chi2_{pr}
};

[[nodiscard]] DiagnosticsReport diagnose(const MatrixXd& residuals, const MatrixXd& sigma,
                                         const MatrixXd& psi_spatial, const MatrixXd& psi_temporal,
                                         const DiagnosticsOptions& options = {});

// Residuals of a fitted model on its dataset (covariates augmented as fitted).
[[nodiscard]] MatrixXd model_residuals(const Dataset& data, const FittedModel& model);

[[nodiscard]] DiagnosticsReport diagnose(const Dataset& data, const FittedModel& model,
                                         const DiagnosticsOptions& options = {});

// (N(0, 1) quantile at (i - 0.5)/n, i-th smallest entry of E*).
// The entries of E* are only approximately independent when Psi is estimated.
[[nodiscard]] std::vector<std::pair<double, double>> qq_pairs(const MatrixXd& e_star);

}  // namespace stmvr
