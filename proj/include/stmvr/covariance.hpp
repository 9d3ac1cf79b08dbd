#pragma once

#include "stmvr/model_core.hpp"

#include <Eigen/Cholesky>

#include <optional>
#include <string>

namespace stmvr {

// Correlation C(h) / sigma_s2 of the spatial family. Exactly 1 at h == 0 and
// exactly 0 past compact support (cubic: h > 2 phi, spherical: h > phi).
// The Matern argument is sqrt(2 nu) h / phi.
[[nodiscard]] double spatial_correlation(SpatialFamily family, double h, double phi,
                                         std::optional<double> nu = std::nullopt);

// Partial derivative of spatial_correlation with respect to phi.
[[nodiscard]] double spatial_correlation_dphi(SpatialFamily family, double h, double phi,
                                              std::optional<double> nu = std::nullopt);

// Partial derivative of the Matern correlation with respect to nu. Zero at h == 0.
[[nodiscard]] double matern_correlation_dnu(double h, double phi, double nu);

[[nodiscard]] double temporal_correlation(long t1, long t2, double rho);
[[nodiscard]] double temporal_correlation_drho(long t1, long t2, double rho);

// Element-wise kernel on an L x L distance matrix.
[[nodiscard]] MatrixXd spatial_correlation_matrix(const MatrixXd& distances, SpatialFamily family,
                                                  double phi, std::optional<double> nu);
[[nodiscard]] MatrixXd spatial_correlation_dphi_matrix(const MatrixXd& distances,
                                                       SpatialFamily family, double phi,
                                                       std::optional<double> nu);
[[nodiscard]] MatrixXd matern_correlation_dnu_matrix(const MatrixXd& distances, double phi,
                                                     double nu);

[[nodiscard]] MatrixXd build_spatial_matrix(const SpaceTimeLayout& layout, SpatialFamily family,
                                            const CovarianceParams& params);
// AR(1) Toeplitz correlation rho^{|t - t'|}.
[[nodiscard]] MatrixXd build_temporal_matrix(std::size_t num_times, double rho);
[[nodiscard]] MatrixXd build_temporal_drho_matrix(std::size_t num_times, double rho);

// Near-singular SPD handling. Disabled: factorization failure throws. Enabled:
// add 1e-10 * mean(diag) to the diagonal, escalating x10 at most three times.
struct JitterPolicy {
    bool enabled = false;
    static constexpr double kRelativeStart = 1e-10;
    static constexpr int kMaxEscalations = 3;
};

// Cholesky factor of a symmetric positive definite matrix.
class SpdFactor {
public:
    SpdFactor() = default;
    SpdFactor(const MatrixXd& a, JitterPolicy jitter = {}, const std::string& what = "matrix");

    [[nodiscard]] Eigen::Index size() const noexcept { return llt_.rows(); }
    [[nodiscard]] MatrixXd solve(const MatrixXd& rhs) const { return llt_.solve(rhs); }
    [[nodiscard]] MatrixXd inverse() const;
    [[nodiscard]] double log_det() const noexcept { return log_det_; }
    [[nodiscard]] MatrixXd lower() const { return llt_.matrixL(); }
    // L^{-1} rhs.
    [[nodiscard]] MatrixXd whiten(const MatrixXd& rhs) const;
    [[nodiscard]] double jitter() const noexcept { return jitter_; }

    // False when the matrix is not numerically positive definite.
    [[nodiscard]] static bool is_positive_definite(const MatrixXd& a);

private:
    Eigen::LLT<MatrixXd> llt_;
    double log_det_ = 0.0;
    double jitter_ = 0.0;
};

// Factors of A (L x L) and B (T x T) representing A (x) B without forming it.
class KroneckerFactor {
public:
    KroneckerFactor() = default;
    KroneckerFactor(const MatrixXd& spatial, const MatrixXd& temporal, JitterPolicy jitter = {});

    [[nodiscard]] std::size_t num_locations() const noexcept {
        return static_cast<std::size_t>(spatial_.size());
    }
    [[nodiscard]] std::size_t num_times() const noexcept {
        return static_cast<std::size_t>(temporal_.size());
    }
    [[nodiscard]] const SpdFactor& spatial() const noexcept { return spatial_; }
    [[nodiscard]] const SpdFactor& temporal() const noexcept { return temporal_; }

    // M (A (x) B)^{-1} for M with L*T columns (location-major, time fastest).
    [[nodiscard]] MatrixXd solve_right(const MatrixXd& m) const;
    // log |A (x) B| = T log|A| + L log|B|.
    [[nodiscard]] double log_det() const noexcept;

private:
    SpdFactor spatial_;
    SpdFactor temporal_;
};

// M (A (x) B)^{-1} computed blockwise from the two Cholesky factors.
[[nodiscard]] MatrixXd kronecker_solve(const MatrixXd& a, const MatrixXd& b, const MatrixXd& m,
                                       JitterPolicy jitter = {});

}  // namespace stmvr
