#include "stmvr/covariance.hpp"

#include "stmvr/errors.hpp"
#include "stmvr/special_functions.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace stmvr {

namespace {

constexpr double kLn2 = 0.69314718055994530942;
// Below this Matern argument the correlation equals 1 to double precision.
constexpr double kMaternTinyArgument = 1e-12;
// Relative pivot size under which a factorization is reported singular.
constexpr double kSingularPivot = 1e-14;

void check_spatial_args(SpatialFamily family, double h, double phi, std::optional<double> nu) {
    if (!(h >= 0.0) || !std::isfinite(h)) {
        throw std::invalid_argument("distance must be finite and non-negative");
    }
    if (!(phi > 0.0) || !std::isfinite(phi)) {
        throw std::invalid_argument("phi_s must be positive");
    }
    if (family == SpatialFamily::Matern && (!nu || !(*nu > 0.0))) {
        throw std::invalid_argument("Matern correlation requires nu > 0");
    }
}

void check_rho(double rho) {
    if (!(std::abs(rho) < 1.0)) {
        throw std::invalid_argument("AR(1) correlation requires |rho| < 1");
    }
}

// log of 2^{1-nu}/Gamma(nu) u^nu K_order(u).
double matern_log_term(double nu, double order, double u) {
    const double k = bessel_k(std::abs(order), u);
    if (k <= 0.0) return -std::numeric_limits<double>::infinity();
    return (1.0 - nu) * kLn2 - log_gamma(nu) + nu * std::log(u) + std::log(k);
}

double matern(double h, double phi, double nu) {
    if (h == 0.0) return 1.0;
    const double u = std::sqrt(2.0 * nu) * h / phi;
    if (u < kMaternTinyArgument) return 1.0;
    const double r = std::exp(matern_log_term(nu, nu, u));
    return std::min(r, 1.0);
}

double matern_dphi(double h, double phi, double nu) {
    if (h == 0.0) return 0.0;
    const double u = std::sqrt(2.0 * nu) * h / phi;
    if (u < kMaternTinyArgument) return 0.0;
    // d/du [u^nu K_nu(u)] = -u^nu K_{nu-1}(u) and du/dphi = -u/phi.
    return std::exp(matern_log_term(nu, nu - 1.0, u)) * u / phi;
}

}  // namespace

double spatial_correlation(SpatialFamily family, double h, double phi, std::optional<double> nu) {
    check_spatial_args(family, h, phi, nu);
    switch (family) {
        case SpatialFamily::Exponential:
            return std::exp(-h / phi);
        case SpatialFamily::Gaussian:
            return std::exp(-(h * h) / (phi * phi));
        case SpatialFamily::Cubic: {
            const double s = h / (2.0 * phi);
            if (s > 1.0) return 0.0;
            const double s2 = s * s;
            const double s3 = s2 * s;
            const double s5 = s3 * s2;
            const double s7 = s5 * s2;
            return 1.0 - 7.0 * s2 + 8.75 * s3 - 3.5 * s5 + 0.75 * s7;
        }
        case SpatialFamily::Spherical: {
            const double a = h / phi;
            if (a > 1.0) return 0.0;
            return 1.0 - 1.5 * a + 0.5 * a * a * a;
        }
        case SpatialFamily::Matern:
            return matern(h, phi, *nu);
    }
    return 0.0;
}

double spatial_correlation_dphi(SpatialFamily family, double h, double phi,
                                std::optional<double> nu) {
    check_spatial_args(family, h, phi, nu);
    if (h == 0.0) return 0.0;
    switch (family) {
        case SpatialFamily::Exponential:
            return h / (phi * phi) * std::exp(-h / phi);
        case SpatialFamily::Gaussian:
            return 2.0 * h * h / (phi * phi * phi) * std::exp(-(h * h) / (phi * phi));
        case SpatialFamily::Cubic: {
            const double s = h / (2.0 * phi);
            if (s > 1.0) return 0.0;
            const double s2 = s * s;
            const double ds = -14.0 * s + 26.25 * s2 - 17.5 * s2 * s2 + 5.25 * s2 * s2 * s2;
            return ds * (-s / phi);
        }
        case SpatialFamily::Spherical: {
            const double a = h / phi;
            if (a > 1.0) return 0.0;
            return 1.5 * a / phi * (1.0 - a * a);
        }
        case SpatialFamily::Matern:
            return matern_dphi(h, phi, *nu);
    }
    return 0.0;
}

double matern_correlation_dnu(double h, double phi, double nu) {
    check_spatial_args(SpatialFamily::Matern, h, phi, nu);
    if (h == 0.0) return 0.0;
    const double u = std::sqrt(2.0 * nu) * h / phi;
    if (u < kMaternTinyArgument) return 0.0;
    const double log_r = matern_log_term(nu, nu, u);
    if (!std::isfinite(log_r)) return 0.0;
    const double r = std::exp(log_r);
    const double k_nu = bessel_k(nu, u);
    const double k_prev = bessel_k(std::abs(nu - 1.0), u);
    const double bracket = -kLn2 - digamma(nu) + std::log(u) + dlog_bessel_k_dnu(nu, u) -
                           u * k_prev / (2.0 * nu * k_nu);
    return r * bracket;
}

double temporal_correlation(long t1, long t2, double rho) {
    check_rho(rho);
    const long lag = std::labs(t1 - t2);
    if (lag == 0) return 1.0;
    return std::pow(rho, static_cast<double>(lag));
}

double temporal_correlation_drho(long t1, long t2, double rho) {
    check_rho(rho);
    const long lag = std::labs(t1 - t2);
    if (lag == 0) return 0.0;
    if (lag == 1) return 1.0;
    return static_cast<double>(lag) * std::pow(rho, static_cast<double>(lag - 1));
}

MatrixXd spatial_correlation_matrix(const MatrixXd& distances, SpatialFamily family, double phi,
                                    std::optional<double> nu) {
    const auto n = distances.rows();
    MatrixXd r(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        r(i, i) = 1.0;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            r(i, j) = r(j, i) = spatial_correlation(family, distances(i, j), phi, nu);
        }
    }
    return r;
}

MatrixXd spatial_correlation_dphi_matrix(const MatrixXd& distances, SpatialFamily family,
                                         double phi, std::optional<double> nu) {
    const auto n = distances.rows();
    MatrixXd d = MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            d(i, j) = d(j, i) = spatial_correlation_dphi(family, distances(i, j), phi, nu);
        }
    }
    return d;
}

MatrixXd matern_correlation_dnu_matrix(const MatrixXd& distances, double phi, double nu) {
    const auto n = distances.rows();
    MatrixXd d = MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            d(i, j) = d(j, i) = matern_correlation_dnu(distances(i, j), phi, nu);
        }
    }
    return d;
}

MatrixXd build_spatial_matrix(const SpaceTimeLayout& layout, SpatialFamily family,
                              const CovarianceParams& params) {
    return spatial_correlation_matrix(layout.distance_matrix(), family, params.phi_s, params.nu);
}

MatrixXd build_temporal_matrix(std::size_t num_times, double rho) {
    check_rho(rho);
    const auto n = static_cast<Eigen::Index>(num_times);
    MatrixXd r(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            r(i, j) = temporal_correlation(static_cast<long>(i), static_cast<long>(j), rho);
        }
    }
    return r;
}

MatrixXd build_temporal_drho_matrix(std::size_t num_times, double rho) {
    check_rho(rho);
    const auto n = static_cast<Eigen::Index>(num_times);
    MatrixXd d(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            d(i, j) = temporal_correlation_drho(static_cast<long>(i), static_cast<long>(j), rho);
        }
    }
    return d;
}

namespace {

bool factor_ok(const Eigen::LLT<MatrixXd>& llt, const MatrixXd& a) {
    if (llt.info() != Eigen::Success) return false;
    const double max_diag = a.diagonal().cwiseAbs().maxCoeff();
    const auto l_diag = llt.matrixLLT().diagonal();
    if (!l_diag.allFinite()) return false;
    const double min_pivot = l_diag.cwiseAbs2().minCoeff();
    return min_pivot > kSingularPivot * max_diag;
}

}  // namespace

SpdFactor::SpdFactor(const MatrixXd& a, JitterPolicy jitter, const std::string& what) {
    if (a.rows() != a.cols() || a.rows() == 0) {
        throw std::invalid_argument(what + " must be a non-empty square matrix");
    }
    if (!a.allFinite()) {
        throw NumericalError(what + " has non-finite entries");
    }
    llt_.compute(a);
    if (!factor_ok(llt_, a)) {
        if (!jitter.enabled) {
            throw NumericalError(what + " is singular or not positive definite (" +
                                 std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                 "); coincident locations or degenerate parameters?");
        }
        const double base = JitterPolicy::kRelativeStart * a.diagonal().mean();
        double delta = base;
        bool ok = false;
        for (int step = 0; step < JitterPolicy::kMaxEscalations && !ok; ++step, delta *= 10.0) {
            MatrixXd jittered = a;
            jittered.diagonal().array() += delta;
            llt_.compute(jittered);
            ok = factor_ok(llt_, jittered);
            if (ok) jitter_ = delta;
        }
        if (!ok) {
            throw NumericalError(what + " is not positive definite after jitter up to " +
                                 std::to_string(base * 100.0));
        }
    }
    log_det_ = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
}

MatrixXd SpdFactor::inverse() const {
    return llt_.solve(MatrixXd::Identity(llt_.rows(), llt_.cols()));
}

MatrixXd SpdFactor::whiten(const MatrixXd& rhs) const {
    return llt_.matrixL().solve(rhs);
}

bool SpdFactor::is_positive_definite(const MatrixXd& a) {
    if (a.rows() != a.cols() || a.rows() == 0 || !a.allFinite()) return false;
    Eigen::LLT<MatrixXd> llt(a);
    return factor_ok(llt, a);
}

KroneckerFactor::KroneckerFactor(const MatrixXd& spatial, const MatrixXd& temporal,
                                 JitterPolicy jitter)
    : spatial_(spatial, jitter, "spatial covariance"),
      temporal_(temporal, jitter, "temporal covariance") {}

MatrixXd KroneckerFactor::solve_right(const MatrixXd& m) const {
    const auto nl = spatial_.size();
    const auto nt = temporal_.size();
    if (m.cols() != nl * nt) {
        throw std::invalid_argument("kronecker solve: matrix has " + std::to_string(m.cols()) +
                                    " columns, expected " + std::to_string(nl * nt));
    }
    const auto rows = m.rows();
    // Row i reshaped column-major to T x L is V_i; the result row is
    // vec(B^{-1} V_i A^{-1}).
    MatrixXd stacked(nt, rows * nl);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const VectorXd row = m.row(i).transpose();
        stacked.middleCols(i * nl, nl) = Eigen::Map<const MatrixXd>(row.data(), nt, nl);
    }
    const MatrixXd left = temporal_.solve(stacked);
    MatrixXd transposed(nl, rows * nt);
    for (Eigen::Index i = 0; i < rows; ++i) {
        transposed.middleCols(i * nt, nt) = left.middleCols(i * nl, nl).transpose();
    }
    const MatrixXd both = spatial_.solve(transposed);
    MatrixXd out(rows, m.cols());
    for (Eigen::Index i = 0; i < rows; ++i) {
        const MatrixXd w = both.middleCols(i * nt, nt).transpose();  // T x L
        out.row(i) = Eigen::Map<const VectorXd>(w.data(), w.size()).transpose();
    }
    return out;
}

double KroneckerFactor::log_det() const noexcept {
    return static_cast<double>(temporal_.size()) * spatial_.log_det() +
           static_cast<double>(spatial_.size()) * temporal_.log_det();
}

MatrixXd kronecker_solve(const MatrixXd& a, const MatrixXd& b, const MatrixXd& m,
                         JitterPolicy jitter) {
    return KroneckerFactor(a, b, jitter).solve_right(m);
}

}  // namespace stmvr
