#include "stmvr/diagnostics.hpp"

#include "stmvr/errors.hpp"
#include "stmvr/special_functions.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stmvr {

MatrixXd inverse_sqrt_spd(const MatrixXd& a) {
    if (a.rows() != a.cols() || a.rows() == 0) {
        throw std::invalid_argument("inverse_sqrt_spd: matrix must be square and non-empty");
    }
    const MatrixXd sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success) {
        throw NumericalError("eigendecomposition failed");
    }
    const VectorXd& lambda = eig.eigenvalues();
    if (!(lambda.minCoeff() > 1e-14 * std::max(1.0, lambda.cwiseAbs().maxCoeff()))) {
        throw NumericalError("matrix is not positive definite (smallest eigenvalue " +
                             std::to_string(lambda.minCoeff()) + ")");
    }
    const MatrixXd& v = eig.eigenvectors();
    return v * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
}

MatrixXd standardize_residuals(const MatrixXd& residuals, const MatrixXd& sigma,
                               const MatrixXd& psi_spatial, const MatrixXd& psi_temporal) {
    const auto nl = psi_spatial.rows();
    const auto nt = psi_temporal.rows();
    if (residuals.cols() != nl * nt || sigma.rows() != residuals.rows()) {
        throw std::invalid_argument("standardize_residuals: dimensions do not match");
    }
    const MatrixXd left = inverse_sqrt_spd(sigma) * residuals;
    const MatrixXd a = inverse_sqrt_spd(psi_spatial);
    const MatrixXd b = inverse_sqrt_spd(psi_temporal);
    MatrixXd out(residuals.rows(), residuals.cols());
    for (Eigen::Index m = 0; m < left.rows(); ++m) {
        const VectorXd row = left.row(m).transpose();
        const Eigen::Map<const MatrixXd> v(row.data(), nt, nl);
        // vec(B V A) = (A (x) B) vec(V) for symmetric A, B.
        const MatrixXd w = b * v * a;
        out.row(m) = Eigen::Map<const VectorXd>(w.data(), nl * nt).transpose();
    }
    return out;
}

VectorXd column_variances(const MatrixXd& psi_spatial, const MatrixXd& psi_temporal) {
    const auto nl = psi_spatial.rows();
    const auto nt = psi_temporal.rows();
    VectorXd d(nl * nt);
    for (Eigen::Index l = 0; l < nl; ++l) {
        for (Eigen::Index t = 0; t < nt; ++t) d(l * nt + t) = psi_spatial(l, l) * psi_temporal(t, t);
    }
    return d;
}

VectorXd column_distances(const MatrixXd& residuals, const MatrixXd& sigma,
                          const VectorXd& psi_diagonal) {
    if (psi_diagonal.size() != residuals.cols()) {
        throw std::invalid_argument("column_distances: psi diagonal length must equal r");
    }
    if (!(psi_diagonal.minCoeff() > 0.0)) {
        throw NumericalError("column_distances: non-positive column variance");
    }
    const SpdFactor factor(sigma, {}, "Sigma");
    const MatrixXd w = factor.whiten(residuals);
    return (w.colwise().squaredNorm().transpose().array() / psi_diagonal.array()).matrix();
}

VectorXd row_distances(const MatrixXd& residuals, const KroneckerFactor& psi,
                       const VectorXd& sigma_diagonal) {
    if (sigma_diagonal.size() != residuals.rows()) {
        throw std::invalid_argument("row_distances: sigma diagonal length must equal p");
    }
    if (!(sigma_diagonal.minCoeff() > 0.0)) {
        throw NumericalError("row_distances: non-positive sigma_ii");
    }
    const MatrixXd solved = psi.solve_right(residuals);
    const VectorXd quad = (solved.array() * residuals.array()).rowwise().sum();
    return (quad.array() / sigma_diagonal.array()).matrix();
}

MatrixXd cell_residuals(const MatrixXd& residuals, const VectorXd& sigma_diagonal,
                        const VectorXd& psi_diagonal) {
    if (sigma_diagonal.size() != residuals.rows() || psi_diagonal.size() != residuals.cols()) {
        throw std::invalid_argument("cell_residuals: scale lengths do not match");
    }
    if (!(sigma_diagonal.minCoeff() > 0.0) || !(psi_diagonal.minCoeff() > 0.0)) {
        throw NumericalError("cell_residuals: non-positive scale");
    }
    const VectorXd rs = sigma_diagonal.cwiseSqrt().cwiseInverse();
    const VectorXd cs = psi_diagonal.cwiseSqrt().cwiseInverse();
    return rs.asDiagonal() * residuals * cs.asDiagonal();
}

double global_statistic(const MatrixXd& e_star) { return e_star.squaredNorm(); }

DiagnosticsReport diagnose(const MatrixXd& residuals, const MatrixXd& sigma,
                           const MatrixXd& psi_spatial, const MatrixXd& psi_temporal,
                           const DiagnosticsOptions& options) {
    const auto p = static_cast<double>(residuals.rows());
    const auto r = static_cast<double>(residuals.cols());
    DiagnosticsReport rep;
    rep.e_star = standardize_residuals(residuals, sigma, psi_spatial, psi_temporal);
    const VectorXd psi_diag = column_variances(psi_spatial, psi_temporal);
    const VectorXd sigma_diag = sigma.diagonal();
    rep.d_sq = column_distances(residuals, sigma, psi_diag);
    rep.r_sq = row_distances(residuals, KroneckerFactor(psi_spatial, psi_temporal), sigma_diag);
    rep.z = cell_residuals(residuals, sigma_diag, psi_diag);
    rep.global_stat = global_statistic(rep.e_star);

    rep.column_level = options.column_level;
    rep.column_threshold = chi_square_quantile(options.column_level, p);
    rep.row_level = options.row_level;
    rep.row_threshold = chi_square_quantile(options.row_level, r);
    rep.cell_threshold = options.cell_threshold;
    const double tail = 0.5 * (1.0 - options.global_coverage);
    rep.global_lower = chi_square_quantile(tail, p * r);
    rep.global_upper = chi_square_quantile(1.0 - tail, p * r);

    for (Eigen::Index j = 0; j < rep.d_sq.size(); ++j) {
        if (rep.d_sq(j) > rep.column_threshold) rep.column_flags.push_back(static_cast<std::size_t>(j));
    }
    for (Eigen::Index i = 0; i < rep.r_sq.size(); ++i) {
        if (rep.r_sq(i) > rep.row_threshold) rep.row_flags.push_back(static_cast<std::size_t>(i));
    }
    for (Eigen::Index j = 0; j < rep.z.cols(); ++j) {
        for (Eigen::Index i = 0; i < rep.z.rows(); ++i) {
            if (std::abs(rep.z(i, j)) > rep.cell_threshold) {
                rep.cell_flags.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
            }
        }
    }
    return rep;
}

MatrixXd model_residuals(const Dataset& data, const FittedModel& model) {
    const auto augmented = augment_covariates(
        data.x, CoefficientStructure::dense().with_augmentation(model.augmentation));
    if (augmented.x.rows() != model.b_hat.cols() || data.y.rows() != model.b_hat.rows()) {
        throw DataError("fitted coefficients do not match the dataset dimensions");
    }
    return data.y - model.b_hat * augmented.x;
}

DiagnosticsReport diagnose(const Dataset& data, const FittedModel& model,
                           const DiagnosticsOptions& options) {
    const MatrixXd psi_sp =
        model.cov_params.sigma_s2 * build_spatial_matrix(data.layout, model.family, model.cov_params);
    const MatrixXd psi_tp = build_temporal_matrix(data.layout.num_times(), model.cov_params.rho);
    return diagnose(model_residuals(data, model), model.sigma_hat, psi_sp, psi_tp, options);
}

std::vector<std::pair<double, double>> qq_pairs(const MatrixXd& e_star) {
    std::vector<double> v(e_star.data(), e_star.data() + e_star.size());
    std::sort(v.begin(), v.end());
    const double n = static_cast<double>(v.size());
    std::vector<std::pair<double, double>> out;
    out.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double prob = (static_cast<double>(i) + 0.5) / n;
        out.emplace_back(standard_normal_quantile(prob), v[i]);
    }
    return out;
}

}  // namespace stmvr
