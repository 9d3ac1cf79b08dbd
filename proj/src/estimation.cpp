#include "stmvr/estimation.hpp"

#include "stmvr/errors.hpp"

#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/toms748_solve.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stmvr {

namespace {

// Relative residual norm below which the data are treated as fitted exactly.
constexpr double kExactFitTolerance = 1e-10;

double log_two_pi() { return std::log(2.0 * std::numbers::pi); }

// sum_ij A_ij B_ij, i.e. tr(A^T B).
double frobenius_inner(const MatrixXd& a, const MatrixXd& b) {
    return (a.array() * b.array()).sum();
}

std::string describe(const CovarianceParams& params) {
    std::ostringstream os;
    os.precision(10);
    os << "sigma_s2=" << params.sigma_s2 << " phi_s=" << params.phi_s;
    if (params.nu) os << " nu=" << *params.nu;
    os << " rho=" << params.rho;
    return os.str();
}

}  // namespace

void FitOptions::validate() const {
    if (max_iter < 1) throw std::invalid_argument("max_iter must be >= 1");
    if (!(tol_loglik > 0.0) || !(score_tol > 0.0)) {
        throw std::invalid_argument("tolerances must be positive");
    }
    if (!(ridge_lambda >= 0.0)) throw std::invalid_argument("ridge lambda must be >= 0");
    if (phi_bounds && !(phi_bounds->lower > 0.0 && phi_bounds->lower < phi_bounds->upper)) {
        throw std::invalid_argument("phi bounds must satisfy 0 < lower < upper");
    }
    if (!(nu_bounds.lower > 0.0 && nu_bounds.lower < nu_bounds.upper)) {
        throw std::invalid_argument("nu bounds must satisfy 0 < lower < upper");
    }
    if (!(rho_bounds.lower > -1.0 && rho_bounds.lower < rho_bounds.upper &&
          rho_bounds.upper < 1.0)) {
        throw std::invalid_argument("rho bounds must satisfy -1 < lower < upper < 1");
    }
    if (score_grid < 3) throw std::invalid_argument("score grid needs at least 3 points");
}

double log_likelihood(const MatrixXd& y, const MatrixXd& mean, const MatrixXd& sigma,
                      const MatrixXd& psi_spatial, const MatrixXd& psi_temporal,
                      JitterPolicy jitter) {
    const auto p = y.rows();
    const auto r = y.cols();
    if (mean.rows() != p || mean.cols() != r) {
        throw std::invalid_argument("log_likelihood: mean and response shapes differ");
    }
    if (sigma.rows() != p || psi_spatial.rows() * psi_temporal.rows() != r) {
        throw std::invalid_argument("log_likelihood: covariance dimensions do not match Y");
    }
    const SpdFactor sigma_factor(sigma, jitter, "Sigma");
    const KroneckerFactor psi(psi_spatial, psi_temporal, jitter);
    const MatrixXd w = sigma_factor.whiten(y - mean);
    const double quad = frobenius_inner(psi.solve_right(w), w);
    const auto pd = static_cast<double>(p);
    const auto rd = static_cast<double>(r);
    return -0.5 * pd * rd * log_two_pi() - 0.5 * rd * sigma_factor.log_det() -
           0.5 * pd * psi.log_det() - 0.5 * quad;
}

double log_likelihood(const Dataset& data, const MatrixXd& b, const MatrixXd& sigma,
                      const CovarianceSpec& cov, JitterPolicy jitter) {
    cov.params.validate(cov.spatial_family);
    const MatrixXd psi_sp =
        cov.params.sigma_s2 * build_spatial_matrix(data.layout, cov.spatial_family, cov.params);
    const MatrixXd psi_tp = build_temporal_matrix(data.layout.num_times(), cov.params.rho);
    return log_likelihood(data.y, b * data.x, sigma, psi_sp, psi_tp, jitter);
}

KroneckerFactor column_covariance_factor(const MatrixXd& distances, std::size_t num_times,
                                         SpatialFamily family, const CovarianceParams& params,
                                         JitterPolicy jitter) {
    const MatrixXd psi_sp =
        params.sigma_s2 * spatial_correlation_matrix(distances, family, params.phi_s, params.nu);
    return KroneckerFactor(psi_sp, build_temporal_matrix(num_times, params.rho), jitter);
}

namespace {

struct GlsCrossProducts {
    MatrixXd xx;  // X Psi^{-1} X^T  (q x q)
    MatrixXd yx;  // Y Psi^{-1} X^T  (p x q)
};

GlsCrossProducts gls_cross_products(const MatrixXd& y, const MatrixXd& x,
                                    const KroneckerFactor& psi) {
    const MatrixXd x_psi = psi.solve_right(x);
    GlsCrossProducts out;
    out.xx = x_psi * x.transpose();
    out.xx = 0.5 * (out.xx + out.xx.transpose()).eval();
    out.yx = y * x_psi.transpose();
    return out;
}

MatrixXd solve_normal_equations(const MatrixXd& xx, const MatrixXd& yx, const std::string& what) {
    Eigen::LLT<MatrixXd> llt(xx);
    const bool ok = llt.info() == Eigen::Success &&
                    llt.matrixLLT().diagonal().cwiseAbs2().minCoeff() >
                        1e-13 * xx.diagonal().cwiseAbs().maxCoeff();
    if (!ok) {
        Eigen::FullPivLU<MatrixXd> lu(xx);
        throw NumericalError(what + ": X Psi^{-1} X^T is rank deficient (rank " +
                             std::to_string(lu.rank()) + " < " + std::to_string(xx.rows()) + ")");
    }
    // B = YX (XX)^{-1}  <=>  XX B^T = YX^T
    return llt.solve(yx.transpose()).transpose();
}

void check_regression_shapes(const MatrixXd& y, const MatrixXd& x, const KroneckerFactor& psi) {
    const auto r = static_cast<Eigen::Index>(psi.num_locations() * psi.num_times());
    if (y.cols() != r || x.cols() != r) {
        throw std::invalid_argument("Y and X must have L*T columns");
    }
    if (x.rows() > x.cols()) {
        throw DataError("q = " + std::to_string(x.rows()) + " covariates exceed r = " +
                        std::to_string(x.cols()) + " columns; dense estimation is rank deficient");
    }
}

}  // namespace

MatrixXd update_b_dense(const MatrixXd& y, const MatrixXd& x, const KroneckerFactor& psi) {
    check_regression_shapes(y, x, psi);
    const auto cp = gls_cross_products(y, x, psi);
    return solve_normal_equations(cp.xx, cp.yx, "dense B update");
}

VectorXd update_b_diagonal(const MatrixXd& y, const MatrixXd& x, const MatrixXd& sigma_inv,
                           const KroneckerFactor& psi, double tol, const VectorXd& start,
                           std::size_t max_sweeps) {
    if (y.rows() != x.rows()) {
        throw std::invalid_argument("diagonal B requires p == q");
    }
    const auto r = static_cast<Eigen::Index>(psi.num_locations() * psi.num_times());
    if (y.cols() != r || x.cols() != r) {
        throw std::invalid_argument("Y and X must have L*T columns");
    }
    const auto p = y.rows();
    const MatrixXd x_psi = psi.solve_right(x);
    const MatrixXd g = x_psi * x.transpose();  // G_tj = x_t Psi^{-1} x_j^T
    const MatrixXd c = x_psi * y.transpose();  // C_tj = x_t Psi^{-1} y_j^T
    VectorXd beta = start.size() == p ? start : VectorXd::Zero(p);
    for (Eigen::Index t = 0; t < p; ++t) {
        if (!(sigma_inv(t, t) * g(t, t) > 0.0)) {
            throw NumericalError("diagonal B update: zero denominator for coefficient " +
                                 std::to_string(t + 1));
        }
    }
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double max_change = 0.0;
        for (Eigen::Index t = 0; t < p; ++t) {
            double numerator = sigma_inv(t, t) * c(t, t);
            for (Eigen::Index j = 0; j < p; ++j) {
                if (j == t) continue;
                numerator += sigma_inv(t, j) * (c(t, j) - beta(j) * g(t, j));
            }
            const double updated = numerator / (sigma_inv(t, t) * g(t, t));
            max_change = std::max(max_change, std::abs(updated - beta(t)));
            beta(t) = updated;
        }
        if (max_change <= tol * std::max(1.0, beta.cwiseAbs().maxCoeff())) break;
    }
    return beta;
}

MatrixXd update_b_sparse(const MatrixXd& y, const MatrixXd& x, const MatrixXd& sigma_inv,
                         const KroneckerFactor& psi, const BoolMatrix& mask, double lambda) {
    const auto p = y.rows();
    const auto q = x.rows();
    if (mask.rows() != p || mask.cols() != q) {
        throw std::invalid_argument("sparse mask shape does not match p x q");
    }
    if (lambda < 0.0) throw std::invalid_argument("ridge lambda must be >= 0");
    const auto r = static_cast<Eigen::Index>(psi.num_locations() * psi.num_times());
    if (y.cols() != r || x.cols() != r) {
        throw std::invalid_argument("Y and X must have L*T columns");
    }

    // Free entries in vec (column-major) order.
    std::vector<std::pair<Eigen::Index, Eigen::Index>> free;
    for (Eigen::Index j = 0; j < q; ++j) {
        for (Eigen::Index i = 0; i < p; ++i) {
            if (mask(i, j)) free.emplace_back(i, j);
        }
    }
    if (free.empty()) throw std::invalid_argument("sparse mask has no free entries");

    const auto cp = gls_cross_products(y, x, psi);
    const MatrixXd rhs = sigma_inv * cp.yx;  // Sigma^{-1} Y Psi^{-1} X^T
    const auto n = static_cast<Eigen::Index>(free.size());
    MatrixXd h(n, n);
    VectorXd g(n);
    for (Eigen::Index a = 0; a < n; ++a) {
        const auto [ia, ja] = free[static_cast<std::size_t>(a)];
        g(a) = rhs(ia, ja);
        for (Eigen::Index b = 0; b < n; ++b) {
            const auto [ib, jb] = free[static_cast<std::size_t>(b)];
            h(a, b) = cp.xx(ja, jb) * sigma_inv(ia, ib);
        }
    }
    h.diagonal().array() += lambda;
    Eigen::LLT<MatrixXd> llt(h);
    if (llt.info() != Eigen::Success ||
        llt.matrixLLT().diagonal().cwiseAbs2().minCoeff() <=
            1e-13 * h.diagonal().cwiseAbs().maxCoeff()) {
        throw NumericalError("sparse B update: H + lambda I is singular (lambda = " +
                             std::to_string(lambda) + "); use a positive ridge lambda");
    }
    const VectorXd beta = llt.solve(g);
    MatrixXd b = MatrixXd::Zero(p, q);
    for (Eigen::Index a = 0; a < n; ++a) {
        const auto [i, j] = free[static_cast<std::size_t>(a)];
        b(i, j) = beta(a);
    }
    return b;
}

MatrixXd update_b_block(const MatrixXd& y, const MatrixXd& x, const KroneckerFactor& psi,
                        const std::vector<CoefficientBlock>& blocks) {
    const auto p = static_cast<std::size_t>(y.rows());
    const auto q = static_cast<std::size_t>(x.rows());
    CoefficientStructure::block(blocks).validate(p, q);
    const auto r = static_cast<Eigen::Index>(psi.num_locations() * psi.num_times());
    if (y.cols() != r || x.cols() != r) {
        throw std::invalid_argument("Y and X must have L*T columns");
    }
    const auto cp = gls_cross_products(y, x, psi);
    MatrixXd b = MatrixXd::Zero(y.rows(), x.rows());
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        const auto& blk = blocks[k];
        const auto r0 = static_cast<Eigen::Index>(blk.rows.first);
        const auto c0 = static_cast<Eigen::Index>(blk.cols.first);
        const auto nr = static_cast<Eigen::Index>(blk.rows.size());
        const auto nc = static_cast<Eigen::Index>(blk.cols.size());
        b.block(r0, c0, nr, nc) =
            solve_normal_equations(cp.xx.block(c0, c0, nc, nc), cp.yx.block(r0, c0, nr, nc),
                                   "block " + std::to_string(k + 1));
    }
    return b;
}

SigmaUpdate update_sigma(const MatrixXd& residuals, const KroneckerFactor& psi) {
    if (residuals.cols() == 0) throw std::invalid_argument("update_sigma: no columns");
    const double r = static_cast<double>(residuals.cols());
    SigmaUpdate out;
    out.raw = psi.solve_right(residuals) * residuals.transpose() / r;
    out.raw = 0.5 * (out.raw + out.raw.transpose()).eval();
    out.scale = out.raw(0, 0);
    if (!(out.scale > 0.0)) {
        throw DataError("the first response has identically zero residuals; "
                        "reorder responses so a variable with residual variation comes first");
    }
    out.normalized = out.raw / out.scale;
    out.normalized(0, 0) = 1.0;
    return out;
}

double update_sigma_s2(const MatrixXd& residuals, const SpdFactor& sigma,
                       const KroneckerFactor& correlation) {
    const MatrixXd w = sigma.whiten(residuals);
    const double trace = frobenius_inner(correlation.solve_right(w), w);
    if (!(trace > 0.0) || !std::isfinite(trace)) {
        throw NumericalError("sigma_s2 update: non-positive quadratic form");
    }
    return trace / static_cast<double>(residuals.size());
}

double ProfileEvaluation::scale() const noexcept {
    return std::max({1.0, std::abs(trace_term), std::abs(quadratic_term)});
}

ScoreEquationState::ScoreEquationState(const MatrixXd& residuals, const MatrixXd& sigma,
                                       MatrixXd distances, std::size_t num_times,
                                       SpatialFamily family, CovarianceParams params,
                                       JitterPolicy jitter)
    : residuals_(residuals),
      distances_(std::move(distances)),
      num_times_(num_times),
      family_(family),
      params_(std::move(params)),
      jitter_(jitter),
      p_(static_cast<std::size_t>(residuals.rows())) {
    params_.validate(family_);
    const auto nl = distances_.rows();
    const auto nt = static_cast<Eigen::Index>(num_times_);
    if (residuals_.cols() != nl * nt) {
        throw std::invalid_argument("residual columns do not match L*T");
    }
    const SpdFactor sigma_factor(sigma, jitter_, "Sigma");
    const MatrixXd whitened = sigma_factor.whiten(residuals_);
    const SpdFactor r_sp(spatial_correlation_matrix(distances_, family_, params_.phi_s, params_.nu),
                         jitter_, "spatial correlation");
    const SpdFactor r_tp(build_temporal_matrix(num_times_, params_.rho), jitter_,
                         "temporal correlation");
    log_det_spatial_ = r_sp.log_det();
    log_det_temporal_ = r_tp.log_det();

    spatial_cross_ = MatrixXd::Zero(nl, nl);
    temporal_cross_ = MatrixXd::Zero(nt, nt);
    for (Eigen::Index m = 0; m < whitened.rows(); ++m) {
        const VectorXd row = whitened.row(m).transpose();
        const Eigen::Map<const MatrixXd> v(row.data(), nt, nl);
        spatial_cross_.noalias() += v.transpose() * r_tp.solve(v);
        temporal_cross_.noalias() += v * r_sp.solve(v.transpose());
    }
    spatial_cross_ = 0.5 * (spatial_cross_ + spatial_cross_.transpose()).eval();
    temporal_cross_ = 0.5 * (temporal_cross_ + temporal_cross_.transpose()).eval();

    const double pr = static_cast<double>(residuals_.size());
    constant_ = -0.5 * pr * log_two_pi() -
                0.5 * static_cast<double>(residuals_.cols()) * sigma_factor.log_det();
}

double ScoreEquationState::log_likelihood() const {
    const SpdFactor r_sp(spatial_correlation_matrix(distances_, family_, params_.phi_s, params_.nu),
                         jitter_, "spatial correlation");
    const double quad = r_sp.solve(spatial_cross_).trace() / params_.sigma_s2;
    const double pd = static_cast<double>(p_);
    const double nl = static_cast<double>(distances_.rows());
    const double nt = static_cast<double>(num_times_);
    return constant_ -
           0.5 * pd * (nt * (nl * std::log(params_.sigma_s2) + log_det_spatial_) +
                       nl * log_det_temporal_) -
           0.5 * quad;
}

double ScoreEquationState::profiled_sigma_s2() const {
    const SpdFactor r_sp(spatial_correlation_matrix(distances_, family_, params_.phi_s, params_.nu),
                         jitter_, "spatial correlation");
    return r_sp.solve(spatial_cross_).trace() /
           static_cast<double>(p_ * num_locations() * num_times_);
}

ProfileEvaluation ScoreEquationState::evaluate_spatial(double phi, std::optional<double> nu,
                                                       bool derivative_in_nu,
                                                       bool with_score) const {
    const double pd = static_cast<double>(p_);
    const double nl = static_cast<double>(distances_.rows());
    const double nt = static_cast<double>(num_times_);
    const double cells = pd * nl * nt;

    const SpdFactor r(spatial_correlation_matrix(distances_, family_, phi, nu), jitter_,
                      "spatial correlation");
    const MatrixXd r_inv_s = r.solve(spatial_cross_);
    ProfileEvaluation ev;
    ev.value = derivative_in_nu ? *nu : phi;
    ev.sigma_s2 = r_inv_s.trace() / cells;
    if (!(ev.sigma_s2 > 0.0) || !std::isfinite(ev.sigma_s2)) {
        throw NumericalError("profiled sigma_s2 is not positive");
    }
    ev.log_lik = constant_ -
                 0.5 * pd * (nt * (nl * std::log(ev.sigma_s2) + r.log_det()) + nl * log_det_temporal_) -
                 0.5 * cells;
    if (with_score) {
        const MatrixXd d = derivative_in_nu
                               ? matern_correlation_dnu_matrix(distances_, phi, *nu)
                               : spatial_correlation_dphi_matrix(distances_, family_, phi, nu);
        const MatrixXd sandwich = r.solve(r_inv_s.transpose());  // R^{-1} S R^{-1}
        ev.trace_term = 0.5 * pd * nt * r.solve(d).trace();
        ev.quadratic_term = frobenius_inner(sandwich, d) / (2.0 * ev.sigma_s2);
        ev.score = ev.quadratic_term - ev.trace_term;
    }
    return ev;
}

ProfileEvaluation ScoreEquationState::evaluate_phi(double phi, bool with_score) const {
    return evaluate_spatial(phi, params_.nu, false, with_score);
}

ProfileEvaluation ScoreEquationState::evaluate_nu(double nu, bool with_score) const {
    if (family_ != SpatialFamily::Matern) {
        throw std::invalid_argument("nu is only estimated for the Matern family");
    }
    return evaluate_spatial(params_.phi_s, nu, true, with_score);
}

ProfileEvaluation ScoreEquationState::evaluate_rho(double rho, bool with_score) const {
    const double pd = static_cast<double>(p_);
    const double nl = static_cast<double>(distances_.rows());
    const double nt = static_cast<double>(num_times_);
    const double cells = pd * nl * nt;

    const SpdFactor r(build_temporal_matrix(num_times_, rho), jitter_, "temporal correlation");
    const MatrixXd r_inv_s = r.solve(temporal_cross_);
    ProfileEvaluation ev;
    ev.value = rho;
    ev.sigma_s2 = r_inv_s.trace() / cells;
    if (!(ev.sigma_s2 > 0.0) || !std::isfinite(ev.sigma_s2)) {
        throw NumericalError("profiled sigma_s2 is not positive");
    }
    ev.log_lik = constant_ -
                 0.5 * pd * (nt * (nl * std::log(ev.sigma_s2) + log_det_spatial_) + nl * r.log_det()) -
                 0.5 * cells;
    if (with_score) {
        const MatrixXd d = build_temporal_drho_matrix(num_times_, rho);
        const MatrixXd sandwich = r.solve(r_inv_s.transpose());
        ev.trace_term = 0.5 * pd * nl * r.solve(d).trace();
        ev.quadratic_term = frobenius_inner(sandwich, d) / (2.0 * ev.sigma_s2);
        ev.score = ev.quadratic_term - ev.trace_term;
    }
    return ev;
}

namespace {

using Evaluator = std::function<ProfileEvaluation(double, bool)>;

std::optional<ProfileEvaluation> try_evaluate(const Evaluator& f, double v, bool with_score) {
    try {
        auto ev = f(v, with_score);
        if (!std::isfinite(ev.log_lik) || (with_score && !std::isfinite(ev.score))) {
            return std::nullopt;
        }
        return ev;
    } catch (const NumericalError&) {
        return std::nullopt;
    }
}

std::vector<double> grid_points(double lo, double hi, std::size_t n, bool log_scale) {
    std::vector<double> pts(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(n - 1);
        pts[i] = log_scale ? std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)))
                           : lo + t * (hi - lo);
    }
    pts.front() = lo;
    pts.back() = hi;
    return pts;
}

// Maximizes a profiled 1-D log-likelihood through its score: roots bracketed
// by sign changes (+ to -) over a grid, refined with TOMS 748; bounds and the
// incoming value compete as candidates, and a Brent search refines any
// non-root winner. The incoming value is always a candidate, so the result
// never lowers the profiled likelihood.
ScoreSolution solve_profiled(const Evaluator& f, double current, const ScoreSolveOptions& opt,
                             bool log_scale, const std::string& name) {
    const double lo = opt.bounds.lower;
    const double hi = opt.bounds.upper;
    if (!(lo < hi) || (log_scale && !(lo > 0.0))) {
        throw std::invalid_argument("invalid bounds for " + name);
    }
    const double start = opt.bounds.clamp(current);
    const auto start_ev = try_evaluate(f, start, true);
    if (!start_ev) {
        throw NumericalError("score for " + name + " is not finite at " + name + " = " +
                             std::to_string(start));
    }

    auto search = [&](std::vector<double> pts, ProfileEvaluation best, bool& found_root) {
        pts.push_back(start);
        std::sort(pts.begin(), pts.end());
        pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
        std::vector<std::optional<ProfileEvaluation>> evs;
        evs.reserve(pts.size());
        for (double v : pts) evs.push_back(v == start ? start_ev : try_evaluate(f, v, true));

        std::size_t best_index = pts.size();
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (evs[i] && evs[i]->log_lik > best.log_lik) {
                best = *evs[i];
                best_index = i;
            }
        }
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            if (!evs[i] || !evs[i + 1]) continue;
            const double sa = evs[i]->score;
            const double sb = evs[i + 1]->score;
            if (!(sa > 0.0 && sb < 0.0)) continue;
            auto score_fn = [&](double v) { return f(v, true).score; };
            auto tol = [&](double a, double b) {
                return std::abs(b - a) <= opt.tol * std::max(1.0, std::abs(a));
            };
            std::uintmax_t max_iter = 200;
            const auto [a, b] = boost::math::tools::toms748_solve(score_fn, pts[i], pts[i + 1], sa,
                                                                  sb, tol, max_iter);
            const auto root = try_evaluate(f, 0.5 * (a + b), true);
            if (root) {
                found_root = true;
                if (root->log_lik >= best.log_lik) {
                    best = *root;
                    best_index = pts.size();
                }
            }
        }
        if (best_index < pts.size() && !found_root) {
            // Winner is a grid point without a bracketed root: refine by Brent.
            const double a = pts[best_index == 0 ? 0 : best_index - 1];
            const double b = pts[std::min(best_index + 1, pts.size() - 1)];
            if (a < b) {
                auto neg = [&](double v) {
                    const auto ev = try_evaluate(f, v, false);
                    return ev ? -ev->log_lik : std::numeric_limits<double>::infinity();
                };
                std::uintmax_t iters = 100;
                const auto [arg, val] = boost::math::tools::brent_find_minima(neg, a, b, 40, iters);
                if (-val > best.log_lik) {
                    if (const auto ev = try_evaluate(f, arg, true)) best = *ev;
                }
            }
        }
        return best;
    };

    ProfileEvaluation best = *start_ev;
    bool found_root = false;
    if (opt.local) {
        const double a = log_scale ? std::max(lo, start / 2.0) : std::max(lo, start - 0.1);
        const double b = log_scale ? std::min(hi, start * 2.0) : std::min(hi, start + 0.1);
        if (a < b) best = search(grid_points(a, b, 5, log_scale), best, found_root);
    }
    if (!found_root) {
        best = search(grid_points(lo, hi, opt.grid, log_scale), best, found_root);
    }

    ScoreSolution sol;
    sol.value = best.value;
    sol.sigma_s2 = best.sigma_s2;
    sol.log_lik = best.log_lik;
    sol.score = best.score;
    sol.scale = best.scale();
    sol.root_found = std::abs(best.score) <= 1e-6 * best.scale();
    const double edge = opt.tol * std::max(1.0, std::abs(best.value));
    sol.at_boundary = std::abs(best.value - lo) <= edge || std::abs(best.value - hi) <= edge;
    return sol;
}

}  // namespace

ScoreSolution solve_score_phi(const ScoreEquationState& state, const ScoreSolveOptions& options) {
    return solve_profiled([&](double v, bool s) { return state.evaluate_phi(v, s); },
                          state.params().phi_s, options, true, "phi_s");
}

ScoreSolution solve_score_nu(const ScoreEquationState& state, const ScoreSolveOptions& options) {
    if (state.family() != SpatialFamily::Matern) {
        throw std::invalid_argument("nu is only estimated for the Matern family");
    }
    return solve_profiled([&](double v, bool s) { return state.evaluate_nu(v, s); },
                          *state.params().nu, options, true, "nu");
}

ScoreSolution solve_score_rho(const ScoreEquationState& state, const ScoreSolveOptions& options) {
    return solve_profiled([&](double v, bool s) { return state.evaluate_rho(v, s); },
                          state.params().rho, options, false, "rho");
}

std::size_t parameter_count(const CoefficientStructure& structure, std::size_t p, std::size_t q,
                            SpatialFamily family) {
    return structure.free_parameter_count(p, q) + p * (p + 1) / 2 - 1 +
           CovarianceParams::count(family);
}

double bic(double log_lik, std::size_t num_params, double sample_size) {
    return static_cast<double>(num_params) * std::log(sample_size) - 2.0 * log_lik;
}

double bic(const FittedModel& model, const Dataset& data, BicSampleSize convention) {
    const double r = static_cast<double>(data.num_columns());
    const double n = convention == BicSampleSize::Cells
                         ? static_cast<double>(data.num_responses()) * r
                         : r;
    return bic(model.log_lik, model.num_params, n);
}

Bounds default_phi_bounds(const MatrixXd& distances) {
    double min_d = std::numeric_limits<double>::infinity();
    double max_d = 0.0;
    for (Eigen::Index i = 0; i < distances.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < distances.cols(); ++j) {
            const double h = distances(i, j);
            if (h > 0.0) min_d = std::min(min_d, h);
            max_d = std::max(max_d, h);
        }
    }
    if (!(max_d > 0.0)) return {0.5, 2.0};
    return {0.05 * min_d, 5.0 * max_d};
}

namespace {

double median_distance(const MatrixXd& distances) {
    std::vector<double> d;
    for (Eigen::Index i = 0; i < distances.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < distances.cols(); ++j) d.push_back(distances(i, j));
    }
    if (d.empty()) return 1.0;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
    return d[d.size() / 2];
}

// Pooled lag-1 autocorrelation of the response-averaged residual series.
double lag_one_autocorrelation(const MatrixXd& residuals, std::size_t num_locations,
                               std::size_t num_times) {
    if (num_times < 2) return 0.0;
    const VectorXd avg = residuals.colwise().mean().transpose();
    const double mean = avg.mean();
    double num = 0.0;
    double den = 0.0;
    for (std::size_t l = 0; l < num_locations; ++l) {
        for (std::size_t t = 0; t < num_times; ++t) {
            const double a = avg(static_cast<Eigen::Index>(l * num_times + t)) - mean;
            den += a * a;
            if (t + 1 < num_times) {
                num += a * (avg(static_cast<Eigen::Index>(l * num_times + t + 1)) - mean);
            }
        }
    }
    return den > 0.0 ? num / den : 0.0;
}

MatrixXd update_coefficients(const CoefficientStructure& structure, const MatrixXd& y,
                             const MatrixXd& x, const MatrixXd& sigma_inv,
                             const KroneckerFactor& psi, const FitOptions& options,
                             const MatrixXd& previous) {
    switch (structure.kind()) {
        case StructureKind::Identity:
            return MatrixXd::Identity(y.rows(), x.rows());
        case StructureKind::Dense:
            return update_b_dense(y, x, psi);
        case StructureKind::Diagonal: {
            const VectorXd start = previous.size() ? VectorXd(previous.diagonal()) : VectorXd();
            return update_b_diagonal(y, x, sigma_inv, psi, options.score_tol, start).asDiagonal();
        }
        case StructureKind::Sparse:
            return update_b_sparse(y, x, sigma_inv, psi, structure.mask(), options.ridge_lambda);
        case StructureKind::Block:
            // Exact conditional maximizer given Sigma; equals the per-block
            // estimator when Sigma is block diagonal.
            return update_b_sparse(y, x, sigma_inv, psi,
                                   structure.free_mask(static_cast<std::size_t>(y.rows()),
                                                       static_cast<std::size_t>(x.rows())),
                                   0.0);
    }
    return {};
}

}  // namespace

FittedModel fit(const Dataset& data, const CoefficientStructure& structure, SpatialFamily family,
                const FitOptions& options) {
    options.validate();
    const auto augmented = augment_covariates(data.x, structure);
    const MatrixXd& x = augmented.x;
    const MatrixXd& y = data.y;
    const auto& st = augmented.structure;
    const auto p = static_cast<std::size_t>(y.rows());
    const auto q = static_cast<std::size_t>(x.rows());
    st.validate(p, q);
    if (st.kind() != StructureKind::Identity && x.rows() > x.cols()) {
        throw DataError("q = " + std::to_string(q) + " covariates exceed r = " +
                        std::to_string(x.cols()) + " columns");
    }

    const MatrixXd distances = data.layout.distance_matrix();
    const std::size_t nl = data.layout.num_locations();
    const std::size_t nt = data.layout.num_times();
    const bool estimate_spatial = nl > 1;
    const bool estimate_temporal = nt > 1;
    const Bounds phi_bounds = options.phi_bounds.value_or(default_phi_bounds(distances));

    // Start: unweighted fit, Sigma from its residuals.
    const KroneckerFactor identity_psi(MatrixXd::Identity(static_cast<Eigen::Index>(nl),
                                                          static_cast<Eigen::Index>(nl)),
                                       MatrixXd::Identity(static_cast<Eigen::Index>(nt),
                                                          static_cast<Eigen::Index>(nt)));
    MatrixXd b = update_coefficients(st, y, x, MatrixXd::Identity(y.rows(), y.rows()),
                                     identity_psi, options, MatrixXd());
    MatrixXd residuals = y - b * x;
    const double y_norm = std::max(1.0, y.norm());
    auto exact = [&] { return residuals.norm() <= kExactFitTolerance * y_norm; };

    CovarianceParams params;
    if (options.initial_params) {
        params = *options.initial_params;
    } else if (options.init == InitPolicy::DataDriven) {
        params.phi_s = median_distance(distances);
        params.rho = lag_one_autocorrelation(residuals, nl, nt);
        if (family == SpatialFamily::Matern) params.nu = 1.0;
    } else {
        params.phi_s = std::max(distances.maxCoeff(), 1.0) / 4.0;
        params.rho = 0.0;
        if (family == SpatialFamily::Matern) params.nu = 0.5;
    }
    if (family == SpatialFamily::Matern && !params.nu) params.nu = 1.0;
    if (family != SpatialFamily::Matern) params.nu.reset();
    if (estimate_spatial) params.phi_s = phi_bounds.clamp(params.phi_s);
    params.rho = estimate_temporal ? options.rho_bounds.clamp(params.rho) : 0.0;
    if (params.nu) params.nu = options.nu_bounds.clamp(*params.nu);
    params.sigma_s2 = 1.0;

    FittedModel model;
    model.family = family;
    model.structure = st;
    model.augmentation = structure.augmentation();
    model.num_params = parameter_count(st, p, q, family);
    const double r = static_cast<double>(data.num_columns());
    const double bic_n = options.bic_n == BicSampleSize::Cells ? static_cast<double>(p) * r : r;

    // Residuals at rounding level: the likelihood is unbounded (Sigma -> 0),
    // so report B with nominal covariance values instead of iterating on noise.
    auto exact_fit_model = [&](std::size_t iter) {
        model.b_hat = b;
        model.sigma_hat = MatrixXd::Identity(y.rows(), y.rows());
        model.cov_params = params;
        model.cov_params.sigma_s2 = 1.0;
        model.log_lik = log_likelihood(y, b * x, model.sigma_hat,
                                       spatial_correlation_matrix(distances, family, params.phi_s, params.nu),
                                       build_temporal_matrix(nt, params.rho), options.jitter);
        model.trace.push_back(model.log_lik);
        model.num_iter = iter;
        model.converged = true;
        model.boundary_flags = {"exact_fit"};
        model.bic = bic(model.log_lik, model.num_params, bic_n);
        return model;
    };
    if (exact()) return exact_fit_model(0);

    MatrixXd sigma = update_sigma(residuals, identity_psi).normalized;
    {
        const KroneckerFactor corr = column_covariance_factor(distances, nt, family, params,
                                                              options.jitter);
        params.sigma_s2 = update_sigma_s2(residuals, SpdFactor(sigma, options.jitter, "Sigma"),
                                          corr);
    }

    double previous = ScoreEquationState(residuals, sigma, distances, nt, family, params,
                                         options.jitter)
                          .log_likelihood();

    for (std::size_t iter = 1; iter <= options.max_iter; ++iter) {
        try {
            const KroneckerFactor psi =
                column_covariance_factor(distances, nt, family, params, options.jitter);
            const MatrixXd sigma_inv = SpdFactor(sigma, options.jitter, "Sigma").inverse();
            b = update_coefficients(st, y, x, sigma_inv, psi, options, b);
            residuals = y - b * x;
            if (exact()) return exact_fit_model(iter);

            const auto su = update_sigma(residuals, psi);
            sigma = su.normalized;
            params.sigma_s2 *= su.scale;

            {
                CovarianceParams unit = params;
                unit.sigma_s2 = 1.0;
                const KroneckerFactor corr =
                    column_covariance_factor(distances, nt, family, unit, options.jitter);
                params.sigma_s2 =
                    update_sigma_s2(residuals, SpdFactor(sigma, options.jitter, "Sigma"), corr);
            }

            model.boundary_flags.clear();
            const bool local = iter > 1;
            if (estimate_spatial) {
                const ScoreEquationState state(residuals, sigma, distances, nt, family, params,
                                               options.jitter);
                const auto sol = solve_score_phi(
                    state, {phi_bounds, options.score_tol, options.score_grid, local});
                params.phi_s = sol.value;
                params.sigma_s2 = sol.sigma_s2;
                if (sol.at_boundary) model.boundary_flags.emplace_back("phi_s");
            }
            if (estimate_spatial && family == SpatialFamily::Matern) {
                const ScoreEquationState state(residuals, sigma, distances, nt, family, params,
                                               options.jitter);
                const auto sol = solve_score_nu(
                    state, {options.nu_bounds, options.score_tol, options.score_grid, local});
                params.nu = sol.value;
                params.sigma_s2 = sol.sigma_s2;
                if (sol.at_boundary) model.boundary_flags.emplace_back("nu");
            }
            if (estimate_temporal) {
                const ScoreEquationState state(residuals, sigma, distances, nt, family, params,
                                               options.jitter);
                const auto sol = solve_score_rho(
                    state, {options.rho_bounds, options.score_tol, options.score_grid, local});
                params.rho = sol.value;
                params.sigma_s2 = sol.sigma_s2;
                if (sol.at_boundary) model.boundary_flags.emplace_back("rho");
            }
        } catch (const NumericalError& e) {
            throw NumericalError("iteration " + std::to_string(iter) + ": " + e.what() + " [" +
                                 describe(params) + "]");
        } catch (const DataError& e) {
            throw DataError("iteration " + std::to_string(iter) + ": " + e.what());
        }

        const double current = ScoreEquationState(residuals, sigma, distances, nt, family, params,
                                                  options.jitter)
                                   .log_likelihood();
        model.trace.push_back(current);
        model.num_iter = iter;
        const double scale = std::max(1.0, std::abs(previous));
        if (current < previous - options.monotone_tol * scale) {
            std::ostringstream os;
            os.precision(17);
            os << "log-likelihood decreased at iteration " << iter << ": " << previous << " -> "
               << current << " [" << describe(params) << "]";
            throw NumericalError(os.str());
        }
        const bool done = std::abs(current - previous) <= options.tol_loglik * scale;
        previous = current;
        if (done) {
            model.converged = true;
            break;
        }
    }

    model.b_hat = b;
    model.sigma_hat = sigma;
    model.cov_params = params;
    model.log_lik = previous;
    model.bic = bic(model.log_lik, model.num_params, bic_n);
    return model;
}

}  // namespace stmvr
