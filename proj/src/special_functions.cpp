#include "stmvr/special_functions.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/bessel.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <stdexcept>
#include <string>

namespace stmvr {

namespace {

// Domain errors surface as exceptions; overflow/underflow return inf/0.
using Policy = boost::math::policies::policy<
    boost::math::policies::domain_error<boost::math::policies::throw_on_error>,
    boost::math::policies::overflow_error<boost::math::policies::ignore_error>,
    boost::math::policies::underflow_error<boost::math::policies::ignore_error>>;

constexpr double kOrderStep = 1e-5;

}  // namespace

double bessel_k(double nu, double x) {
    if (!(x > 0.0) || !std::isfinite(x)) {
        throw std::domain_error("bessel_k requires x > 0, got " + std::to_string(x));
    }
    return boost::math::cyl_bessel_k(nu, x, Policy());
}

double dlog_bessel_k_dnu(double nu, double x) {
    // K_nu is even in nu, so the stencil may straddle zero.
    const double step = kOrderStep * std::max(1.0, std::abs(nu));
    const double up = std::log(bessel_k(nu + step, x));
    const double down = std::log(bessel_k(nu - step, x));
    return (up - down) / (2.0 * step);
}

double digamma(double x) { return boost::math::digamma(x, Policy()); }

double log_gamma(double x) { return boost::math::lgamma(x, Policy()); }

double chi_square_quantile(double prob, double dof) {
    if (!(prob > 0.0 && prob < 1.0)) {
        throw std::domain_error("chi_square_quantile requires 0 < prob < 1");
    }
    if (!(dof > 0.0)) {
        throw std::domain_error("chi_square_quantile requires dof > 0");
    }
    return boost::math::quantile(boost::math::chi_squared_distribution<double, Policy>(dof), prob);
}

double chi_square_cdf(double x, double dof) {
    if (x <= 0.0) return 0.0;
    return boost::math::cdf(boost::math::chi_squared_distribution<double, Policy>(dof), x);
}

double standard_normal_quantile(double prob) {
    if (!(prob > 0.0 && prob < 1.0)) {
        throw std::domain_error("standard_normal_quantile requires 0 < prob < 1");
    }
    return boost::math::quantile(boost::math::normal_distribution<double, Policy>(), prob);
}

}  // namespace stmvr
