#pragma once

namespace stmvr {

// Modified Bessel function of the second kind K_nu(x), x > 0.
[[nodiscard]] double bessel_k(double nu, double x);

// d/dnu log K_nu(x) by central difference in the order.
[[nodiscard]] double dlog_bessel_k_dnu(double nu, double x);

[[nodiscard]] double digamma(double x);
[[nodiscard]] double log_gamma(double x);

// Quantile of chi-squared with dof degrees of freedom, 0 < prob < 1.
[[nodiscard]] double chi_square_quantile(double prob, double dof);
[[nodiscard]] double chi_square_cdf(double x, double dof);

[[nodiscard]] double standard_normal_quantile(double prob);

}  // namespace stmvr
