#pragma once

#include "optrisk/lattice.hpp"

#include <Eigen/Dense>

#include <complex>

namespace optrisk {

// Heston parameters in the calibration coordinates: the vol-of-vol sigma and
// correlation rho enter through corr_vol = -sigma rho and indep_vol =
// sigma sqrt(1 - rho^2), which keeps |rho| <= 1 under plain positivity bounds.
struct HestonParams {
    double spot = 1.0;
    double initial_var = 0.04;
    double long_run_var = 0.04;
    double reversion = 1.0;
    double corr_vol = 0.0;
    double indep_vol = 0.0;

    double vol_of_vol() const;
    double correlation() const;
    void validate() const;

    static HestonParams from_rho(double spot, double initial_var, double long_run_var, double reversion,
                                 double vol_of_vol, double rho);
};

inline constexpr double heston_default_tolerance = 1e-8;

// Characteristic function of ln(S_T / F_T) at complex argument w.
std::complex<double> heston_cf(const HestonParams& p, double tau, std::complex<double> w);

double heston_price(const HestonParams& p, double tau, double m, double tol = heston_default_tolerance);

// Normalized call prices at one expiry for several log-moneyness values, sharing
// the characteristic-function evaluations across strikes.
Eigen::VectorXd heston_price_strip(const HestonParams& p, double tau, const Eigen::VectorXd& m,
                                   double tol = heston_default_tolerance);

Eigen::VectorXd heston_surface(const HestonParams& p, const LiquidLattice& lattice,
                               double tol = heston_default_tolerance);

}  // namespace optrisk
