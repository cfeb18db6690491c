#pragma once

// Black-Scholes quantities for normalized call prices, where the forward is 1
// and m = ln(K/F). All vols are annualized, tau is a year fraction.

namespace optrisk {

double norm_pdf(double x);
double norm_cdf(double x);
double norm_quantile(double p);

double bs_price(double tau, double m, double vol);
double bs_put(double tau, double m, double vol);
double bs_delta(double tau, double m, double vol);
double vega(double tau, double m, double vol);

// Lower no-arbitrage bound max(1 - e^m, 0).
double intrinsic(double m);

// Inverts the price map by safeguarded Newton/bisection; tolerance is on price.
double implied_vol(double price, double tau, double m, double tol = 1e-10);

// Moneyness of the call with the given delta at the given vol.
double moneyness_from_delta(double tau, double delta, double vol);

struct DeltaQuote {
    double m;
    double vol;
};

// Recovers (m, vol) from a normalized price quoted at a fixed delta.
DeltaQuote invert_delta_quote(double price, double tau, double delta);

}  // namespace optrisk
