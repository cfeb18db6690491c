#include "optrisk/black_scholes.hpp"

#include "optrisk/errors.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace optrisk {

double norm_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

double norm_cdf(double x) {
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double norm_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw DomainError("norm_quantile: probability must lie in (0,1), got " + std::to_string(p));
    }
    static const boost::math::normal_distribution<double> standard;
    return boost::math::quantile(standard, p);
}

double intrinsic(double m) {
    return std::max(1.0 - std::exp(m), 0.0);
}

namespace {

double price_from_total_vol(double s, double m) {
    if (s <= 0.0) {
        return intrinsic(m);
    }
    double d1 = -m / s + 0.5 * s;
    double d2 = d1 - s;
    return norm_cdf(d1) - std::exp(m) * norm_cdf(d2);
}

}  // namespace

double bs_price(double tau, double m, double vol) {
    if (tau < 0.0 || vol < 0.0) {
        throw DomainError("bs_price: tau and vol must be non-negative");
    }
    return price_from_total_vol(vol * std::sqrt(tau), m);
}

double bs_put(double tau, double m, double vol) {
    return bs_price(tau, m, vol) - (1.0 - std::exp(m));
}

double bs_delta(double tau, double m, double vol) {
    if (tau <= 0.0 || vol <= 0.0) {
        throw DomainError("bs_delta: tau and vol must be positive");
    }
    double s = vol * std::sqrt(tau);
    return norm_cdf(-m / s + 0.5 * s);
}

double vega(double tau, double m, double vol) {
    if (!(tau > 0.0)) {
        throw DomainError("vega: tau must be positive");
    }
    if (!(vol > 0.0)) {
        throw DomainError("vega: vol must be positive");
    }
    double s = vol * std::sqrt(tau);
    return std::sqrt(tau) * norm_pdf(-m / s + 0.5 * s);
}

double implied_vol(double price, double tau, double m, double tol) {
    if (!(tau > 0.0)) {
        throw InversionError("implied_vol: tau must be positive");
    }
    double lower = intrinsic(m);
    if (!std::isfinite(price) || price < lower - 1e-14 || price >= 1.0) {
        throw InversionError("implied_vol: price " + std::to_string(price) +
                             " outside no-arbitrage bounds (" + std::to_string(lower) + ", 1)");
    }
    if (price <= lower + 1e-300) {
        return 0.0;
    }

    double lo = 0.0;
    double hi = 1.0;
    while (price_from_total_vol(hi, m) < price) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e3) {
            throw InversionError("implied_vol: failed to bracket total vol");
        }
    }

    // Tighten the tolerance for small time values so deep OTM quotes still invert.
    double target = std::min(tol, 1e-6 * (price - lower));
    double s = 0.5 * (lo + hi);
    for (int iter = 0; iter < 200; ++iter) {
        double diff = price_from_total_vol(s, m) - price;
        if (std::abs(diff) <= target) {
            break;
        }
        if (diff > 0.0) {
            hi = s;
        } else {
            lo = s;
        }
        double slope = norm_pdf(-m / s + 0.5 * s);
        double next = slope > 1e-300 ? s - diff / slope : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) {
            next = 0.5 * (lo + hi);
        }
        if (hi - lo < 1e-16) {
            break;
        }
        s = next;
    }
    return s / std::sqrt(tau);
}

double moneyness_from_delta(double tau, double delta, double vol) {
    if (!(delta > 0.0 && delta < 1.0)) {
        throw DomainError("moneyness_from_delta: delta must lie in (0,1)");
    }
    if (!(tau > 0.0 && vol > 0.0)) {
        throw DomainError("moneyness_from_delta: tau and vol must be positive");
    }
    double s = vol * std::sqrt(tau);
    return 0.5 * s * s - norm_quantile(delta) * s;
}

DeltaQuote invert_delta_quote(double price, double tau, double delta) {
    if (!(delta > 0.0 && delta < 1.0)) {
        throw DomainError("invert_delta_quote: delta must lie in (0,1)");
    }
    if (!(tau > 0.0)) {
        throw DomainError("invert_delta_quote: tau must be positive");
    }
    if (!(price > 0.0 && price < delta)) {
        throw InversionError("invert_delta_quote: price " + std::to_string(price) +
                             " must lie in (0, delta) for delta " + std::to_string(delta));
    }
    // At fixed delta the price is increasing in total vol s, from 0 to delta.
    double d1 = norm_quantile(delta);
    auto price_at = [&](double s) {
        double m = 0.5 * s * s - d1 * s;
        return delta - std::exp(m) * norm_cdf(d1 - s);
    };
    double lo = 0.0;
    double hi = 1.0;
    while (price_at(hi) < price) {
        lo = hi;
        hi *= 2.0;
        if (hi > 16.0) {
            throw InversionError("invert_delta_quote: failed to bracket total vol");
        }
    }
    for (int iter = 0; iter < 200 && hi - lo > 1e-15; ++iter) {
        double mid = 0.5 * (lo + hi);
        if (price_at(mid) < price) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    double s = 0.5 * (lo + hi);
    return {0.5 * s * s - d1 * s, s / std::sqrt(tau)};
}

}  // namespace optrisk
