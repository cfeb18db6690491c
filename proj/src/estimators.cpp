#include "optrisk/dynamics.hpp"

#include "optrisk/errors.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>

namespace optrisk {

double estimate_index_drift(const std::vector<double>& spot, double dt) {
    if (spot.size() < 2) {
        throw DomainError("estimate_index_drift: need at least 2 prices");
    }
    if (!(dt > 0.0)) {
        throw DomainError("estimate_index_drift: dt must be positive");
    }
    for (double s : spot) {
        if (!(s > 0.0)) {
            throw DomainError("estimate_index_drift: non-positive price");
        }
    }
    return std::log(spot.back() / spot.front()) / (static_cast<double>(spot.size() - 1) * dt);
}

OUFit fit_ou(const Eigen::VectorXd& series, double dt) {
    if (series.size() < 100) {
        throw EstimationError("fit_ou: need at least 100 points");
    }
    const Eigen::Index n = series.size() - 1;
    OUFit fit = fit_ou(series.head(n), series.tail(n), dt);
    if (!fit.mean_reverting) {
        fit.params.level = series.mean();
    }
    return fit;
}

OUFit fit_ou(const Eigen::VectorXd& x, const Eigen::VectorXd& y, double dt) {
    if (x.size() != y.size() || x.size() < 99) {
        throw EstimationError("fit_ou: need at least 99 matching transition pairs");
    }
    if (!(dt > 0.0)) {
        throw DomainError("fit_ou: dt must be positive");
    }
    const double mx = x.mean(), my = y.mean();
    const double sxx = (x.array() - mx).square().sum();
    const double sxy = ((x.array() - mx) * (y.array() - my)).sum();
    OUFit fit;
    fit.ar_slope = sxx > 0.0 ? sxy / sxx : 0.0;
    fit.ar_intercept = my - fit.ar_slope * mx;
    fit.ar_variance = (y.array() - fit.ar_slope * x.array() - fit.ar_intercept).square().mean();
    fit.params.vol = std::sqrt(fit.ar_variance / dt);
    if (fit.ar_slope >= 1.0) {
        fit.mean_reverting = false;
        fit.warning = "fit_ou: AR(1) slope " + std::to_string(fit.ar_slope) + " >= 1, reversion floored";
        fit.params.reversion = 1e-6;
        fit.params.level = x.mean();
    } else {
        fit.params.reversion = std::max((1.0 - fit.ar_slope) / dt, 1e-6);
        fit.params.level = fit.ar_intercept / (1.0 - fit.ar_slope);
    }
    return fit;
}

namespace {

// Nelder-Mead simplex minimization.
struct SimplexResult {
    Eigen::VectorXd x;
    double value = 0.0;
    int evaluations = 0;
    bool converged = false;
};

SimplexResult nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& start,
                          double step, int max_evaluations, double tolerance) {
    const Eigen::Index n = start.size();
    std::vector<Eigen::VectorXd> pts;
    std::vector<double> vals;
    SimplexResult r;
    auto eval = [&](const Eigen::VectorXd& p) {
        ++r.evaluations;
        const double v = f(p);
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    };
    pts.push_back(start);
    vals.push_back(eval(start));
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd p = start;
        p(i) += step;
        pts.push_back(p);
        vals.push_back(eval(p));
    }
    std::vector<std::size_t> order(pts.size());
    while (r.evaluations < max_evaluations) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
        const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];
        double size = 0.0;
        for (const auto& p : pts) {
            size = std::max(size, (p - pts[best]).cwiseAbs().maxCoeff());
        }
        if (std::abs(vals[worst] - vals[best]) <= tolerance * (1.0 + std::abs(vals[best])) && size <= 1e-8) {
            r.converged = true;
            break;
        }
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            centroid += pts[order[i]];
        }
        centroid /= static_cast<double>(n);
        const Eigen::VectorXd reflected = centroid + (centroid - pts[worst]);
        const double fr = eval(reflected);
        if (fr < vals[best]) {
            const Eigen::VectorXd expanded = centroid + 2.0 * (centroid - pts[worst]);
            const double fe = eval(expanded);
            if (fe < fr) {
                pts[worst] = expanded;
                vals[worst] = fe;
            } else {
                pts[worst] = reflected;
                vals[worst] = fr;
            }
        } else if (fr < vals[second]) {
            pts[worst] = reflected;
            vals[worst] = fr;
        } else {
            const bool outside = fr < vals[worst];
            const Eigen::VectorXd contracted =
                outside ? Eigen::VectorXd(centroid + 0.5 * (reflected - centroid))
                        : Eigen::VectorXd(centroid + 0.5 * (pts[worst] - centroid));
            const double fc = eval(contracted);
            if (fc < std::min(fr, vals[worst])) {
                pts[worst] = contracted;
                vals[worst] = fc;
            } else {
                for (std::size_t i = 0; i < pts.size(); ++i) {
                    if (i != best) {
                        pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
                        vals[i] = eval(pts[i]);
                    }
                }
            }
        }
    }
    const auto it = std::min_element(vals.begin(), vals.end());
    r.x = pts[static_cast<std::size_t>(it - vals.begin())];
    r.value = *it;
    return r;
}

constexpr double max_persistence = 0.999999;

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

std::array<double, 3> garch_params(const Eigen::VectorXd& u, double variance) {
    const double persistence = max_persistence * logistic(u(1));
    const double alpha = persistence * logistic(u(2));
    return {variance * std::exp(u(0)), alpha, persistence - alpha};
}

// Conditional variances h_0..h_n with h_0 the sample variance.
Eigen::VectorXd garch_variances(const Eigen::VectorXd& r, double omega, double alpha, double beta, double h0) {
    Eigen::VectorXd h(r.size() + 1);
    h(0) = h0;
    for (Eigen::Index t = 0; t < r.size(); ++t) {
        h(t + 1) = omega + alpha * r(t) * r(t) + beta * h(t);
    }
    return h;
}

}  // namespace

GarchFit fit_garch11(const Eigen::VectorXd& returns, double dt) {
    if (returns.size() < 250) {
        throw EstimationError("fit_garch11: need at least 250 returns");
    }
    if (!returns.allFinite() || !(dt > 0.0)) {
        throw EstimationError("fit_garch11: non-finite returns or non-positive dt");
    }
    const Eigen::VectorXd r = returns.array() - returns.mean();
    const double variance = r.squaredNorm() / static_cast<double>(r.size());
    const double scale = returns.cwiseAbs().maxCoeff();
    if (!(variance > 1e-28 * scale * scale) || variance == 0.0) {
        throw EstimationError("fit_garch11: zero-variance return series");
    }
    auto nll = [&](const Eigen::VectorXd& u) {
        auto [omega, alpha, beta] = garch_params(u, variance);
        const Eigen::VectorXd h = garch_variances(r, omega, alpha, beta, variance);
        double total = 0.0;
        for (Eigen::Index t = 0; t < r.size(); ++t) {
            if (!(h(t) > 0.0)) {
                return std::numeric_limits<double>::infinity();
            }
            total += 0.5 * (std::log(h(t)) + r(t) * r(t) / h(t));
        }
        return total;
    };
    Eigen::VectorXd start(3);
    start << std::log(0.05), logit(0.95 / max_persistence), logit(0.05 / 0.95);
    SimplexResult best = nelder_mead(nll, start, 0.5, 4000, 1e-12);
    int evaluations = best.evaluations;
    for (int restart = 0; restart < 3; ++restart) {
        SimplexResult next = nelder_mead(nll, best.x, 0.1, 4000, 1e-12);
        evaluations += next.evaluations;
        const bool stalled = std::abs(next.value - best.value) <= 1e-10 * (1.0 + std::abs(best.value));
        if (next.value <= best.value) {
            best = next;
        }
        if (stalled && best.converged) {
            break;
        }
    }
    if (!std::isfinite(best.value) || !best.converged) {
        throw EstimationError("fit_garch11: optimizer did not converge");
    }
    GarchFit fit;
    auto [omega, alpha, beta] = garch_params(best.x, variance);
    fit.omega = omega;
    fit.alpha = alpha;
    fit.beta = beta;
    fit.log_likelihood = -best.value - 0.5 * static_cast<double>(r.size()) * std::log(2.0 * std::numbers::pi);
    fit.annualized_vol = (garch_variances(r, omega, alpha, beta, variance) / dt).cwiseSqrt();
    fit.evaluations = evaluations;
    return fit;
}

}  // namespace optrisk
