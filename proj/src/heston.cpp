#include "optrisk/heston.hpp"

#include "optrisk/errors.hpp"

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace optrisk {

using cplx = std::complex<double>;

double HestonParams::vol_of_vol() const {
    return std::hypot(corr_vol, indep_vol);
}

double HestonParams::correlation() const {
    double s = vol_of_vol();
    return s > 0.0 ? -corr_vol / s : 0.0;
}

void HestonParams::validate() const {
    auto require = [](bool ok, const char* field) {
        if (!ok) {
            throw DomainError(std::string("heston: invalid ") + field);
        }
    };
    require(spot > 0.0 && std::isfinite(spot), "spot");
    require(initial_var > 0.0 && std::isfinite(initial_var), "initial_var");
    require(long_run_var > 0.0 && std::isfinite(long_run_var), "long_run_var");
    require(reversion > 0.0 && std::isfinite(reversion), "reversion");
    require(std::isfinite(corr_vol), "corr_vol");
    require(indep_vol >= 0.0 && std::isfinite(indep_vol), "indep_vol");
}

HestonParams HestonParams::from_rho(double spot, double initial_var, double long_run_var, double reversion,
                                    double vol_of_vol, double rho) {
    if (std::abs(rho) > 1.0 || vol_of_vol < 0.0) {
        throw DomainError("heston: need |rho| <= 1 and vol_of_vol >= 0");
    }
    return {spot, initial_var, long_run_var, reversion, -vol_of_vol * rho, vol_of_vol * std::sqrt(1.0 - rho * rho)};
}

namespace {

// log1p(z)/z, continuous at 0.
cplx log1p_ratio(cplx z) {
    if (std::abs(z) < 1e-5) {
        return 1.0 - z / 2.0 + z * z / 3.0;
    }
    return std::log(1.0 + z) / z;
}

}  // namespace

cplx heston_cf(const HestonParams& p, double tau, cplx w) {
    const cplx i(0.0, 1.0);
    const double s2 = p.corr_vol * p.corr_vol + p.indep_vol * p.indep_vol;
    const cplx a = w * w + i * w;
    const cplx xi = p.reversion + p.corr_vol * i * w;
    const cplx d = std::sqrt(xi * xi + s2 * a);
    const cplx sum = xi + d;
    // (xi - d) / sigma^2 written without the cancellation at small sigma
    const cplx ratio = -a / sum;
    const cplx g = s2 * ratio / sum;
    const cplx e = std::exp(-d * tau);
    const cplx D = ratio * (1.0 - e) / (1.0 - g * e);
    const cplx q = ratio / sum * (1.0 - e) / (1.0 - g);
    const cplx z = s2 * q;
    const cplx C = p.reversion * p.long_run_var * (ratio * tau - 2.0 * q * log1p_ratio(z));
    return std::exp(C + D * p.initial_var);
}

namespace {

struct Interval {
    double a;
    double b;
    Eigen::ArrayXd value;
    double error;
};

struct Quadrature {
    std::vector<double> nodes;    // Kronrod abscissae on [0,1] of the half rule
    std::vector<double> kronrod;  // Kronrod weights
    std::vector<double> gauss_weight;  // Gauss weights on the same index, 0 where absent

    Quadrature() {
        using boost::math::quadrature::gauss;
        using boost::math::quadrature::gauss_kronrod;
        const auto& x = gauss_kronrod<double, 15>::abscissa();
        const auto& wk = gauss_kronrod<double, 15>::weights();
        const auto& wg = gauss<double, 7>::weights();
        for (std::size_t k = 0; k < x.size(); ++k) {
            nodes.push_back(x[k]);
            kronrod.push_back(wk[k]);
            gauss_weight.push_back(k % 2 == 0 ? wg[k / 2] : 0.0);
        }
    }
};

const Quadrature& quadrature() {
    static const Quadrature q;
    return q;
}

}  // namespace

Eigen::VectorXd heston_price_strip(const HestonParams& p, double tau, const Eigen::VectorXd& m, double tol) {
    p.validate();
    if (!(tau > 0.0)) {
        throw DomainError("heston_price: tau must be positive");
    }
    if (!(tol > 0.0)) {
        throw DomainError("heston_price: tolerance must be positive");
    }
    const Eigen::Index n = m.size();
    if (n == 0) {
        return {};
    }
    const Eigen::ArrayXd sqrt_k = (0.5 * m.array()).exp();
    const double abs_tol = tol * std::numbers::pi / sqrt_k.maxCoeff();

    // Map u in [0, inf) to t in [0, 1) with a scale matched to the total variance.
    const double total_var = std::max(0.5 * (p.initial_var + p.long_run_var) * tau, 1e-6);
    const double scale = 2.0 / std::sqrt(total_var);

    auto integrand = [&](double t, Eigen::ArrayXd& out) {
        const double u = scale * t / (1.0 - t);
        const double jac = scale / ((1.0 - t) * (1.0 - t));
        const cplx phi = heston_cf(p, tau, cplx(u, -0.5));
        const double weight = jac / (u * u + 0.25);
        for (Eigen::Index j = 0; j < n; ++j) {
            const double angle = -u * m(j);
            out(j) = (std::cos(angle) * phi.real() - std::sin(angle) * phi.imag()) * weight;
        }
    };

    const auto& rule = quadrature();
    Eigen::ArrayXd fp(n), fm(n);
    auto estimate = [&](double a, double b) {
        const double mid = 0.5 * (a + b);
        const double half = 0.5 * (b - a);
        Eigen::ArrayXd k_sum = Eigen::ArrayXd::Zero(n);
        Eigen::ArrayXd g_sum = Eigen::ArrayXd::Zero(n);
        integrand(mid, fp);
        k_sum += rule.kronrod[0] * fp;
        g_sum += rule.gauss_weight[0] * fp;
        for (std::size_t k = 1; k < rule.nodes.size(); ++k) {
            integrand(mid + half * rule.nodes[k], fp);
            integrand(mid - half * rule.nodes[k], fm);
            k_sum += rule.kronrod[k] * (fp + fm);
            if (rule.gauss_weight[k] != 0.0) {
                g_sum += rule.gauss_weight[k] * (fp + fm);
            }
        }
        Interval iv{a, b, half * k_sum, half * (k_sum - g_sum).abs().maxCoeff()};
        return iv;
    };

    std::vector<Interval> intervals;
    constexpr int initial_pieces = 4;
    for (int k = 0; k < initial_pieces; ++k) {
        intervals.push_back(estimate(static_cast<double>(k) / initial_pieces, static_cast<double>(k + 1) / initial_pieces));
    }
    constexpr std::size_t max_intervals = 4000;
    while (true) {
        double total_error = 0.0;
        std::size_t worst = 0;
        for (std::size_t k = 0; k < intervals.size(); ++k) {
            total_error += intervals[k].error;
            if (intervals[k].error > intervals[worst].error) {
                worst = k;
            }
        }
        if (total_error <= abs_tol) {
            break;
        }
        if (intervals.size() >= max_intervals) {
            throw NumericError("heston_price: quadrature did not converge (error " + std::to_string(total_error) + ")");
        }
        Interval iv = intervals[worst];
        double mid = 0.5 * (iv.a + iv.b);
        intervals[worst] = estimate(iv.a, mid);
        intervals.push_back(estimate(mid, iv.b));
    }

    Eigen::ArrayXd integral = Eigen::ArrayXd::Zero(n);
    std::sort(intervals.begin(), intervals.end(), [](const Interval& x, const Interval& y) { return x.a < y.a; });
    for (const auto& iv : intervals) {
        integral += iv.value;
    }
    return (1.0 - sqrt_k * integral / std::numbers::pi).matrix();
}

double heston_price(const HestonParams& p, double tau, double m, double tol) {
    Eigen::VectorXd strikes = Eigen::VectorXd::Constant(1, m);
    return heston_price_strip(p, tau, strikes, tol)(0);
}

Eigen::VectorXd heston_surface(const HestonParams& p, const LiquidLattice& lattice, double tol) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(lattice.size()));
    const auto& groups = lattice.groups();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto [begin, end] = groups[g];
        Eigen::VectorXd m(static_cast<Eigen::Index>(end - begin));
        for (std::size_t j = begin; j < end; ++j) {
            m(static_cast<Eigen::Index>(j - begin)) = lattice[j].m;
        }
        out.segment(static_cast<Eigen::Index>(begin), m.size()) = heston_price_strip(p, lattice.expiries()[g], m, tol);
    }
    return out;
}

}  // namespace optrisk
