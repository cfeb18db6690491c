#include "optrisk/fhs.hpp"

#include "optrisk/black_scholes.hpp"
#include "optrisk/io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <ostream>

namespace optrisk {

namespace {

constexpr int calibrated_count = 5;
using CalibVector = Eigen::Matrix<double, calibrated_count, 1>;

const CalibVector& lower_bounds() {
    static const CalibVector lo = (CalibVector() << 1e-6, 1e-6, 1e-3, -5.0, 1e-6).finished();
    return lo;
}

const CalibVector& upper_bounds() {
    static const CalibVector hi = (CalibVector() << 4.0, 4.0, 50.0, 5.0, 5.0).finished();
    return hi;
}

CalibVector pack(const HestonParams& p) {
    CalibVector x;
    x << p.initial_var, p.long_run_var, p.reversion, p.corr_vol, p.indep_vol;
    return x;
}

HestonParams unpack(const CalibVector& x, double spot) {
    return {spot, x(0), x(1), x(2), x(3), x(4)};
}

CalibVector project(const CalibVector& x) {
    return x.cwiseMax(lower_bounds()).cwiseMin(upper_bounds());
}

struct Evaluation {
    Eigen::VectorXd residual;
    double objective = std::numeric_limits<double>::infinity();
    bool ok = false;
};

}  // namespace

HestonParams default_initial_params(const Eigen::VectorXd& row, const LiquidLattice& lattice, double spot) {
    if (lattice.size() == 0 || static_cast<std::size_t>(row.size()) != lattice.size()) {
        throw DomainError("default_initial_params: row does not match lattice");
    }
    auto [begin, end] = lattice.groups().front();
    std::size_t atm = begin;
    for (std::size_t j = begin; j < end; ++j) {
        if (std::abs(lattice[j].m) < std::abs(lattice[atm].m)) {
            atm = j;
        }
    }
    double vol = implied_vol(row(static_cast<Eigen::Index>(atm)), lattice[atm].tau, lattice[atm].m);
    double var = std::max(vol * vol, 1e-4);
    return {spot, var, var, 1.0, 0.1, 0.3};
}

CalibrationResult calibrate(const Eigen::VectorXd& row, const LiquidLattice& lattice, const Eigen::VectorXd& weights,
                            const HestonParams& init, const CalibrationOptions& options) {
    const auto n = static_cast<Eigen::Index>(lattice.size());
    if (row.size() != n || weights.size() != n) {
        throw DomainError("calibrate: row and weights must match the lattice");
    }
    if (!(weights.array() > 0.0).all() || !row.allFinite()) {
        throw DomainError("calibrate: weights must be positive and prices finite");
    }
    init.validate();
    const Eigen::ArrayXd root_w = weights.array().sqrt();
    const double spot = init.spot;

    auto evaluate = [&](const CalibVector& x) {
        Evaluation e;
        try {
            Eigen::VectorXd model = heston_surface(unpack(x, spot), lattice, options.pricer_tolerance);
            e.residual = (root_w * (model - row).array()).matrix();
            e.objective = e.residual.squaredNorm();
            e.ok = std::isfinite(e.objective);
        } catch (const NumericError&) {
        } catch (const DomainError&) {
        }
        return e;
    };

    CalibVector x = project(pack(init));
    Evaluation current = evaluate(x);
    if (!current.ok) {
        throw CalibrationFailure("calibrate: model cannot be evaluated at the initial point", unpack(x, spot));
    }
    CalibrationResult result;
    result.objective_history.push_back(current.objective);

    double damping = -1.0;
    int iteration = 0;
    for (; iteration < options.max_iterations && current.objective > options.objective_tolerance; ++iteration) {
        Eigen::MatrixXd J(n, calibrated_count);
        for (int i = 0; i < calibrated_count; ++i) {
            double h = 1e-5 * std::max(std::abs(x(i)), 1e-2);
            CalibVector up = x, down = x;
            up(i) = std::min(x(i) + h, upper_bounds()(i));
            down(i) = std::max(x(i) - h, lower_bounds()(i));
            Evaluation eu = evaluate(up);
            Evaluation ed = evaluate(down);
            if (!eu.ok || !ed.ok) {
                throw CalibrationFailure("calibrate: finite-difference Jacobian failed", unpack(x, spot));
            }
            J.col(i) = (eu.residual - ed.residual) / (up(i) - down(i));
        }
        const Eigen::MatrixXd H = J.transpose() * J;
        const Eigen::VectorXd g = J.transpose() * current.residual;
        const Eigen::VectorXd scale = H.diagonal().cwiseMax(1e-12 * std::max(H.diagonal().maxCoeff(), 1e-300));
        if (damping < 0.0) {
            damping = 1e-3;
        }
        bool accepted = false;
        CalibVector step = CalibVector::Zero();
        while (damping < 1e12) {
            Eigen::MatrixXd M = H;
            M.diagonal() += damping * scale;
            step = project(x - M.ldlt().solve(g)) - x;
            Evaluation trial = evaluate(x + step);
            if (trial.ok && trial.objective < current.objective) {
                double gain = current.objective - trial.objective;
                x += step;
                current = std::move(trial);
                result.objective_history.push_back(current.objective);
                damping = std::max(damping / 3.0, 1e-12);
                accepted = true;
                if (gain <= 1e-15 * current.objective) {
                    accepted = false;  // stagnation
                }
                break;
            }
            damping *= 4.0;
        }
        if (!accepted) {
            break;
        }
        if (step.cwiseAbs().maxCoeff() <= options.step_tolerance * std::max(x.cwiseAbs().maxCoeff(), 1.0)) {
            break;
        }
    }

    result.params = unpack(x, spot);
    result.objective = current.objective;
    result.iterations = iteration;
    Eigen::VectorXd model = heston_surface(result.params, lattice, options.pricer_tolerance);
    result.mape = ((model - row).array().abs() / row.array()).mean();
    return result;
}

std::vector<CalibrationResult> calibrate_history(const Eigen::MatrixXd& prices, const LiquidLattice& lattice,
                                                 const Eigen::VectorXd& weights, const std::vector<double>& spot,
                                                 const CalibrationOptions& options) {
    if (static_cast<std::size_t>(prices.rows()) != spot.size()) {
        throw DomainError("calibrate_history: spot series length differs from panel rows");
    }
    std::vector<CalibrationResult> fits;
    for (Eigen::Index t = 0; t < prices.rows(); ++t) {
        const Eigen::VectorXd row = prices.row(t).transpose();
        HestonParams init = fits.empty() ? default_initial_params(row, lattice, spot[static_cast<std::size_t>(t)])
                                         : fits.back().params;
        init.spot = spot[static_cast<std::size_t>(t)];
        fits.push_back(calibrate(row, lattice, weights, init, options));
    }
    return fits;
}

void write_parameter_history(std::ostream& out, const std::vector<std::string>& dates,
                             const std::vector<CalibrationResult>& fits) {
    if (dates.size() != fits.size()) {
        throw DomainError("write_parameter_history: dates and fits differ in length");
    }
    out << "date,spot,initial_var,long_run_var,reversion,corr_vol,indep_vol,mape\n";
    for (std::size_t t = 0; t < fits.size(); ++t) {
        const auto& p = fits[t].params;
        out << dates[t] << ',' << format_double(p.spot) << ',' << format_double(p.initial_var) << ','
            << format_double(p.long_run_var) << ',' << format_double(p.reversion) << ',' << format_double(p.corr_vol)
            << ',' << format_double(p.indep_vol) << ',' << format_double(fits[t].mape) << '\n';
    }
}

ReturnConvention heston_convention(int factor) {
    if (factor < 0 || factor >= heston_factor_count) {
        throw DomainError("heston_convention: factor index out of range");
    }
    return factor == 4 ? ReturnConvention::absolute : ReturnConvention::log;
}

Eigen::VectorXd to_factors(const HestonParams& p) {
    Eigen::VectorXd x(heston_factor_count);
    x << p.spot, p.initial_var, p.long_run_var, p.reversion, p.corr_vol, p.indep_vol;
    return x;
}

HestonParams from_factors(const Eigen::VectorXd& x) {
    if (x.size() != heston_factor_count) {
        throw DomainError("from_factors: expected 6 factors");
    }
    return {x(0), x(1), x(2), x(3), x(4), x(5)};
}

Eigen::MatrixXd factor_returns(const std::vector<HestonParams>& history) {
    if (history.size() < 2) {
        throw DomainError("factor_returns: need at least 2 dates");
    }
    Eigen::MatrixXd r(static_cast<Eigen::Index>(history.size() - 1), heston_factor_count);
    for (std::size_t s = 0; s + 1 < history.size(); ++s) {
        Eigen::VectorXd a = to_factors(history[s]);
        Eigen::VectorXd b = to_factors(history[s + 1]);
        for (int j = 0; j < heston_factor_count; ++j) {
            if (heston_convention(j) == ReturnConvention::log) {
                if (!(a(j) > 0.0 && b(j) > 0.0)) {
                    throw DomainError("factor_returns: log-return factor is not positive");
                }
                r(static_cast<Eigen::Index>(s), j) = std::log(b(j) / a(j));
            } else {
                r(static_cast<Eigen::Index>(s), j) = b(j) - a(j);
            }
        }
    }
    return r;
}

EwmaState ewma_update(const EwmaState& state, double r) {
    if (!(state.decay > 0.0 && state.decay < 1.0)) {
        throw DomainError("ewma_update: decay must lie in (0,1)");
    }
    return {state.decay, state.decay * state.variance + (1.0 - state.decay) * r * r};
}

Eigen::MatrixXd ewma_forecast_vols(const Eigen::MatrixXd& returns, const Eigen::VectorXd& initial_var, double decay) {
    if (initial_var.size() != returns.cols() || (initial_var.array() < 0.0).any()) {
        throw DomainError("ewma_forecast_vols: initial variance must be non-negative, one per factor");
    }
    Eigen::MatrixXd vols(returns.rows() + 1, returns.cols());
    for (Eigen::Index j = 0; j < returns.cols(); ++j) {
        EwmaState state{decay, initial_var(j)};
        vols(0, j) = std::sqrt(state.variance);
        for (Eigen::Index s = 0; s < returns.rows(); ++s) {
            state = ewma_update(state, returns(s, j));
            vols(s + 1, j) = std::sqrt(state.variance);
        }
    }
    return vols;
}

FhsScenarios fhs_scenarios(const HestonParams& today, const Eigen::MatrixXd& returns, const Eigen::MatrixXd& vols,
                           Eigen::Index now, int horizon_days, std::size_t scenarios) {
    if (returns.cols() != heston_factor_count || vols.cols() != heston_factor_count) {
        throw DomainError("fhs_scenarios: expected 6 factor columns");
    }
    if (horizon_days < 1) {
        throw DomainError("fhs_scenarios: horizon must be at least one day");
    }
    if (now > returns.rows() || now >= vols.rows()) {
        throw DomainError("fhs_scenarios: current date beyond the return history");
    }
    const auto windows = static_cast<Eigen::Index>(scenarios);
    if (now - windows - horizon_days + 1 < 0) {
        throw EstimationError("fhs_scenarios: need " + std::to_string(scenarios + horizon_days - 1) +
                              " historical returns, have " + std::to_string(now));
    }
    const Eigen::VectorXd base = to_factors(today);
    FhsScenarios out;
    out.params.reserve(scenarios);
    for (Eigen::Index k = 0; k < windows; ++k) {
        const Eigen::Index end = now - 1 - k;
        const Eigen::Index start = end - horizon_days + 1;
        Eigen::VectorXd x = base;
        bool skip = false;
        for (int j = 0; j < heston_factor_count && !skip; ++j) {
            double window = returns.col(j).segment(start, horizon_days).sum();
            if (window == 0.0) {
                continue;
            }
            double historical = vols(start, j);
            if (!(historical > 0.0)) {
                out.warnings.push_back("fhs_scenarios: zero historical vol for factor " + std::to_string(j) +
                                       " at return " + std::to_string(start) + ", scenario skipped");
                skip = true;
                break;
            }
            double filtered = window * vols(now, j) / historical;
            x(j) = heston_convention(j) == ReturnConvention::log ? x(j) * std::exp(filtered) : x(j) + filtered;
        }
        if (!skip) {
            out.params.push_back(from_factors(x));
        }
    }
    return out;
}

}  // namespace optrisk
