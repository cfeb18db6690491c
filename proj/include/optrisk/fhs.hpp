#pragma once

#include "optrisk/errors.hpp"
#include "optrisk/heston.hpp"
#include "optrisk/lattice.hpp"

#include <Eigen/Dense>

#include <iosfwd>
#include <string>
#include <vector>

namespace optrisk {

struct CalibrationOptions {
    int max_iterations = 100;
    double objective_tolerance = 1e-14;  // stop once the weighted objective is this small
    double step_tolerance = 1e-10;       // relative parameter change that counts as converged
    double pricer_tolerance = 1e-10;
};

struct CalibrationResult {
    HestonParams params;
    double objective = 0.0;  // sum_j w_j (model_j - market_j)^2
    double mape = 0.0;       // mean |model_j - market_j| / market_j
    int iterations = 0;
    std::vector<double> objective_history;  // accepted objectives, non-increasing
};

class CalibrationFailure : public CalibrationError {
public:
    CalibrationFailure(const std::string& what, HestonParams best) : CalibrationError(what), best(best) {}
    HestonParams best;
};

// Initial point used when no previous fit is available: initial and long-run
// variance from the shortest ATM quote, reversion 1, corr_vol 0.1, indep_vol 0.3.
HestonParams default_initial_params(const Eigen::VectorXd& row, const LiquidLattice& lattice, double spot);

// Weighted least squares fit of (initial_var, long_run_var, reversion, corr_vol,
// indep_vol) by projected Levenberg-Marquardt. weights are the per-node 1/vega.
// Spot is carried over from init.
CalibrationResult calibrate(const Eigen::VectorXd& row, const LiquidLattice& lattice, const Eigen::VectorXd& weights,
                            const HestonParams& init, const CalibrationOptions& options = {});

// One fit per panel row, each warm-started from the previous date.
std::vector<CalibrationResult> calibrate_history(const Eigen::MatrixXd& prices, const LiquidLattice& lattice,
                                                 const Eigen::VectorXd& weights, const std::vector<double>& spot,
                                                 const CalibrationOptions& options = {});

void write_parameter_history(std::ostream& out, const std::vector<std::string>& dates,
                             const std::vector<CalibrationResult>& fits);

// Risk factors of the baseline: (spot, initial_var, long_run_var, reversion,
// corr_vol, indep_vol). corr_vol can change sign and uses absolute returns; the
// others are positive and use log returns.
inline constexpr int heston_factor_count = 6;
enum class ReturnConvention { log, absolute };

ReturnConvention heston_convention(int factor);
Eigen::VectorXd to_factors(const HestonParams& p);
HestonParams from_factors(const Eigen::VectorXd& x);

// Row s holds the return from date s to date s+1.
Eigen::MatrixXd factor_returns(const std::vector<HestonParams>& history);

struct EwmaState {
    double decay = 0.95;
    double variance = 0.0;
};

EwmaState ewma_update(const EwmaState& state, double r);

// Row s is the volatility forecast for return s, built from returns before s;
// the final extra row is the forecast for the next, unobserved return.
Eigen::MatrixXd ewma_forecast_vols(const Eigen::MatrixXd& returns, const Eigen::VectorXd& initial_var,
                                   double decay = 0.95);

struct FhsScenarios {
    std::vector<HestonParams> params;
    std::vector<std::string> warnings;
};

// Filtered historical scenarios for the horizon ending horizon_days after the
// current date. Returns rows [0, now) are observed; vols has at least now + 1
// rows and vols.row(now) is the current forecast. Uses the M most recent
// overlapping horizon-day windows.
FhsScenarios fhs_scenarios(const HestonParams& today, const Eigen::MatrixXd& returns, const Eigen::MatrixXd& vols,
                           Eigen::Index now, int horizon_days, std::size_t scenarios);

}  // namespace optrisk
