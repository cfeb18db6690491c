#pragma once

#include "optrisk/heston.hpp"
#include "optrisk/lattice.hpp"
#include "optrisk/market_data.hpp"
#include "optrisk/scenario.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace optrisk {

enum class PortfolioType {
    outright,
    delta_spread,
    delta_butterfly,
    delta_hedged,
    delta_neutral_strangle,
    risk_reversal,
    calendar_spread,
    vix
};
enum class Side { long_side, short_side };

inline constexpr std::array<PortfolioType, 8> portfolio_types = {
    PortfolioType::outright,          PortfolioType::delta_spread,          PortfolioType::delta_butterfly,
    PortfolioType::delta_hedged,      PortfolioType::delta_neutral_strangle, PortfolioType::risk_reversal,
    PortfolioType::calendar_spread,   PortfolioType::vix};

const char* to_string(PortfolioType type);
const char* to_string(Side side);

// Position in one lattice contract (the call struck at the node today) or,
// with node == underlying_leg, in the index itself.
struct Leg {
    static constexpr std::size_t underlying_leg = static_cast<std::size_t>(-1);
    std::size_t node = underlying_leg;
    double weight = 0.0;
};

struct Portfolio {
    std::size_t id = 0;
    PortfolioType type = PortfolioType::outright;
    Side side = Side::long_side;
    std::string name;
    std::vector<Leg> legs;
};

// Deltas the catalog draws from: 0.2 to 0.8 in steps of 0.1.
std::vector<double> catalog_deltas();

// Every strategy over catalog_deltas() and the lattice expiries, long and
// short. Throws CatalogError when a delta label is missing from an expiry.
std::vector<Portfolio> build_catalog(const LiquidLattice& lattice);

// Contract values after the horizon: S' h(tau_j - horizon, m_j + ln(S / S')).
Eigen::VectorXd revalue_nodes(const LiquidLattice& lattice, const std::vector<std::size_t>& nodes,
                              const SurfaceInterpolant& next, double horizon, double spot_now, double spot_next);

// Pi_{t+h} - Pi_t with legs priced as S c on today's surface and revalued on
// the next surface. Revaluation errors name the leg.
double pnl(const Portfolio& portfolio, const LiquidLattice& lattice, const Eigen::VectorXd& surface_now,
           const SurfaceInterpolant& next, double horizon, double spot_now, double spot_next);

// Linear map from contract and index value changes to portfolio PnLs.
class PortfolioBook {
public:
    PortfolioBook(const std::vector<Portfolio>& portfolios, const LiquidLattice& lattice);

    // Distinct lattice nodes referenced by any leg, ascending.
    const std::vector<std::size_t>& nodes() const { return nodes_; }
    std::size_t size() const { return static_cast<std::size_t>(weights_.cols()); }

    // Rows are scenarios: contract_change columns follow nodes(). Returns
    // scenarios x portfolios.
    Eigen::MatrixXd pnl(const Eigen::MatrixXd& contract_change, const Eigen::VectorXd& spot_change) const;

private:
    std::vector<std::size_t> nodes_;
    Eigen::MatrixXd weights_;        // nodes x portfolios
    Eigen::RowVectorXd underlying_;  // index units per portfolio
};

// -sup{l : #{pnl < l} / M <= 1 - alpha}, i.e. minus the k-th smallest PnL with
// k = floor(M (1 - alpha)) + 1.
double var_estimate(std::vector<double> pnls, double alpha);

inline constexpr double chi2_1_95 = 3.841458820694124;
inline constexpr double chi2_2_95 = 5.991464547107979;

struct KupiecResult {
    double statistic = 0.0;
    bool reject_two_sided = false;
    bool reject_one_sided = false;  // also requires more breaches than expected
};

KupiecResult kupiec_pf(std::size_t breaches, std::size_t observations, double alpha);

struct ChristoffersenResult {
    std::array<std::size_t, 4> transitions{};  // n00, n01, n10, n11
    double independence = 0.0;
    bool reject_independence = false;
    double conditional_coverage = 0.0;
    bool reject_conditional_coverage = false;
};

ChristoffersenResult christoffersen(const std::vector<int>& breaches, double alpha);

enum class Zone { green, yellow, red };
const char* to_string(Zone zone);

// Basel zones for breaches of a 1-day 99% VaR over 250 days. Other horizons or
// levels throw UsageError.
Zone traffic_light(std::size_t breaches, double alpha = 0.99, int horizon_days = 1);
inline constexpr std::size_t traffic_light_window = 250;

// min / max of a positive VaR series.
double trough_to_peak(const std::vector<double>& var_series);

// Scenario values of today's contracts after the horizon.
struct ScenarioValues {
    Eigen::MatrixXd contracts;  // scenarios x requested nodes, currency
    Eigen::VectorXd spot;
    std::size_t repaired = 0;
    std::vector<std::string> warnings;
};

class RiskEngine {
public:
    virtual ~RiskEngine() = default;
    virtual std::string name() const = 0;
    // Scenarios for panel row t over horizon_days rows. Must be deterministic in
    // (t, horizon_days, count, seed) and safe to call concurrently.
    virtual ScenarioValues scenarios(Eigen::Index t, int horizon_days, std::size_t count, std::uint64_t seed,
                                     const std::vector<std::size_t>& nodes) const = 0;
};

// Neural-SDE engine: decodes the row, simulates and repairs, then revalues on
// the interpolated scenario surfaces.
class NsdeRiskEngine : public RiskEngine {
public:
    NsdeRiskEngine(const ScenarioEngine& engine, const SurfacePanel& panel,
                   InnovationMode mode = InnovationMode::bootstrap);

    std::string name() const override { return "nsde"; }
    ScenarioValues scenarios(Eigen::Index t, int horizon_days, std::size_t count, std::uint64_t seed,
                             const std::vector<std::size_t>& nodes) const override;

private:
    const ScenarioEngine& engine_;
    const SurfacePanel& panel_;
    InnovationMode mode_;
};

// Filtered historical simulation on Heston parameters, revalued with the
// Heston pricer at the shifted contract coordinates. One underlying only.
class FhsRiskEngine : public RiskEngine {
public:
    FhsRiskEngine(const SurfacePanel& panel, std::vector<HestonParams> history,
                  double pricer_tolerance = heston_default_tolerance, double decay = 0.95);

    std::string name() const override { return "fhs"; }
    ScenarioValues scenarios(Eigen::Index t, int horizon_days, std::size_t count, std::uint64_t seed,
                             const std::vector<std::size_t>& nodes) const override;

    const Eigen::MatrixXd& returns() const { return returns_; }
    const Eigen::MatrixXd& vols() const { return vols_; }

private:
    const SurfacePanel& panel_;
    std::vector<HestonParams> history_;
    Eigen::MatrixXd returns_;
    Eigen::MatrixXd vols_;
    double tolerance_;
};

// EWMA start variance per factor: sample variance of the first returns.
inline constexpr Eigen::Index ewma_seed_returns = 30;

struct BacktestOptions {
    std::vector<int> horizons{1, 2, 5, 10};
    std::vector<double> alphas{0.99, 0.95};
    std::size_t scenarios = 5000;
    std::uint64_t seed = 1;
    unsigned threads = 1;
    Eigen::Index test_begin = 0;  // first forecast row
    Eigen::Index test_end = -1;   // one past the last forecast row; -1 runs to the end of the panel
};

struct PortfolioBacktest {
    std::size_t portfolio = 0;
    std::vector<double> var;
    std::vector<double> pnl;
    std::vector<int> breach;
    std::size_t breaches = 0;
    double coverage = 1.0;
    KupiecResult kupiec;
    std::optional<ChristoffersenResult> christoffersen;  // 1-day horizon only
    std::optional<Zone> zone;                            // 1-day 99% only
    std::optional<double> trough_to_peak;                // when every forecast is positive
};

struct BacktestSummary {
    std::size_t portfolios = 0;
    double median_coverage = 0.0;
    double mean_coverage = 0.0;
    double kupiec_two_sided = 0.0;  // fraction of portfolios rejected
    double kupiec_one_sided = 0.0;
    std::optional<double> christoffersen;
    std::optional<double> conditional_coverage;
    std::optional<std::array<double, 3>> zones;  // green, yellow, red fractions
};

struct BacktestBlock {
    int horizon_days = 1;
    double alpha = 0.99;
    std::vector<std::string> dates;  // forecast dates actually tested
    std::vector<PortfolioBacktest> portfolios;
    BacktestSummary summary;
};

struct BacktestReport {
    std::string engine;
    std::size_t scenarios = 0;
    std::uint64_t seed = 0;
    std::vector<BacktestBlock> blocks;
    std::vector<std::string> skipped;  // "date horizon: reason"
    std::vector<std::string> warnings;
    std::size_t repaired_scenarios = 0;
};

// Aggregates over the per-portfolio rows of one block.
BacktestSummary summarize(const std::vector<PortfolioBacktest>& rows, int horizon_days, double alpha);

// Per-portfolio statistics from a finished forecast/PnL series.
PortfolioBacktest evaluate_portfolio(std::size_t portfolio, std::vector<double> var, std::vector<double> pnl,
                                     int horizon_days, double alpha);

BacktestReport run_backtest(const RiskEngine& engine, const SurfacePanel& panel,
                            const std::vector<Portfolio>& catalog, const BacktestOptions& options);

// One JSON object per line and portfolio per block.
void write_backtest_records(std::ostream& out, const BacktestReport& report, const std::vector<Portfolio>& catalog);
// Summary table: one row per statistic, one column per block.
void write_backtest_summary(std::ostream& out, const BacktestReport& report);
// Long-format breach series: block, portfolio, date, var, pnl, breach.
void write_breach_series(std::ostream& out, const BacktestReport& report, const std::vector<Portfolio>& catalog);
// Trough-to-peak ratio per block and portfolio.
void write_trough_to_peak(std::ostream& out, const BacktestReport& report, const std::vector<Portfolio>& catalog);

}  // namespace optrisk
