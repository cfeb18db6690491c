#include "optrisk/backtest.hpp"

#include "optrisk/errors.hpp"
#include "optrisk/fhs.hpp"
#include "optrisk/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace optrisk {

const char* to_string(PortfolioType type) {
    switch (type) {
        case PortfolioType::outright: return "outright";
        case PortfolioType::delta_spread: return "delta_spread";
        case PortfolioType::delta_butterfly: return "delta_butterfly";
        case PortfolioType::delta_hedged: return "delta_hedged";
        case PortfolioType::delta_neutral_strangle: return "delta_neutral_strangle";
        case PortfolioType::risk_reversal: return "risk_reversal";
        case PortfolioType::calendar_spread: return "calendar_spread";
        case PortfolioType::vix: return "vix";
    }
    return "unknown";
}

const char* to_string(Side side) {
    return side == Side::long_side ? "long" : "short";
}

const char* to_string(Zone zone) {
    switch (zone) {
        case Zone::green: return "green";
        case Zone::yellow: return "yellow";
        case Zone::red: return "red";
    }
    return "unknown";
}

std::vector<double> catalog_deltas() {
    return {0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
}

namespace {

std::string fixed(double x, int digits) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(digits);
    out << x;
    return out.str();
}

std::string expiry_label(double tau) {
    return std::to_string(static_cast<long>(std::lround(tau * days_per_year))) + "d";
}

}  // namespace

std::vector<Portfolio> build_catalog(const LiquidLattice& lattice) {
    const auto& expiries = lattice.expiries();
    if (expiries.empty()) {
        throw CatalogError("build_catalog: empty lattice");
    }
    const std::vector<double> deltas = catalog_deltas();
    // node[g][i] is the contract at expiry g with delta deltas[i].
    std::vector<std::vector<std::size_t>> node(expiries.size());
    for (std::size_t g = 0; g < expiries.size(); ++g) {
        for (double d : deltas) {
            const std::size_t j = lattice.find(g, d);
            if (j == LiquidLattice::npos) {
                throw CatalogError("build_catalog: expiry " + expiry_label(expiries[g]) + " has no delta " +
                                   fixed(d, 2) + " node");
            }
            node[g].push_back(j);
        }
    }
    auto at = [&](std::size_t g, double d) {
        for (std::size_t i = 0; i < deltas.size(); ++i) {
            if (std::abs(deltas[i] - d) < 1e-9) {
                return node[g][i];
            }
        }
        throw CatalogError("build_catalog: delta " + fixed(d, 2) + " is not a catalog delta");
    };
    const Leg spot_leg{Leg::underlying_leg, 1.0};
    auto call = [](std::size_t j, double w) { return Leg{j, w}; };
    auto scaled = [](Leg leg, double w) { return Leg{leg.node, leg.weight * w}; };

    std::vector<Portfolio> out;
    auto add = [&](PortfolioType type, const std::string& name, std::vector<Leg> legs) {
        for (Side side : {Side::long_side, Side::short_side}) {
            Portfolio p;
            p.id = out.size();
            p.type = type;
            p.side = side;
            p.name = name + " " + to_string(side);
            p.legs = legs;
            if (side == Side::short_side) {
                for (Leg& leg : p.legs) {
                    leg.weight = -leg.weight;
                }
            }
            out.push_back(std::move(p));
        }
    };
    const std::size_t G = expiries.size();
    const std::vector<double> wings = {0.2, 0.3, 0.4};

    for (std::size_t g = 0; g < G; ++g) {
        for (double d : deltas) {
            add(PortfolioType::outright, "outright " + expiry_label(expiries[g]) + " d" + fixed(d, 1),
                {call(at(g, d), 1.0)});
        }
    }
    for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t hi = 0; hi < deltas.size(); ++hi) {
            for (std::size_t lo = 0; lo < hi; ++lo) {
                add(PortfolioType::delta_spread,
                    "delta_spread " + expiry_label(expiries[g]) + " d" + fixed(deltas[hi], 1) + "/d" +
                        fixed(deltas[lo], 1),
                    {call(at(g, deltas[hi]), 1.0), call(at(g, deltas[lo]), -1.0)});
            }
        }
    }
    for (std::size_t g = 0; g < G; ++g) {
        for (double d : wings) {
            add(PortfolioType::delta_butterfly, "delta_butterfly " + expiry_label(expiries[g]) + " d" + fixed(d, 1),
                {call(at(g, d), 1.0), call(at(g, 1.0 - d), 1.0), call(at(g, 0.5), -2.0)});
        }
    }
    for (std::size_t g = 0; g < G; ++g) {
        add(PortfolioType::delta_hedged, "delta_hedged " + expiry_label(expiries[g]) + " d0.5",
            {call(at(g, 0.5), 1.0), scaled(spot_leg, -0.5)});
    }
    for (std::size_t g = 0; g < G; ++g) {
        for (double d : wings) {
            add(PortfolioType::delta_neutral_strangle,
                "delta_neutral_strangle " + expiry_label(expiries[g]) + " d" + fixed(d, 1),
                {call(at(g, d), 1.0), call(at(g, 1.0 - d), 1.0), scaled(spot_leg, -1.0)});
        }
    }
    for (std::size_t g = 0; g < G; ++g) {
        for (double d : wings) {
            add(PortfolioType::risk_reversal, "risk_reversal " + expiry_label(expiries[g]) + " d" + fixed(d, 1),
                {call(at(g, d), 1.0), call(at(g, 1.0 - d), -1.0), spot_leg});
        }
    }
    for (std::size_t far = 0; far < G; ++far) {
        for (std::size_t near = 0; near < far; ++near) {
            add(PortfolioType::calendar_spread,
                "calendar_spread " + expiry_label(expiries[far]) + "/" + expiry_label(expiries[near]) + " d0.5",
                {call(at(far, 0.5), 1.0), call(at(near, 0.5), -1.0)});
        }
    }
    const VixStrip strip = vix_strip(lattice);
    std::vector<Leg> vix_legs;
    for (std::size_t i = 0; i < strip.nodes.size(); ++i) {
        vix_legs.push_back(call(strip.nodes[i], strip.calls[i]));
    }
    vix_legs.push_back(scaled(spot_leg, strip.underlying));
    add(PortfolioType::vix, "vix", vix_legs);
    return out;
}

Eigen::VectorXd revalue_nodes(const LiquidLattice& lattice, const std::vector<std::size_t>& nodes,
                              const SurfaceInterpolant& next, double horizon, double spot_now, double spot_next) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(nodes.size()));
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i] >= lattice.size()) {
            throw DomainError("revalue_nodes: node outside the lattice");
        }
        const LatticeNode& n = lattice[nodes[i]];
        try {
            out(static_cast<Eigen::Index>(i)) = revalue_contract({{}, n.tau, n.m}, horizon, spot_now, spot_next, next);
        } catch (const RevaluationError& e) {
            throw RevaluationError("call " + expiry_label(n.tau) + " d" + fixed(n.delta, 2) + ": " + e.what());
        }
    }
    return out;
}

double pnl(const Portfolio& portfolio, const LiquidLattice& lattice, const Eigen::VectorXd& surface_now,
           const SurfaceInterpolant& next, double horizon, double spot_now, double spot_next) {
    if (surface_now.size() != static_cast<Eigen::Index>(lattice.size())) {
        throw DomainError("pnl: surface does not match the lattice");
    }
    double total = 0.0;
    for (const Leg& leg : portfolio.legs) {
        if (leg.node == Leg::underlying_leg) {
            total += leg.weight * (spot_next - spot_now);
            continue;
        }
        try {
            const double after = revalue_nodes(lattice, {leg.node}, next, horizon, spot_now, spot_next)(0);
            total += leg.weight * (after - spot_now * surface_now(static_cast<Eigen::Index>(leg.node)));
        } catch (const RevaluationError& e) {
            throw RevaluationError(portfolio.name + ": " + e.what());
        }
    }
    return total;
}

PortfolioBook::PortfolioBook(const std::vector<Portfolio>& portfolios, const LiquidLattice& lattice) {
    for (const Portfolio& p : portfolios) {
        if (p.legs.empty()) {
            throw CatalogError("portfolio " + p.name + " has no legs");
        }
        for (const Leg& leg : p.legs) {
            if (leg.weight == 0.0 || !std::isfinite(leg.weight)) {
                throw CatalogError("portfolio " + p.name + " has a zero or non-finite weight");
            }
            if (leg.node != Leg::underlying_leg) {
                if (leg.node >= lattice.size()) {
                    throw CatalogError("portfolio " + p.name + " references a node outside the lattice");
                }
                nodes_.push_back(leg.node);
            }
        }
    }
    std::sort(nodes_.begin(), nodes_.end());
    nodes_.erase(std::unique(nodes_.begin(), nodes_.end()), nodes_.end());
    std::map<std::size_t, Eigen::Index> column;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        column[nodes_[i]] = static_cast<Eigen::Index>(i);
    }
    const auto P = static_cast<Eigen::Index>(portfolios.size());
    weights_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nodes_.size()), P);
    underlying_ = Eigen::RowVectorXd::Zero(P);
    for (Eigen::Index k = 0; k < P; ++k) {
        for (const Leg& leg : portfolios[static_cast<std::size_t>(k)].legs) {
            if (leg.node == Leg::underlying_leg) {
                underlying_(k) += leg.weight;
            } else {
                weights_(column[leg.node], k) += leg.weight;
            }
        }
    }
}

Eigen::MatrixXd PortfolioBook::pnl(const Eigen::MatrixXd& contract_change, const Eigen::VectorXd& spot_change) const {
    if (contract_change.cols() != weights_.rows() || contract_change.rows() != spot_change.size()) {
        throw DomainError("PortfolioBook: value changes do not match the book");
    }
    Eigen::MatrixXd out = contract_change * weights_;
    out.noalias() += spot_change * underlying_;
    return out;
}

double var_estimate(std::vector<double> pnls, double alpha) {
    if (pnls.empty()) {
        throw DomainError("var_estimate: empty scenario sample");
    }
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw DomainError("var_estimate: alpha must lie in (0, 1)");
    }
    const double M = static_cast<double>(pnls.size());
    // Guard against M (1 - alpha) rounding to just below an integer.
    const auto below = static_cast<std::size_t>(std::floor(M * (1.0 - alpha) + 1e-9));
    const std::size_t k = std::min(below, pnls.size() - 1);
    std::nth_element(pnls.begin(), pnls.begin() + static_cast<std::ptrdiff_t>(k), pnls.end());
    return -pnls[k];
}

namespace {

// x ln(y) with 0 ln 0 = 0.
double xlogy(double x, double y) {
    return x == 0.0 ? 0.0 : x * std::log(y);
}

double kupiec_statistic(std::size_t breaches, std::size_t observations, double p) {
    const double x = static_cast<double>(breaches);
    const double n = static_cast<double>(observations);
    const double rate = x / n;
    return 2.0 * (xlogy(x, rate) - xlogy(x, p) + xlogy(n - x, 1.0 - rate) - xlogy(n - x, 1.0 - p));
}

}  // namespace

KupiecResult kupiec_pf(std::size_t breaches, std::size_t observations, double alpha) {
    if (observations == 0 || breaches > observations) {
        throw DomainError("kupiec_pf: need 0 <= breaches <= observations and observations > 0");
    }
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw DomainError("kupiec_pf: alpha must lie in (0, 1)");
    }
    const double p = 1.0 - alpha;
    KupiecResult r;
    r.statistic = std::max(0.0, kupiec_statistic(breaches, observations, p));
    r.reject_two_sided = r.statistic >= chi2_1_95;
    r.reject_one_sided =
        r.reject_two_sided && static_cast<double>(breaches) > p * static_cast<double>(observations);
    return r;
}

ChristoffersenResult christoffersen(const std::vector<int>& breaches, double alpha) {
    if (breaches.size() < 2) {
        throw DomainError("christoffersen: need at least two observations");
    }
    ChristoffersenResult r;
    auto& n = r.transitions;
    for (std::size_t t = 0; t + 1 < breaches.size(); ++t) {
        const int a = breaches[t], b = breaches[t + 1];
        if ((a != 0 && a != 1) || (b != 0 && b != 1)) {
            throw DomainError("christoffersen: breach indicators must be 0 or 1");
        }
        ++n[static_cast<std::size_t>(2 * a + b)];
    }
    const double n00 = static_cast<double>(n[0]), n01 = static_cast<double>(n[1]);
    const double n10 = static_cast<double>(n[2]), n11 = static_cast<double>(n[3]);
    const double p01 = n00 + n01 > 0.0 ? n01 / (n00 + n01) : 0.0;
    const double p11 = n10 + n11 > 0.0 ? n11 / (n10 + n11) : 0.0;
    const double pooled = (n01 + n11) / (n00 + n01 + n10 + n11);
    const double markov = xlogy(n00, 1.0 - p01) + xlogy(n01, p01) + xlogy(n10, 1.0 - p11) + xlogy(n11, p11);
    const double iid = xlogy(n00 + n10, 1.0 - pooled) + xlogy(n01 + n11, pooled);
    r.independence = std::max(0.0, 2.0 * (markov - iid));
    r.reject_independence = r.independence >= chi2_1_95;
    const auto total = static_cast<std::size_t>(std::count(breaches.begin(), breaches.end(), 1));
    r.conditional_coverage = kupiec_pf(total, breaches.size(), alpha).statistic + r.independence;
    r.reject_conditional_coverage = r.conditional_coverage >= chi2_2_95;
    return r;
}

Zone traffic_light(std::size_t breaches, double alpha, int horizon_days) {
    if (horizon_days != 1 || std::abs(alpha - 0.99) > 1e-12) {
        throw UsageError("traffic_light: defined for 1-day 99% VaR only");
    }
    if (breaches <= 4) {
        return Zone::green;
    }
    return breaches <= 9 ? Zone::yellow : Zone::red;
}

double trough_to_peak(const std::vector<double>& var_series) {
    if (var_series.empty()) {
        throw DomainError("trough_to_peak: empty VaR series");
    }
    const auto [lo, hi] = std::minmax_element(var_series.begin(), var_series.end());
    if (!(*hi > 0.0) || !std::isfinite(*hi)) {
        throw MetricError("trough_to_peak: maximum VaR must be positive and finite");
    }
    if (!(*lo > 0.0)) {
        throw MetricError("trough_to_peak: VaR series must be positive");
    }
    return *lo / *hi;
}

NsdeRiskEngine::NsdeRiskEngine(const ScenarioEngine& engine, const SurfacePanel& panel, InnovationMode mode)
    : engine_(engine), panel_(panel), mode_(mode) {
    if (std::abs(engine.models().dt - panel.dt) > 1e-12 * panel.dt) {
        throw DomainError("NsdeRiskEngine: model and panel time steps differ");
    }
}

ScenarioValues NsdeRiskEngine::scenarios(Eigen::Index t, int horizon_days, std::size_t count, std::uint64_t seed,
                                         const std::vector<std::size_t>& nodes) const {
    const auto row = static_cast<std::size_t>(t);
    const MarketState start =
        engine_.decode_state(panel_.prices.row(t).transpose(), panel_.spot.at(row), panel_.labels.at(row));
    SimulationOptions options;
    options.mode = mode_;
    options.seed = seed;
    options.repair = true;
    const double horizon = horizon_days * panel_.dt;
    const ScenarioSet set = engine_.simulate(start, horizon, count, options);
    ScenarioValues out;
    out.contracts.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(nodes.size()));
    out.spot.resize(static_cast<Eigen::Index>(count));
    for (std::size_t k = 0; k < count; ++k) {
        const Scenario& s = set.scenarios[k];
        const SurfaceInterpolant surface(panel_.lattice, s.surface);
        out.contracts.row(static_cast<Eigen::Index>(k)) =
            revalue_nodes(panel_.lattice, nodes, surface, horizon, start.spot, s.spot).transpose();
        out.spot(static_cast<Eigen::Index>(k)) = s.spot;
    }
    out.repaired = set.stats.repaired;
    return out;
}

FhsRiskEngine::FhsRiskEngine(const SurfacePanel& panel, std::vector<HestonParams> history, double pricer_tolerance,
                             double decay)
    : panel_(panel), history_(std::move(history)), tolerance_(pricer_tolerance) {
    if (static_cast<Eigen::Index>(history_.size()) != panel.rows()) {
        throw DomainError("FhsRiskEngine: parameter history and panel have different lengths");
    }
    for (Eigen::Index t = 0; t + 1 < panel.rows(); ++t) {
        if (!panel.consecutive(t)) {
            throw UsageError("FhsRiskEngine: the panel must hold a single underlying");
        }
    }
    returns_ = factor_returns(history_);
    if (returns_.rows() < 2) {
        throw EstimationError("FhsRiskEngine: need at least two factor returns");
    }
    const Eigen::Index seed_rows = std::min<Eigen::Index>(ewma_seed_returns, returns_.rows());
    const Eigen::MatrixXd head = returns_.topRows(seed_rows);
    const Eigen::VectorXd initial_var = head.colwise().squaredNorm().transpose() / static_cast<double>(seed_rows);
    vols_ = ewma_forecast_vols(returns_, initial_var, decay);
}

ScenarioValues FhsRiskEngine::scenarios(Eigen::Index t, int horizon_days, std::size_t count, std::uint64_t,
                                        const std::vector<std::size_t>& nodes) const {
    const auto row = static_cast<std::size_t>(t);
    HestonParams today = history_.at(row);
    const double spot_now = panel_.spot.at(row);
    today.spot = spot_now;
    FhsScenarios fhs = fhs_scenarios(today, returns_, vols_, t, horizon_days, count);
    const double horizon = horizon_days * panel_.dt;
    const LiquidLattice& lattice = panel_.lattice;

    // Requested nodes grouped by expiry so each scenario prices one strip per expiry.
    std::map<double, std::vector<std::size_t>> by_expiry;  // tau -> positions in nodes
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        by_expiry[lattice[nodes[i]].tau].push_back(i);
    }
    ScenarioValues out;
    const auto M = static_cast<Eigen::Index>(fhs.params.size());
    out.contracts.resize(M, static_cast<Eigen::Index>(nodes.size()));
    out.spot.resize(M);
    for (Eigen::Index k = 0; k < M; ++k) {
        const HestonParams& p = fhs.params[static_cast<std::size_t>(k)];
        const double shift = std::log(spot_now / p.spot);
        for (const auto& [tau, positions] : by_expiry) {
            if (!(tau - horizon > 0.0)) {
                throw RevaluationError("fhs: contract expires within the horizon");
            }
            Eigen::VectorXd m(static_cast<Eigen::Index>(positions.size()));
            for (std::size_t i = 0; i < positions.size(); ++i) {
                m(static_cast<Eigen::Index>(i)) = lattice[nodes[positions[i]]].m + shift;
            }
            const Eigen::VectorXd prices = heston_price_strip(p, tau - horizon, m, tolerance_);
            for (std::size_t i = 0; i < positions.size(); ++i) {
                out.contracts(k, static_cast<Eigen::Index>(positions[i])) = p.spot * prices(static_cast<Eigen::Index>(i));
            }
        }
        out.spot(k) = p.spot;
    }
    out.warnings = std::move(fhs.warnings);
    return out;
}

PortfolioBacktest evaluate_portfolio(std::size_t portfolio, std::vector<double> var, std::vector<double> pnl,
                                     int horizon_days, double alpha) {
    if (var.empty() || var.size() != pnl.size()) {
        throw DomainError("evaluate_portfolio: need matching, non-empty VaR and PnL series");
    }
    PortfolioBacktest r;
    r.portfolio = portfolio;
    r.breach.resize(var.size());
    for (std::size_t t = 0; t < var.size(); ++t) {
        r.breach[t] = pnl[t] < -var[t] ? 1 : 0;
    }
    r.breaches = static_cast<std::size_t>(std::count(r.breach.begin(), r.breach.end(), 1));
    const std::size_t n = var.size();
    r.coverage = 1.0 - static_cast<double>(r.breaches) / static_cast<double>(n);
    r.kupiec = kupiec_pf(r.breaches, n, alpha);
    if (horizon_days == 1 && n >= 2) {
        r.christoffersen = christoffersen(r.breach, alpha);
    }
    if (horizon_days == 1 && std::abs(alpha - 0.99) <= 1e-12) {
        const std::size_t from = n > traffic_light_window ? n - traffic_light_window : 0;
        const auto recent = static_cast<std::size_t>(std::count(r.breach.begin() + static_cast<std::ptrdiff_t>(from),
                                                                r.breach.end(), 1));
        r.zone = traffic_light(recent, alpha, horizon_days);
    }
    const bool positive = std::all_of(var.begin(), var.end(), [](double v) { return v > 0.0 && std::isfinite(v); });
    if (positive) {
        r.trough_to_peak = trough_to_peak(var);
    }
    r.var = std::move(var);
    r.pnl = std::move(pnl);
    return r;
}

BacktestSummary summarize(const std::vector<PortfolioBacktest>& rows, int horizon_days, double alpha) {
    BacktestSummary s;
    s.portfolios = rows.size();
    if (rows.empty()) {
        return s;
    }
    const double n = static_cast<double>(rows.size());
    std::vector<double> coverage;
    std::size_t two = 0, one = 0, ind = 0, cc = 0, with_chr = 0;
    std::array<std::size_t, 3> zones{};
    std::size_t with_zone = 0;
    for (const auto& r : rows) {
        coverage.push_back(r.coverage);
        two += r.kupiec.reject_two_sided ? 1 : 0;
        one += r.kupiec.reject_one_sided ? 1 : 0;
        if (r.christoffersen) {
            ++with_chr;
            ind += r.christoffersen->reject_independence ? 1 : 0;
            cc += r.christoffersen->reject_conditional_coverage ? 1 : 0;
        }
        if (r.zone) {
            ++with_zone;
            ++zones[static_cast<std::size_t>(*r.zone)];
        }
    }
    std::sort(coverage.begin(), coverage.end());
    const std::size_t mid = coverage.size() / 2;
    s.median_coverage = coverage.size() % 2 == 1 ? coverage[mid] : 0.5 * (coverage[mid - 1] + coverage[mid]);
    s.mean_coverage = std::accumulate(coverage.begin(), coverage.end(), 0.0) / n;
    s.kupiec_two_sided = static_cast<double>(two) / n;
    s.kupiec_one_sided = static_cast<double>(one) / n;
    if (horizon_days == 1 && with_chr > 0) {
        s.christoffersen = static_cast<double>(ind) / static_cast<double>(with_chr);
        s.conditional_coverage = static_cast<double>(cc) / static_cast<double>(with_chr);
    }
    if (with_zone > 0 && std::abs(alpha - 0.99) <= 1e-12) {
        const double z = static_cast<double>(with_zone);
        s.zones = std::array<double, 3>{static_cast<double>(zones[0]) / z, static_cast<double>(zones[1]) / z,
                                        static_cast<double>(zones[2]) / z};
    }
    return s;
}

namespace {

struct DateResult {
    bool ok = false;
    std::string reason;
    Eigen::MatrixXd var;         // alphas x portfolios
    Eigen::RowVectorXd realized;  // portfolios
    std::size_t repaired = 0;
    std::vector<std::string> warnings;
};

// Runs job(i) for i in [0, n) on up to `threads` threads; the first exception wins.
template <class Job>
void parallel_for(std::size_t n, unsigned threads, Job job) {
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex guard;
    auto work = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) {
                return;
            }
            try {
                job(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(guard);
                if (!failure) {
                    failure = std::current_exception();
                }
                next = n;
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back(work);
        }
        for (auto& th : pool) {
            th.join();
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

}  // namespace

BacktestReport run_backtest(const RiskEngine& engine, const SurfacePanel& panel, const std::vector<Portfolio>& catalog,
                            const BacktestOptions& options) {
    const Eigen::Index rows = panel.rows();
    const Eigen::Index begin = options.test_begin;
    const Eigen::Index end = options.test_end < 0 ? rows : options.test_end;
    if (begin < 0 || begin >= end || end > rows) {
        throw UsageError("run_backtest: test window [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") is not inside the panel");
    }
    if (options.scenarios == 0 || options.horizons.empty() || options.alphas.empty()) {
        throw UsageError("run_backtest: need scenarios, horizons and confidence levels");
    }
    for (double a : options.alphas) {
        if (!(a > 0.0 && a < 1.0)) {
            throw UsageError("run_backtest: confidence levels must lie in (0, 1)");
        }
    }
    const PortfolioBook book(catalog, panel.lattice);
    const std::vector<std::size_t>& nodes = book.nodes();
    const auto N = static_cast<Eigen::Index>(nodes.size());
    const auto P = static_cast<Eigen::Index>(book.size());
    const auto A = static_cast<Eigen::Index>(options.alphas.size());

    BacktestReport report;
    report.engine = engine.name();
    report.scenarios = options.scenarios;
    report.seed = options.seed;

    for (int h : options.horizons) {
        if (h < 1) {
            throw UsageError("run_backtest: horizons must be at least one day");
        }
        std::vector<Eigen::Index> dates;
        for (Eigen::Index t = begin; t < end && t + h < rows; ++t) {
            bool contiguous = true;
            for (Eigen::Index s = t; s < t + h; ++s) {
                contiguous = contiguous && panel.consecutive(s);
            }
            if (contiguous) {
                dates.push_back(t);
            }
        }
        const double horizon = h * panel.dt;
        std::vector<DateResult> results(dates.size());
        parallel_for(dates.size(), options.threads, [&](std::size_t i) {
            const Eigen::Index t = dates[i];
            DateResult& r = results[i];
            const double spot_now = panel.spot[static_cast<std::size_t>(t)];
            const double spot_next = panel.spot[static_cast<std::size_t>(t + h)];
            Eigen::RowVectorXd today(N);
            for (Eigen::Index j = 0; j < N; ++j) {
                today(j) = spot_now * panel.prices(t, static_cast<Eigen::Index>(nodes[static_cast<std::size_t>(j)]));
            }
            ScenarioValues values;
            Eigen::RowVectorXd realized_values;
            try {
                const std::uint64_t seed = RandomStream(options.seed, static_cast<std::uint64_t>(t) * 64u +
                                                                          static_cast<std::uint64_t>(h))
                                               .next_u64();
                values = engine.scenarios(t, h, options.scenarios, seed, nodes);
                const SurfaceInterpolant next(panel.lattice, panel.prices.row(t + h).transpose());
                realized_values = revalue_nodes(panel.lattice, nodes, next, horizon, spot_now, spot_next).transpose();
            } catch (const Error& e) {
                r.reason = e.what();
                return;
            }
            if (values.spot.size() == 0) {
                r.reason = "no scenarios";
                return;
            }
            const Eigen::MatrixXd change = values.contracts.rowwise() - today;
            const Eigen::VectorXd spot_change = values.spot.array() - spot_now;
            const Eigen::MatrixXd pnls = book.pnl(change, spot_change);
            r.var.resize(A, P);
            std::vector<double> column(static_cast<std::size_t>(pnls.rows()));
            for (Eigen::Index k = 0; k < P; ++k) {
                for (Eigen::Index a = 0; a < A; ++a) {
                    Eigen::VectorXd::Map(column.data(), pnls.rows()) = pnls.col(k);
                    r.var(a, k) = var_estimate(column, options.alphas[static_cast<std::size_t>(a)]);
                }
            }
            r.realized = book.pnl(realized_values - today, Eigen::VectorXd::Constant(1, spot_next - spot_now)).row(0);
            r.repaired = values.repaired;
            r.warnings = std::move(values.warnings);
            r.ok = true;
        });

        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < dates.size(); ++i) {
            const auto t = static_cast<std::size_t>(dates[i]);
            if (!results[i].ok) {
                report.skipped.push_back(panel.dates[t] + " " + std::to_string(h) + "d: " + results[i].reason);
                continue;
            }
            kept.push_back(i);
            report.repaired_scenarios += results[i].repaired;
            for (const auto& w : results[i].warnings) {
                report.warnings.push_back(panel.dates[t] + " " + std::to_string(h) + "d: " + w);
            }
        }
        for (Eigen::Index a = 0; a < A; ++a) {
            BacktestBlock block;
            block.horizon_days = h;
            block.alpha = options.alphas[static_cast<std::size_t>(a)];
            for (std::size_t i : kept) {
                block.dates.push_back(panel.dates[static_cast<std::size_t>(dates[i])]);
            }
            if (!kept.empty()) {
                for (Eigen::Index k = 0; k < P; ++k) {
                    std::vector<double> var, realized;
                    for (std::size_t i : kept) {
                        var.push_back(results[i].var(a, k));
                        realized.push_back(results[i].realized(k));
                    }
                    block.portfolios.push_back(evaluate_portfolio(static_cast<std::size_t>(k), std::move(var),
                                                                  std::move(realized), h, block.alpha));
                }
            }
            block.summary = summarize(block.portfolios, h, block.alpha);
            report.blocks.push_back(std::move(block));
        }
    }
    return report;
}

namespace {

std::string block_label(const BacktestBlock& b) {
    return std::to_string(b.horizon_days) + "-day VaR " + fixed(b.alpha, 2);
}

std::string percent(double x) {
    return fixed(100.0 * x, 2) + "%";
}

}  // namespace

void write_backtest_records(std::ostream& out, const BacktestReport& report, const std::vector<Portfolio>& catalog) {
    using nlohmann::ordered_json;
    for (const auto& block : report.blocks) {
        for (const auto& r : block.portfolios) {
            const Portfolio& p = catalog.at(r.portfolio);
            ordered_json j;
            j["engine"] = report.engine;
            j["horizon_days"] = block.horizon_days;
            j["alpha"] = block.alpha;
            j["portfolio"] = p.id;
            j["name"] = p.name;
            j["type"] = to_string(p.type);
            j["side"] = to_string(p.side);
            j["observations"] = r.breach.size();
            j["breaches"] = r.breaches;
            j["coverage"] = r.coverage;
            j["kupiec"] = {{"statistic", r.kupiec.statistic},
                           {"reject_two_sided", r.kupiec.reject_two_sided},
                           {"reject_one_sided", r.kupiec.reject_one_sided}};
            if (r.christoffersen) {
                const auto& c = *r.christoffersen;
                j["christoffersen"] = {{"transitions", c.transitions},
                                       {"independence", c.independence},
                                       {"reject_independence", c.reject_independence},
                                       {"conditional_coverage", c.conditional_coverage},
                                       {"reject_conditional_coverage", c.reject_conditional_coverage}};
            } else {
                j["christoffersen"] = nullptr;
            }
            j["zone"] = r.zone ? ordered_json(to_string(*r.zone)) : ordered_json(nullptr);
            j["trough_to_peak"] = r.trough_to_peak ? ordered_json(*r.trough_to_peak) : ordered_json(nullptr);
            out << j.dump() << '\n';
        }
    }
}

void write_backtest_summary(std::ostream& out, const BacktestReport& report) {
    std::vector<std::string> header{"statistic"};
    for (const auto& b : report.blocks) {
        header.push_back(block_label(b) + " " + report.engine);
    }
    std::vector<std::vector<std::string>> table{header};
    auto row = [&](const std::string& name, auto cell) {
        std::vector<std::string> r{name};
        for (const auto& b : report.blocks) {
            r.push_back(b.summary.portfolios == 0 ? "N.A." : cell(b.summary));
        }
        table.push_back(std::move(r));
    };
    auto optional_percent = [](const std::optional<double>& x) { return x ? percent(*x) : std::string("N.A."); };
    row("Portfolios", [](const BacktestSummary& s) { return std::to_string(s.portfolios); });
    row("Coverage ratio median", [](const BacktestSummary& s) { return fixed(s.median_coverage, 4); });
    row("Coverage ratio mean", [](const BacktestSummary& s) { return fixed(s.mean_coverage, 4); });
    row("Kupiec PF (two-sided)", [](const BacktestSummary& s) { return percent(s.kupiec_two_sided); });
    row("Kupiec PF (one-sided)", [](const BacktestSummary& s) { return percent(s.kupiec_one_sided); });
    row("Christoffersen independence", [&](const BacktestSummary& s) { return optional_percent(s.christoffersen); });
    row("Conditional coverage", [&](const BacktestSummary& s) { return optional_percent(s.conditional_coverage); });
    row("Basel traffic light (green/yellow/red)", [](const BacktestSummary& s) {
        if (!s.zones) {
            return std::string("N.A.");
        }
        return percent((*s.zones)[0]) + " / " + percent((*s.zones)[1]) + " / " + percent((*s.zones)[2]);
    });
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& r : table) {
        for (std::size_t c = 0; c < r.size(); ++c) {
            width[c] = std::max(width[c], r[c].size());
        }
    }
    for (std::size_t i = 0; i < table.size(); ++i) {
        out << '|';
        for (std::size_t c = 0; c < table[i].size(); ++c) {
            out << ' ' << table[i][c] << std::string(width[c] - table[i][c].size(), ' ') << " |";
        }
        out << '\n';
        if (i == 0) {
            out << '|';
            for (std::size_t c = 0; c < width.size(); ++c) {
                out << std::string(width[c] + 2, '-') << '|';
            }
            out << '\n';
        }
    }
}

void write_breach_series(std::ostream& out, const BacktestReport& report, const std::vector<Portfolio>& catalog) {
    out << "horizon_days,alpha,portfolio,type,side,date,var,pnl,breach\n";
    for (const auto& block : report.blocks) {
        for (const auto& r : block.portfolios) {
            const Portfolio& p = catalog.at(r.portfolio);
            for (std::size_t t = 0; t < r.breach.size(); ++t) {
                out << block.horizon_days << ',' << format_double(block.alpha) << ',' << p.id << ','
                    << to_string(p.type) << ',' << to_string(p.side) << ',' << block.dates[t] << ','
                    << format_double(r.var[t]) << ',' << format_double(r.pnl[t]) << ',' << r.breach[t] << '\n';
            }
        }
    }
}

void write_trough_to_peak(std::ostream& out, const BacktestReport& report, const std::vector<Portfolio>& catalog) {
    out << "horizon_days,alpha,portfolio,type,side,trough_to_peak\n";
    for (const auto& block : report.blocks) {
        for (const auto& r : block.portfolios) {
            const Portfolio& p = catalog.at(r.portfolio);
            out << block.horizon_days << ',' << format_double(block.alpha) << ',' << p.id << ',' << to_string(p.type)
                << ',' << to_string(p.side) << ',' << (r.trough_to_peak ? format_double(*r.trough_to_peak) : "")
                << '\n';
        }
    }
}

}  // namespace optrisk
