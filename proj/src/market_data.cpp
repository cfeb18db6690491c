#include "optrisk/market_data.hpp"

#include "optrisk/black_scholes.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/io.hpp"
#include "optrisk/spline.hpp"
#include "optrisk/static_arbitrage.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

namespace optrisk {

namespace {

std::chrono::sys_days parse_iso(const std::string& s) {
    auto parts = split(s, '-');
    if (parts.size() != 3 || parts[0].size() != 4 || parts[1].size() != 2 || parts[2].size() != 2) {
        throw DomainError("date: expected YYYY-MM-DD, got '" + s + "'");
    }
    using namespace std::chrono;
    year_month_day ymd{year{static_cast<int>(parse_long(parts[0]))}, month{static_cast<unsigned>(parse_long(parts[1]))},
                       day{static_cast<unsigned>(parse_long(parts[2]))}};
    if (!ymd.ok()) {
        throw DomainError("date: invalid calendar date '" + s + "'");
    }
    return sys_days{ymd};
}

std::string format_iso(std::chrono::sys_days d) {
    std::chrono::year_month_day ymd{d};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()));
    return buf;
}

long delta_key(double delta) {
    return std::lround(delta * 1e6);
}

bool delta_selected(const LatticeOptions& options, double delta) {
    if (options.deltas.empty()) {
        return true;
    }
    return std::any_of(options.deltas.begin(), options.deltas.end(),
                       [&](double d) { return delta_key(d) == delta_key(delta); });
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Moneyness implied by a raw quote, or nothing when the quote cannot be inverted.
std::optional<NodeQuote> to_node_quote(const RawQuote& q) {
    double price = normalize_price(q.call_price, q.discount, q.forward);
    double tau = q.tau_days / days_per_year;
    try {
        DeltaQuote dq = invert_delta_quote(price, tau, q.delta);
        return NodeQuote{tau, dq.m, price};
    } catch (const InversionError&) {
        return std::nullopt;
    }
}

struct Day {
    std::string label;
    std::string date;
    std::vector<const RawQuote*> quotes;
};

// Days grouped by label in order of first appearance, dates ascending per label.
std::vector<Day> group_days(const RawQuotePanel& raw) {
    std::vector<std::string> label_order;
    std::map<std::string, std::map<std::string, std::vector<const RawQuote*>>> by_label;
    for (const auto& q : raw.quotes) {
        if (!by_label.count(q.underlying)) {
            label_order.push_back(q.underlying);
        }
        by_label[q.underlying][q.date].push_back(&q);
    }
    std::vector<Day> days;
    for (const auto& label : label_order) {
        for (auto& [date, quotes] : by_label[label]) {
            days.push_back({label, date, quotes});
        }
    }
    return days;
}

}  // namespace

std::string add_days(const std::string& iso_date, int days) {
    return format_iso(parse_iso(iso_date) + std::chrono::days{days});
}

void RawQuotePanel::validate() const {
    std::set<std::tuple<std::string, std::string, int, long>> seen;
    for (const auto& q : quotes) {
        parse_iso(q.date);
        if (q.tau_days <= 0) {
            throw DomainError("raw panel: tau_days must be positive on " + q.date);
        }
        if (!(q.delta > 0.0 && q.delta < 1.0)) {
            throw DomainError("raw panel: delta outside (0,1) on " + q.date);
        }
        if (!(q.discount > 0.0 && q.discount <= 1.0)) {
            throw DomainError("raw panel: discount outside (0,1] on " + q.date);
        }
        if (!(q.forward > 0.0) || !std::isfinite(q.forward)) {
            throw DomainError("raw panel: forward must be positive on " + q.date);
        }
        if (!(q.spot > 0.0) || !std::isfinite(q.spot)) {
            throw DomainError("raw panel: spot must be positive on " + q.date);
        }
        if (!seen.insert({q.underlying, q.date, q.tau_days, delta_key(q.delta)}).second) {
            throw DomainError("raw panel: duplicate record on " + q.date + " for " + q.underlying);
        }
    }
}

bool SurfacePanel::consecutive(Eigen::Index t) const {
    return t + 1 < rows() && labels[static_cast<std::size_t>(t)] == labels[static_cast<std::size_t>(t + 1)];
}

void SurfacePanel::validate() const {
    const auto n = static_cast<std::size_t>(prices.rows());
    if (dates.size() != n || labels.size() != n || spot.size() != n) {
        throw DomainError("surface panel: row count mismatch between prices, dates, labels and spot");
    }
    if (static_cast<std::size_t>(prices.cols()) != lattice.size()) {
        throw DomainError("surface panel: column count differs from lattice size");
    }
    if (!(dt > 0.0)) {
        throw DomainError("surface panel: dt must be positive");
    }
    if (!((prices.array() > 0.0).all() && (prices.array() < 1.0).all())) {
        throw DomainError("surface panel: prices must lie in (0,1)");
    }
    for (std::size_t t = 0; t < n; ++t) {
        if (!(spot[t] > 0.0)) {
            throw DomainError("surface panel: spot must be positive on " + dates[t]);
        }
        if (t + 1 < n && labels[t] == labels[t + 1] && !(dates[t] < dates[t + 1])) {
            throw DomainError("surface panel: dates not increasing at " + dates[t + 1]);
        }
    }
}

double normalize_price(double call_price, double discount, double forward) {
    if (!(discount > 0.0 && discount <= 1.0)) {
        throw DomainError("normalize_price: discount must lie in (0,1]");
    }
    if (!(forward > 0.0) || !std::isfinite(forward)) {
        throw DomainError("normalize_price: forward must be positive");
    }
    const double cap = discount * forward;
    if (!(call_price >= 0.0 && call_price <= cap)) {
        throw DomainError("normalize_price: call_price must lie in [0, discount*forward]");
    }
    return call_price / cap;
}

LiquidLattice build_lattice(const RawQuotePanel& panel, const LatticeOptions& options) {
    std::map<std::pair<int, long>, std::vector<double>> moneyness;
    std::map<std::pair<int, long>, double> labels;
    for (const auto& q : panel.quotes) {
        if (!delta_selected(options, q.delta)) {
            continue;
        }
        auto node = to_node_quote(q);
        if (!node) {
            continue;
        }
        auto key = std::make_pair(q.tau_days, delta_key(q.delta));
        moneyness[key].push_back(node->m);
        labels[key] = q.delta;
    }
    if (moneyness.empty()) {
        throw EstimationError("build_lattice: no usable quotes");
    }
    std::set<int> expiries;
    std::set<long> deltas;
    for (const auto& [key, values] : moneyness) {
        expiries.insert(key.first);
        deltas.insert(key.second);
    }
    std::vector<LatticeNode> nodes;
    for (int tau_days : expiries) {
        for (long d : deltas) {
            auto it = moneyness.find({tau_days, d});
            std::size_t count = it == moneyness.end() ? 0 : it->second.size();
            if (count < options.min_dates) {
                throw EstimationError("build_lattice: " + std::to_string(count) + " dates for tau_days=" +
                                      std::to_string(tau_days) + " delta=" + format_double(d * 1e-6) + ", need " +
                                      std::to_string(options.min_dates));
            }
            nodes.push_back({tau_days / days_per_year, median(it->second), labels.at({tau_days, d})});
        }
    }
    return LiquidLattice(std::move(nodes));
}

Eigen::VectorXd interpolate_to_lattice(const std::vector<NodeQuote>& day, const LiquidLattice& lattice) {
    Eigen::VectorXd row(static_cast<Eigen::Index>(lattice.size()));
    const auto& groups = lattice.groups();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double tau = lattice.expiries()[g];
        std::vector<std::pair<double, double>> points;
        for (const auto& q : day) {
            if (std::abs(q.tau - tau) <= 1e-12) {
                points.emplace_back(q.m, q.price);
            }
        }
        std::sort(points.begin(), points.end());
        auto [begin, end] = groups[g];
        auto node_name = [&](std::size_t j) {
            return "node " + std::to_string(j) + " (tau=" + format_double(lattice[j].tau) +
                   ", m=" + format_double(lattice[j].m) + ")";
        };
        if (points.size() < 4) {
            throw InterpolationError("interpolate_to_lattice: fewer than 4 quotes at " + node_name(begin));
        }
        std::vector<double> x, y;
        for (const auto& [m, c] : points) {
            if (!x.empty() && !(m > x.back())) {
                throw InterpolationError("interpolate_to_lattice: duplicate quoted moneyness near " + node_name(begin));
            }
            x.push_back(m);
            y.push_back(c);
        }
        CubicSpline spline(std::move(x), std::move(y));
        for (std::size_t j = begin; j < end; ++j) {
            if (!spline.contains(lattice[j].m)) {
                throw InterpolationError("interpolate_to_lattice: quotes do not bracket " + node_name(j));
            }
            row(static_cast<Eigen::Index>(j)) = spline(lattice[j].m);
        }
    }
    return row;
}

IngestResult ingest(const RawQuotePanel& raw, const LatticeOptions& options) {
    raw.validate();
    IngestResult result;
    auto& panel = result.panel;
    auto& stats = result.stats;
    panel.lattice = build_lattice(raw, options);
    const ConstraintSystem constraints = build_constraints(panel.lattice);

    std::vector<Eigen::VectorXd> rows;
    double raw_fraction_sum = 0.0;
    std::size_t raw_checked = 0;
    double interp_fraction_sum = 0.0;
    double repair_sum = 0.0;
    std::size_t repaired = 0;
    for (const auto& day : group_days(raw)) {
        ++stats.dates_in;
        auto skip = [&](const std::string& reason) { stats.skipped.push_back(day.date + " " + day.label + ": " + reason); };
        std::vector<NodeQuote> quotes;
        std::vector<LatticeNode> raw_nodes;
        bool inverted = true;
        for (const RawQuote* q : day.quotes) {
            auto node = to_node_quote(*q);
            if (!node) {
                inverted = false;
                break;
            }
            quotes.push_back(*node);
            raw_nodes.push_back({node->tau, node->m, q->delta});
        }
        if (!inverted) {
            skip("delta quote could not be inverted");
            continue;
        }

        // Violations on the day's own quote grid.
        try {
            std::vector<NodeQuote> sorted = quotes;
            std::sort(sorted.begin(), sorted.end(),
                      [](const NodeQuote& a, const NodeQuote& b) { return std::tie(a.tau, a.m) < std::tie(b.tau, b.m); });
            LiquidLattice day_grid(raw_nodes);
            Eigen::VectorXd c(static_cast<Eigen::Index>(sorted.size()));
            for (std::size_t j = 0; j < sorted.size(); ++j) {
                c(static_cast<Eigen::Index>(j)) = sorted[j].price;
            }
            ViolationReport report = detect(build_constraints(day_grid), c);
            raw_fraction_sum += report.fraction;
            ++raw_checked;
            if (!report.clean()) {
                ++stats.raw_violating_dates;
            }
        } catch (const ConstraintError&) {
            // duplicate quoted moneyness; the day is still usable for interpolation unless that fails too
        }

        Eigen::VectorXd row;
        try {
            row = interpolate_to_lattice(quotes, panel.lattice);
        } catch (const InterpolationError& e) {
            skip(e.what());
            continue;
        }
        ViolationReport report = detect(constraints, row);
        interp_fraction_sum += report.fraction;
        if (!report.clean()) {
            ++stats.interpolated_violating_dates;
            Eigen::VectorXd fixed = repair_l1(constraints, row);
            repair_sum += (fixed - row).lpNorm<1>();
            ++repaired;
            row = fixed;
        }
        if (!((row.array() > 0.0).all() && (row.array() < 1.0).all())) {
            skip("interpolated prices outside (0,1)");
            continue;
        }
        rows.push_back(row);
        panel.dates.push_back(day.date);
        panel.labels.push_back(day.label);
        panel.spot.push_back(day.quotes.front()->spot);
    }
    stats.dates_kept = rows.size();
    if (rows.size() < 2) {
        throw EstimationError("ingest: fewer than 2 usable dates");
    }
    stats.raw_violation_fraction = raw_checked ? raw_fraction_sum / static_cast<double>(raw_checked) : 0.0;
    stats.interpolated_violation_fraction = interp_fraction_sum / static_cast<double>(rows.size() + stats.skipped.size());
    stats.mean_repair_l1 = repaired ? repair_sum / static_cast<double>(repaired) : 0.0;

    panel.prices.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(panel.lattice.size()));
    for (std::size_t t = 0; t < rows.size(); ++t) {
        panel.prices.row(static_cast<Eigen::Index>(t)) = rows[t].transpose();
    }
    panel.validate();
    return result;
}

HestonPath simulate_heston_path(const HestonParams& start, std::size_t days, std::uint64_t seed,
                                const SynthOptions& options) {
    start.validate();
    if (days < 2) {
        throw DomainError("synthesize: need at least 2 days");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    constexpr int substeps = 8;
    const double h = 1.0 / days_per_year / substeps;
    const double mean_log_theta = std::log(start.long_run_var);
    const double a = options.long_run_reversion;
    const double theta_decay = std::exp(-a * h);
    const double theta_shock =
        a > 0.0 ? options.long_run_vol * std::sqrt((1.0 - theta_decay * theta_decay) / (2.0 * a)) : options.long_run_vol * std::sqrt(h);

    HestonPath path;
    const auto origin = parse_iso(options.start_date);
    double log_spot = std::log(start.spot);
    double var = start.initial_var;
    double log_theta = mean_log_theta;
    constexpr double var_floor = 1e-5;
    for (std::size_t t = 0; t < days; ++t) {
        if (t > 0) {
            for (int k = 0; k < substeps; ++k) {
                const double theta = std::exp(log_theta);
                const double v = std::max(var, 0.0);
                const double zs = normal(rng);
                const double zv = normal(rng);
                const double zt = normal(rng);
                const double sq = std::sqrt(v * h);
                log_spot += (options.rate - 0.5 * v) * h + sq * zs;
                var += start.reversion * (theta - v) * h + sq * (-start.corr_vol * zs + start.indep_vol * zv);
                log_theta = mean_log_theta + (log_theta - mean_log_theta) * theta_decay + theta_shock * zt;
            }
        }
        HestonParams p = start;
        p.spot = std::exp(log_spot);
        p.initial_var = std::max(var, var_floor);
        p.long_run_var = std::exp(log_theta);
        path.params.push_back(p);
        path.dates.push_back(format_iso(origin + std::chrono::days{static_cast<int>(t)}));
    }
    return path;
}

SurfacePanel synthesize_heston_panel(const HestonParams& params, const LiquidLattice& lattice, std::size_t days,
                                     std::uint64_t seed, const SynthOptions& options) {
    HestonPath path = simulate_heston_path(params, days, seed, options);
    std::mt19937_64 noise_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal;
    SurfacePanel panel;
    panel.lattice = lattice;
    panel.prices.resize(static_cast<Eigen::Index>(days), static_cast<Eigen::Index>(lattice.size()));
    for (std::size_t t = 0; t < days; ++t) {
        Eigen::VectorXd row = heston_surface(path.params[t], lattice);
        if (options.price_noise > 0.0) {
            for (Eigen::Index j = 0; j < row.size(); ++j) {
                row(j) = std::clamp(row(j) + options.price_noise * normal(noise_rng), 1e-6, 1.0 - 1e-6);
            }
        }
        panel.prices.row(static_cast<Eigen::Index>(t)) = row.transpose();
        panel.dates.push_back(path.dates[t]);
        panel.labels.push_back(options.label);
        panel.spot.push_back(path.params[t].spot);
    }
    panel.validate();
    return panel;
}

RawQuotePanel synthesize_raw_panel(const HestonParams& params, const std::vector<int>& tau_days,
                                   const std::vector<double>& quote_deltas, std::size_t days, std::uint64_t seed,
                                   const SynthOptions& options) {
    HestonPath path = simulate_heston_path(params, days, seed, options);
    std::mt19937_64 noise_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal;
    RawQuotePanel raw;
    for (std::size_t t = 0; t < days; ++t) {
        const HestonParams& p = path.params[t];
        for (int td : tau_days) {
            const double tau = td / days_per_year;
            // Heston prices on a dense grid, delta of each point from its own implied vol,
            // then m(delta) by spline and an exact reprice at the target deltas.
            const double s = std::sqrt(0.5 * (p.initial_var + p.long_run_var) * tau);
            constexpr int grid = 57;
            Eigen::VectorXd m(grid);
            for (int i = 0; i < grid; ++i) {
                double z = 3.5 - 7.0 * i / (grid - 1);
                m(i) = 0.5 * s * s - z * s;
            }
            Eigen::VectorXd c = heston_price_strip(p, tau, m);
            std::vector<double> deltas, ms;
            for (int i = 0; i < grid; ++i) {
                try {
                    double d = bs_delta(tau, m(i), implied_vol(c(i), tau, m(i)));
                    if (deltas.empty() || d < deltas.back()) {
                        deltas.push_back(d);
                        ms.push_back(m(i));
                    }
                } catch (const InversionError&) {
                }
            }
            std::reverse(deltas.begin(), deltas.end());
            std::reverse(ms.begin(), ms.end());
            if (deltas.size() < 4) {
                throw NumericError("synthesize_raw_panel: too few invertible grid prices at tau_days=" + std::to_string(td));
            }
            CubicSpline m_of_delta(deltas, ms);
            Eigen::VectorXd target(static_cast<Eigen::Index>(quote_deltas.size()));
            for (std::size_t j = 0; j < quote_deltas.size(); ++j) {
                target(static_cast<Eigen::Index>(j)) = m_of_delta(quote_deltas[j]);
            }
            Eigen::VectorXd prices = heston_price_strip(p, tau, target);
            const double discount = std::exp(-options.rate * tau);
            const double forward = p.spot * std::exp(options.rate * tau);
            for (std::size_t j = 0; j < quote_deltas.size(); ++j) {
                double price = prices(static_cast<Eigen::Index>(j));
                if (options.price_noise > 0.0) {
                    price = std::clamp(price + options.price_noise * normal(noise_rng), 1e-6, 1.0 - 1e-6);
                }
                raw.quotes.push_back({path.dates[t], td, quote_deltas[j], price * discount * forward, forward, discount,
                                      p.spot, options.label});
            }
        }
    }
    return raw;
}

void write_raw_panel(std::ostream& out, const RawQuotePanel& panel) {
    out << "date,tau_days,delta,call_price,forward,discount,spot,underlying\n";
    for (const auto& q : panel.quotes) {
        out << q.date << ',' << q.tau_days << ',' << format_double(q.delta) << ',' << format_double(q.call_price) << ','
            << format_double(q.forward) << ',' << format_double(q.discount) << ',' << format_double(q.spot) << ','
            << q.underlying << '\n';
    }
}

namespace {

bool data_line(std::string& line) {
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    return !line.empty() && line.front() != '#';
}

}  // namespace

RawQuotePanel read_raw_panel(std::istream& in) {
    RawQuotePanel panel;
    std::string line;
    bool header = false;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!data_line(line)) {
            continue;
        }
        auto f = split(line, ',');
        if (!header) {
            if (f.size() != 8 || trim(f[0]) != "date") {
                throw DomainError("raw panel: missing header row");
            }
            header = true;
            continue;
        }
        if (f.size() != 8) {
            throw DomainError("raw panel: expected 8 columns on line " + std::to_string(line_no));
        }
        panel.quotes.push_back({trim(f[0]), static_cast<int>(parse_long(trim(f[1]))), parse_double(trim(f[2])),
                                parse_double(trim(f[3])), parse_double(trim(f[4])), parse_double(trim(f[5])),
                                parse_double(trim(f[6])), trim(f[7])});
    }
    if (!header) {
        throw DomainError("raw panel: missing header row");
    }
    panel.validate();
    return panel;
}

void write_panel(std::ostream& out, const SurfacePanel& panel) {
    out << "lattice";
    for (const auto& node : panel.lattice.nodes()) {
        out << ',' << format_double(node.tau) << ';' << format_double(node.m) << ';' << format_double(node.delta);
    }
    out << '\n';
    for (Eigen::Index t = 0; t < panel.rows(); ++t) {
        const auto i = static_cast<std::size_t>(t);
        out << panel.dates[i] << ',' << panel.labels[i] << ',' << format_double(panel.spot[i]);
        for (Eigen::Index j = 0; j < panel.prices.cols(); ++j) {
            out << ',' << format_double(panel.prices(t, j));
        }
        out << '\n';
    }
}

SurfacePanel read_panel(std::istream& in) {
    SurfacePanel panel;
    std::string line;
    bool have_lattice = false;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (!data_line(line)) {
            continue;
        }
        auto f = split(line, ',');
        if (!have_lattice) {
            if (f.empty() || f[0] != "lattice") {
                throw DomainError("surface panel: first row must list the lattice");
            }
            std::vector<LatticeNode> nodes;
            for (std::size_t j = 1; j < f.size(); ++j) {
                auto triple = split(f[j], ';');
                if (triple.size() != 3) {
                    throw DomainError("surface panel: malformed lattice entry '" + f[j] + "'");
                }
                nodes.push_back({parse_double(triple[0]), parse_double(triple[1]), parse_double(triple[2])});
            }
            panel.lattice = LiquidLattice(std::move(nodes));
            have_lattice = true;
            continue;
        }
        if (f.size() != panel.lattice.size() + 3) {
            throw DomainError("surface panel: row for '" + f[0] + "' has wrong column count");
        }
        panel.dates.push_back(f[0]);
        panel.labels.push_back(f[1]);
        panel.spot.push_back(parse_double(f[2]));
        std::vector<double> row;
        for (std::size_t j = 3; j < f.size(); ++j) {
            row.push_back(parse_double(f[j]));
        }
        rows.push_back(std::move(row));
    }
    if (!have_lattice) {
        throw DomainError("surface panel: empty input");
    }
    panel.prices.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(panel.lattice.size()));
    for (std::size_t t = 0; t < rows.size(); ++t) {
        for (std::size_t j = 0; j < rows[t].size(); ++j) {
            panel.prices(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = rows[t][j];
        }
    }
    panel.validate();
    return panel;
}

}  // namespace optrisk
