#pragma once

#include "optrisk/heston.hpp"
#include "optrisk/lattice.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace optrisk {

struct RawQuote {
    std::string date;  // ISO-8601
    int tau_days = 0;
    double delta = 0.0;
    double call_price = 0.0;  // currency
    double forward = 0.0;
    double discount = 1.0;
    double spot = 0.0;
    std::string underlying;
};

// Delta-quoted option records, possibly for several underlyings. Dates are
// strictly increasing within each underlying.
struct RawQuotePanel {
    std::vector<RawQuote> quotes;

    void validate() const;
};

// Time series of normalized lattice prices. Rows are grouped by underlying
// label (in order of first appearance) and ordered by date inside a label.
struct SurfacePanel {
    LiquidLattice lattice;
    Eigen::MatrixXd prices;  // rows x lattice.size()
    std::vector<std::string> dates;
    std::vector<std::string> labels;
    std::vector<double> spot;
    double dt = 1.0 / days_per_year;

    Eigen::Index rows() const { return prices.rows(); }
    // True when rows t and t+1 belong to the same underlying.
    bool consecutive(Eigen::Index t) const;
    void validate() const;
};

double normalize_price(double call_price, double discount, double forward);

struct LatticeOptions {
    std::vector<double> deltas;  // delta labels kept in the lattice; empty keeps all quoted deltas
    std::size_t min_dates = 30;
};

LiquidLattice build_lattice(const RawQuotePanel& panel, const LatticeOptions& options = {});

struct NodeQuote {
    double tau = 0.0;
    double m = 0.0;
    double price = 0.0;
};

// Natural cubic spline in m per expiry, evaluated at the lattice nodes.
Eigen::VectorXd interpolate_to_lattice(const std::vector<NodeQuote>& day, const LiquidLattice& lattice);

struct IngestStats {
    std::size_t dates_in = 0;
    std::size_t dates_kept = 0;
    std::size_t raw_violating_dates = 0;
    std::size_t interpolated_violating_dates = 0;
    double raw_violation_fraction = 0.0;           // mean over dates of violated-row fraction
    double interpolated_violation_fraction = 0.0;  // same, after interpolation
    double mean_repair_l1 = 0.0;                   // mean |eps|_1 over repaired dates
    std::vector<std::string> skipped;              // "date label: reason"
};

struct IngestResult {
    SurfacePanel panel;
    IngestStats stats;
};

IngestResult ingest(const RawQuotePanel& raw, const LatticeOptions& options = {});

struct SynthOptions {
    double long_run_vol = 0.0;        // annualized vol of ln(long_run_var); 0 keeps it fixed
    double long_run_reversion = 2.0;  // mean reversion of ln(long_run_var)
    double price_noise = 0.0;         // std of additive noise on normalized prices
    double rate = 0.0;                // flat continuously compounded rate for discount/forward
    std::string label = "SYN";
    std::string start_date = "2015-01-01";
};

struct HestonPath {
    std::vector<HestonParams> params;  // per date, spot and initial_var follow the simulation
    std::vector<std::string> dates;
};

HestonPath simulate_heston_path(const HestonParams& start, std::size_t days, std::uint64_t seed,
                                const SynthOptions& options = {});

SurfacePanel synthesize_heston_panel(const HestonParams& params, const LiquidLattice& lattice, std::size_t days,
                                     std::uint64_t seed, const SynthOptions& options = {});

// Delta-quoted raw records from the same simulated state, for the ingest path.
RawQuotePanel synthesize_raw_panel(const HestonParams& params, const std::vector<int>& tau_days,
                                   const std::vector<double>& quote_deltas, std::size_t days, std::uint64_t seed,
                                   const SynthOptions& options = {});

std::string add_days(const std::string& iso_date, int days);

void write_raw_panel(std::ostream& out, const RawQuotePanel& panel);
RawQuotePanel read_raw_panel(std::istream& in);
void write_panel(std::ostream& out, const SurfacePanel& panel);
SurfacePanel read_panel(std::istream& in);

}  // namespace optrisk
