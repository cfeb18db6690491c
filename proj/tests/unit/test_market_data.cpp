#include <doctest.h>

#include "optrisk/black_scholes.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/market_data.hpp"
#include "optrisk/static_arbitrage.hpp"

#include <cmath>
#include <sstream>

using namespace optrisk;

namespace {

// Raw quote at delta d whose Black-Scholes inversion lands at moneyness m:
// total vol s solves m = s^2/2 - N^{-1}(d) s.
RawQuote quote_at(const std::string& date, int tau_days, double d, double m) {
    double z = norm_quantile(d);
    double s = z + std::sqrt(z * z + 2.0 * m);
    double tau = tau_days / days_per_year;
    double price = bs_price(tau, m, s / std::sqrt(tau));
    double forward = 100.0;
    double discount = 0.99;
    return {date, tau_days, d, price * discount * forward, forward, discount, 100.0, "IDX"};
}

std::vector<double> quote_deltas() {
    std::vector<double> d;
    for (int k = 0; k <= 16; ++k) {
        d.push_back(0.1 + 0.05 * k);
    }
    return d;
}

}  // namespace

TEST_CASE("normalize_price examples") {
    CHECK(normalize_price(5.0, 1.0, 100.0) == doctest::Approx(0.05).epsilon(1e-15));
    CHECK(normalize_price(0.0, 0.99, 100.0) == 0.0);
    CHECK(normalize_price(4.9, 0.98, 100.0) == doctest::Approx(0.05).epsilon(1e-14));
}

TEST_CASE("normalize_price names the offending field") {
    auto message = [](double c, double d, double f) {
        try {
            normalize_price(c, d, f);
        } catch (const DomainError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message(1.0, 1.5, 100.0).find("discount") != std::string::npos);
    CHECK(message(1.0, 0.9, -1.0).find("forward") != std::string::npos);
    CHECK(message(95.0, 0.9, 100.0).find("call_price") != std::string::npos);
    CHECK(message(-1.0, 0.9, 100.0).find("call_price") != std::string::npos);
}

TEST_CASE("normalize then denormalize round trip") {
    for (double c : {0.0, 1e-6, 0.37, 12.5, 97.9}) {
        for (double d : {0.5, 0.97, 1.0}) {
            double f = 101.3;
            if (c > d * f) {
                continue;
            }
            double back = normalize_price(c, d, f) * d * f;
            CHECK(std::abs(back - c) <= 1e-12 * std::max(c, 1e-300));
        }
    }
}

TEST_CASE("build_lattice takes median moneyness per expiry and delta") {
    RawQuotePanel raw;
    const double values[3] = {-0.1, -0.06, -0.02};
    for (int t = 0; t < 30; ++t) {
        std::string date = add_days("2020-01-01", t);
        raw.quotes.push_back(quote_at(date, 91, 0.7, -0.05));
        raw.quotes.push_back(quote_at(date, 91, 0.8, values[t % 3] - 0.02));
        raw.quotes.push_back(quote_at(date, 30, 0.7, values[t % 3]));
        raw.quotes.push_back(quote_at(date, 30, 0.8, -0.2));
    }
    LiquidLattice lattice = build_lattice(raw);
    REQUIRE(lattice.size() == 4);
    std::size_t short_group = 0, long_group = 1;
    CHECK(lattice[lattice.find(long_group, 0.7)].m == doctest::Approx(-0.05).epsilon(1e-9));
    CHECK(lattice[lattice.find(short_group, 0.7)].m == doctest::Approx(-0.06).epsilon(1e-9));
    CHECK(lattice[lattice.find(long_group, 0.8)].m == doctest::Approx(-0.08).epsilon(1e-9));
    CHECK(lattice.expiries()[0] == doctest::Approx(30.0 / 365.0));

    SUBCASE("identical input gives an identical lattice") {
        CHECK(build_lattice(raw).fingerprint() == lattice.fingerprint());
    }
    SUBCASE("odd-count median") {
        RawQuotePanel odd;
        for (int t = 0; t < 3; ++t) {
            odd.quotes.push_back(quote_at(add_days("2020-01-01", t), 30, 0.7, values[t]));
        }
        LatticeOptions options;
        options.min_dates = 3;
        CHECK(build_lattice(odd, options)[0].m == doctest::Approx(-0.06).epsilon(1e-9));
    }
    SUBCASE("insufficient history") {
        raw.quotes.pop_back();
        CHECK_THROWS_AS(build_lattice(raw), EstimationError);
    }
    SUBCASE("delta filter") {
        LatticeOptions options;
        options.deltas = {0.7};
        CHECK(build_lattice(raw, options).size() == 2);
    }
}

TEST_CASE("interpolation reproduces affine data and knots") {
    LiquidLattice lattice({{0.5, -0.1, 0.6}, {0.5, 0.0, 0.5}, {0.5, 0.07, 0.4}});
    std::vector<NodeQuote> line;
    for (double m = -0.2; m <= 0.2001; m += 0.05) {
        line.push_back({0.5, m, 0.3 - 0.4 * m});
    }
    Eigen::VectorXd row = interpolate_to_lattice(line, lattice);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(row(static_cast<Eigen::Index>(j)) == doctest::Approx(0.3 - 0.4 * lattice[j].m).epsilon(1e-12));
    }
    std::vector<NodeQuote> knots = {{0.5, -0.3, 0.5}, {0.5, -0.1, 0.31}, {0.5, 0.0, 0.2}, {0.5, 0.07, 0.15}, {0.5, 0.3, 0.05}};
    row = interpolate_to_lattice(knots, lattice);
    CHECK(row(0) == doctest::Approx(0.31).epsilon(1e-14));
    CHECK(row(1) == doctest::Approx(0.2).epsilon(1e-14));
    CHECK(row(2) == doctest::Approx(0.15).epsilon(1e-14));
}

TEST_CASE("interpolation of Black-Scholes quotes between knots") {
    const double tau = 0.25, vol = 0.2;
    std::vector<NodeQuote> quotes;
    for (double m = -0.3; m <= 0.3001; m += 0.05) {
        quotes.push_back({tau, m, bs_price(tau, m, vol)});
    }
    std::vector<LatticeNode> nodes;
    for (double m = -0.275; m < 0.28; m += 0.05) {
        nodes.push_back({tau, m, 0.5});
    }
    LiquidLattice lattice(nodes);
    Eigen::VectorXd row = interpolate_to_lattice(quotes, lattice);
    for (std::size_t j = 0; j < lattice.size(); ++j) {
        CHECK(std::abs(row(static_cast<Eigen::Index>(j)) - bs_price(tau, lattice[j].m, vol)) <= 1e-3);
    }
}

TEST_CASE("interpolation refuses to extrapolate") {
    LiquidLattice lattice({{0.5, -0.1, 0.6}, {0.5, 0.25, 0.3}});
    std::vector<NodeQuote> quotes = {{0.5, -0.2, 0.3}, {0.5, -0.1, 0.25}, {0.5, 0.0, 0.2}, {0.5, 0.2, 0.1}};
    try {
        interpolate_to_lattice(quotes, lattice);
        FAIL("expected an interpolation error");
    } catch (const InterpolationError& e) {
        CHECK(std::string(e.what()).find("node 1") != std::string::npos);
    }
    quotes.pop_back();
    CHECK_THROWS_AS(interpolate_to_lattice(quotes, lattice), InterpolationError);
}

TEST_CASE("synthetic Heston panel with zero vol-of-vol is the Black-Scholes surface") {
    LiquidLattice lattice = make_delta_lattice(standard_expiry_days(), standard_deltas(), 0.2);
    HestonParams p{100.0, 0.04, 0.04, 2.0, 0.0, 0.0};
    SurfacePanel panel = synthesize_heston_panel(p, lattice, 3, 7);
    REQUIRE(panel.rows() == 3);
    REQUIRE(panel.prices.cols() == 130);
    for (Eigen::Index t = 0; t < 3; ++t) {
        for (std::size_t j = 0; j < lattice.size(); ++j) {
            CHECK(std::abs(panel.prices(t, static_cast<Eigen::Index>(j)) - bs_price(lattice[j].tau, lattice[j].m, 0.2)) <=
                  1e-6);
        }
    }
}

TEST_CASE("synthetic panels are deterministic per seed") {
    LiquidLattice lattice = make_delta_lattice(standard_expiry_days(), standard_deltas(), 0.2);
    HestonParams p = HestonParams::from_rho(100.0, 0.05, 0.04, 1.5, 0.5, -0.7);
    SurfacePanel a = synthesize_heston_panel(p, lattice, 2, 11);
    SurfacePanel b = synthesize_heston_panel(p, lattice, 2, 11);
    SurfacePanel c = synthesize_heston_panel(p, lattice, 2, 12);
    CHECK(a.prices.rows() == 2);
    CHECK(a.prices.cols() == 130);
    CHECK(a.prices == b.prices);
    CHECK(a.spot == b.spot);
    CHECK(a.prices != c.prices);
    CHECK(a.dates[1] == "2015-01-02");
}

TEST_CASE("ingest of a synthetic raw panel") {
    HestonParams p = HestonParams::from_rho(100.0, 0.05, 0.04, 1.5, 0.5, -0.7);
    SynthOptions options;
    options.rate = 0.01;
    options.long_run_vol = 0.3;
    RawQuotePanel raw = synthesize_raw_panel(p, standard_expiry_days(), quote_deltas(), 32, 3, options);
    LatticeOptions lattice_options;
    lattice_options.deltas = standard_deltas();
    IngestResult result = ingest(raw, lattice_options);
    const SurfacePanel& panel = result.panel;
    CHECK(panel.lattice.size() == 130);
    CHECK(result.stats.dates_in == 32);
    CHECK(result.stats.dates_kept == 32);
    CHECK(result.stats.interpolated_violation_fraction <= 0.02);
    ConstraintSystem system = build_constraints(panel.lattice);
    for (Eigen::Index t = 0; t < panel.rows(); ++t) {
        CHECK(detect(system, panel.prices.row(t).transpose()).clean());
    }
    // Heston prices at the lattice nodes are recovered up to spline error.
    HestonPath path = simulate_heston_path(p, 32, 3, options);
    Eigen::VectorXd exact = heston_surface(path.params[5], panel.lattice);
    CHECK((panel.prices.row(5).transpose() - exact).cwiseAbs().maxCoeff() <= 2e-4);

    SUBCASE("raw and panel files round trip") {
        std::stringstream raw_text;
        write_raw_panel(raw_text, raw);
        RawQuotePanel raw_back = read_raw_panel(raw_text);
        REQUIRE(raw_back.quotes.size() == raw.quotes.size());
        CHECK(raw_back.quotes[17].call_price == raw.quotes[17].call_price);
        CHECK(raw_back.quotes[17].date == raw.quotes[17].date);

        std::stringstream panel_text;
        panel_text << "# header comment\n";
        write_panel(panel_text, panel);
        SurfacePanel back = read_panel(panel_text);
        CHECK(back.prices == panel.prices);
        CHECK(back.lattice.fingerprint() == panel.lattice.fingerprint());
        CHECK(back.dates == panel.dates);
        CHECK(back.spot == panel.spot);
    }
}

TEST_CASE("concatenated underlyings stay in separate blocks") {
    RawQuotePanel raw;
    for (const char* label : {"B", "A"}) {
        for (int t = 0; t < 4; ++t) {
            std::string date = add_days("2021-03-01", t);
            for (double d : {0.3, 0.4, 0.5, 0.6, 0.7}) {
                RawQuote q = quote_at(date, 60, d, 0.3 - d * 0.5);
                q.underlying = label;
                raw.quotes.push_back(q);
            }
        }
    }
    LatticeOptions options;
    options.min_dates = 4;
    options.deltas = {0.4, 0.5, 0.6};
    IngestResult result = ingest(raw, options);
    REQUIRE(result.panel.rows() == 8);
    CHECK(result.panel.labels[0] == "B");
    CHECK(result.panel.labels[4] == "A");
    CHECK(result.panel.consecutive(2));
    CHECK_FALSE(result.panel.consecutive(3));
}

TEST_CASE("malformed raw panels are rejected") {
    RawQuotePanel raw;
    raw.quotes.push_back(quote_at("2020-01-01", 30, 0.5, 0.0));
    raw.quotes.back().discount = 1.2;
    CHECK_THROWS_AS(raw.validate(), DomainError);
    raw.quotes.back().discount = 0.9;
    raw.quotes.back().date = "2020-02-30";
    CHECK_THROWS_AS(raw.validate(), DomainError);
    std::stringstream missing_header("2020-01-01,30,0.5,1,100,0.9,100,X\n");
    CHECK_THROWS_AS(read_raw_panel(missing_header), DomainError);
}
