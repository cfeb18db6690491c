#include <doctest.h>

#include "optrisk/black_scholes.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/scenario.hpp"
#include "pipeline_fixture.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

using namespace optrisk;

namespace {

Eigen::VectorXd bs_row(const LiquidLattice& lattice, double vol) {
    Eigen::VectorXd row(static_cast<Eigen::Index>(lattice.size()));
    for (std::size_t j = 0; j < lattice.size(); ++j) {
        row(static_cast<Eigen::Index>(j)) = bs_price(lattice[j].tau, lattice[j].m, vol);
    }
    return row;
}

const testing::PipelineFixture& pipeline() {
    static const auto fixture = testing::make_pipeline();
    return *fixture;
}

Eigen::Index clean_date(const FactorModel& f) {
    for (Eigen::Index t = f.xi.rows() - 1; t >= 0; --t) {
        if (!f.arbitrage_flags[static_cast<std::size_t>(t)]) {
            return t;
        }
    }
    throw std::runtime_error("no clean date");
}

}  // namespace

TEST_CASE("philox known-answer vectors") {
    using C = Philox4x32::Counter;
    CHECK(Philox4x32::generate({0, 0, 0, 0}, {0, 0}) == C{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
    CHECK(Philox4x32::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}) ==
          C{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
    CHECK(Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}) ==
          C{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("random streams are reproducible and independent") {
    RandomStream a(7, 3), b(7, 3), c(7, 4), d(8, 3);
    std::vector<double> xa, xb, xc, xd;
    for (int i = 0; i < 20; ++i) {
        xa.push_back(a.uniform());
        xb.push_back(b.uniform());
        xc.push_back(c.uniform());
        xd.push_back(d.uniform());
    }
    CHECK(xa == xb);
    CHECK(xa != xc);
    CHECK(xa != xd);

    RandomStream s(11, 0);
    double sum = 0.0, sq = 0.0, usum = 0.0;
    std::vector<int> counts(7, 0);
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = s.normal();
        sum += z;
        sq += z * z;
        const double u = s.uniform();
        REQUIRE(u > 0.0);
        REQUIRE(u < 1.0);
        usum += u;
        ++counts[s.below(7)];
    }
    CHECK(std::abs(sum / n) <= 0.01);
    CHECK(sq / n == doctest::Approx(1.0).epsilon(0.01));
    CHECK(usum / n == doctest::Approx(0.5).epsilon(0.01));
    for (int k : counts) {
        CHECK(k == doctest::Approx(n / 7.0).epsilon(0.03));
    }
}

TEST_CASE("tamed Euler step examples") {
    TransformedCoefficients c{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)};
    Eigen::VectorXd xi(2);
    xi << 0.3, -0.2;
    Eigen::VectorXd z(3);
    z << 0.0, 1.0, 0.0;
    TamedStep next = tamed_euler_step(100.0, xi, 0.05, c, 0.2, z, 1.0);
    CHECK(next.xi(0) - xi(0) == doctest::Approx(1.0 / (1.0 + std::sqrt(2.0))).epsilon(1e-12));
    CHECK(next.xi(0) - xi(0) == doctest::Approx(0.414214).epsilon(1e-6));
    CHECK(next.xi(1) == xi(1));

    const double dt = 1.0 / 365.0;
    TamedStep still = tamed_euler_step(100.0, xi, 0.05, c, 0.2, Eigen::VectorXd::Zero(3), dt);
    CHECK(still.xi == xi);
    CHECK(std::log(still.spot / 100.0) == doctest::Approx(0.05 * dt).epsilon(1e-12));

    // Joint variant: the extra column loads on the index innovation.
    TransformedCoefficients joint{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(2, 3)};
    joint.diffusion(0, 2) = 1.0;
    Eigen::VectorXd zs(3);
    zs << 0.5, 0.0, 0.0;
    CHECK(tamed_euler_step(1.0, xi, 0.0, joint, 0.2, zs, 1.0).xi(0) - xi(0) == doctest::Approx(0.25));
}

TEST_CASE("taming bounds hold for arbitrary coefficients") {
    RandomStream rng(5, 0);
    for (int trial = 0; trial < 2000; ++trial) {
        const double scale = std::pow(10.0, 8.0 * rng.uniform() - 2.0);
        const double dt = std::pow(10.0, -3.0 * rng.uniform());
        TransformedCoefficients c{Eigen::VectorXd(2), Eigen::MatrixXd(2, 2)};
        for (int i = 0; i < 2; ++i) {
            c.drift(i) = scale * rng.normal();
            for (int j = 0; j < 2; ++j) {
                c.diffusion(i, j) = scale * rng.normal();
            }
        }
        Eigen::VectorXd z(3);
        z << rng.normal(), rng.normal(), rng.normal();
        const Eigen::VectorXd origin = Eigen::VectorXd::Zero(2);
        TransformedCoefficients no_noise{c.drift, Eigen::MatrixXd::Zero(2, 2)};
        const double drift_term = tamed_euler_step(1.0, origin, 0.0, no_noise, 0.0, z, dt).xi.norm();
        REQUIRE(drift_term <= std::sqrt(dt) * (1.0 + 1e-12));
        TransformedCoefficients no_drift{Eigen::VectorXd::Zero(2), c.diffusion};
        const double noise_term = tamed_euler_step(1.0, origin, 0.0, no_drift, 0.0, z, dt).xi.norm();
        REQUIRE(noise_term <= z.tail(2).norm() / std::sqrt(dt) * (1.0 + 1e-12));
        const double spot = tamed_euler_step(1.0, origin, 0.0, c, scale, z, dt).spot;
        REQUIRE(std::isfinite(spot));
        REQUIRE(spot > 0.0);
    }
}

TEST_CASE("fraction-to-boundary safeguard") {
    FactorConstraintSystem half;
    half.A = Eigen::MatrixXd::Identity(1, 1);
    half.b = Eigen::VectorXd::Zero(1);
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 0.1);
    CHECK(step_to_boundary(half, x, Eigen::VectorXd::Constant(1, -0.05), 0.99) == 1.0);
    const double theta = step_to_boundary(half, x, Eigen::VectorXd::Constant(1, -0.4), 0.99);
    CHECK(theta == doctest::Approx(0.99 * 0.1 / 0.4));
    CHECK(x(0) - theta * 0.4 == doctest::Approx(0.001));
    CHECK(step_to_boundary(half, x, Eigen::VectorXd::Constant(1, -0.1), 0.99) < 1.0);
}

TEST_CASE("exact OU transition moments") {
    OUParams p{4.0, 0.5, 0.3};
    const double dt = 0.25;
    CHECK(ou_transition(p, 1.0, dt, 0.0) == doctest::Approx(0.5 + 0.5 * std::exp(-1.0)));
    const double var = 0.09 * (1.0 - std::exp(-2.0)) / 8.0;
    CHECK(ou_transition(p, 1.0, dt, 1.0) - ou_transition(p, 1.0, dt, 0.0) == doctest::Approx(std::sqrt(var)));
    // Small-dt limit agrees with the Euler variance.
    CHECK(ou_transition(p, 0.5, 1e-8, 1.0) - 0.5 == doctest::Approx(0.3 * 1e-4).epsilon(1e-6));
}

TEST_CASE("surface interpolant recovers nodes and Black-Scholes prices") {
    const LiquidLattice lattice =
        make_delta_lattice({30, 60, 91, 182, 365}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}, 0.2);
    const Eigen::VectorXd row = bs_row(lattice, 0.2);
    const SurfaceInterpolant h(lattice, row);
    for (std::size_t j = 0; j < lattice.size(); ++j) {
        CHECK(h(lattice[j].tau, lattice[j].m) == row(static_cast<Eigen::Index>(j)));
    }
    for (double tau : {0.01, 0.05, 0.1, 0.2, 0.4, 0.7, 0.99}) {
        for (double m : {-0.3, -0.1, -0.02, 0.0, 0.03, 0.08, 0.2}) {
            INFO("tau=" << tau << " m=" << m);
            CHECK(std::abs(h(tau, m) - bs_price(tau, m, 0.2)) <= 1e-3);
        }
    }
    CHECK(h(0.0, -0.1) == doctest::Approx(intrinsic(-0.1)));
    CHECK_THROWS_AS(h(1.5, 0.0), InterpolationError);
    CHECK_THROWS_AS(h(-0.01, 0.0), InterpolationError);
}

TEST_CASE("contract revaluation") {
    const LiquidLattice lattice =
        make_delta_lattice({30, 91, 365, 730}, {0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95}, 0.5);
    const Eigen::VectorXd row = bs_row(lattice, 0.25);
    const SurfaceInterpolant h(lattice, row);
    const std::size_t node = lattice.find(2, 0.5);
    Contract atm{"call 1y 0.5d", lattice[node].tau, lattice[node].m};
    CHECK(revalue_contract(atm, 0.0, 100.0, 100.0, h) == 100.0 * row(static_cast<Eigen::Index>(node)));

    // Flat in m: the price scales with the spot.
    Eigen::VectorXd flat = Eigen::VectorXd::Constant(row.size(), 0.45);
    const SurfaceInterpolant hf(lattice, flat);
    Contract c{"flat", 2.0, 0.0};
    CHECK(revalue_contract(c, 0.0, 100.0, 200.0, hf) == doctest::Approx(2.0 * revalue_contract(c, 0.0, 100.0, 100.0, hf)));

    // Shifted coordinates against Black-Scholes.
    const double horizon = 5.0 / 365.0;
    for (double next : {90.0, 97.0, 100.0, 104.0, 112.0}) {
        const double expected = next * bs_price(atm.tau - horizon, atm.m + std::log(100.0 / next), 0.25);
        CHECK(std::abs(revalue_contract(atm, horizon, 100.0, next, h) - expected) <= 1e-3 * next);
    }
    Contract too_long{"call 3y", 3.0, 0.0};
    try {
        revalue_contract(too_long, 0.0, 100.0, 100.0, h);
        FAIL("expected a revaluation error");
    } catch (const RevaluationError& e) {
        CHECK(std::string(e.what()).find("call 3y") != std::string::npos);
    }
}

TEST_CASE("implied vol round trip and limits") {
    CHECK(implied_vol(bs_price(0.7, 0.05, 0.2), 0.7, 0.05) == doctest::Approx(0.2).epsilon(1e-8));
    CHECK(implied_vol(0.0797, 1.0, 0.0) == doctest::Approx(0.2).epsilon(0.001));
    double previous = implied_vol(intrinsic(-0.1) + 1e-4, 0.5, -0.1);
    for (double excess : {1e-6, 1e-8, 1e-10, 1e-12}) {
        const double vol = implied_vol(intrinsic(-0.1) + excess, 0.5, -0.1);
        CHECK(vol < previous);
        previous = vol;
    }
    CHECK(implied_vol(intrinsic(-0.1), 0.5, -0.1) == 0.0);
    CHECK_THROWS_AS(implied_vol(1.2, 0.5, 0.0), InversionError);
}

TEST_CASE("volatility index from a strip") {
    std::vector<double> deltas;
    for (int i = 1; i < 100; ++i) {
        deltas.push_back(i / 100.0);
    }
    const LiquidLattice wide = make_delta_lattice({30, 60}, deltas, 0.2);
    const Eigen::VectorXd row = bs_row(wide, 0.2);
    CHECK(vix_index(row, wide) == doctest::Approx(20.0).epsilon(0.05));
    CHECK(vix_index(row, wide, 45.0 / 365.0) == doctest::Approx(20.0).epsilon(0.05));

    // Calls with parity puts against explicit Black-Scholes puts.
    const auto [begin, end] = wide.groups()[0];
    std::vector<double> k, c, p;
    for (std::size_t j = begin; j < end; ++j) {
        k.push_back(std::exp(wide[j].m));
        c.push_back(row(static_cast<Eigen::Index>(j)));
        p.push_back(bs_put(wide[j].tau, wide[j].m, 0.2));
    }
    const double direct = 100.0 * std::sqrt(strip_variance(k, c, p, wide.expiries()[0]));
    CHECK(std::abs(direct - vix_index(row, wide)) <= 1e-10);

    // Scaling OTM prices up raises the index.
    std::vector<double> c_up = c, p_up = p;
    for (std::size_t i = 0; i < k.size(); ++i) {
        c_up[i] *= 1.01;
        p_up[i] *= 1.01;
    }
    CHECK(strip_variance(k, c_up, p_up, wide.expiries()[0]) > strip_variance(k, c, p, wide.expiries()[0]));
    CHECK_THROWS_AS(vix_index(row, wide, 10.0 / 365.0), DomainError);
    CHECK_THROWS_AS(vix_index(row, wide, 90.0 / 365.0), DomainError);
}

TEST_CASE("linear strip reproduces the volatility index") {
    const LiquidLattice lattice = make_delta_lattice({20, 30, 60, 91}, standard_deltas(), 0.2);
    Eigen::VectorXd row(static_cast<Eigen::Index>(lattice.size()));
    for (std::size_t j = 0; j < lattice.size(); ++j) {
        // Smile and term structure so the strip weights are exercised.
        const double vol = 0.18 + 0.3 * lattice[j].m * lattice[j].m - 0.1 * lattice[j].m + 0.02 * lattice[j].tau;
        row(static_cast<Eigen::Index>(j)) = bs_price(lattice[j].tau, lattice[j].m, vol);
    }
    for (double target : {30.0 / 365.0, 45.0 / 365.0, 25.0 / 365.0}) {
        const VixStrip strip = vix_strip(lattice, target);
        double variance = strip.underlying + strip.constant;
        for (std::size_t i = 0; i < strip.nodes.size(); ++i) {
            variance += strip.calls[i] * row(static_cast<Eigen::Index>(strip.nodes[i]));
        }
        const double index = vix_index(row, lattice, target);
        CHECK(std::abs(100.0 * std::sqrt(variance) - index) <= 1e-10 * index);
    }
    CHECK_THROWS_AS(vix_strip(lattice, 10.0 / 365.0), DomainError);
}

TEST_CASE("decoded state matches the factor series") {
    const auto& f = pipeline();
    ScenarioEngine engine(f.models, f.factors, f.constraints);
    const Eigen::Index t = clean_date(f.factors);
    MarketState s = engine.decode_state(f.panel.prices.row(t).transpose(), f.panel.spot[static_cast<std::size_t>(t)],
                                        f.panel.labels[static_cast<std::size_t>(t)]);
    CHECK((s.xi - f.factors.xi.row(t).transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((s.xi_sec - f.factors.xi_sec.row(t).transpose()).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("simulation is reproducible across thread counts") {
    const auto& f = pipeline();
    ScenarioEngine engine(f.models, f.factors, f.constraints);
    const Eigen::Index t = clean_date(f.factors);
    MarketState s = engine.decode_state(f.panel.prices.row(t).transpose(), f.panel.spot[static_cast<std::size_t>(t)],
                                        f.panel.labels[static_cast<std::size_t>(t)]);
    SimulationOptions options;
    options.seed = 99;
    options.batch = 16;
    const ScenarioSet one = engine.simulate(s, 5 * f.models.dt, 100, options);
    options.threads = 3;
    const ScenarioSet three = engine.simulate(s, 5 * f.models.dt, 100, options);
    REQUIRE(one.scenarios.size() == 100);
    CHECK(one.stats.steps == 500);
    std::set<double> distinct;
    for (std::size_t k = 0; k < 100; ++k) {
        CHECK(one.scenarios[k].id == k);
        CHECK(one.scenarios[k].spot == three.scenarios[k].spot);
        CHECK(one.scenarios[k].xi == three.scenarios[k].xi);
        CHECK(one.scenarios[k].surface == three.scenarios[k].surface);
        CHECK(detect(f.constraints, one.scenarios[k].surface).clean());
        distinct.insert(one.scenarios[k].spot);
    }
    CHECK(distinct.size() == 100);
    options.seed = 100;
    CHECK(engine.simulate(s, f.models.dt, 1, options).scenarios[0].spot != one.scenarios[0].spot);

    CHECK_THROWS_AS(engine.simulate(s, 1.5 * f.models.dt, 10, options), DomainError);
    MarketState outside = s;
    outside.xi *= 1e6;
    CHECK_THROWS_AS(engine.simulate(outside, f.models.dt, 10, options), DomainError);

    std::ostringstream dump;
    options.keep_paths = true;
    write_scenarios(dump, engine.simulate(s, 3 * f.models.dt, 4, options), f.factors.lattice);
    const std::string text = dump.str();
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 4 * 4);
}

TEST_CASE("noise-free models give identical scenarios") {
    const auto& f = pipeline();
    ModelSet quiet = f.models;
    quiet.factors.diffusion_scale.setConstant(1e-14);
    quiet.index.log_vol_bias = -60.0;
    for (auto& ou : quiet.secondary) {
        ou.vol = 0.0;
    }
    ScenarioEngine engine(quiet, f.factors, f.constraints);
    const Eigen::Index t = clean_date(f.factors);
    MarketState s = engine.decode_state(f.panel.prices.row(t).transpose(), 100.0, f.panel.labels[0]);
    SimulationOptions options;
    options.repair = false;
    const ScenarioSet set = engine.simulate(s, quiet.dt, 1000, options);
    const double drift = quiet.index.drift_for(s.label);
    for (const Scenario& sc : set.scenarios) {
        CHECK(sc.spot == doctest::Approx(100.0 * std::exp(drift * quiet.dt)).epsilon(1e-12));
        CHECK((sc.xi - set.scenarios[0].xi).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK((sc.xi_sec - set.scenarios[0].xi_sec).cwiseAbs().maxCoeff() <= 1e-15);
    }
}

TEST_CASE("long simulated path stays inside the polytope") {
    const auto& f = pipeline();
    ScenarioEngine engine(f.models, f.factors, f.constraints);
    const Eigen::Index t = clean_date(f.factors);
    MarketState s = engine.decode_state(f.panel.prices.row(t).transpose(), 100.0, f.panel.labels[0]);
    SimulationOptions options;
    options.keep_paths = true;
    options.repair = false;
    const ScenarioSet set = engine.simulate(s, 10000 * f.models.dt, 1, options);
    const Eigen::MatrixXd& path = set.scenarios[0].path;
    REQUIRE(path.rows() == 10001);
    std::size_t violations = 0;
    for (Eigen::Index r = 0; r < path.rows(); ++r) {
        violations += f.models.factors.boundary.interior(path.row(r).segment(1, 2).transpose()) ? 0 : 1;
        REQUIRE(path(r, 0) > 0.0);
    }
    CHECK(violations == 0);
    MESSAGE("safeguarded steps: " << set.stats.safeguarded_steps << " of " << set.stats.steps);
}

TEST_CASE("bootstrap innovations keep the residual dependence") {
    const auto& f = pipeline();
    const ResidualBank& bank = f.models.residuals;
    InnovationSampler sampler(InnovationMode::bootstrap, &bank, 3, f.models.dt);
    RandomStream rng(3, 0);
    const int n = 100000;
    Eigen::MatrixXd draws(n, 3);
    Eigen::VectorXd row(3);
    for (int i = 0; i < n; ++i) {
        sampler.draw(rng, row);
        draws.row(i) = row.transpose();
    }
    auto correlation = [](const Eigen::MatrixXd& m) {
        const Eigen::MatrixXd c = m.rowwise() - m.colwise().mean();
        const Eigen::MatrixXd cov = c.transpose() * c;
        return cov(0, 1) / std::sqrt(cov(0, 0) * cov(1, 1));
    };
    CHECK(std::abs(correlation(draws) - correlation(bank.rows)) <= 0.05);

    InnovationSampler gaussian(InnovationMode::gaussian, nullptr, 3, 0.01);
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
        gaussian.draw(rng, row);
        sq += row.squaredNorm();
    }
    CHECK(sq / (3.0 * n) == doctest::Approx(0.01).epsilon(0.02));
    CHECK_THROWS_AS(InnovationSampler(InnovationMode::bootstrap, nullptr, 3, 0.01), DomainError);
    CHECK(parse_innovation_mode("gaussian") == InnovationMode::gaussian);
    CHECK_THROWS_AS(parse_innovation_mode("sobol"), UsageError);
}
