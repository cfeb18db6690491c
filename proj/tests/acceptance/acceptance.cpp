#include "lp_oracle.hpp"
#include "numeric_oracles.hpp"
#include "planted.hpp"

#include "optrisk/backtest.hpp"
#include "optrisk/black_scholes.hpp"
#include "optrisk/dynamics.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/factor_model.hpp"
#include "optrisk/fhs.hpp"
#include "optrisk/heston.hpp"
#include "optrisk/io.hpp"
#include "optrisk/market_data.hpp"
#include "optrisk/pipeline.hpp"
#include "optrisk/scenario.hpp"
#include "optrisk/static_arbitrage.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include <unistd.h>

using namespace optrisk;
using namespace optrisk::testing;

namespace {

// Pinned tolerances and sizes.
constexpr double repair_violation_tol = 1e-8;
constexpr double repair_oracle_tol = 1e-8;
constexpr double repair_seconds = 1.0;
constexpr int repair_surfaces = 100;

constexpr int containment_paths = 100;
constexpr int containment_steps = 10000;

constexpr double angle_tol = 1e-6;
constexpr double reconstruction_tol = 1e-10;

constexpr double ou_tol = 0.10;
constexpr double garch_tol = 0.15;
constexpr double sde_tol = 0.15;
constexpr double gradient_tol = 1e-4;
constexpr int recovery_points = 10000;
constexpr int recovery_replications = 20;

constexpr double bs_limit_tol = 1e-6;
constexpr double parity_tol = 1e-8;
constexpr double calibration_tol = 1e-8;

constexpr int christoffersen_replications = 10000;
constexpr double christoffersen_size_tol = 0.01;

constexpr std::size_t coverage_days = 250;
constexpr std::size_t coverage_scenarios = 5000;
constexpr double coverage_band = 0.95;
constexpr double coverage_minutes = 30.0;
constexpr unsigned reference_cores = 8;

constexpr double scenario_ms = 10.0;
constexpr double speedup = 10.0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double x, int digits = 4) {
    std::ostringstream out;
    out << std::setprecision(digits) << x;
    return out.str();
}

unsigned worker_threads() {
    return std::max(1u, std::thread::hardware_concurrency());
}

LiquidLattice standard_lattice() {
    return make_delta_lattice(standard_expiry_days(), standard_deltas(), 0.2);
}

// Model trained on a synthetic history over the 130-node lattice with two
// primary and 13 secondary factors; shared by containment, coverage and timing.
struct NsdeStudy {
    SurfacePanel history;
    ConstraintSystem constraints;
    FactorModel factors;
    ModelSet models;
    double build_seconds = 0.0;
};

const NsdeStudy& nsde_study() {
    static const std::unique_ptr<NsdeStudy> study = [] {
        Timer timer;
        auto s = std::make_unique<NsdeStudy>();
        SynthOptions synth;
        synth.long_run_vol = 0.5;
        s->history = synthesize_heston_panel(HestonParams::from_rho(100.0, 0.04, 0.04, 3.0, 0.3, -0.7),
                                             standard_lattice(), 600, 20190101, synth);
        s->constraints = build_constraints(s->history.lattice);
        DecodeOptions decode;
        decode.angle_grid = 16;
        decode.sweeps = 1;
        s->factors = decode_primary(s->history, compute_vega_weights(s->history), s->constraints, decode);
        attach_secondary(s->factors, 13);
        ModelFitOptions fit;
        for (TrainingConfig* c : {&fit.factor_training, &fit.index_training}) {
            c->hidden = {32, 32};
            c->epochs = 10;
            c->batch = 64;
        }
        fit.index_training.seed = 2;
        s->models = fit_model_set(s->factors, s->history, fit).models;
        s->build_seconds = timer.seconds();
        return s;
    }();
    return *study;
}

Eigen::Index last_clean_row(const FactorModel& f) {
    for (auto t = static_cast<Eigen::Index>(f.arbitrage_flags.size()) - 1; t >= 0; --t) {
        if (!f.arbitrage_flags[static_cast<std::size_t>(t)]) {
            return t;
        }
    }
    throw DomainError("no decoded row inside the polytope");
}

// Three nodes of one surface: adjacent strikes of one expiry, or two strikes
// and the next expiry at the first strike's delta.
std::vector<std::size_t> sub_instance(const LiquidLattice& lattice, std::mt19937_64& rng, bool calendar) {
    const auto& groups = lattice.groups();
    std::uniform_int_distribution<std::size_t> pick_group(0, groups.size() - (calendar ? 2 : 1));
    const std::size_t g = pick_group(rng);
    const auto [begin, end] = groups[g];
    std::uniform_int_distribution<std::size_t> pick_node(begin, end - 3);
    const std::size_t i = pick_node(rng);
    if (!calendar) {
        return {i, i + 1, i + 2};
    }
    return {i, i + 1, lattice.find(g + 1, lattice[i].delta)};
}

Outcome repair_soundness() {
    const LiquidLattice lattice = standard_lattice();
    const ConstraintSystem system = build_constraints(lattice);
    const Eigen::VectorXd base = bs_surface(lattice, 0.2);
    std::mt19937_64 rng(101);
    std::normal_distribution<double> noise(0.0, 0.004);
    std::uniform_int_distribution<Eigen::Index> node(0, base.size() - 1);
    int injected = 0, dirty = 0, oracle_failures = 0, sub_violated = 0;
    double worst_seconds = 0.0, worst_gap = 0.0;
    for (int trial = 0; trial < repair_surfaces; ++trial) {
        Eigen::VectorXd c = base;
        for (Eigen::Index j = 0; j < c.size(); ++j) {
            c(j) += noise(rng);
        }
        // A bump on one node breaks convexity around it.
        c(node(rng)) += 0.02;
        injected += detect(system, c).clean() ? 0 : 1;
        Timer timer;
        const Eigen::VectorXd fixed = repair_l1(system, c);
        worst_seconds = std::max(worst_seconds, timer.seconds());
        dirty += detect(system, fixed, repair_violation_tol).clean() ? 0 : 1;

        const auto nodes = sub_instance(lattice, rng, trial % 2 == 1);
        std::vector<LatticeNode> sub_nodes;
        Eigen::VectorXd sub_c(3);
        for (std::size_t k = 0; k < 3; ++k) {
            sub_nodes.push_back(lattice[nodes[k]]);
            sub_c(static_cast<Eigen::Index>(k)) = c(static_cast<Eigen::Index>(nodes[k]));
        }
        const LiquidLattice three(sub_nodes);
        const ConstraintSystem sub = build_constraints(three);
        // Node order may change when the lattice sorts by expiry and moneyness.
        Eigen::VectorXd ordered(3);
        for (std::size_t k = 0; k < 3; ++k) {
            for (std::size_t j = 0; j < 3; ++j) {
                if (three[k].tau == sub_nodes[j].tau && three[k].m == sub_nodes[j].m) {
                    ordered(static_cast<Eigen::Index>(k)) = sub_c(static_cast<Eigen::Index>(j));
                }
            }
        }
        sub_violated += detect(sub, ordered).clean() ? 0 : 1;
        const Eigen::VectorXd sub_fixed = repair_l1(sub, ordered);
        const double gap =
            std::abs((sub_fixed - ordered).lpNorm<1>() - oracle::repair_vertex_min(sub.A, sub.b, ordered));
        worst_gap = std::max(worst_gap, gap);
        oracle_failures += gap <= repair_oracle_tol && detect(sub, sub_fixed, repair_violation_tol).clean() ? 0 : 1;
    }
    const bool pass = injected == repair_surfaces && dirty == 0 && oracle_failures == 0 && worst_seconds < repair_seconds;
    return {pass, std::to_string(injected) + "/" + std::to_string(repair_surfaces) +
                      " surfaces violated before repair, " + std::to_string(dirty) +
                      " with residual violations after; oracle gap max " + fmt(worst_gap, 3) + " over " +
                      std::to_string(repair_surfaces) + " three-node instances (" + std::to_string(sub_violated) +
                      " violated); slowest repair " + fmt(worst_seconds, 3) + " s"};
}

Outcome polytope_containment() {
    const NsdeStudy& s = nsde_study();
    const ScenarioEngine engine(s.models, s.factors, s.constraints);
    const Eigen::Index t = last_clean_row(s.factors);
    const MarketState start =
        engine.decode_state(s.history.prices.row(t).transpose(), s.history.spot[static_cast<std::size_t>(t)],
                            s.history.labels[static_cast<std::size_t>(t)]);
    const Eigen::Index d = s.factors.primary();
    std::size_t violations = 0, safeguarded = 0, steps = 0, rows = 0;
    constexpr int paths_per_call = 10;
    for (int call = 0; call < containment_paths / paths_per_call; ++call) {
        SimulationOptions options;
        options.seed = 500 + static_cast<std::uint64_t>(call);
        options.keep_paths = true;
        options.repair = false;
        const ScenarioSet set = engine.simulate(start, containment_steps * s.models.dt, paths_per_call, options);
        for (const Scenario& sc : set.scenarios) {
            for (Eigen::Index r = 0; r < sc.path.rows(); ++r) {
                violations += s.factors.constraints.contains(sc.path.row(r).segment(1, d).transpose()) ? 0 : 1;
                ++rows;
            }
        }
        safeguarded += set.stats.safeguarded_steps;
        steps += set.stats.steps;
    }
    const bool pass = violations == 0 && rows == static_cast<std::size_t>(containment_paths) * (containment_steps + 1);
    return {pass, std::to_string(violations) + " violations in " + std::to_string(rows) + " states over " +
                      std::to_string(s.factors.constraints.rows()) + " factor constraints; " +
                      std::to_string(safeguarded) + " of " + std::to_string(steps) + " steps safeguarded"};
}

Outcome factor_round_trip() {
    double worst_angle = 0.0, worst_reconstruction = 0.0, worst_orthonormality = 0.0;
    int panels = 0;
    const std::vector<LiquidLattice> lattices{make_delta_lattice({30, 91, 182, 365, 730}, {0.2, 0.35, 0.5, 0.65, 0.8}, 0.2),
                                              standard_lattice()};
    for (const LiquidLattice& lattice : lattices) {
        for (unsigned seed : {5u, 17u, 29u}) {
            std::vector<Eigen::VectorXd> corners;
            const SurfacePanel panel = planted_panel(lattice, 150, corners, seed);
            const VegaWeights w = compute_vega_weights(panel);
            const FactorModel model = decode_primary(panel, w, build_constraints(lattice));
            Eigen::MatrixXd planted(2, static_cast<Eigen::Index>(lattice.size()));
            planted.row(0) = w.lambda.cwiseProduct(corners[1] - corners[0]).transpose();
            planted.row(1) = w.lambda.cwiseProduct(corners[2] - corners[0]).transpose();
            const Eigen::VectorXd cosines = principal_cosines(model.G, planted);
            for (Eigen::Index i = 0; i < cosines.size(); ++i) {
                worst_angle = std::max(worst_angle, std::acos(std::min(cosines(i), 1.0)));
            }
            for (Eigen::Index t = 0; t < panel.rows(); ++t) {
                const Eigen::VectorXd back = model.prices(model.xi.row(t).transpose(), Eigen::VectorXd());
                worst_reconstruction =
                    std::max(worst_reconstruction, (back - panel.prices.row(t).transpose()).cwiseAbs().maxCoeff());
            }
            worst_orthonormality = std::max(
                worst_orthonormality,
                (model.G * model.G.transpose() - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff());
            ++panels;
        }
    }
    const bool pass = worst_angle < angle_tol && worst_reconstruction <= reconstruction_tol &&
                      worst_orthonormality <= reconstruction_tol;
    return {pass, std::to_string(panels) + " planted panels: max principal angle " + fmt(worst_angle, 3) +
                      ", max reconstruction error " + fmt(worst_reconstruction, 3) + ", max |G G^T - I| " +
                      fmt(worst_orthonormality, 3)};
}

Outcome estimator_recovery() {
    std::ostringstream detail;
    bool pass = true;

    // OU and GARCH: mean estimate over independent paths, each of recovery_points observations.
    {
        const double dt = 1.0 / 52.0, kappa = 5.0, theta = 0.3, vol = 0.1;
        Eigen::Vector3d mean = Eigen::Vector3d::Zero();
        for (int rep = 0; rep < recovery_replications; ++rep) {
            std::mt19937_64 rng(1000 + rep);
            std::normal_distribution<double> normal;
            Eigen::VectorXd x(recovery_points);
            x(0) = 0.35;
            for (Eigen::Index t = 1; t < x.size(); ++t) {
                x(t) = x(t - 1) + kappa * (theta - x(t - 1)) * dt + vol * std::sqrt(dt) * normal(rng);
            }
            const OUFit fit = fit_ou(x, dt);
            mean += Eigen::Vector3d(fit.params.reversion, fit.params.level, fit.params.vol) / recovery_replications;
        }
        const Eigen::Vector3d error = (mean.array() / Eigen::Array3d(kappa, theta, vol) - 1.0).abs();
        pass = pass && error.maxCoeff() <= ou_tol;
        detail << "OU rel errors " << fmt(error(0), 2) << "/" << fmt(error(1), 2) << "/" << fmt(error(2), 2);
    }
    {
        const double omega = 1e-6, alpha = 0.08, beta = 0.9;
        Eigen::Vector3d mean = Eigen::Vector3d::Zero();
        int omega_inside = 0;
        for (int rep = 0; rep < recovery_replications; ++rep) {
            std::mt19937_64 rng(2000 + rep);
            std::normal_distribution<double> normal;
            Eigen::VectorXd r(recovery_points);
            double h = omega / (1.0 - alpha - beta);
            for (Eigen::Index t = 0; t < r.size(); ++t) {
                r(t) = std::sqrt(h) * normal(rng);
                h = omega + alpha * r(t) * r(t) + beta * h;
            }
            const GarchFit fit = fit_garch11(r, 1.0 / 252.0);
            mean += Eigen::Vector3d(fit.omega, fit.alpha, fit.beta) / recovery_replications;
            omega_inside += std::abs(fit.omega / omega - 1.0) <= garch_tol ? 1 : 0;
        }
        const Eigen::Vector3d error = (mean.array() / Eigen::Array3d(omega, alpha, beta) - 1.0).abs();
        pass = pass && error.maxCoeff() <= garch_tol;
        detail << "; GARCH " << fmt(error(0), 2) << "/" << fmt(error(1), 2) << "/" << fmt(error(2), 2) << " ("
               << omega_inside << "/" << recovery_replications << " single-path omegas within tolerance)";
    }
    // Neural SDE on a planted constant-coefficient path, evaluated away from the path ends.
    {
        const double dt = 1.0 / 52.0;
        Eigen::VectorXd mu(2);
        mu << 1.0, -0.8;
        Eigen::MatrixXd sigma(2, 2);
        sigma << 0.3, 0.0, 0.1, 0.2;
        const PlantedPath path = planted_path(mu, sigma, 0.2, dt, recovery_points, 10);
        const FactorTransitions data = factor_transitions(path.xi, std::vector<bool>(recovery_points, true), {});
        const BoundaryTransform bt = BoundaryTransform::from_data(box(1000.0, 2), path.xi);
        TrainingConfig config;
        config.hidden = {32, 32};
        config.epochs = 40;
        config.batch = 64;
        config.seed = 11;
        const TrainedFactors trained = train_factor_sde(data, bt, dt, config);
        const Eigen::MatrixXd cov = sigma * sigma.transpose();
        double mu_err = 0.0, cov_err = 0.0;
        int count = 0;
        for (Eigen::Index t = recovery_points / 20; t < recovery_points - recovery_points / 20; t += 50) {
            const auto c = trained.model.evaluate(path.xi.row(t).transpose());
            mu_err += (c.drift - mu).norm() / mu.norm();
            cov_err += (c.diffusion * c.diffusion.transpose() - cov).norm() / cov.norm();
            ++count;
        }
        mu_err /= count;
        cov_err /= count;
        pass = pass && mu_err <= sde_tol && cov_err <= sde_tol;
        detail << "; neural SDE drift " << fmt(mu_err, 2) << " diffusion " << fmt(cov_err, 2);
    }
    // Likelihood gradients against central differences, with binding facets.
    {
        const FactorConstraintSystem poly = pentagon();
        const BoundaryTransform bt(poly, 0.2);
        const FactorTransitions data = near_boundary_data(poly, 0.2, 40, 6);
        const auto samples = all_samples(data.from.rows());
        double worst = 0.0;
        for (bool joint : {false, true}) {
            TrainingConfig config;
            config.hidden = {6, 6};
            config.seed = joint ? 8 : 7;
            FactorDynamics model = init_factor_dynamics(data, bt, 0.02, config, joint);
            std::mt19937_64 rng(config.seed);
            std::normal_distribution<double> normal(0.0, 0.3);
            Eigen::VectorXd p = factor_parameters(model);
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                p(i) += normal(rng);
            }
            set_factor_parameters(model, p);
            Eigen::VectorXd grad = Eigen::VectorXd::Zero(p.size());
            factor_loss(model, data, samples, 0.02, &grad);
            auto loss = [&](const Eigen::VectorXd& q) {
                FactorDynamics copy = model;
                set_factor_parameters(copy, q);
                return factor_loss(copy, data, samples, 0.02);
            };
            worst = std::max(worst, relative_error(grad, finite_difference(loss, p, 1e-6)));
        }
        std::mt19937_64 rng(9);
        std::normal_distribution<double> normal;
        const Eigen::Index n = 30;
        Eigen::MatrixXd xi(n + 1, 2);
        std::vector<double> spot{100.0};
        std::vector<std::string> labels;
        for (Eigen::Index t = 0; t <= n; ++t) {
            xi.row(t) << normal(rng), normal(rng);
            labels.push_back(t % 2 ? "A" : "B");
            if (t < n) {
                spot.push_back(spot.back() * std::exp(0.01 * normal(rng)));
            }
        }
        const IndexTransitions index_data = index_transitions(xi, spot, labels, std::vector<bool>(n, true));
        TrainingConfig config;
        config.hidden = {5, 5};
        IndexDynamics index = init_index_dynamics(index_data, {{"A", 0.1}, {"B", -0.2}}, 1.0 / 252.0, config);
        Eigen::VectorXd p = index.vol_net.parameters();
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            p(i) += 0.3 * normal(rng);
        }
        index.vol_net.set_parameters(p);
        const auto index_samples = all_samples(n);
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(p.size());
        index_loss(index, index_data, index_samples, 1.0 / 252.0, &grad);
        auto loss = [&](const Eigen::VectorXd& q) {
            IndexDynamics copy = index;
            copy.vol_net.set_parameters(q);
            return index_loss(copy, index_data, index_samples, 1.0 / 252.0);
        };
        worst = std::max(worst, relative_error(grad, finite_difference(loss, p, 1e-6)));
        pass = pass && worst <= gradient_tol;
        detail << "; gradient rel error " << fmt(worst, 2);
    }
    return {pass, detail.str()};
}

Outcome heston_pricer() {
    double bs_gap = 0.0;
    for (double vol : {0.1, 0.2, 0.45}) {
        const HestonParams p{1.0, vol * vol, vol * vol, 1.5, 0.0, 0.0};
        for (double tau : {7.0 / 365.0, 30.0 / 365.0, 0.5, 2.0}) {
            for (double m : {-0.4, -0.1, 0.0, 0.1, 0.4}) {
                bs_gap = std::max(bs_gap, std::abs(heston_price(p, tau, m) - bs_price(tau, m, vol)));
            }
        }
    }
    double parity_gap = 0.0;
    for (const HestonParams& p : {HestonParams::from_rho(1.0, 0.05, 0.03, 2.0, 0.6, -0.7),
                                  HestonParams::from_rho(1.0, 0.02, 0.06, 0.8, 1.0, -0.3)}) {
        for (double tau : {0.1, 1.0}) {
            for (double m : {-0.2, 0.0, 0.15}) {
                const double call = heston_price(p, tau, m, 1e-10);
                parity_gap = std::max(parity_gap, std::abs(call - gil_pelaez_put(p, tau, m) - (1.0 - std::exp(m))));
            }
        }
    }
    double worst_objective = 0.0;
    for (const LiquidLattice& lattice :
         {make_delta_lattice({30, 91, 182, 365, 730}, {0.2, 0.35, 0.5, 0.65, 0.8}, 0.2), standard_lattice()}) {
        Eigen::VectorXd w(static_cast<Eigen::Index>(lattice.size()));
        for (std::size_t j = 0; j < lattice.size(); ++j) {
            w(static_cast<Eigen::Index>(j)) = 1.0 / vega(lattice[j].tau, lattice[j].m, 0.2);
        }
        for (const HestonParams& truth : {HestonParams::from_rho(1.0, 0.05, 0.035, 2.0, 0.6, -0.65),
                                          HestonParams::from_rho(1.0, 0.03, 0.05, 4.0, 0.4, -0.8)}) {
            const Eigen::VectorXd row = heston_surface(truth, lattice, 1e-12);
            const CalibrationResult fit = calibrate(row, lattice, w, default_initial_params(row, lattice, 1.0));
            worst_objective = std::max(worst_objective, fit.objective);
        }
    }
    const bool pass = bs_gap <= bs_limit_tol && parity_gap <= parity_tol && worst_objective <= calibration_tol;
    return {pass, "Black-Scholes limit gap " + fmt(bs_gap, 3) + ", put-call parity gap " + fmt(parity_gap, 3) +
                      ", worst calibration objective " + fmt(worst_objective, 3)};
}

Outcome backtest_statistics() {
    // Kupiec: library decision against a binomial likelihood-ratio oracle and the derived region.
    const int n = 250;
    const double p = 0.01;
    const double critical = boost::math::quantile(boost::math::chi_squared(1.0), 0.95);
    std::set<int> region, oracle_region;
    for (int x = 0; x <= n; ++x) {
        if (kupiec_pf(static_cast<std::size_t>(x), n, 0.99).reject_two_sided) {
            region.insert(x);
        }
        const double rate = static_cast<double>(x) / n;
        auto log_pmf = [&](double q) {
            return q <= 0.0 || q >= 1.0 ? 0.0 : std::log(boost::math::pdf(boost::math::binomial(n, q), x));
        };
        if (2.0 * (log_pmf(rate) - log_pmf(p)) >= critical) {
            oracle_region.insert(x);
        }
    }
    std::set<int> derived{0};
    for (int x = 7; x <= n; ++x) {
        derived.insert(x);
    }
    const bool kupiec_ok = region == derived && oracle_region == derived;

    // Christoffersen size on i.i.d. breaches near the asymptotic regime.
    RandomStream rng(2025, 0);
    std::vector<int> series(2500);
    int rejections = 0;
    for (int r = 0; r < christoffersen_replications; ++r) {
        for (int& b : series) {
            b = rng.uniform() < 0.05 ? 1 : 0;
        }
        rejections += christoffersen(series, 0.95).reject_independence ? 1 : 0;
    }
    const double size = static_cast<double>(rejections) / christoffersen_replications;
    const bool size_ok = std::abs(size - 0.05) <= christoffersen_size_tol;

    // Basel zones: at most 4 breaches green, 5 to 9 yellow, 10 or more red.
    bool zones_ok = true;
    for (std::size_t x = 0; x <= coverage_days; ++x) {
        const Zone expected = x <= 4 ? Zone::green : x <= 9 ? Zone::yellow : Zone::red;
        zones_ok = zones_ok && traffic_light(x) == expected;
    }
    std::ostringstream rejected;
    rejected << "{";
    int shown = 0;
    for (int x : region) {
        if (shown++ < 3) {
            rejected << (shown > 1 ? "," : "") << x;
        }
    }
    rejected << ",...," << *region.rbegin() << "}";
    return {kupiec_ok && size_ok && zones_ok,
            "Kupiec region " + rejected.str() + (kupiec_ok ? " matches" : " differs from") + " {0} u {x >= 7}; " +
                "Christoffersen size " + fmt(size, 3) + " over " + std::to_string(christoffersen_replications) +
                " replications; traffic light " + (zones_ok ? "matches" : "differs")};
}

// Coverage band: breach counts between the 2.5% and 97.5% binomial quantiles.
std::pair<double, double> coverage_bounds(std::size_t n, double alpha) {
    const boost::math::binomial dist(static_cast<double>(n), 1.0 - alpha);
    const double lo = boost::math::quantile(dist, (1.0 - coverage_band) / 2.0);
    const double hi = boost::math::quantile(dist, 1.0 - (1.0 - coverage_band) / 2.0);
    return {1.0 - hi / static_cast<double>(n), 1.0 - lo / static_cast<double>(n)};
}

struct CoverageCheck {
    bool pass = true;
    std::string detail;
};

CoverageCheck check_coverage(const BacktestReport& report) {
    CoverageCheck out;
    std::ostringstream detail;
    for (const BacktestBlock& block : report.blocks) {
        const auto [lo, hi] = coverage_bounds(block.dates.size(), block.alpha);
        std::size_t inside = 0;
        for (const auto& r : block.portfolios) {
            inside += r.coverage >= lo && r.coverage <= hi ? 1 : 0;
        }
        const double mean = block.summary.mean_coverage;
        const bool ok = block.dates.size() == coverage_days && mean >= lo && mean <= hi;
        out.pass = out.pass && ok;
        detail << report.engine << " a=" << block.alpha << ": mean coverage " << fmt(mean) << " in [" << fmt(lo)
               << ", " << fmt(hi) << "], " << inside << "/" << block.portfolios.size() << " portfolios in band, "
               << block.dates.size() << " days; ";
    }
    out.detail = detail.str();
    return out;
}

// Each day of the panel is one simulated step of the trained model from the
// state decoded from the previous day.
SurfacePanel nsde_generated_panel(const ScenarioEngine& engine, const MarketState& start, const LiquidLattice& lattice,
                                  double dt, std::size_t rows) {
    SurfacePanel panel;
    panel.lattice = lattice;
    panel.dt = dt;
    panel.prices.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(lattice.size()));
    MarketState state = start;
    for (std::size_t t = 0; t < rows; ++t) {
        panel.prices.row(static_cast<Eigen::Index>(t)) = engine.surface(state.xi, state.xi_sec).transpose();
        panel.spot.push_back(state.spot);
        panel.labels.push_back(state.label);
        panel.dates.push_back(add_days("2030-01-01", static_cast<int>(t)));
        if (t + 1 == rows) {
            break;
        }
        SimulationOptions options;
        options.seed = 900000 + t;
        const ScenarioSet step = engine.simulate(state, dt, 1, options);
        const Scenario& next = step.scenarios.front();
        state = engine.decode_state(next.surface, next.spot, state.label);
    }
    return panel;
}

// Heston parameter path whose factor returns are i.i.d. Gaussian, the setting
// filtered historical simulation resamples from.
std::vector<HestonParams> fhs_generated_history(std::size_t rows) {
    const Eigen::VectorXd daily_sd = (Eigen::VectorXd(heston_factor_count) << 0.01, 0.006, 0.003, 0.003, 0.0008, 0.003)
                                         .finished();
    RandomStream rng(4242, 0);
    std::vector<HestonParams> history{HestonParams::from_rho(100.0, 0.04, 0.04, 2.0, 0.5, -0.7)};
    while (history.size() < rows) {
        Eigen::VectorXd x = to_factors(history.back());
        for (int i = 0; i < heston_factor_count; ++i) {
            const double r = daily_sd(i) * rng.normal();
            x(i) = heston_convention(i) == ReturnConvention::log ? x(i) * std::exp(r) : x(i) + r;
        }
        history.push_back(from_factors(x));
    }
    return history;
}

Outcome self_consistency() {
    Timer timer;
    const unsigned threads = worker_threads();
    std::ostringstream detail;
    bool pass = true;

    // Neural SDE on the 130-node lattice.
    const NsdeStudy& s = nsde_study();
    const double build = s.build_seconds;
    {
        const ScenarioEngine engine(s.models, s.factors, s.constraints);
        const Eigen::Index t0 = last_clean_row(s.factors);
        const MarketState start =
            engine.decode_state(s.history.prices.row(t0).transpose(), s.history.spot[static_cast<std::size_t>(t0)],
                                s.history.labels[static_cast<std::size_t>(t0)]);
        const SurfacePanel panel =
            nsde_generated_panel(engine, start, s.history.lattice, s.models.dt, coverage_days + 1);
        const NsdeRiskEngine risk(engine, panel);
        BacktestOptions options;
        options.horizons = {1};
        options.alphas = {0.95, 0.99};
        options.scenarios = coverage_scenarios;
        options.threads = threads;
        options.test_end = static_cast<Eigen::Index>(coverage_days);
        const auto catalog = build_catalog(panel.lattice);
        const CoverageCheck c = check_coverage(run_backtest(risk, panel, catalog, options));
        pass = pass && c.pass;
        detail << c.detail;
    }
    // Filtered historical simulation on a three-expiry lattice.
    {
        const LiquidLattice lattice = make_delta_lattice({30, 91, 182}, catalog_deltas(), 0.2);
        const std::size_t begin = static_cast<std::size_t>(ewma_seed_returns) + coverage_scenarios + 270;
        const std::size_t rows = begin + coverage_days + 1;
        const std::vector<HestonParams> history = fhs_generated_history(rows);
        SurfacePanel panel;
        panel.lattice = lattice;
        panel.prices.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(lattice.size()));
        for (std::size_t t = 0; t < rows; ++t) {
            // Earlier rows only feed the parameter returns; their surfaces are never read.
            if (t >= begin) {
                HestonParams unit = history[t];
                unit.spot = 1.0;
                panel.prices.row(static_cast<Eigen::Index>(t)) = heston_surface(unit, lattice).transpose();
            } else {
                panel.prices.row(static_cast<Eigen::Index>(t)).setZero();
            }
            panel.spot.push_back(history[t].spot);
            panel.labels.push_back("FHS");
            panel.dates.push_back(add_days("2000-01-01", static_cast<int>(t)));
        }
        const FhsRiskEngine risk(panel, history, 1e-6);
        BacktestOptions options;
        options.horizons = {1};
        options.alphas = {0.95, 0.99};
        options.scenarios = coverage_scenarios;
        options.threads = threads;
        options.test_begin = static_cast<Eigen::Index>(begin);
        options.test_end = static_cast<Eigen::Index>(begin + coverage_days);
        const CoverageCheck c = check_coverage(run_backtest(risk, panel, build_catalog(lattice), options));
        pass = pass && c.pass;
        detail << c.detail;
    }
    const double wall = timer.seconds() + build;
    const double normalized = wall * threads / reference_cores;
    pass = pass && normalized < coverage_minutes * 60.0;
    detail << "wall " << fmt(wall, 4) << " s on " << threads << " core(s), " << fmt(normalized, 4) << " s at "
           << reference_cores << " cores";
    return {pass, detail.str()};
}

Outcome catalog_counts() {
    const auto catalog = build_catalog(standard_lattice());
    std::map<PortfolioType, std::size_t> counts;
    for (const auto& p : catalog) {
        ++counts[p.type];
    }
    const std::map<PortfolioType, std::size_t> expected{
        {PortfolioType::outright, 140},          {PortfolioType::delta_spread, 420},
        {PortfolioType::delta_butterfly, 60},    {PortfolioType::delta_hedged, 20},
        {PortfolioType::delta_neutral_strangle, 60}, {PortfolioType::risk_reversal, 60},
        {PortfolioType::calendar_spread, 90},    {PortfolioType::vix, 2}};
    std::ostringstream detail;
    detail << catalog.size() << " portfolios:";
    for (const auto& [type, n] : counts) {
        detail << ' ' << to_string(type) << '=' << n;
    }
    return {catalog.size() == 852 && counts == expected, detail.str()};
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome performance() {
    const NsdeStudy& s = nsde_study();
    const ScenarioEngine engine(s.models, s.factors, s.constraints);
    const NsdeRiskEngine nsde(engine, s.history);
    std::vector<std::size_t> nodes(s.history.lattice.size());
    for (std::size_t j = 0; j < nodes.size(); ++j) {
        nodes[j] = j;
    }
    const Eigen::Index t = last_clean_row(s.factors);
    std::vector<double> nsde_ms;
    for (std::uint64_t k = 0; k < 200; ++k) {
        Timer timer;
        const ScenarioValues v = nsde.scenarios(t, 1, 1, k, nodes);
        nsde_ms.push_back(timer.seconds() * 1e3);
        if (v.contracts.cols() != static_cast<Eigen::Index>(nodes.size())) {
            throw DomainError("unexpected scenario width");
        }
    }

    SynthOptions synth;
    synth.long_run_vol = 0.5;
    const HestonParams start = HestonParams::from_rho(100.0, 0.04, 0.04, 3.0, 0.3, -0.7);
    const std::size_t days = 120;
    const SurfacePanel panel = synthesize_heston_panel(start, s.history.lattice, days, 7, synth);
    const FhsRiskEngine fhs(panel, simulate_heston_path(start, days, 7, synth).params);
    std::vector<double> fhs_ms;
    for (std::uint64_t k = 0; k < 20; ++k) {
        Timer timer;
        fhs.scenarios(static_cast<Eigen::Index>(days) - 1, 1, 1, k, nodes);
        fhs_ms.push_back(timer.seconds() * 1e3);
    }
    const double a = median(nsde_ms), b = median(fhs_ms);
    return {a <= scenario_ms && b >= speedup * a,
            "median per scenario with " + std::to_string(nodes.size()) + " options and " +
                std::to_string(s.factors.primary()) + "+" + std::to_string(s.factors.secondary()) +
                " factors: neural SDE " + fmt(a, 3) + " ms, Heston revaluation " + fmt(b, 3) + " ms (" +
                fmt(b / a, 3) + "x)"};
}

struct ScratchDir {
    std::filesystem::path path;

    explicit ScratchDir(const std::string& name)
        : path(std::filesystem::temp_directory_path() / ("optrisk_accept_" + name + "_" + std::to_string(::getpid()))) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~ScratchDir() { std::filesystem::remove_all(path); }
};

Outcome end_to_end_smoke() {
    const std::filesystem::path config_file = std::filesystem::path(OPTRISK_SOURCE_DIR) / "configs" / "smoke.yaml";
    ScratchDir a("smoke_a"), b("smoke_b");
    std::vector<VerifyReport> reports;
    std::vector<std::string> hashes;
    for (const auto* dir : {&a, &b}) {
        RunConfig config = load_config(config_file, {});
        config.data_root = dir->path;
        for (const auto& stage : stage_names) {
            run_stage(stage, config);
        }
        reports.push_back(verify_run(config));
        hashes.push_back(sha256_hex(read_file(config.run_path() / "backtest_nsde_summary.txt")));
    }
    const bool pass = reports[0].ok() && reports[1].ok() && reports[0].artifacts == reports[1].artifacts &&
                      hashes[0] == hashes[1];
    std::size_t equal = 0;
    for (std::size_t i = 0; i < std::min(reports[0].artifacts.size(), reports[1].artifacts.size()); ++i) {
        equal += reports[0].artifacts[i] == reports[1].artifacts[i] ? 1 : 0;
    }
    return {pass, std::to_string(equal) + "/" + std::to_string(reports[0].artifacts.size()) +
                      " artifacts identical across two runs; report hash " + hashes[0].substr(0, 16) + " vs " +
                      hashes[1].substr(0, 16)};
}

struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "arbitrage repair soundness", repair_soundness},
        {2, "polytope containment", polytope_containment},
        {3, "factor round trip", factor_round_trip},
        {4, "estimator recovery", estimator_recovery},
        {5, "Heston pricer", heston_pricer},
        {6, "backtest statistics", backtest_statistics},
        {7, "self-consistency coverage", self_consistency},
        {8, "portfolio catalog", catalog_counts},
        {9, "scenario performance", performance},
        {10, "end-to-end smoke", end_to_end_smoke},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        try {
            selected.insert(std::stoi(argv[i]));
        } catch (const std::exception&) {
            std::cerr << "usage: " << argv[0] << " [criterion number ...]\n";
            return 2;
        }
    }
    int failures = 0;
    for (const Criterion& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) {
            continue;
        }
        Timer timer;
        Outcome outcome;
        try {
            outcome = c.run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("error: ") + e.what()};
        }
        failures += outcome.pass ? 0 : 1;
        std::cout << (outcome.pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": "
                  << outcome.detail << " [" << fmt(timer.seconds(), 3) << " s]" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
