#include "optrisk/scenario.hpp"

#include "optrisk/black_scholes.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/io.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <ostream>
#include <thread>

namespace optrisk {

InnovationMode parse_innovation_mode(const std::string& name) {
    if (name == "bootstrap") {
        return InnovationMode::bootstrap;
    }
    if (name == "gaussian") {
        return InnovationMode::gaussian;
    }
    throw UsageError("unknown innovation mode '" + name + "' (expected bootstrap or gaussian)");
}

const char* to_string(InnovationMode mode) { return mode == InnovationMode::bootstrap ? "bootstrap" : "gaussian"; }

InnovationSampler::InnovationSampler(InnovationMode mode, const ResidualBank* bank, Eigen::Index width, double dt)
    : mode_(mode), bank_(bank), width_(width), scale_(std::sqrt(dt)) {
    if (!(dt > 0.0) || width < 1) {
        throw DomainError("InnovationSampler: dt must be positive and width at least 1");
    }
    if (mode == InnovationMode::bootstrap) {
        if (!bank || bank->size() == 0) {
            throw DomainError("InnovationSampler: bootstrap needs a non-empty residual bank");
        }
        if (bank->rows.cols() != width) {
            throw DomainError("InnovationSampler: residual bank has " + std::to_string(bank->rows.cols()) +
                              " columns, expected " + std::to_string(width));
        }
    }
}

void InnovationSampler::draw(RandomStream& rng, Eigen::Ref<Eigen::VectorXd> out) const {
    if (mode_ == InnovationMode::bootstrap) {
        const auto row = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(bank_->size())));
        out = bank_->rows.row(row).transpose();
        return;
    }
    for (Eigen::Index i = 0; i < width_; ++i) {
        out(i) = scale_ * rng.normal();
    }
}

TamedStep tamed_euler_step(double spot, const Eigen::VectorXd& xi, double index_drift,
                           const TransformedCoefficients& c, double index_vol, const Eigen::VectorXd& innovation,
                           double dt) {
    const Eigen::Index d = xi.size();
    if (innovation.size() != d + 1 || c.drift.size() != d || c.diffusion.rows() != d) {
        throw DomainError("tamed_euler_step: innovation must have d + 1 entries");
    }
    const double root_dt = std::sqrt(dt);
    const double z_index = innovation(0);
    Eigen::VectorXd noise(c.diffusion.cols());
    noise.head(d) = innovation.tail(d);
    if (c.diffusion.cols() == d + 1) {
        noise(d) = z_index;
    }
    TamedStep next;
    next.xi = xi + c.drift * (dt / (1.0 + c.drift.norm() * root_dt)) +
              c.diffusion * noise / (1.0 + c.diffusion.norm() * root_dt);
    next.spot = spot * std::exp(index_drift * dt + index_vol / (1.0 + std::abs(index_vol) * root_dt) * z_index);
    return next;
}

TamedStep tamed_euler_step(double spot, const Eigen::VectorXd& xi, const ModelSet& models, const std::string& label,
                           const Eigen::VectorXd& innovation, double dt) {
    return tamed_euler_step(spot, xi, models.index.drift_for(label), models.factors.evaluate(xi),
                            models.index.vol(xi), innovation, dt);
}

double step_to_boundary(const FactorConstraintSystem& constraints, const Eigen::VectorXd& xi,
                        const Eigen::VectorXd& step, double fraction) {
    const Eigen::VectorXd slack = constraints.A * xi - constraints.b;
    const Eigen::VectorXd change = constraints.A * step;
    double theta = 1.0;
    bool leaves = false;
    for (Eigen::Index i = 0; i < slack.size(); ++i) {
        if (slack(i) + change(i) <= 0.0) {
            leaves = true;
        }
        if (change(i) < 0.0) {
            theta = std::min(theta, fraction * slack(i) / -change(i));
        }
    }
    return leaves ? theta : 1.0;
}

double ou_transition(const OUParams& p, double x, double dt, double normal) {
    const double decay = std::exp(-p.reversion * dt);
    const double variance = p.vol * p.vol * -std::expm1(-2.0 * p.reversion * dt) / (2.0 * p.reversion);
    return p.level + (x - p.level) * decay + std::sqrt(variance) * normal;
}

ScenarioEngine::ScenarioEngine(const ModelSet& models, const FactorModel& factors, const ConstraintSystem& constraints)
    : models_(models), factors_(factors), constraints_(constraints) {
    const Eigen::Index k = secondary_count();
    if (k > factors.secondary()) {
        throw DomainError("ScenarioEngine: " + std::to_string(k) + " secondary OU models but only " +
                          std::to_string(factors.secondary()) + " secondary factors");
    }
    if (models.factors.dimension() != factors.primary()) {
        throw DomainError("ScenarioEngine: dynamics and factor model disagree on the primary dimension");
    }
    if (constraints.A.cols() != static_cast<Eigen::Index>(factors.lattice.size())) {
        throw DomainError("ScenarioEngine: price constraints do not match the lattice");
    }
    secondary_basis_ = factors.G_sec.topRows(k) * factors.weights.inverse().asDiagonal();
}

Eigen::VectorXd ScenarioEngine::surface(const Eigen::VectorXd& xi, const Eigen::VectorXd& xi_sec) const {
    return factors_.prices(xi, xi_sec);
}

bool ScenarioEngine::repair_secondary(const Eigen::VectorXd& xi, Eigen::VectorXd& xi_sec) const {
    if (detect(constraints_, surface(xi, xi_sec)).clean()) {
        return false;
    }
    const Eigen::VectorXd base = factors_.prices(xi, Eigen::VectorXd::Zero(0));
    xi_sec = repair_in_basis(constraints_.A, constraints_.b, base, secondary_basis_, xi_sec);
    return true;
}

MarketState ScenarioEngine::decode_state(const Eigen::VectorXd& prices, double spot, const std::string& label) const {
    if (prices.size() != static_cast<Eigen::Index>(factors_.lattice.size())) {
        throw DomainError("decode_state: price row does not match the lattice");
    }
    const Eigen::VectorXd weighted = factors_.weights.lambda.cwiseProduct(prices);
    MarketState state;
    state.spot = spot;
    state.label = label;
    state.xi = solve_factors(weighted, factors_.G0, factors_.G);
    const Eigen::VectorXd rest = weighted - factors_.G0 - factors_.G.transpose() * state.xi;
    state.xi_sec = factors_.G_sec.topRows(secondary_count()) * rest;
    return state;
}

void ScenarioEngine::run_block(const MarketState& start, std::size_t steps, std::uint64_t first, std::uint64_t count,
                               const SimulationOptions& options, std::vector<Scenario>& out,
                               SimulationStats& stats) const {
    const FactorDynamics& fd = models_.factors;
    const Eigen::Index d = fd.dimension();
    const Eigen::Index ds = secondary_count();
    const auto n = static_cast<Eigen::Index>(count);
    const double dt = models_.dt;
    const double index_drift = models_.index.drift_for(start.label);
    const InnovationSampler sampler(options.mode, &models_.residuals, d + 1, dt);

    std::vector<RandomStream> rng;
    rng.reserve(count);
    for (std::uint64_t k = 0; k < count; ++k) {
        rng.emplace_back(options.seed, first + k);
    }
    Eigen::MatrixXd xi = start.xi.transpose().replicate(n, 1);
    Eigen::MatrixXd sec = start.xi_sec.transpose().replicate(n, 1);
    Eigen::VectorXd spot = Eigen::VectorXd::Constant(n, start.spot);
    std::vector<Eigen::MatrixXd> paths;
    if (options.keep_paths) {
        paths.assign(count, Eigen::MatrixXd(static_cast<Eigen::Index>(steps) + 1, 1 + d + ds));
        for (auto& p : paths) {
            p.row(0) << start.spot, start.xi.transpose(), start.xi_sec.transpose();
        }
    }

    std::vector<Eigen::VectorXd> raw_drift;
    std::vector<Eigen::MatrixXd> raw_diffusion;
    Eigen::VectorXd innovation(d + 1);
    for (std::size_t step = 0; step < steps; ++step) {
        fd.raw(xi, raw_drift, raw_diffusion);
        const Eigen::VectorXd vols = models_.index.vols(xi);
        for (Eigen::Index k = 0; k < n; ++k) {
            const Eigen::VectorXd x = xi.row(k).transpose();
            const auto c = transform_outputs(raw_drift[static_cast<std::size_t>(k)],
                                             raw_diffusion[static_cast<std::size_t>(k)], x, fd.boundary);
            auto& stream = rng[static_cast<std::size_t>(k)];
            sampler.draw(stream, innovation);
            TamedStep next = tamed_euler_step(spot(k), x, index_drift, c, vols(k), innovation, dt);
            const double theta =
                step_to_boundary(fd.boundary.constraints(), x, next.xi - x, options.boundary_fraction);
            if (theta < 1.0) {
                next.xi = x + theta * (next.xi - x);
                ++stats.safeguarded_steps;
            }
            xi.row(k) = next.xi.transpose();
            spot(k) = next.spot;
            for (Eigen::Index j = 0; j < ds; ++j) {
                sec(k, j) = ou_transition(models_.secondary[static_cast<std::size_t>(j)], sec(k, j), dt,
                                          stream.normal());
            }
            if (options.keep_paths) {
                paths[static_cast<std::size_t>(k)].row(static_cast<Eigen::Index>(step) + 1) << spot(k), xi.row(k),
                    sec.row(k);
            }
        }
        stats.steps += count;
    }

    for (Eigen::Index k = 0; k < n; ++k) {
        Scenario s;
        s.id = first + static_cast<std::uint64_t>(k);
        s.spot = spot(k);
        s.xi = xi.row(k).transpose();
        s.xi_sec = sec.row(k).transpose();
        if (options.repair && ds > 0) {
            s.repaired = repair_secondary(s.xi, s.xi_sec);
            stats.repaired += s.repaired ? 1 : 0;
        }
        s.surface = surface(s.xi, s.xi_sec);
        if (options.keep_paths) {
            s.path = std::move(paths[static_cast<std::size_t>(k)]);
            s.path.bottomRightCorner(1, ds) = s.xi_sec.transpose();
        }
        out[static_cast<std::size_t>(s.id)] = std::move(s);
    }
}

ScenarioSet ScenarioEngine::simulate(const MarketState& start, double horizon, std::size_t count,
                                     const SimulationOptions& options) const {
    const double dt = models_.dt;
    const double ratio = horizon / dt;
    const auto steps = static_cast<std::size_t>(std::llround(ratio));
    if (!(horizon > 0.0) || steps == 0 || std::abs(ratio - static_cast<double>(steps)) > 1e-9 * std::max(1.0, ratio)) {
        throw DomainError("simulate: horizon must be a positive multiple of dt");
    }
    if (start.xi.size() != models_.factors.dimension() || start.xi_sec.size() != secondary_count()) {
        throw DomainError("simulate: state dimensions do not match the models");
    }
    if (!models_.factors.boundary.interior(start.xi)) {
        throw DomainError("simulate: initial factors lie outside the no-arbitrage polytope");
    }
    if (!(start.spot > 0.0)) {
        throw DomainError("simulate: spot must be positive");
    }
    if (options.batch == 0 || !(options.boundary_fraction > 0.0 && options.boundary_fraction < 1.0)) {
        throw DomainError("simulate: batch must be positive and boundary_fraction in (0, 1)");
    }
    ScenarioSet set;
    set.horizon = horizon;
    set.steps = steps;
    set.seed = options.seed;
    set.scenarios.resize(count);

    const std::size_t blocks = (count + options.batch - 1) / options.batch;
    const unsigned threads =
        std::max(1u, std::min<unsigned>(options.threads == 0 ? std::thread::hardware_concurrency() : options.threads,
                                        static_cast<unsigned>(std::max<std::size_t>(blocks, 1))));
    std::vector<SimulationStats> stats(threads);
    std::vector<std::exception_ptr> errors(threads);
    auto worker = [&](unsigned w) {
        try {
            for (std::size_t b = w; b < blocks; b += threads) {
                const std::size_t first = b * options.batch;
                const std::size_t size = std::min(options.batch, count - first);
                run_block(start, steps, first, size, options, set.scenarios, stats[w]);
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < threads; ++w) {
            pool.emplace_back(worker, w);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    for (unsigned w = 0; w < threads; ++w) {
        if (errors[w]) {
            std::rethrow_exception(errors[w]);
        }
        set.stats.steps += stats[w].steps;
        set.stats.safeguarded_steps += stats[w].safeguarded_steps;
        set.stats.repaired += stats[w].repaired;
    }
    return set;
}

void write_scenarios(std::ostream& out, const ScenarioSet& set, const LiquidLattice& lattice) {
    if (set.scenarios.empty()) {
        return;
    }
    const Scenario& head = set.scenarios.front();
    out << "scenario,step,spot";
    for (Eigen::Index j = 0; j < head.xi.size(); ++j) {
        out << ",xi" << j + 1;
    }
    for (Eigen::Index j = 0; j < head.xi_sec.size(); ++j) {
        out << ",xi_sec" << j + 1;
    }
    for (std::size_t j = 0; j < lattice.size(); ++j) {
        out << ",c" << j;
    }
    out << '\n';
    for (const Scenario& s : set.scenarios) {
        const Eigen::MatrixXd path = s.path.rows() > 0 ? s.path : [&] {
            Eigen::MatrixXd last(1, 1 + s.xi.size() + s.xi_sec.size());
            last << s.spot, s.xi.transpose(), s.xi_sec.transpose();
            return last;
        }();
        for (Eigen::Index r = 0; r < path.rows(); ++r) {
            out << s.id << ',' << (s.path.rows() > 0 ? static_cast<std::size_t>(r) : set.steps);
            for (Eigen::Index c = 0; c < path.cols(); ++c) {
                out << ',' << format_double(path(r, c));
            }
            const bool last = r + 1 == path.rows();
            for (Eigen::Index j = 0; j < s.surface.size(); ++j) {
                out << ',';
                if (last) {
                    out << format_double(s.surface(j));
                }
            }
            out << '\n';
        }
    }
}

SurfaceInterpolant::SurfaceInterpolant(const LiquidLattice& lattice, const Eigen::VectorXd& prices) {
    if (prices.size() != static_cast<Eigen::Index>(lattice.size()) || lattice.size() == 0) {
        throw DomainError("SurfaceInterpolant: price row does not match the lattice");
    }
    const auto& groups = lattice.groups();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto [begin, end] = groups[g];
        std::vector<double> m, c;
        for (std::size_t j = begin; j < end; ++j) {
            m.push_back(lattice[j].m);
            c.push_back(prices(static_cast<Eigen::Index>(j)));
        }
        Slice slice;
        slice.tau = lattice.expiries()[g];
        auto edge_vol = [&](double price, double moneyness) {
            try {
                return implied_vol(price, slice.tau, moneyness);
            } catch (const InversionError&) {
                return 0.0;  // at or below intrinsic: the wing carries no time value
            }
        };
        slice.left_vol = edge_vol(c.front(), m.front());
        slice.right_vol = edge_vol(c.back(), m.back());
        if (m.size() == 1) {
            m.push_back(m.front() + 1e-9);
            c.push_back(c.front());
        }
        slice.spline = CubicSpline(std::move(m), std::move(c));
        slices_.push_back(std::move(slice));
    }
}

double SurfaceInterpolant::slice_value(const Slice& s, double m) const {
    if (m < s.spline.front()) {
        return bs_price(s.tau, m, s.left_vol);
    }
    if (m > s.spline.back()) {
        return bs_price(s.tau, m, s.right_vol);
    }
    return s.spline(m);
}

double SurfaceInterpolant::operator()(double tau, double m) const {
    if (!std::isfinite(tau) || !std::isfinite(m) || !contains(tau)) {
        throw InterpolationError("surface: tau=" + std::to_string(tau) + " outside [0, " +
                                 std::to_string(max_tau()) + "] or non-finite m");
    }
    const auto above = std::lower_bound(slices_.begin(), slices_.end(), tau,
                                        [](const Slice& s, double t) { return s.tau < t; });
    if (above->tau == tau) {
        return slice_value(*above, m);
    }
    // Before the first expiry the implied vol at m is held flat.
    if (above == slices_.begin()) {
        double vol = 0.0;
        try {
            vol = implied_vol(slice_value(*above, m), above->tau, m);
        } catch (const InversionError&) {
        }
        return bs_price(tau, m, vol);
    }
    const Slice& below = *(above - 1);
    const double w = (tau - below.tau) / (above->tau - below.tau);
    return (1.0 - w) * slice_value(below, m) + w * slice_value(*above, m);
}

double revalue_contract(const Contract& contract, double horizon, double spot_now, double spot_next,
                        const SurfaceInterpolant& surface) {
    if (!(spot_now > 0.0 && spot_next > 0.0)) {
        throw RevaluationError("revalue " + contract.name + ": spot must be positive");
    }
    try {
        return spot_next * surface(contract.tau - horizon, contract.m + std::log(spot_now / spot_next));
    } catch (const InterpolationError& e) {
        throw RevaluationError("revalue " + contract.name + ": " + e.what());
    }
}

double strip_variance(const std::vector<double>& strikes, const std::vector<double>& calls,
                      const std::vector<double>& puts, double tau) {
    const std::size_t n = strikes.size();
    if (n < 2 || calls.size() != n || puts.size() != n || !(tau > 0.0)) {
        throw DomainError("strip_variance: need at least two strikes with call and put prices");
    }
    std::size_t k0 = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0 && !(strikes[i] > strikes[i - 1])) {
            throw DomainError("strip_variance: strikes must increase");
        }
        if (strikes[i] <= 1.0) {
            k0 = i;
        }
    }
    if (k0 == n) {
        throw DomainError("strip_variance: no strike at or below the forward");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double spacing = i == 0       ? strikes[1] - strikes[0]
                               : i + 1 == n ? strikes[n - 1] - strikes[n - 2]
                                            : 0.5 * (strikes[i + 1] - strikes[i - 1]);
        const double otm = i < k0 ? puts[i] : i > k0 ? calls[i] : 0.5 * (calls[i] + puts[i]);
        sum += spacing / (strikes[i] * strikes[i]) * otm;
    }
    const double gap = 1.0 / strikes[k0] - 1.0;
    return 2.0 / tau * sum - gap * gap / tau;
}

double vix_index(const Eigen::VectorXd& row, const LiquidLattice& lattice, double target_tau) {
    if (row.size() != static_cast<Eigen::Index>(lattice.size())) {
        throw DomainError("vix_index: row does not match the lattice");
    }
    const auto& expiries = lattice.expiries();
    const auto above = std::lower_bound(expiries.begin(), expiries.end(), target_tau);
    if (above == expiries.end() || (*above != target_tau && above == expiries.begin())) {
        throw DomainError("vix_index: no expiries bracket tau=" + std::to_string(target_tau));
    }
    auto variance = [&](std::size_t g) {
        const auto [begin, end] = lattice.groups()[g];
        std::vector<double> k, c, p;
        for (std::size_t j = begin; j < end; ++j) {
            const double strike = std::exp(lattice[j].m);
            const double call = row(static_cast<Eigen::Index>(j));
            k.push_back(strike);
            c.push_back(call);
            p.push_back(call - (1.0 - strike));
        }
        return strip_variance(k, c, p, expiries[g]);
    };
    const auto g2 = static_cast<std::size_t>(above - expiries.begin());
    double total;
    if (*above == target_tau) {
        total = variance(g2) * target_tau;
    } else {
        const std::size_t g1 = g2 - 1;
        const double t1 = expiries[g1], t2 = expiries[g2];
        const double w1 = (t2 - target_tau) / (t2 - t1);
        total = w1 * t1 * variance(g1) + (1.0 - w1) * t2 * variance(g2);
    }
    if (!(total > 0.0)) {
        throw NumericError("vix_index: non-positive strip variance");
    }
    return 100.0 * std::sqrt(total / target_tau);
}

VixStrip vix_strip(const LiquidLattice& lattice, double target_tau) {
    const auto& expiries = lattice.expiries();
    const auto above = std::lower_bound(expiries.begin(), expiries.end(), target_tau);
    if (above == expiries.end() || (*above != target_tau && above == expiries.begin())) {
        throw DomainError("vix_strip: no expiries bracket tau=" + std::to_string(target_tau));
    }
    const auto g2 = static_cast<std::size_t>(above - expiries.begin());
    std::vector<std::pair<std::size_t, double>> parts;  // expiry group, weight on its variance
    if (*above == target_tau) {
        parts.emplace_back(g2, 1.0);
    } else {
        const double t1 = expiries[g2 - 1], t2 = expiries[g2];
        const double w1 = (t2 - target_tau) / (t2 - t1);
        parts.emplace_back(g2 - 1, w1 * t1 / target_tau);
        parts.emplace_back(g2, (1.0 - w1) * t2 / target_tau);
    }
    VixStrip strip;
    for (const auto& [g, share] : parts) {
        const auto [begin, end] = lattice.groups()[g];
        const std::size_t n = end - begin;
        if (n < 2) {
            throw DomainError("vix_strip: need at least two strikes per expiry");
        }
        std::vector<double> k(n);
        std::size_t k0 = n;
        for (std::size_t i = 0; i < n; ++i) {
            k[i] = std::exp(lattice[begin + i].m);
            if (k[i] <= 1.0) {
                k0 = i;
            }
        }
        if (k0 == n) {
            throw DomainError("vix_strip: no strike at or below the forward");
        }
        const double tau = expiries[g];
        for (std::size_t i = 0; i < n; ++i) {
            const double spacing = i == 0       ? k[1] - k[0]
                                   : i + 1 == n ? k[n - 1] - k[n - 2]
                                                : 0.5 * (k[i + 1] - k[i - 1]);
            const double w = share * 2.0 / tau * spacing / (k[i] * k[i]);
            // A put is c - 1 + k; at k0 the quote is half a put.
            const double put_share = i < k0 ? 1.0 : i == k0 ? 0.5 : 0.0;
            strip.nodes.push_back(begin + i);
            strip.calls.push_back(w);
            strip.underlying -= w * put_share;
            strip.constant += w * put_share * k[i];
        }
        const double gap = 1.0 / k[k0] - 1.0;
        strip.constant -= share * gap * gap / tau;
    }
    return strip;
}

}  // namespace optrisk
