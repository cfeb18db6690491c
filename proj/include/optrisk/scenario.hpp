#pragma once

#include "optrisk/dynamics.hpp"
#include "optrisk/factor_model.hpp"
#include "optrisk/random.hpp"
#include "optrisk/spline.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace optrisk {

enum class InnovationMode { bootstrap, gaussian };

InnovationMode parse_innovation_mode(const std::string& name);
const char* to_string(InnovationMode mode);

// Joint innovation rows [Z_S, Z_xi]. Bootstrap copies one whole residual row;
// gaussian mode draws sqrt(dt) standard normals, matching the residual scale.
class InnovationSampler {
public:
    InnovationSampler(InnovationMode mode, const ResidualBank* bank, Eigen::Index width, double dt);

    Eigen::Index width() const { return width_; }
    void draw(RandomStream& rng, Eigen::Ref<Eigen::VectorXd> out) const;

private:
    InnovationMode mode_;
    const ResidualBank* bank_;
    Eigen::Index width_;
    double scale_;
};

struct TamedStep {
    double spot = 0.0;
    Eigen::VectorXd xi;
};

// One tamed Euler step from boundary-transformed coefficients. innovation is
// [Z_S, Z_xi]; in the joint variant the last diffusion column loads on Z_S.
TamedStep tamed_euler_step(double spot, const Eigen::VectorXd& xi, double index_drift,
                           const TransformedCoefficients& coefficients, double index_vol,
                           const Eigen::VectorXd& innovation, double dt);

// Same step with coefficients evaluated from the trained models.
TamedStep tamed_euler_step(double spot, const Eigen::VectorXd& xi, const ModelSet& models, const std::string& label,
                           const Eigen::VectorXd& innovation, double dt);

// Largest theta in (0, 1] with xi + theta step keeping at least (1 - fraction)
// of every shrinking slack; 1 when the full step stays strictly inside.
double step_to_boundary(const FactorConstraintSystem& constraints, const Eigen::VectorXd& xi,
                        const Eigen::VectorXd& step, double fraction);

// Exact OU transition over dt driven by one standard normal.
double ou_transition(const OUParams& params, double x, double dt, double normal);

struct MarketState {
    double spot = 0.0;
    Eigen::VectorXd xi;
    Eigen::VectorXd xi_sec;
    std::string label;
};

struct SimulationOptions {
    InnovationMode mode = InnovationMode::bootstrap;
    std::uint64_t seed = 1;
    bool keep_paths = false;
    bool repair = true;
    unsigned threads = 1;
    std::size_t batch = 256;          // scenarios evaluated together; fixed blocks keep results thread-independent
    double boundary_fraction = 0.5;   // share of the facet slack a safeguarded step may use
};

struct Scenario {
    std::uint64_t id = 0;
    double spot = 0.0;
    Eigen::VectorXd xi;
    Eigen::VectorXd xi_sec;
    Eigen::VectorXd surface;  // normalized lattice prices at the horizon
    bool repaired = false;
    Eigen::MatrixXd path;  // rows [S, xi, xi_sec] from the start, when paths are kept
};

struct SimulationStats {
    std::size_t steps = 0;
    std::size_t safeguarded_steps = 0;  // full tamed step would have left the polytope
    std::size_t repaired = 0;
};

struct ScenarioSet {
    double horizon = 0.0;
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    std::vector<Scenario> scenarios;
    SimulationStats stats;
};

// Simulates (S, xi, xi_sec) and the implied lattice surfaces. The referenced
// models must outlive the engine.
class ScenarioEngine {
public:
    ScenarioEngine(const ModelSet& models, const FactorModel& factors, const ConstraintSystem& constraints);

    const ModelSet& models() const { return models_; }
    const FactorModel& factors() const { return factors_; }
    Eigen::Index secondary_count() const { return static_cast<Eigen::Index>(models_.secondary.size()); }

    // Normalized prices for the factor values.
    Eigen::VectorXd surface(const Eigen::VectorXd& xi, const Eigen::VectorXd& xi_sec) const;

    // Perturbs secondary factors by minimal l1 so the surface is free of static
    // arbitrage. Returns false when no change was needed.
    bool repair_secondary(const Eigen::VectorXd& xi, Eigen::VectorXd& xi_sec) const;

    // Today's state from a normalized price row.
    MarketState decode_state(const Eigen::VectorXd& prices, double spot, const std::string& label) const;

    ScenarioSet simulate(const MarketState& start, double horizon, std::size_t count,
                         const SimulationOptions& options) const;

private:
    const ModelSet& models_;
    const FactorModel& factors_;
    const ConstraintSystem& constraints_;
    Eigen::MatrixXd secondary_basis_;  // first secondary rows of G_sec scaled by 1/lambda

    void run_block(const MarketState& start, std::size_t steps, std::uint64_t first, std::uint64_t count,
                   const SimulationOptions& options, std::vector<Scenario>& out, SimulationStats& stats) const;
};

// One row per scenario and step: id, step, S, xi..., xi_sec..., then the
// terminal surface on the last step of each scenario (empty fields before).
void write_scenarios(std::ostream& out, const ScenarioSet& set, const LiquidLattice& lattice);

// h(tau, m; c): natural cubic spline in m per expiry, linear in tau between
// expiries. Before the first expiry the implied vol at m is held flat, so the
// value reaches intrinsic at tau = 0. Beyond an expiry's m range the slice
// continues at the flat implied vol of its edge node.
class SurfaceInterpolant {
public:
    SurfaceInterpolant(const LiquidLattice& lattice, const Eigen::VectorXd& prices);

    double operator()(double tau, double m) const;
    bool contains(double tau) const { return tau >= 0.0 && tau <= slices_.back().tau; }
    double max_tau() const { return slices_.back().tau; }

private:
    struct Slice {
        double tau = 0.0;
        CubicSpline spline;
        double left_vol = 0.0;
        double right_vol = 0.0;
    };
    std::vector<Slice> slices_;

    double slice_value(const Slice& slice, double m) const;
};

// A call held from today: tau = T - t and m = ln(K / F_t).
struct Contract {
    std::string name;
    double tau = 0.0;
    double m = 0.0;
};

// S' h(tau - horizon, m + ln(S / S')). Throws RevaluationError naming the contract.
double revalue_contract(const Contract& contract, double horizon, double spot_now, double spot_next,
                        const SurfaceInterpolant& surface);

inline constexpr double vix_target_tau = 30.0 / 365.0;

// Variance of one expiry from OTM prices on normalized strikes (ascending):
// (2/tau) sum dk_i / k_i^2 q_i - (1/tau) (1/k0 - 1)^2, with k0 the largest
// strike at or below the forward and q at k0 the call/put average.
double strip_variance(const std::vector<double>& strikes, const std::vector<double>& calls,
                      const std::vector<double>& puts, double tau);

// Volatility index from one surface row; puts come from put-call parity
// p = c - (1 - k). Total variance is interpolated linearly to target_tau.
double vix_index(const Eigen::VectorXd& row, const LiquidLattice& lattice, double target_tau = vix_target_tau);

// The index variance as a linear function of normalized call prices:
// (index / 100)^2 = sum_j calls[j] c[nodes[j]] + underlying + constant, with
// the underlying and cash coming from put-call parity. Holding calls[j] calls
// and `underlying` units of the index replicates the variance up to cash.
struct VixStrip {
    std::vector<std::size_t> nodes;
    std::vector<double> calls;
    double underlying = 0.0;
    double constant = 0.0;
};

VixStrip vix_strip(const LiquidLattice& lattice, double target_tau = vix_target_tau);

}  // namespace optrisk
