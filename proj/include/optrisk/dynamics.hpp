#pragma once

#include "optrisk/factor_model.hpp"
#include "optrisk/market_data.hpp"
#include "optrisk/mlp.hpp"
#include "optrisk/static_arbitrage.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace optrisk {

// Keeps factor dynamics inside the polytope A xi >= b. Near a facet (normalized
// distance below damping_length) the facet-normal part of the diffusion is
// scaled by distance / damping_length, and the drift is moved by the smallest
// amount that satisfies 2 (a_i . mu) s_i >= |a_i^T sigma|^2 with slack
// s_i = a_i . xi - b_i.
class BoundaryTransform {
public:
    BoundaryTransform() = default;
    BoundaryTransform(FactorConstraintSystem constraints, double damping_length);

    // damping_length = fraction * inradius; the inradius is capped by the data
    // extent so unbounded polytopes still get a finite length.
    static BoundaryTransform from_data(const FactorConstraintSystem& constraints, const Eigen::MatrixXd& data,
                                       double fraction = 0.05);

    const FactorConstraintSystem& constraints() const { return constraints_; }
    double damping_length() const { return damping_length_; }
    Eigen::Index dimension() const { return constraints_.A.cols(); }

    Eigen::VectorXd slack(const Eigen::VectorXd& xi) const;
    bool interior(const Eigen::VectorXd& xi) const;

    // Facets within the damping length at xi and the diffusion damping matrix.
    struct Geometry {
        std::vector<Eigen::Index> active;
        Eigen::VectorXd slack;
        Eigen::MatrixXd damping;
    };
    Geometry geometry(const Eigen::VectorXd& xi) const;

    // Drift correction result: corrected drift and the facets whose constraint binds.
    struct DriftCorrection {
        Eigen::VectorXd drift;
        std::vector<Eigen::Index> binding;
    };
    DriftCorrection correct_drift(const Eigen::VectorXd& raw_drift, const Eigen::MatrixXd& diffusion,
                                  const Geometry& g) const;

    // Required a_i . mu for facet i.
    double required_drift(Eigen::Index facet, const Eigen::MatrixXd& diffusion, double slack) const;

    static constexpr double requirement_margin = 1e-9;

private:
    FactorConstraintSystem constraints_;
    double damping_length_ = 0.0;
    Eigen::VectorXd row_norms_;
};

struct TransformedCoefficients {
    Eigen::VectorXd drift;
    Eigen::MatrixXd diffusion;  // d x d, or d x (d+1) in the joint variant (last column loads on the index shock)
};

// Boundary-safe drift and diffusion. Throws DomainError when xi is not strictly inside.
TransformedCoefficients transform_outputs(const Eigen::VectorXd& raw_drift, const Eigen::MatrixXd& raw_diffusion,
                                          const Eigen::VectorXd& xi, const BoundaryTransform& boundary);

struct TrainingConfig {
    std::vector<int> hidden = {256, 256, 256};
    int epochs = 100;
    std::size_t batch = 256;
    double learning_rate = 1e-3;
    double validation_fraction = 0.1;
    double sparsity = 0.5;  // pruned after half the epochs; 0 disables
    std::uint64_t seed = 1;
};

struct TrainingHistory {
    std::vector<double> train_loss;       // per epoch
    std::vector<double> validation_loss;  // front() is before training
    int prune_epoch = -1;
    std::size_t train_samples = 0;
    std::size_t validation_samples = 0;
    std::size_t dropped_samples = 0;  // not strictly inside the polytope
};

// Input standardization shared by the networks.
struct InputScaling {
    Eigen::VectorXd shift;
    Eigen::VectorXd scale;

    Eigen::MatrixXd apply(const Eigen::MatrixXd& rows) const;  // rows x d -> d x rows
};

// Neural SDE for the primary factors: d xi = mu(xi) dt + sigma(xi) dW.
struct FactorDynamics {
    Mlp drift_net;      // d -> d
    Mlp diffusion_net;  // d -> d(d+1)/2 (+ d in the joint variant)
    InputScaling input;
    Eigen::VectorXd drift_bias;       // mu_raw = drift_bias + drift_scale * net
    Eigen::VectorXd drift_scale;
    Eigen::VectorXd diffusion_scale;  // row scale of the lower-triangular factor
    BoundaryTransform boundary;
    bool joint = false;

    Eigen::Index dimension() const { return drift_bias.size(); }
    Eigen::Index noise_columns() const { return dimension() + (joint ? 1 : 0); }

    // Untransformed outputs at a batch of points (rows).
    void raw(const Eigen::MatrixXd& points, std::vector<Eigen::VectorXd>& drift,
             std::vector<Eigen::MatrixXd>& diffusion) const;
    TransformedCoefficients evaluate(const Eigen::VectorXd& xi) const;
    TransformedCoefficients evaluate_raw(const Eigen::VectorXd& xi) const;
};

// One-step transitions used for estimation. index_shock is only read by the
// joint variant.
struct FactorTransitions {
    Eigen::MatrixXd from;       // n x d
    Eigen::MatrixXd increment;  // n x d
    Eigen::VectorXd index_shock;
    std::vector<Eigen::Index> origin;  // panel row of each transition
};

// usable_step[t] says rows t and t+1 are consecutive dates of one underlying;
// excluded[t] marks arbitrage-flagged rows, which neither start nor end a transition.
FactorTransitions factor_transitions(const Eigen::MatrixXd& xi, const std::vector<bool>& usable_step,
                                     const std::vector<bool>& excluded);

FactorDynamics init_factor_dynamics(const FactorTransitions& data, const BoundaryTransform& boundary, double dt,
                                    const TrainingConfig& config, bool joint = false);

// Mean Gaussian transition NLL over the given samples; adds the gradient with
// respect to [drift_net, diffusion_net] parameters when grad is set.
double factor_loss(const FactorDynamics& model, const FactorTransitions& data, const std::vector<std::size_t>& samples,
                   double dt, Eigen::VectorXd* grad = nullptr);

Eigen::VectorXd factor_parameters(const FactorDynamics& model);
void set_factor_parameters(FactorDynamics& model, const Eigen::VectorXd& p);

struct TrainedFactors {
    FactorDynamics model;
    TrainingHistory history;
};

TrainedFactors train_factor_sde(const FactorTransitions& data, const BoundaryTransform& boundary, double dt,
                                const TrainingConfig& config, bool joint = false);

// d ln S = r dt + gamma(xi) dW0 with a constant r per underlying.
struct IndexDynamics {
    std::map<std::string, double> drift;
    Mlp vol_net;  // d -> 1, gamma = exp(net + log_vol_bias)
    InputScaling input;
    double log_vol_bias = 0.0;

    double vol(const Eigen::VectorXd& xi) const;
    Eigen::VectorXd vols(const Eigen::MatrixXd& points) const;
    double drift_for(const std::string& label) const;
};

struct IndexTransitions {
    Eigen::MatrixXd from;      // n x d factors at the start of the step
    Eigen::VectorXd log_return;
    std::vector<std::string> label;
    std::vector<Eigen::Index> origin;
};

IndexTransitions index_transitions(const Eigen::MatrixXd& xi, const std::vector<double>& spot,
                                   const std::vector<std::string>& labels, const std::vector<bool>& usable_step);

// ln(S_T / S_0) / T with T = (n - 1) dt.
double estimate_index_drift(const std::vector<double>& spot, double dt);

IndexDynamics init_index_dynamics(const IndexTransitions& data, const std::map<std::string, double>& drift, double dt,
                                  const TrainingConfig& config);
double index_loss(const IndexDynamics& model, const IndexTransitions& data, const std::vector<std::size_t>& samples,
                  double dt, Eigen::VectorXd* grad = nullptr);

struct TrainedIndex {
    IndexDynamics model;
    TrainingHistory history;
};

TrainedIndex train_index_vol(const IndexTransitions& data, const std::map<std::string, double>& drift, double dt,
                             const TrainingConfig& config);

struct OUParams {
    double reversion = 1.0;  // per year
    double level = 0.0;
    double vol = 0.0;  // per sqrt(year)
};

struct OUFit {
    OUParams params;
    double ar_slope = 0.0;
    double ar_intercept = 0.0;
    double ar_variance = 0.0;
    bool mean_reverting = true;
    std::string warning;
};

// Exact AR(1) Gaussian MLE mapped through the Euler discretization
// a = 1 - kappa dt, b = kappa theta dt, s^2 = sigma^2 dt.
OUFit fit_ou(const Eigen::VectorXd& series, double dt);
// Same fit on explicit (x_t, x_{t+1}) pairs, for series with breaks.
OUFit fit_ou(const Eigen::VectorXd& from, const Eigen::VectorXd& to, double dt);

struct GarchFit {
    double omega = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double log_likelihood = 0.0;
    Eigen::VectorXd annualized_vol;  // conditional vol per return, plus the next-step forecast
    int evaluations = 0;
};

// Gaussian QMLE of GARCH(1,1) on demeaned returns, alpha + beta < 1 by construction.
GarchFit fit_garch11(const Eigen::VectorXd& returns, double dt);

// Standardized historical residuals: column 0 is the index, the rest the
// primary factors. Rows scale like sqrt(dt) standard normals.
struct ResidualBank {
    Eigen::MatrixXd rows;
    std::vector<std::string> labels;
    std::vector<std::string> dates;

    Eigen::Index size() const { return rows.rows(); }
};

// One row per consecutive step. Steps starting outside the polytope use the
// untransformed network outputs.
ResidualBank compute_residuals(const FactorDynamics& factors, const IndexDynamics& index, const Eigen::MatrixXd& xi,
                               const std::vector<double>& spot, const std::vector<std::string>& labels,
                               const std::vector<std::string>& dates, const std::vector<bool>& usable_step,
                               double dt);

struct ModelSet {
    double dt = 1.0 / 365.0;
    FactorDynamics factors;
    IndexDynamics index;
    std::vector<OUParams> secondary;
    ResidualBank residuals;
    TrainingHistory factor_history;
    TrainingHistory index_history;
    std::string constraint_hash;
};

struct ModelFitOptions {
    TrainingConfig factor_training;
    TrainingConfig index_training = {{128, 128, 128}, 100, 256, 1e-3, 0.1, 0.5, 2};
    bool joint = false;
    double damping_fraction = 0.05;
};

struct ModelFit {
    ModelSet models;
    std::vector<std::string> warnings;
};

// Trains every dynamics component on a decoded panel: index drift per label,
// index vol, primary factor SDE, OU per secondary factor, and the residual bank.
ModelFit fit_model_set(const FactorModel& factors, const SurfacePanel& panel, const ModelFitOptions& options);

std::string constraint_hash(const FactorConstraintSystem& constraints);
std::string model_set_to_json(const ModelSet& models);
ModelSet model_set_from_json(const std::string& text);

}  // namespace optrisk
