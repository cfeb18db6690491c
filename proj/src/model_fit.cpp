#include "optrisk/dynamics.hpp"

#include "optrisk/errors.hpp"

#include <cmath>

namespace optrisk {

ModelFit fit_model_set(const FactorModel& factors, const SurfacePanel& panel, const ModelFitOptions& options) {
    const Eigen::Index L = panel.rows();
    if (factors.xi.rows() != L) {
        throw DomainError("fit_model_set: factor series and panel have different lengths");
    }
    const double dt = panel.dt;
    std::vector<bool> usable(static_cast<std::size_t>(std::max<Eigen::Index>(L - 1, 0)));
    for (Eigen::Index t = 0; t + 1 < L; ++t) {
        usable[static_cast<std::size_t>(t)] = panel.consecutive(t);
    }

    ModelFit fit;
    ModelSet& m = fit.models;
    m.dt = dt;

    std::map<std::string, double> drift;
    for (Eigen::Index t = 0; t < L;) {
        Eigen::Index end = t + 1;
        while (end < L && panel.consecutive(end - 1)) {
            ++end;
        }
        const std::string& label = panel.labels[static_cast<std::size_t>(t)];
        if (drift.count(label)) {
            throw DomainError("fit_model_set: rows of underlying " + label + " are not contiguous");
        }
        drift[label] = estimate_index_drift({panel.spot.begin() + t, panel.spot.begin() + end}, dt);
        t = end;
    }
    const IndexTransitions index_data = index_transitions(factors.xi, panel.spot, panel.labels, usable);
    TrainedIndex index = train_index_vol(index_data, drift, dt, options.index_training);
    m.index = std::move(index.model);
    m.index_history = std::move(index.history);

    FactorTransitions data = factor_transitions(factors.xi, usable, factors.arbitrage_flags);
    if (options.joint) {
        for (Eigen::Index k = 0; k < data.from.rows(); ++k) {
            const Eigen::Index t = data.origin[static_cast<std::size_t>(k)];
            const double log_return = std::log(panel.spot[static_cast<std::size_t>(t + 1)] /
                                               panel.spot[static_cast<std::size_t>(t)]);
            data.index_shock(k) = (log_return - m.index.drift_for(panel.labels[static_cast<std::size_t>(t)]) * dt) /
                                  m.index.vol(data.from.row(k).transpose());
        }
    }
    const BoundaryTransform boundary =
        BoundaryTransform::from_data(factors.constraints, factors.xi, options.damping_fraction);
    TrainedFactors trained = train_factor_sde(data, boundary, dt, options.factor_training, options.joint);
    if (trained.history.dropped_samples > 0) {
        fit.warnings.push_back("fit_model_set: " + std::to_string(trained.history.dropped_samples) +
                               " transitions start on or outside the polytope boundary and were not used for training");
    }
    m.factors = std::move(trained.model);
    m.factor_history = std::move(trained.history);
    m.constraint_hash = constraint_hash(m.factors.boundary.constraints());

    for (Eigen::Index j = 0; j < factors.secondary(); ++j) {
        std::vector<double> from, to;
        for (Eigen::Index t = 0; t + 1 < L; ++t) {
            if (usable[static_cast<std::size_t>(t)]) {
                from.push_back(factors.xi_sec(t, j));
                to.push_back(factors.xi_sec(t + 1, j));
            }
        }
        const OUFit ou = fit_ou(Eigen::Map<const Eigen::VectorXd>(from.data(), static_cast<Eigen::Index>(from.size())),
                                Eigen::Map<const Eigen::VectorXd>(to.data(), static_cast<Eigen::Index>(to.size())), dt);
        if (!ou.warning.empty()) {
            fit.warnings.push_back("secondary factor " + std::to_string(j + 1) + ": " + ou.warning);
        }
        m.secondary.push_back(ou.params);
    }

    std::vector<std::string> dates = panel.dates;
    m.residuals = compute_residuals(m.factors, m.index, factors.xi, panel.spot, panel.labels, dates, usable, dt);
    return fit;
}

}  // namespace optrisk
