#include "optrisk/dynamics.hpp"

#include "optrisk/errors.hpp"
#include "optrisk/lp.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>

namespace optrisk {

namespace {

constexpr double softplus_shift = 0.5413248546129181;  // softplus(shift) = 1

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::Index tri_size(Eigen::Index d) { return d * (d + 1) / 2; }
Eigen::Index tri_index(Eigen::Index row, Eigen::Index col) { return row * (row + 1) / 2 + col; }

}  // namespace

BoundaryTransform::BoundaryTransform(FactorConstraintSystem constraints, double damping_length)
    : constraints_(std::move(constraints)), damping_length_(damping_length) {
    if (!(damping_length > 0.0) || !std::isfinite(damping_length)) {
        throw DomainError("BoundaryTransform: damping length must be positive");
    }
    row_norms_ = constraints_.A.rowwise().norm();
    if (constraints_.rows() > 0 && !(row_norms_.minCoeff() > 0.0)) {
        throw DomainError("BoundaryTransform: zero constraint row");
    }
}

BoundaryTransform BoundaryTransform::from_data(const FactorConstraintSystem& constraints, const Eigen::MatrixXd& data,
                                               double fraction) {
    const Eigen::Index d = constraints.A.cols();
    if (data.cols() != d || data.rows() == 0) {
        throw DomainError("BoundaryTransform: data does not match the constraint dimension");
    }
    double extent = (data.colwise().maxCoeff() - data.colwise().minCoeff()).maxCoeff();
    if (!(extent > 0.0)) {
        extent = 1.0;
    }
    double radius = extent;
    if (constraints.rows() > 0) {
        const Eigen::VectorXd norms = constraints.A.rowwise().norm();
        LinearProgram lp;
        lp.objective = Eigen::VectorXd::Zero(d + 1);
        lp.objective(d) = -1.0;
        lp.ineq_A.resize(constraints.rows(), d + 1);
        lp.ineq_A << constraints.A, -norms;
        lp.ineq_b = constraints.b;
        lp.lower = Eigen::VectorXd::Constant(d + 1, -std::numeric_limits<double>::infinity());
        lp.lower(d) = 0.0;
        lp.upper = Eigen::VectorXd::Constant(d + 1, std::numeric_limits<double>::infinity());
        lp.upper(d) = extent;
        LpResult result = solve_lp(lp);
        if (result.status != LpStatus::optimal) {
            throw DomainError(std::string("BoundaryTransform: inradius LP ") + to_string(result.status));
        }
        radius = result.x(d);
    }
    if (!(radius > 0.0)) {
        throw DomainError("BoundaryTransform: factor polytope has empty interior");
    }
    return BoundaryTransform(constraints, fraction * radius);
}

Eigen::VectorXd BoundaryTransform::slack(const Eigen::VectorXd& xi) const {
    return constraints_.A * xi - constraints_.b;
}

bool BoundaryTransform::interior(const Eigen::VectorXd& xi) const {
    return constraints_.rows() == 0 || slack(xi).minCoeff() > 0.0;
}

BoundaryTransform::Geometry BoundaryTransform::geometry(const Eigen::VectorXd& xi) const {
    const Eigen::Index d = dimension();
    if (xi.size() != d) {
        throw DomainError("BoundaryTransform: point has the wrong dimension");
    }
    Geometry g;
    g.slack = slack(xi);
    g.damping = Eigen::MatrixXd::Identity(d, d);
    std::vector<std::pair<double, Eigen::Index>> near;
    for (Eigen::Index i = 0; i < g.slack.size(); ++i) {
        if (!(g.slack(i) > 0.0)) {
            throw DomainError("BoundaryTransform: point is not strictly inside facet " + std::to_string(i));
        }
        const double distance = g.slack(i) / row_norms_(i);
        if (distance < damping_length_) {
            near.emplace_back(distance, i);
        }
    }
    // Farthest facet first so the nearest facet's damping is exact.
    std::sort(near.begin(), near.end(), [](const auto& a, const auto& b) {
        return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    for (const auto& [distance, i] : near) {
        const Eigen::VectorXd n = constraints_.A.row(i).transpose() / row_norms_(i);
        const double f = distance / damping_length_;
        g.damping = (Eigen::MatrixXd::Identity(d, d) - (1.0 - f) * n * n.transpose()) * g.damping;
        g.active.push_back(i);
    }
    std::sort(g.active.begin(), g.active.end());
    return g;
}

double BoundaryTransform::required_drift(Eigen::Index facet, const Eigen::MatrixXd& diffusion, double slack) const {
    const Eigen::VectorXd load = diffusion.transpose() * constraints_.A.row(facet).transpose();
    return (1.0 + requirement_margin) * load.squaredNorm() / (2.0 * slack);
}

BoundaryTransform::DriftCorrection BoundaryTransform::correct_drift(const Eigen::VectorXd& raw_drift,
                                                                    const Eigen::MatrixXd& diffusion,
                                                                    const Geometry& g) const {
    DriftCorrection out;
    out.drift = raw_drift;
    const auto k = static_cast<Eigen::Index>(g.active.size());
    if (k == 0) {
        return out;
    }
    const Eigen::Index d = dimension();
    Eigen::MatrixXd A(k, d);
    Eigen::VectorXd required(k);
    for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index i = g.active[static_cast<std::size_t>(j)];
        A.row(j) = constraints_.A.row(i);
        required(j) = required_drift(i, diffusion, g.slack(i));
    }
    if (((A * raw_drift - required).array() >= 0.0).all()) {
        return out;
    }
    // min |mu - raw|^2 s.t. A mu >= required. With d <= 3 unknowns the KKT point
    // is found exactly by enumerating candidate active sets of at most d rows;
    // iterative schemes stall on nearly parallel facets.
    const Eigen::VectorXd limit = required / (1.0 + requirement_margin);
    auto rounding = [&](const Eigen::VectorXd& mu) {
        // Rounding in A mu scales with |A| |mu|, which can exceed the relative margin on tiny requirements.
        return Eigen::VectorXd(64.0 * std::numeric_limits<double>::epsilon() *
                               (A.cwiseAbs() * mu.cwiseAbs() + required.cwiseAbs()));
    };
    double best = std::numeric_limits<double>::infinity();
    std::vector<Eigen::Index> binding;
    std::vector<Eigen::Index> subset;
    const std::function<void(Eigen::Index)> visit = [&](Eigen::Index from) {
        if (!subset.empty()) {
            const auto nb = static_cast<Eigen::Index>(subset.size());
            Eigen::MatrixXd Ab(nb, d);
            Eigen::VectorXd rb(nb);
            for (Eigen::Index j = 0; j < nb; ++j) {
                Ab.row(j) = A.row(subset[static_cast<std::size_t>(j)]);
                rb(j) = required(subset[static_cast<std::size_t>(j)]);
            }
            const Eigen::FullPivLU<Eigen::MatrixXd> lu(Ab * Ab.transpose());
            if (lu.isInvertible()) {
                const Eigen::VectorXd lambda = lu.solve(rb - Ab * raw_drift);
                const Eigen::VectorXd mu = raw_drift + Ab.transpose() * lambda;
                const double distance = (mu - raw_drift).squaredNorm();
                if ((lambda.array() >= 0.0).all() && ((A * mu - limit + rounding(mu)).array() >= 0.0).all() &&
                    distance < best) {
                    best = distance;
                    out.drift = mu;
                    binding = subset;
                }
            }
        }
        if (static_cast<Eigen::Index>(subset.size()) == d) {
            return;
        }
        for (Eigen::Index j = from; j < k; ++j) {
            subset.push_back(j);
            visit(j + 1);
            subset.pop_back();
        }
    };
    visit(0);
    if (binding.empty()) {
        throw NumericError("BoundaryTransform: drift correction found no feasible active set");
    }
    for (Eigen::Index j : binding) {
        out.binding.push_back(g.active[static_cast<std::size_t>(j)]);
    }
    return out;
}

TransformedCoefficients transform_outputs(const Eigen::VectorXd& raw_drift, const Eigen::MatrixXd& raw_diffusion,
                                          const Eigen::VectorXd& xi, const BoundaryTransform& boundary) {
    const Eigen::Index d = boundary.dimension();
    if (raw_drift.size() != d || raw_diffusion.rows() != d) {
        throw DomainError("transform_outputs: outputs do not match the factor dimension");
    }
    const auto g = boundary.geometry(xi);
    TransformedCoefficients out;
    out.diffusion = g.damping * raw_diffusion;
    out.drift = boundary.correct_drift(raw_drift, out.diffusion, g).drift;
    return out;
}

Eigen::MatrixXd InputScaling::apply(const Eigen::MatrixXd& rows) const {
    return ((rows.rowwise() - shift.transpose()).array().rowwise() / scale.transpose().array()).matrix().transpose();
}

namespace {

Eigen::MatrixXd build_diffusion(const Eigen::VectorXd& out, const Eigen::VectorXd& row_scale, bool joint) {
    const Eigen::Index d = row_scale.size();
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(d, d + (joint ? 1 : 0));
    for (Eigen::Index j = 0; j < d; ++j) {
        for (Eigen::Index c = 0; c < j; ++c) {
            s(j, c) = row_scale(j) * out(tri_index(j, c));
        }
        s(j, j) = row_scale(j) * softplus(out(tri_index(j, j)) + softplus_shift);
        if (joint) {
            s(j, d) = row_scale(j) * out(tri_size(d) + j);
        }
    }
    return s;
}

Eigen::VectorXd column_std(const Eigen::MatrixXd& m) {
    const Eigen::RowVectorXd mean = m.colwise().mean();
    const double n = static_cast<double>(std::max<Eigen::Index>(m.rows() - 1, 1));
    return ((m.rowwise() - mean).colwise().squaredNorm() / n).cwiseSqrt().transpose();
}

Eigen::VectorXd positive_or(const Eigen::VectorXd& v, double fallback) {
    return v.unaryExpr([fallback](double x) { return x > 0.0 && std::isfinite(x) ? x : fallback; });
}

void shrink_output_layer(Mlp& net, double factor) {
    net.layers().back().weight *= factor;
}

}  // namespace

void FactorDynamics::raw(const Eigen::MatrixXd& points, std::vector<Eigen::VectorXd>& drift,
                         std::vector<Eigen::MatrixXd>& diffusion) const {
    const Eigen::MatrixXd x = input.apply(points);
    const Eigen::MatrixXd mu = drift_net.forward(x);
    const Eigen::MatrixXd sig = diffusion_net.forward(x);
    drift.resize(static_cast<std::size_t>(points.rows()));
    diffusion.resize(static_cast<std::size_t>(points.rows()));
    for (Eigen::Index b = 0; b < points.rows(); ++b) {
        drift[static_cast<std::size_t>(b)] = drift_bias + drift_scale.cwiseProduct(mu.col(b));
        diffusion[static_cast<std::size_t>(b)] = build_diffusion(sig.col(b), diffusion_scale, joint);
    }
}

TransformedCoefficients FactorDynamics::evaluate_raw(const Eigen::VectorXd& xi) const {
    std::vector<Eigen::VectorXd> mu;
    std::vector<Eigen::MatrixXd> sig;
    raw(xi.transpose(), mu, sig);
    return {mu.front(), sig.front()};
}

TransformedCoefficients FactorDynamics::evaluate(const Eigen::VectorXd& xi) const {
    TransformedCoefficients r = evaluate_raw(xi);
    return transform_outputs(r.drift, r.diffusion, xi, boundary);
}

FactorTransitions factor_transitions(const Eigen::MatrixXd& xi, const std::vector<bool>& usable_step,
                                     const std::vector<bool>& excluded) {
    const Eigen::Index L = xi.rows();
    if (static_cast<Eigen::Index>(usable_step.size()) < std::max<Eigen::Index>(L - 1, 0) ||
        (!excluded.empty() && static_cast<Eigen::Index>(excluded.size()) != L)) {
        throw DomainError("factor_transitions: mask lengths do not match the series");
    }
    std::vector<Eigen::Index> keep;
    for (Eigen::Index t = 0; t + 1 < L; ++t) {
        const bool flagged = !excluded.empty() && (excluded[static_cast<std::size_t>(t)] ||
                                                   excluded[static_cast<std::size_t>(t + 1)]);
        if (usable_step[static_cast<std::size_t>(t)] && !flagged) {
            keep.push_back(t);
        }
    }
    FactorTransitions out;
    const auto n = static_cast<Eigen::Index>(keep.size());
    out.from.resize(n, xi.cols());
    out.increment.resize(n, xi.cols());
    out.index_shock = Eigen::VectorXd::Zero(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Eigen::Index t = keep[static_cast<std::size_t>(k)];
        out.from.row(k) = xi.row(t);
        out.increment.row(k) = xi.row(t + 1) - xi.row(t);
    }
    out.origin = std::move(keep);
    return out;
}

FactorDynamics init_factor_dynamics(const FactorTransitions& data, const BoundaryTransform& boundary, double dt,
                                    const TrainingConfig& config, bool joint) {
    const Eigen::Index d = data.from.cols();
    if (data.from.rows() < 2) {
        throw TrainingError("init_factor_dynamics: need at least 2 transitions");
    }
    if (boundary.dimension() != d) {
        throw DomainError("init_factor_dynamics: constraint dimension differs from the factor dimension");
    }
    FactorDynamics m;
    m.joint = joint;
    m.boundary = boundary;
    m.input.shift = data.from.colwise().mean().transpose();
    m.input.scale = positive_or(column_std(data.from), 1.0);
    m.drift_bias = data.increment.colwise().mean().transpose() / dt;
    m.diffusion_scale = positive_or(column_std(data.increment) / std::sqrt(dt), 1e-8);
    m.drift_scale = m.diffusion_scale;

    std::mt19937_64 rng(config.seed);
    std::vector<int> sizes{static_cast<int>(d)};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(static_cast<int>(d));
    m.drift_net = Mlp(sizes, rng);
    sizes.back() = static_cast<int>(tri_size(d) + (joint ? d : 0));
    m.diffusion_net = Mlp(sizes, rng);
    shrink_output_layer(m.drift_net, 0.1);
    shrink_output_layer(m.diffusion_net, 0.1);
    return m;
}

Eigen::VectorXd factor_parameters(const FactorDynamics& model) {
    Eigen::VectorXd a = model.drift_net.parameters();
    Eigen::VectorXd b = model.diffusion_net.parameters();
    Eigen::VectorXd p(a.size() + b.size());
    p << a, b;
    return p;
}

void set_factor_parameters(FactorDynamics& model, const Eigen::VectorXd& p) {
    const auto n = static_cast<Eigen::Index>(model.drift_net.parameter_count());
    if (p.size() != n + static_cast<Eigen::Index>(model.diffusion_net.parameter_count())) {
        throw DomainError("set_factor_parameters: wrong parameter count");
    }
    model.drift_net.set_parameters(p.head(n));
    model.diffusion_net.set_parameters(p.tail(p.size() - n));
}

double factor_loss(const FactorDynamics& model, const FactorTransitions& data, const std::vector<std::size_t>& samples,
                   double dt, Eigen::VectorXd* grad) {
    const Eigen::Index d = model.dimension();
    const auto B = static_cast<Eigen::Index>(samples.size());
    if (B == 0) {
        throw TrainingError("factor_loss: empty batch");
    }
    Eigen::MatrixXd points(B, d);
    for (Eigen::Index b = 0; b < B; ++b) {
        points.row(b) = data.from.row(static_cast<Eigen::Index>(samples[static_cast<std::size_t>(b)]));
    }
    const Eigen::MatrixXd x = model.input.apply(points);
    Mlp::Tape drift_tape, diffusion_tape;
    const Eigen::MatrixXd out_mu = model.drift_net.forward(x, drift_tape);
    const Eigen::MatrixXd out_sig = model.diffusion_net.forward(x, diffusion_tape);
    Eigen::MatrixXd g_mu(out_mu.rows(), B), g_sig(out_sig.rows(), B);

    const Eigen::Index nc = model.noise_columns();
    const double log_dt = std::log(dt);
    const double margin = 1.0 + BoundaryTransform::requirement_margin;
    const auto& A = model.boundary.constraints().A;
    double total = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
        const auto s = static_cast<Eigen::Index>(samples[static_cast<std::size_t>(b)]);
        const Eigen::VectorXd xi = points.row(b).transpose();
        const auto geo = model.boundary.geometry(xi);
        const Eigen::VectorXd mu_raw = model.drift_bias + model.drift_scale.cwiseProduct(out_mu.col(b));
        const Eigen::MatrixXd s_raw = build_diffusion(out_sig.col(b), model.diffusion_scale, model.joint);
        const Eigen::MatrixXd s_full = geo.damping * s_raw;
        const auto corr = model.boundary.correct_drift(mu_raw, s_full, geo);
        const Eigen::MatrixXd sigma = s_full.leftCols(d);
        const double z = model.joint ? data.index_shock(s) : 0.0;
        Eigen::VectorXd y = data.increment.row(s).transpose() - corr.drift * dt;
        if (model.joint) {
            y -= s_full.col(d) * z;
        }
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(sigma);
        const double det = lu.determinant();
        const Eigen::VectorXd u = lu.solve(y);
        total += 0.5 * u.squaredNorm() / dt + std::log(std::abs(det)) + 0.5 * static_cast<double>(d) * log_dt;
        if (!grad) {
            continue;
        }
        const Eigen::MatrixXd inverse_t = lu.inverse().transpose();
        const Eigen::VectorXd w = inverse_t * u / dt;
        const Eigen::VectorXd g_drift = -dt * w;
        Eigen::MatrixXd g_full(d, nc);
        g_full.leftCols(d) = -dt * w * (sigma.transpose() * w).transpose() + inverse_t;
        if (model.joint) {
            g_full.col(d) = -z * w;
        }
        Eigen::VectorXd g_raw_drift = g_drift;
        if (!corr.binding.empty()) {
            const auto k = static_cast<Eigen::Index>(corr.binding.size());
            Eigen::MatrixXd Ab(k, d);
            for (Eigen::Index j = 0; j < k; ++j) {
                Ab.row(j) = A.row(corr.binding[static_cast<std::size_t>(j)]);
            }
            Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(Ab * Ab.transpose());
            const Eigen::VectorXd g_required = cod.solve(Ab * g_drift);
            g_raw_drift = g_drift - Ab.transpose() * g_required;
            for (Eigen::Index j = 0; j < k; ++j) {
                const Eigen::Index i = corr.binding[static_cast<std::size_t>(j)];
                const Eigen::VectorXd a = A.row(i).transpose();
                g_full += g_required(j) * margin / geo.slack(i) * a * (s_full.transpose() * a).transpose();
            }
        }
        const Eigen::MatrixXd g_sraw = geo.damping.transpose() * g_full;
        g_mu.col(b) = model.drift_scale.cwiseProduct(g_raw_drift);
        const Eigen::VectorXd o = out_sig.col(b);
        for (Eigen::Index j = 0; j < d; ++j) {
            const double rs = model.diffusion_scale(j);
            for (Eigen::Index c = 0; c < j; ++c) {
                g_sig(tri_index(j, c), b) = rs * g_sraw(j, c);
            }
            g_sig(tri_index(j, j), b) = rs * sigmoid(o(tri_index(j, j)) + softplus_shift) * g_sraw(j, j);
            if (model.joint) {
                g_sig(tri_size(d) + j, b) = rs * g_sraw(j, d);
            }
        }
    }
    const double inv_b = 1.0 / static_cast<double>(B);
    if (grad) {
        const auto n_mu = static_cast<Eigen::Index>(model.drift_net.parameter_count());
        const auto n_sig = static_cast<Eigen::Index>(model.diffusion_net.parameter_count());
        if (grad->size() != n_mu + n_sig) {
            grad->setZero(n_mu + n_sig);
        }
        Eigen::VectorXd local = Eigen::VectorXd::Zero(n_mu + n_sig);
        model.drift_net.backward(drift_tape, g_mu * inv_b, local.head(n_mu));
        model.diffusion_net.backward(diffusion_tape, g_sig * inv_b, local.tail(n_sig));
        *grad += local;
    }
    return total * inv_b;
}

namespace {

// Shared Adam loop: chronological split, shuffled minibatches, one-shot pruning.
struct Trainable {
    std::size_t samples = 0;
    std::function<double(const std::vector<std::size_t>&, Eigen::VectorXd*)> loss;
    std::function<Eigen::VectorXd()> get;
    std::function<void(const Eigen::VectorXd&)> set;
    std::function<Eigen::VectorXd()> mask;
    std::function<void(double)> prune;
};

double checked(double value, const std::string& where) {
    if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss " + where);
    }
    return value;
}

TrainingHistory run_training(const Trainable& model, const TrainingConfig& config) {
    if (config.epochs < 0 || config.batch == 0 || !(config.learning_rate > 0.0)) {
        throw DomainError("training: invalid configuration");
    }
    if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0)) {
        throw DomainError("training: validation fraction must lie in [0, 1)");
    }
    TrainingHistory h;
    const std::size_t n = model.samples;
    std::size_t n_val = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(n)));
    if (config.validation_fraction > 0.0 && n_val == 0 && n >= 2) {
        n_val = 1;
    }
    const std::size_t n_train = n - n_val;
    if (n_train == 0) {
        throw TrainingError("training: no training samples");
    }
    std::vector<std::size_t> train(n_train), validation(n_val);
    std::iota(train.begin(), train.end(), std::size_t{0});
    std::iota(validation.begin(), validation.end(), n_train);
    h.train_samples = n_train;
    h.validation_samples = n_val;

    auto validate = [&](int epoch) {
        if (n_val > 0) {
            h.validation_loss.push_back(
                checked(model.loss(validation, nullptr), "on validation data at epoch " + std::to_string(epoch)));
        }
    };
    validate(0);

    Eigen::VectorXd params = model.get();
    Eigen::VectorXd mask = model.mask();
    Adam adam(static_cast<std::size_t>(params.size()), config.learning_rate);
    std::mt19937_64 rng(config.seed ^ 0x5851f42d4c957f2dULL);
    const int prune_after = config.sparsity > 0.0 && config.epochs >= 2 ? config.epochs / 2 : -1;
    Eigen::VectorXd grad(params.size());
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::shuffle(train.begin(), train.end(), rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n_train; start += config.batch) {
            std::vector<std::size_t> batch(train.begin() + static_cast<std::ptrdiff_t>(start),
                                           train.begin() + static_cast<std::ptrdiff_t>(std::min(start + config.batch, n_train)));
            grad.setZero();
            const double loss = model.loss(batch, &grad);
            checked(loss, "at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
            if (!grad.allFinite()) {
                throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batches));
            }
            adam.step(params, grad, mask);
            model.set(params);
            sum += loss;
            ++batches;
        }
        h.train_loss.push_back(sum / static_cast<double>(batches));
        if (epoch == prune_after) {
            model.prune(config.sparsity);
            params = model.get();
            mask = model.mask();
            adam.reset_masked(mask);
            h.prune_epoch = epoch;
        }
        validate(epoch);
    }
    return h;
}

}  // namespace

TrainedFactors train_factor_sde(const FactorTransitions& data, const BoundaryTransform& boundary, double dt,
                                const TrainingConfig& config, bool joint) {
    if (!(dt > 0.0)) {
        throw DomainError("train_factor_sde: dt must be positive");
    }
    if (joint && data.index_shock.size() != data.from.rows()) {
        throw DomainError("train_factor_sde: joint variant needs one index shock per transition");
    }
    FactorTransitions inside;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index k = 0; k < data.from.rows(); ++k) {
        if (boundary.interior(data.from.row(k).transpose())) {
            keep.push_back(k);
        }
    }
    const auto n = static_cast<Eigen::Index>(keep.size());
    inside.from.resize(n, data.from.cols());
    inside.increment.resize(n, data.from.cols());
    inside.index_shock = Eigen::VectorXd::Zero(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Eigen::Index s = keep[static_cast<std::size_t>(k)];
        inside.from.row(k) = data.from.row(s);
        inside.increment.row(k) = data.increment.row(s);
        if (joint) {
            inside.index_shock(k) = data.index_shock(s);
        }
        if (!data.origin.empty()) {
            inside.origin.push_back(data.origin[static_cast<std::size_t>(s)]);
        }
    }

    TrainedFactors out;
    out.model = init_factor_dynamics(inside, boundary, dt, config, joint);
    Trainable t;
    t.samples = static_cast<std::size_t>(n);
    t.loss = [&](const std::vector<std::size_t>& idx, Eigen::VectorXd* g) {
        return factor_loss(out.model, inside, idx, dt, g);
    };
    t.get = [&] { return factor_parameters(out.model); };
    t.set = [&](const Eigen::VectorXd& p) { set_factor_parameters(out.model, p); };
    t.mask = [&] {
        Eigen::VectorXd a = out.model.drift_net.mask_vector();
        Eigen::VectorXd b = out.model.diffusion_net.mask_vector();
        Eigen::VectorXd m(a.size() + b.size());
        m << a, b;
        return m;
    };
    t.prune = [&](double f) {
        out.model.drift_net.prune(f);
        out.model.diffusion_net.prune(f);
    };
    out.history = run_training(t, config);
    out.history.dropped_samples = static_cast<std::size_t>(data.from.rows() - n);
    return out;
}

double IndexDynamics::vol(const Eigen::VectorXd& xi) const {
    return vols(xi.transpose())(0);
}

Eigen::VectorXd IndexDynamics::vols(const Eigen::MatrixXd& points) const {
    const Eigen::MatrixXd out = vol_net.forward(input.apply(points));
    return (out.row(0).transpose().array() + log_vol_bias).exp().matrix();
}

double IndexDynamics::drift_for(const std::string& label) const {
    auto it = drift.find(label);
    if (it == drift.end()) {
        throw DomainError("IndexDynamics: no drift for underlying '" + label + "'");
    }
    return it->second;
}

IndexTransitions index_transitions(const Eigen::MatrixXd& xi, const std::vector<double>& spot,
                                   const std::vector<std::string>& labels, const std::vector<bool>& usable_step) {
    const Eigen::Index L = xi.rows();
    if (static_cast<Eigen::Index>(spot.size()) != L || static_cast<Eigen::Index>(labels.size()) != L ||
        static_cast<Eigen::Index>(usable_step.size()) < std::max<Eigen::Index>(L - 1, 0)) {
        throw DomainError("index_transitions: series lengths differ");
    }
    std::vector<Eigen::Index> keep;
    for (Eigen::Index t = 0; t + 1 < L; ++t) {
        if (usable_step[static_cast<std::size_t>(t)]) {
            keep.push_back(t);
        }
    }
    IndexTransitions out;
    const auto n = static_cast<Eigen::Index>(keep.size());
    out.from.resize(n, xi.cols());
    out.log_return.resize(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        const Eigen::Index t = keep[static_cast<std::size_t>(k)];
        const double s0 = spot[static_cast<std::size_t>(t)], s1 = spot[static_cast<std::size_t>(t + 1)];
        if (!(s0 > 0.0 && s1 > 0.0)) {
            throw DomainError("index_transitions: non-positive spot");
        }
        out.from.row(k) = xi.row(t);
        out.log_return(k) = std::log(s1 / s0);
        out.label.push_back(labels[static_cast<std::size_t>(t)]);
    }
    out.origin = std::move(keep);
    return out;
}

IndexDynamics init_index_dynamics(const IndexTransitions& data, const std::map<std::string, double>& drift, double dt,
                                  const TrainingConfig& config) {
    if (data.from.rows() < 2) {
        throw TrainingError("init_index_dynamics: need at least 2 transitions");
    }
    IndexDynamics m;
    m.drift = drift;
    m.input.shift = data.from.colwise().mean().transpose();
    m.input.scale = positive_or(column_std(data.from), 1.0);
    double sq = 0.0;
    for (Eigen::Index k = 0; k < data.log_return.size(); ++k) {
        const double u = data.log_return(k) - m.drift_for(data.label[static_cast<std::size_t>(k)]) * dt;
        sq += u * u;
    }
    const double vol = std::sqrt(sq / static_cast<double>(data.log_return.size()) / dt);
    m.log_vol_bias = std::log(vol > 0.0 ? vol : 1e-8);
    std::mt19937_64 rng(config.seed + 7);
    std::vector<int> sizes{static_cast<int>(data.from.cols())};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(1);
    m.vol_net = Mlp(sizes, rng);
    shrink_output_layer(m.vol_net, 0.1);
    return m;
}

double index_loss(const IndexDynamics& model, const IndexTransitions& data, const std::vector<std::size_t>& samples,
                  double dt, Eigen::VectorXd* grad) {
    const auto B = static_cast<Eigen::Index>(samples.size());
    if (B == 0) {
        throw TrainingError("index_loss: empty batch");
    }
    Eigen::MatrixXd points(B, data.from.cols());
    for (Eigen::Index b = 0; b < B; ++b) {
        points.row(b) = data.from.row(static_cast<Eigen::Index>(samples[static_cast<std::size_t>(b)]));
    }
    Mlp::Tape tape;
    const Eigen::MatrixXd out = model.vol_net.forward(model.input.apply(points), tape);
    Eigen::MatrixXd g(1, B);
    double total = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
        const auto s = static_cast<Eigen::Index>(samples[static_cast<std::size_t>(b)]);
        const double log_gamma = out(0, b) + model.log_vol_bias;
        const double gamma2 = std::exp(2.0 * log_gamma);
        const double u = data.log_return(s) - model.drift_for(data.label[static_cast<std::size_t>(s)]) * dt;
        const double ratio = u * u / (gamma2 * dt);
        total += 0.5 * ratio + log_gamma + 0.5 * std::log(dt);
        g(0, b) = 1.0 - ratio;
    }
    const double inv_b = 1.0 / static_cast<double>(B);
    if (grad) {
        const auto n = static_cast<Eigen::Index>(model.vol_net.parameter_count());
        if (grad->size() != n) {
            grad->setZero(n);
        }
        model.vol_net.backward(tape, g * inv_b, *grad);
    }
    return total * inv_b;
}

TrainedIndex train_index_vol(const IndexTransitions& data, const std::map<std::string, double>& drift, double dt,
                             const TrainingConfig& config) {
    if (!(dt > 0.0)) {
        throw DomainError("train_index_vol: dt must be positive");
    }
    TrainedIndex out;
    out.model = init_index_dynamics(data, drift, dt, config);
    Trainable t;
    t.samples = static_cast<std::size_t>(data.from.rows());
    t.loss = [&](const std::vector<std::size_t>& idx, Eigen::VectorXd* g) {
        return index_loss(out.model, data, idx, dt, g);
    };
    t.get = [&] { return out.model.vol_net.parameters(); };
    t.set = [&](const Eigen::VectorXd& p) { out.model.vol_net.set_parameters(p); };
    t.mask = [&] { return out.model.vol_net.mask_vector(); };
    t.prune = [&](double f) { out.model.vol_net.prune(f); };
    out.history = run_training(t, config);
    return out;
}

ResidualBank compute_residuals(const FactorDynamics& factors, const IndexDynamics& index, const Eigen::MatrixXd& xi,
                               const std::vector<double>& spot, const std::vector<std::string>& labels,
                               const std::vector<std::string>& dates, const std::vector<bool>& usable_step,
                               double dt) {
    const Eigen::Index L = xi.rows();
    const Eigen::Index d = factors.dimension();
    if (xi.cols() != d || static_cast<Eigen::Index>(spot.size()) != L ||
        static_cast<Eigen::Index>(labels.size()) != L || static_cast<Eigen::Index>(dates.size()) != L ||
        static_cast<Eigen::Index>(usable_step.size()) < std::max<Eigen::Index>(L - 1, 0)) {
        throw DomainError("compute_residuals: inconsistent inputs");
    }
    std::vector<Eigen::VectorXd> rows;
    ResidualBank bank;
    for (Eigen::Index t = 0; t + 1 < L; ++t) {
        if (!usable_step[static_cast<std::size_t>(t)]) {
            continue;
        }
        const Eigen::VectorXd x = xi.row(t).transpose();
        const std::string& label = labels[static_cast<std::size_t>(t)];
        const double log_return = std::log(spot[static_cast<std::size_t>(t + 1)] / spot[static_cast<std::size_t>(t)]);
        const double z_index = (log_return - index.drift_for(label) * dt) / index.vol(x);
        const TransformedCoefficients c =
            factors.boundary.interior(x) ? factors.evaluate(x) : factors.evaluate_raw(x);
        Eigen::VectorXd y = (xi.row(t + 1) - xi.row(t)).transpose() - c.drift * dt;
        if (factors.joint) {
            y -= c.diffusion.col(d) * z_index;
        }
        const Eigen::MatrixXd sigma = c.diffusion.leftCols(d);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(sigma);
        if (!lu.isInvertible()) {
            throw ResidualError("compute_residuals: singular diffusion on " + dates[static_cast<std::size_t>(t)]);
        }
        Eigen::VectorXd row(d + 1);
        row << z_index, lu.solve(y);
        if (!row.allFinite()) {
            throw ResidualError("compute_residuals: non-finite residual on " + dates[static_cast<std::size_t>(t)]);
        }
        rows.push_back(std::move(row));
        bank.labels.push_back(label);
        bank.dates.push_back(dates[static_cast<std::size_t>(t)]);
    }
    bank.rows.resize(static_cast<Eigen::Index>(rows.size()), d + 1);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        bank.rows.row(static_cast<Eigen::Index>(k)) = rows[k].transpose();
    }
    return bank;
}

}  // namespace optrisk
