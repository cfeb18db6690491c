#include "optrisk/factor_model.hpp"

#include "optrisk/black_scholes.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/io.hpp"
#include "optrisk/spline.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>

namespace optrisk {

VegaWeights compute_vega_weights(const SurfacePanel& panel) {
    panel.validate();
    const auto n = static_cast<Eigen::Index>(panel.lattice.size());
    Eigen::VectorXd mean_vega = Eigen::VectorXd::Zero(n);
    for (Eigen::Index t = 0; t < panel.rows(); ++t) {
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& node = panel.lattice[static_cast<std::size_t>(j)];
            double vol;
            try {
                vol = implied_vol(panel.prices(t, j), node.tau, node.m);
            } catch (const InversionError&) {
                vol = 0.0;  // at or a rounding error below the intrinsic bound
            }
            mean_vega(j) += vega(node.tau, node.m, std::max(vol, 1e-3));
        }
    }
    mean_vega /= static_cast<double>(panel.rows());
    if (!(mean_vega.array() > 0.0).all() || !mean_vega.allFinite()) {
        throw DomainError("compute_vega_weights: average vega vanishes at some node");
    }
    return {mean_vega.cwiseInverse()};
}

namespace {

// Spline value with linear continuation beyond the knots.
double extended(const CubicSpline& s, double x) {
    if (x < s.front()) {
        return s.values().front() + s.derivative(s.front()) * (x - s.front());
    }
    if (x > s.back()) {
        return s.values().back() + s.derivative(s.back()) * (x - s.back());
    }
    return s(x);
}

}  // namespace

SurfaceDerivatives::SurfaceDerivatives(const LiquidLattice& lattice) {
    const auto n = static_cast<Eigen::Index>(lattice.size());
    d_tau = Eigen::MatrixXd::Zero(n, n);
    d_m = Eigen::MatrixXd::Zero(n, n);
    d_mm = Eigen::MatrixXd::Zero(n, n);
    const auto& groups = lattice.groups();
    const auto& expiries = lattice.expiries();

    // Unit-vector splines per group: column k of the maps is the response to node k.
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto [begin, end] = groups[g];
        const std::size_t size = end - begin;
        if (size < 2) {
            continue;
        }
        std::vector<double> x;
        for (std::size_t j = begin; j < end; ++j) {
            x.push_back(lattice[j].m);
        }
        for (std::size_t k = begin; k < end; ++k) {
            std::vector<double> y(size, 0.0);
            y[k - begin] = 1.0;
            CubicSpline s(x, y);
            for (std::size_t j = begin; j < end; ++j) {
                d_m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = s.derivative(lattice[j].m);
                d_mm(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = s.second_derivative(lattice[j].m);
            }
        }
    }

    if (groups.size() < 2) {
        return;
    }
    // d/dtau: each entry is linear in the prices of the neighbouring expiries.
    auto add_value = [&](Eigen::Index row, std::size_t h, double m, double coeff) {
        auto [hb, he] = groups[h];
        std::vector<double> hx;
        for (std::size_t j = hb; j < he; ++j) {
            hx.push_back(lattice[j].m);
        }
        for (std::size_t k = hb; k < he; ++k) {
            double value;
            if (hx.size() < 2) {
                value = 1.0;
            } else {
                std::vector<double> hy(hx.size(), 0.0);
                hy[k - hb] = 1.0;
                value = extended(CubicSpline(hx, hy), m);
            }
            d_tau(row, static_cast<Eigen::Index>(k)) += coeff * value;
        }
    };
    for (std::size_t g = 0; g < groups.size(); ++g) {
        auto [begin, end] = groups[g];
        for (std::size_t j = begin; j < end; ++j) {
            const auto row = static_cast<Eigen::Index>(j);
            const double m = lattice[j].m;
            if (g == 0) {
                const double h = expiries[1] - expiries[0];
                add_value(row, 1, m, 1.0 / h);
                d_tau(row, row) -= 1.0 / h;
            } else if (g + 1 == groups.size()) {
                const double h = expiries[g] - expiries[g - 1];
                d_tau(row, row) += 1.0 / h;
                add_value(row, g - 1, m, -1.0 / h);
            } else {
                const double h = expiries[g + 1] - expiries[g - 1];
                add_value(row, g + 1, m, 1.0 / h);
                add_value(row, g - 1, m, -1.0 / h);
            }
        }
    }
}

Eigen::VectorXd FactorModel::prices(const Eigen::VectorXd& primary_values, const Eigen::VectorXd& secondary_values) const {
    Eigen::VectorXd w = G0 + G.transpose() * primary_values;
    if (secondary_values.size() > 0) {
        w += G_sec.topRows(secondary_values.size()).transpose() * secondary_values;
    }
    return w.cwiseQuotient(weights.lambda);
}

Eigen::VectorXd solve_factors(const Eigen::VectorXd& weighted_c, const Eigen::VectorXd& G0, const Eigen::MatrixXd& G) {
    if (weighted_c.size() != G0.size() || G.cols() != G0.size()) {
        throw DomainError("solve_factors: inconsistent dimensions");
    }
    const Eigen::MatrixXd gram = G * G.transpose();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    const double scale = gram.diagonal().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().cwiseAbs().minCoeff() > 1e-13 * scale)) {
        throw DecompositionError("solve_factors: singular Gram matrix");
    }
    return ldlt.solve(G * (weighted_c - G0));
}

namespace {

int numeric_rank(const Eigen::VectorXd& singular, Eigen::Index rows, Eigen::Index cols) {
    if (singular.size() == 0 || singular(0) == 0.0) {
        return 0;
    }
    const double tol = static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon() * singular(0);
    return static_cast<int>((singular.array() > tol).count());
}

// Rank of a deviation panel, zero when every row equals the mean.
int panel_rank(const Eigen::BDCSVD<Eigen::MatrixXd>& svd, const Eigen::MatrixXd& X, double reference) {
    if (X.cwiseAbs().maxCoeff() <= 1e-14 * std::max(reference, 1e-300)) {
        return 0;
    }
    return numeric_rank(svd.singularValues(), X.rows(), X.cols());
}

// Orthonormal basis of the complement of unit vector c in R^k.
Eigen::MatrixXd complement(const Eigen::VectorXd& c) {
    const Eigen::Index k = c.size();
    Eigen::MatrixXd M(k, k);
    M.col(0) = c;
    M.rightCols(k - 1) = Eigen::MatrixXd::Identity(k, k).leftCols(k - 1);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(M);
    Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(k, k);
    return Q.rightCols(k - 1);
}

// Score to minimise: lexicographic (count, magnitude).
struct Score {
    double primary = 0.0;
    double secondary = 0.0;

    bool operator<(const Score& o) const {
        return primary < o.primary || (primary == o.primary && secondary < o.secondary);
    }
};

// Rotation search over unit vectors in R^k, starting from e_1.
template <class Objective>
Eigen::VectorXd rotation_search(Eigen::Index k, const DecodeOptions& options, Objective objective) {
    Eigen::VectorXd best = Eigen::VectorXd::Unit(k, 0);
    Score best_score = objective(best);
    if (k == 1) {
        return best;
    }
    const int grid = std::max(options.angle_grid, 4) / 2 * 2;
    for (int sweep = 0; sweep < options.sweeps; ++sweep) {
        bool improved = false;
        for (Eigen::Index axis = 0; axis < k; ++axis) {
            Eigen::VectorXd u = Eigen::VectorXd::Unit(k, axis);
            u -= u.dot(best) * best;
            if (u.norm() < 1e-8) {
                continue;
            }
            u.normalize();
            const Eigen::VectorXd base = best;
            for (int i = 0; i < grid; ++i) {
                const double angle = -std::numbers::pi / 2 + std::numbers::pi * (i + 1) / grid;
                if (angle == 0.0) {
                    continue;
                }
                Eigen::VectorXd candidate = std::cos(angle) * base + std::sin(angle) * u;
                candidate.normalize();
                Score s = objective(candidate);
                if (s < best_score) {
                    best_score = s;
                    best = candidate;
                    improved = true;
                }
            }
        }
        if (!improved) {
            break;
        }
    }
    return best;
}

// Per-date relative residual of the market-price-of-risk system for factors
// with basis G (k x N) and series F (L x k).
struct PdaEngine {
    Eigen::VectorXd lambda;
    Eigen::MatrixXd tau_map;   // Lambda d_tau Lambda^{-1}
    Eigen::MatrixXd space_map;  // Lambda (d_mm - d_m) Lambda^{-1}

    PdaEngine(const LiquidLattice& lattice, const Eigen::VectorXd& weights) : lambda(weights) {
        SurfaceDerivatives d(lattice);
        const Eigen::VectorXd inv = weights.cwiseInverse();
        tau_map = weights.asDiagonal() * d.d_tau * inv.asDiagonal();
        space_map = weights.asDiagonal() * (d.d_mm - d.d_m) * inv.asDiagonal();
    }

    double mean(const Eigen::VectorXd& G0, const Eigen::MatrixXd& G, const Eigen::MatrixXd& F,
                const PdaInputs& in, const std::vector<Eigen::Index>& dates) const {
        const Eigen::Index k = G.rows();
        if (in.drift.cols() != k || in.diffusion.empty() || in.gamma.size() == 0) {
            throw MetricError("pda: drift/diffusion inputs do not match the factor count");
        }
        const Eigen::MatrixXd GT = G.transpose();
        const Eigen::VectorXd tau0 = tau_map * G0;
        const Eigen::MatrixXd tauG = tau_map * GT;
        const Eigen::VectorXd space0 = space_map * G0;
        const Eigen::MatrixXd spaceG = space_map * GT;

        auto basis_for = [&](const Eigen::MatrixXd& sigma) {
            Eigen::MatrixXd B = GT * sigma;
            Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(B);
            qr.setThreshold(1e-12);
            const Eigen::Index r = qr.rank();
            Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(B.rows(), r);
            return Q;
        };
        const bool constant_sigma = in.diffusion.size() == 1;
        Eigen::MatrixXd Q_const;
        if (constant_sigma) {
            Q_const = basis_for(in.diffusion.front());
        }
        double total = 0.0;
        for (Eigen::Index t : dates) {
            const auto i = static_cast<std::size_t>(t);
            const double gamma = in.gamma.size() == 1 ? in.gamma(0) : in.gamma(t);
            const Eigen::VectorXd mu = in.drift.rows() == 1 ? in.drift.row(0).transpose() : in.drift.row(t).transpose();
            const Eigen::VectorXd f = F.row(t).transpose();
            const Eigen::VectorXd weighted_z =
                -(tau0 + tauG * f) + 0.5 * gamma * gamma * (space0 + spaceG * f);
            const Eigen::VectorXd y = GT * mu - weighted_z;
            const double denom = y.norm();
            if (!(denom > 0.0)) {
                throw MetricError("pda: zero right-hand side at date " + std::to_string(t));
            }
            const Eigen::MatrixXd Q = constant_sigma ? Q_const : basis_for(in.diffusion[i]);
            const Eigen::VectorXd residual = y - Q * (Q.transpose() * y);
            total += residual.norm() / denom;
        }
        return total / static_cast<double>(dates.size());
    }
};

std::vector<Eigen::Index> sample_dates(Eigen::Index rows, std::size_t limit) {
    std::vector<Eigen::Index> dates;
    const auto step = std::max<Eigen::Index>(1, (rows + static_cast<Eigen::Index>(limit) - 1) /
                                                    std::max<Eigen::Index>(1, static_cast<Eigen::Index>(limit)));
    for (Eigen::Index t = 0; t < rows; t += step) {
        dates.push_back(t);
    }
    return dates;
}

std::vector<Eigen::Index> all_dates(Eigen::Index rows) {
    std::vector<Eigen::Index> dates(static_cast<std::size_t>(rows));
    for (Eigen::Index t = 0; t < rows; ++t) {
        dates[static_cast<std::size_t>(t)] = t;
    }
    return dates;
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& cov) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
           eig.eigenvectors().transpose();
}

}  // namespace

PdaInputs sample_pda_inputs(const Eigen::MatrixXd& factors, const SurfacePanel& panel) {
    if (factors.rows() != panel.rows()) {
        throw MetricError("sample_pda_inputs: factor rows differ from panel rows");
    }
    const Eigen::Index k = factors.cols();
    Eigen::VectorXd mean_inc = Eigen::VectorXd::Zero(k);
    Eigen::MatrixXd second = Eigen::MatrixXd::Zero(k, k);
    double log_sum = 0.0, log_sq = 0.0;
    std::size_t count = 0;
    for (Eigen::Index t = 0; t + 1 < panel.rows(); ++t) {
        if (!panel.consecutive(t)) {
            continue;
        }
        Eigen::VectorXd inc = (factors.row(t + 1) - factors.row(t)).transpose();
        mean_inc += inc;
        second += inc * inc.transpose();
        double r = std::log(panel.spot[static_cast<std::size_t>(t + 1)] / panel.spot[static_cast<std::size_t>(t)]);
        log_sum += r;
        log_sq += r * r;
        ++count;
    }
    if (count < 2) {
        throw MetricError("sample_pda_inputs: need at least 2 consecutive increments");
    }
    const double n = static_cast<double>(count);
    mean_inc /= n;
    Eigen::MatrixXd cov = (second - n * mean_inc * mean_inc.transpose()) / (n - 1.0);
    const double log_mean = log_sum / n;
    const double log_var = std::max((log_sq - n * log_mean * log_mean) / (n - 1.0), 0.0);
    PdaInputs in;
    in.gamma = Eigen::VectorXd::Constant(1, std::sqrt(log_var / panel.dt));
    in.drift = (mean_inc / panel.dt).transpose();
    in.diffusion = {symmetric_sqrt(cov / panel.dt)};
    return in;
}

FactorModel decode_primary(const SurfacePanel& panel, const VegaWeights& weights, const ConstraintSystem& constraints,
                           const DecodeOptions& options) {
    panel.validate();
    const Eigen::Index L = panel.rows();
    const Eigen::Index N = panel.prices.cols();
    const int d = options.primary;
    if (d != 2 && d != 3) {
        throw DomainError("decode_primary: primary factor count must be 2 or 3");
    }
    if (L <= N) {
        throw DecompositionError("decode_primary: need more dates (" + std::to_string(L) + ") than nodes (" +
                                 std::to_string(N) + ")");
    }
    if (weights.lambda.size() != N || constraints.A.cols() != N) {
        throw DomainError("decode_primary: weights or constraints do not match the lattice");
    }

    FactorModel model;
    model.lattice = panel.lattice;
    model.weights = weights;
    const Eigen::MatrixXd W = panel.prices * weights.lambda.asDiagonal();
    model.G0 = W.colwise().mean().transpose();
    const Eigen::MatrixXd X = W.rowwise() - model.G0.transpose();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinV);
    const Eigen::MatrixXd& V = svd.matrixV();
    const int rank = panel_rank(svd, X, W.cwiseAbs().maxCoeff());
    if (rank > 0 && rank < d) {
        throw DecompositionError("decode_primary: panel rank " + std::to_string(rank) + " is below " +
                                 std::to_string(d) + " primary factors");
    }

    model.G.resize(d, N);
    if (rank == 0) {
        model.G = V.leftCols(d).transpose();
    } else {
        model.G.row(0) = V.col(0).transpose();
        const Eigen::Index K = std::min<Eigen::Index>(std::max(options.search_components, d), rank);
        const Eigen::MatrixXd span = V.block(0, 1, N, K - 1);  // PCs 2..K
        const Eigen::MatrixXd scores = X * span;               // L x (K-1)
        const Eigen::VectorXd xi1 = X * V.col(0);

        // Static-arbitrage direction: fewest dates whose 2-factor reconstruction
        // violates A c >= b, ties broken by total violation.
        const Eigen::MatrixXd scaled_A = constraints.A * weights.inverse().asDiagonal();
        const Eigen::VectorXd b_eff = constraints.b - scaled_A * model.G0;
        const Eigen::VectorXd a1 = scaled_A * V.col(0);
        const Eigen::MatrixXd P = scaled_A * span;
        const Eigen::MatrixXd base = (a1 * xi1.transpose()).colwise() - b_eff;  // R x L
        auto psas_score = [&](const Eigen::VectorXd& c) {
            const Eigen::VectorXd a2 = P * c;
            const Eigen::VectorXd xi2 = scores * c;
            Eigen::MatrixXd slack = base + a2 * xi2.transpose();
            Score s;
            for (Eigen::Index t = 0; t < L; ++t) {
                double worst = slack.col(t).minCoeff();
                if (worst < -detect_tolerance) {
                    s.primary += 1.0;
                    s.secondary += -slack.col(t).cwiseMin(0.0).sum();
                }
            }
            return s;
        };
        const Eigen::VectorXd c2 = rotation_search(K - 1, options, psas_score);
        model.G.row(1) = (span * c2).transpose();

        if (d == 3) {
            // Dynamic-arbitrage direction inside the remaining searched span.
            const Eigen::MatrixXd rest = span * complement(c2);  // N x (K-2)
            const PdaEngine engine(panel.lattice, weights.lambda);
            const auto dates = sample_dates(L, options.pda_sample_dates);
            Eigen::MatrixXd G3(3, N);
            G3.topRows(2) = model.G.topRows(2);
            auto pda_score = [&](const Eigen::VectorXd& c) {
                G3.row(2) = (rest * c).normalized().transpose();
                Eigen::MatrixXd F = X * G3.transpose();
                PdaInputs in = sample_pda_inputs(F, panel);
                return Score{engine.mean(model.G0, G3, F, in, dates), 0.0};
            };
            const Eigen::VectorXd c3 = rotation_search(rest.cols(), options, pda_score);
            model.G.row(2) = (rest * c3).normalized().transpose();
        }
    }

    if (rank == 0) {
        model.xi = Eigen::MatrixXd::Zero(L, d);
        model.residuals = Eigen::MatrixXd::Zero(L, N);
    } else {
        model.xi = X * model.G.transpose();
        model.residuals = X - model.xi * model.G;
    }
    model.G_sec.resize(0, N);
    model.xi_sec.resize(L, 0);

    model.constraints = eliminate_redundant(project_constraints(constraints, weights.inverse(), model.G0, model.G));
    model.arbitrage_flags.resize(static_cast<std::size_t>(L));
    bool any_inside = false;
    for (Eigen::Index t = 0; t < L; ++t) {
        bool inside = model.constraints.contains(model.xi.row(t).transpose(), detect_tolerance);
        model.arbitrage_flags[static_cast<std::size_t>(t)] = !inside;
        any_inside = any_inside || inside;
    }
    if (!any_inside) {
        throw DecompositionError("decode_primary: no decoded date lies inside the projected constraint polytope");
    }
    return model;
}

SecondaryFactors decode_secondary(const Eigen::MatrixXd& residuals, int count) {
    if (count < 0) {
        throw DomainError("decode_secondary: negative factor count");
    }
    SecondaryFactors out;
    const Eigen::Index N = residuals.cols();
    if (count == 0) {
        out.basis.resize(0, N);
        out.series.resize(residuals.rows(), 0);
        out.residual = residuals;
        return out;
    }
    Eigen::BDCSVD<Eigen::MatrixXd> svd(residuals, Eigen::ComputeThinV);
    const int rank = residuals.cwiseAbs().maxCoeff() == 0.0
                         ? 0
                         : numeric_rank(svd.singularValues(), residuals.rows(), residuals.cols());
    if (rank > 0 && rank < count) {
        throw DecompositionError("decode_secondary: residual rank " + std::to_string(rank) + " is below " +
                                 std::to_string(count) + " secondary factors");
    }
    if (svd.matrixV().cols() < count) {
        throw DecompositionError("decode_secondary: more factors than lattice nodes");
    }
    out.basis = svd.matrixV().leftCols(count).transpose();
    out.series = residuals * out.basis.transpose();
    out.residual = residuals - out.series * out.basis;
    return out;
}

void attach_secondary(FactorModel& model, int count) {
    Eigen::MatrixXd primary_residual = model.residuals;
    if (model.secondary() > 0) {
        primary_residual += model.xi_sec * model.G_sec;
    }
    SecondaryFactors s = decode_secondary(primary_residual, count);
    model.G_sec = std::move(s.basis);
    model.xi_sec = std::move(s.series);
    model.residuals = std::move(s.residual);
}

ReconstructionMetrics compute_metrics(const FactorModel& model, const SurfacePanel& panel,
                                      const ConstraintSystem& constraints, int secondary_count,
                                      const PdaInputs* inputs) {
    if (secondary_count < 0 || secondary_count > model.secondary()) {
        throw MetricError("compute_metrics: secondary factor count out of range");
    }
    if (model.xi.rows() != panel.rows() || model.G0.size() != panel.prices.cols()) {
        throw MetricError("compute_metrics: model does not match the panel");
    }
    const Eigen::Index L = panel.rows();
    const Eigen::Index d = model.primary();
    const Eigen::Index k = d + secondary_count;
    Eigen::MatrixXd basis(k, model.G0.size());
    basis.topRows(d) = model.G;
    basis.bottomRows(secondary_count) = model.G_sec.topRows(secondary_count);
    Eigen::MatrixXd factors(L, k);
    factors.leftCols(d) = model.xi;
    factors.rightCols(secondary_count) = model.xi_sec.leftCols(secondary_count);

    const Eigen::MatrixXd W = panel.prices * model.weights.lambda.asDiagonal();
    const Eigen::MatrixXd recon = (factors * basis).rowwise() + model.G0.transpose();

    ReconstructionMetrics m;
    if (!(W.array() > 0.0).all()) {
        throw MetricError("compute_metrics: zero weighted price");
    }
    m.mape = ((W - recon).array().abs() / W.array()).mean();

    std::size_t violating = 0;
    const Eigen::MatrixXd recon_prices = recon * model.weights.inverse().asDiagonal();
    for (Eigen::Index t = 0; t < L; ++t) {
        if (!detect(constraints, recon_prices.row(t).transpose()).clean()) {
            ++violating;
        }
    }
    m.psas = static_cast<double>(violating) / static_cast<double>(L);

    const PdaEngine engine(panel.lattice, model.weights.lambda);
    const PdaInputs sample = inputs ? PdaInputs{} : sample_pda_inputs(factors, panel);
    m.pda = engine.mean(model.G0, basis, factors, inputs ? *inputs : sample, all_dates(L));

    const double first = model.xi.col(0).maxCoeff() - model.xi.col(0).minCoeff();
    if (!(first > 0.0)) {
        throw MetricError("compute_metrics: first primary factor has zero range");
    }
    for (Eigen::Index i = 0; i < k; ++i) {
        m.magnitude.push_back((factors.col(i).maxCoeff() - factors.col(i).minCoeff()) / first);
    }
    return m;
}

namespace {

void write_row(std::ostream& out, const std::string& tag, const Eigen::VectorXd& v) {
    out << tag;
    for (Eigen::Index j = 0; j < v.size(); ++j) {
        out << ',' << format_double(v(j));
    }
    out << '\n';
}

Eigen::VectorXd parse_row(const std::vector<std::string>& f, std::size_t from, std::size_t to) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(to - from));
    for (std::size_t j = from; j < to; ++j) {
        v(static_cast<Eigen::Index>(j - from)) = parse_double(f[j]);
    }
    return v;
}

}  // namespace

void write_factor_model(std::ostream& out, const FactorModel& model) {
    out << "version,1\n";
    out << "primary," << model.primary() << '\n';
    out << "secondary," << model.secondary() << '\n';
    out << "fingerprint," << model.lattice.fingerprint() << '\n';
    out << "lattice";
    for (const auto& node : model.lattice.nodes()) {
        out << ',' << format_double(node.tau) << ';' << format_double(node.m) << ';' << format_double(node.delta);
    }
    out << '\n';
    write_row(out, "lambda", model.weights.lambda);
    write_row(out, "G0", model.G0);
    for (Eigen::Index i = 0; i < model.primary(); ++i) {
        write_row(out, "G", model.G.row(i).transpose());
    }
    for (Eigen::Index i = 0; i < model.secondary(); ++i) {
        write_row(out, "Gsec", model.G_sec.row(i).transpose());
    }
    out << "redundancy_removed," << (model.constraints.redundancy_removed ? 1 : 0) << '\n';
    for (Eigen::Index r = 0; r < model.constraints.rows(); ++r) {
        Eigen::VectorXd row(model.constraints.A.cols() + 1);
        row << model.constraints.A.row(r).transpose(), model.constraints.b(r);
        write_row(out, "constraint", row);
    }
    for (Eigen::Index t = 0; t < model.xi.rows(); ++t) {
        Eigen::VectorXd row(1 + model.primary() + model.secondary());
        row << (model.arbitrage_flags.empty() ? 0.0 : (model.arbitrage_flags[static_cast<std::size_t>(t)] ? 1.0 : 0.0)),
            model.xi.row(t).transpose(), model.xi_sec.row(t).transpose();
        write_row(out, "factors", row);
    }
}

FactorModel read_factor_model(std::istream& in) {
    FactorModel model;
    std::string line;
    long d = -1, ds = -1;
    std::vector<Eigen::VectorXd> g_rows, gsec_rows, constraint_rows, factor_rows;
    std::string fingerprint;
    bool version_ok = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line.front() == '#') {
            continue;
        }
        auto f = split(line, ',');
        const std::string& tag = f[0];
        if (tag == "version") {
            if (f.size() != 2 || f[1] != "1") {
                throw DomainError("factor model: unsupported version");
            }
            version_ok = true;
        } else if (tag == "primary") {
            d = parse_long(f.at(1));
        } else if (tag == "secondary") {
            ds = parse_long(f.at(1));
        } else if (tag == "fingerprint") {
            fingerprint = f.at(1);
        } else if (tag == "lattice") {
            std::vector<LatticeNode> nodes;
            for (std::size_t j = 1; j < f.size(); ++j) {
                auto triple = split(f[j], ';');
                if (triple.size() != 3) {
                    throw DomainError("factor model: malformed lattice entry");
                }
                nodes.push_back({parse_double(triple[0]), parse_double(triple[1]), parse_double(triple[2])});
            }
            model.lattice = LiquidLattice(std::move(nodes));
        } else if (tag == "lambda") {
            model.weights.lambda = parse_row(f, 1, f.size());
        } else if (tag == "G0") {
            model.G0 = parse_row(f, 1, f.size());
        } else if (tag == "G") {
            g_rows.push_back(parse_row(f, 1, f.size()));
        } else if (tag == "Gsec") {
            gsec_rows.push_back(parse_row(f, 1, f.size()));
        } else if (tag == "redundancy_removed") {
            model.constraints.redundancy_removed = f.at(1) == "1";
        } else if (tag == "constraint") {
            constraint_rows.push_back(parse_row(f, 1, f.size()));
        } else if (tag == "factors") {
            factor_rows.push_back(parse_row(f, 1, f.size()));
        } else {
            throw DomainError("factor model: unknown record '" + tag + "'");
        }
    }
    if (!version_ok || d < 0 || ds < 0 || model.G0.size() == 0) {
        throw DomainError("factor model: missing header records");
    }
    const Eigen::Index N = model.G0.size();
    if (static_cast<long>(g_rows.size()) != d || static_cast<long>(gsec_rows.size()) != ds ||
        static_cast<std::size_t>(N) != model.lattice.size() || model.weights.lambda.size() != N) {
        throw DomainError("factor model: block sizes disagree with the manifest");
    }
    if (model.lattice.fingerprint() != fingerprint) {
        throw DomainError("factor model: lattice fingerprint mismatch");
    }
    auto stack = [N](const std::vector<Eigen::VectorXd>& rows) {
        Eigen::MatrixXd M(static_cast<Eigen::Index>(rows.size()), N);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != N) {
                throw DomainError("factor model: basis row has wrong length");
            }
            M.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
        }
        return M;
    };
    model.G = stack(g_rows);
    model.G_sec = stack(gsec_rows);
    model.constraints.A.resize(static_cast<Eigen::Index>(constraint_rows.size()), d);
    model.constraints.b.resize(static_cast<Eigen::Index>(constraint_rows.size()));
    for (std::size_t r = 0; r < constraint_rows.size(); ++r) {
        if (constraint_rows[r].size() != d + 1) {
            throw DomainError("factor model: constraint row has wrong length");
        }
        model.constraints.A.row(static_cast<Eigen::Index>(r)) = constraint_rows[r].head(d).transpose();
        model.constraints.b(static_cast<Eigen::Index>(r)) = constraint_rows[r](d);
    }
    const auto L = static_cast<Eigen::Index>(factor_rows.size());
    model.xi.resize(L, d);
    model.xi_sec.resize(L, ds);
    for (Eigen::Index t = 0; t < L; ++t) {
        const Eigen::VectorXd& row = factor_rows[static_cast<std::size_t>(t)];
        if (row.size() != 1 + d + ds) {
            throw DomainError("factor model: factor row has wrong length");
        }
        model.arbitrage_flags.push_back(row(0) != 0.0);
        model.xi.row(t) = row.segment(1, d).transpose();
        model.xi_sec.row(t) = row.segment(1 + d, ds).transpose();
    }
    return model;
}

}  // namespace optrisk
