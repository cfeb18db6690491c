#include "optrisk/static_arbitrage.hpp"

#include "optrisk/errors.hpp"
#include "optrisk/io.hpp"

#include <cmath>
#include <ostream>
#include <string>

namespace optrisk {

const char* to_string(ConstraintFamily family) {
    switch (family) {
        case ConstraintFamily::bound:
            return "bound";
        case ConstraintFamily::monotonicity:
            return "monotonicity";
        case ConstraintFamily::convexity:
            return "convexity";
        case ConstraintFamily::calendar:
            return "calendar";
    }
    return "unknown";
}

bool FactorConstraintSystem::contains(const Eigen::VectorXd& xi, double tol) const {
    if (A.rows() == 0) {
        return true;
    }
    return ((A * xi - b).array() >= -tol).all();
}

namespace {

struct RowBuilder {
    std::vector<std::vector<std::pair<std::size_t, double>>> coeffs;
    std::vector<double> rhs;
    std::vector<ConstraintFamily> family;

    void add(std::vector<std::pair<std::size_t, double>> row, double b, ConstraintFamily f) {
        coeffs.push_back(std::move(row));
        rhs.push_back(b);
        family.push_back(f);
    }
};

}  // namespace

ConstraintSystem build_constraints(const LiquidLattice& lattice) {
    const std::size_t n = lattice.size();
    if (n == 0) {
        throw ConstraintError("build_constraints: empty lattice");
    }
    RowBuilder rows;
    for (std::size_t j = 0; j < n; ++j) {
        double k = std::exp(lattice[j].m);
        rows.add({{j, 1.0}}, std::max(1.0 - k, 0.0), ConstraintFamily::bound);
        rows.add({{j, -1.0}}, -1.0, ConstraintFamily::bound);
    }
    for (const auto& [begin, end] : lattice.groups()) {
        for (std::size_t j = begin + 1; j < end; ++j) {
            double k0 = std::exp(lattice[j - 1].m);
            double k1 = std::exp(lattice[j].m);
            if (!(k1 > k0)) {
                throw ConstraintError("build_constraints: duplicate strike in expiry group");
            }
            // slope >= -1 and slope <= 0 between adjacent strikes
            rows.add({{j - 1, -1.0}, {j, 1.0}}, -(k1 - k0), ConstraintFamily::monotonicity);
            rows.add({{j - 1, 1.0}, {j, -1.0}}, 0.0, ConstraintFamily::monotonicity);
        }
        for (std::size_t j = begin + 1; j + 1 < end; ++j) {
            double h0 = std::exp(lattice[j].m) - std::exp(lattice[j - 1].m);
            double h1 = std::exp(lattice[j + 1].m) - std::exp(lattice[j].m);
            double h = h0 + h1;
            rows.add({{j - 1, h1 / h}, {j, -1.0}, {j + 1, h0 / h}}, 0.0, ConstraintFamily::convexity);
        }
    }
    const auto& groups = lattice.groups();
    for (std::size_t g = 0; g + 1 < groups.size(); ++g) {
        for (std::size_t j = groups[g].first; j < groups[g].second; ++j) {
            std::size_t later = lattice.find(g + 1, lattice[j].delta);
            if (later != LiquidLattice::npos) {
                rows.add({{j, -1.0}, {later, 1.0}}, 0.0, ConstraintFamily::calendar);
            }
        }
    }

    ConstraintSystem system;
    const auto r = static_cast<Eigen::Index>(rows.rhs.size());
    system.A = Eigen::MatrixXd::Zero(r, static_cast<Eigen::Index>(n));
    system.b.resize(r);
    for (Eigen::Index i = 0; i < r; ++i) {
        for (auto [j, v] : rows.coeffs[static_cast<std::size_t>(i)]) {
            system.A(i, static_cast<Eigen::Index>(j)) = v;
        }
        system.b(i) = rows.rhs[static_cast<std::size_t>(i)];
    }
    system.family = std::move(rows.family);
    return system;
}

ViolationReport detect(const ConstraintSystem& system, const Eigen::VectorXd& c, double tol) {
    if (c.size() != system.A.cols()) {
        throw DomainError("detect: price vector has " + std::to_string(c.size()) + " entries, expected " +
                          std::to_string(system.A.cols()));
    }
    ViolationReport report;
    Eigen::VectorXd slack = system.A * c - system.b;
    for (Eigen::Index i = 0; i < slack.size(); ++i) {
        if (!(slack(i) >= -tol)) {
            report.rows.push_back(i);
        }
    }
    report.fraction = system.rows() ? static_cast<double>(report.rows.size()) / static_cast<double>(system.rows()) : 0.0;
    return report;
}

namespace {

// min |eps|_1 s.t. M eps >= r, solved with eps = eps_plus - eps_minus.
Eigen::VectorXd min_l1_shift(const Eigen::MatrixXd& M, const Eigen::VectorXd& r) {
    const Eigen::Index p = M.cols();
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        if (M.row(i).cwiseAbs().maxCoeff() > 1e-14) {
            keep.push_back(i);
        } else if (r(i) > detect_tolerance) {
            throw RepairError("repair: row " + std::to_string(i) + " cannot be satisfied by any perturbation");
        }
    }
    LinearProgram lp;
    lp.objective = Eigen::VectorXd::Ones(2 * p);
    lp.ineq_A.resize(static_cast<Eigen::Index>(keep.size()), 2 * p);
    lp.ineq_b.resize(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        auto i = static_cast<Eigen::Index>(k);
        lp.ineq_A.row(i).head(p) = M.row(keep[k]);
        lp.ineq_A.row(i).tail(p) = -M.row(keep[k]);
        lp.ineq_b(i) = r(keep[k]);
    }
    LpResult result = solve_lp(lp);
    if (result.status != LpStatus::optimal) {
        throw RepairError(std::string("repair: linear program ") + to_string(result.status));
    }
    return result.x.head(p) - result.x.tail(p);
}

}  // namespace

Eigen::VectorXd repair_l1(const ConstraintSystem& system, const Eigen::VectorXd& c) {
    if (detect(system, c, 0.0).clean()) {
        return c;
    }
    Eigen::VectorXd r = system.b - system.A * c;
    return c + min_l1_shift(system.A, r);
}

Eigen::VectorXd repair_in_basis(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, const Eigen::VectorXd& base,
                                const Eigen::MatrixXd& basis, const Eigen::VectorXd& x) {
    if (basis.rows() != x.size() || basis.cols() != A.cols() || base.size() != A.cols() || b.size() != A.rows()) {
        throw DomainError("repair_in_basis: inconsistent dimensions");
    }
    Eigen::VectorXd r = b - A * (base + basis.transpose() * x);
    if ((r.array() <= 0.0).all()) {
        return x;
    }
    Eigen::MatrixXd M = A * basis.transpose();
    return x + min_l1_shift(M, r);
}

FactorConstraintSystem project_constraints(const ConstraintSystem& system, const Eigen::VectorXd& inv_weights,
                                           const Eigen::VectorXd& G0, const Eigen::MatrixXd& G) {
    if (inv_weights.size() != system.A.cols() || G0.size() != system.A.cols() || G.cols() != system.A.cols()) {
        throw DomainError("project_constraints: inconsistent dimensions");
    }
    Eigen::MatrixXd scaled = system.A * inv_weights.asDiagonal();
    Eigen::MatrixXd full_A = scaled * G.transpose();
    Eigen::VectorXd full_b = system.b - scaled * G0;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < full_A.rows(); ++i) {
        double scale = scaled.row(i).norm() * std::max(1.0, G.norm());
        if (full_A.row(i).norm() > 1e-12 * scale) {
            keep.push_back(i);
        } else if (full_b(i) > detect_tolerance) {
            throw ConstraintError("project_constraints: row " + std::to_string(i) +
                                  " is violated for every factor value");
        }
    }
    FactorConstraintSystem out;
    out.A.resize(static_cast<Eigen::Index>(keep.size()), G.rows());
    out.b.resize(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        out.A.row(static_cast<Eigen::Index>(k)) = full_A.row(keep[k]);
        out.b(static_cast<Eigen::Index>(k)) = full_b(keep[k]);
    }
    return out;
}

FactorConstraintSystem eliminate_redundant(const FactorConstraintSystem& system) {
    const Eigen::Index r = system.rows();
    const Eigen::Index d = system.A.cols();
    Eigen::MatrixXd A = system.A;
    Eigen::VectorXd b = system.b;
    for (Eigen::Index i = 0; i < r; ++i) {
        double norm = A.row(i).norm();
        if (norm == 0.0) {
            throw ConstraintError("eliminate_redundant: zero row " + std::to_string(i));
        }
        A.row(i) /= norm;
        b(i) /= norm;
    }

    std::vector<bool> kept(static_cast<std::size_t>(r), true);
    for (Eigen::Index row = 0; row < r; ++row) {
        // Dual of: min a_row.xi over the other kept rows plus a_row.xi >= b_row - 1.
        std::vector<Eigen::Index> others;
        for (Eigen::Index i = 0; i < r; ++i) {
            if (i != row && kept[static_cast<std::size_t>(i)]) {
                others.push_back(i);
            }
        }
        const auto k = static_cast<Eigen::Index>(others.size());
        LinearProgram lp;
        lp.objective.resize(k + 1);
        lp.eq_A.resize(d, k + 1);
        for (Eigen::Index j = 0; j < k; ++j) {
            lp.objective(j) = -b(others[static_cast<std::size_t>(j)]);
            lp.eq_A.col(j) = A.row(others[static_cast<std::size_t>(j)]).transpose();
        }
        lp.objective(k) = -(b(row) - 1.0);
        lp.eq_A.col(k) = A.row(row).transpose();
        lp.eq_b = A.row(row).transpose();
        LpResult result = solve_lp(lp);
        if (result.status != LpStatus::optimal) {
            continue;
        }
        double min_value = -result.objective;
        if (min_value >= b(row) - 1e-9 * std::max(1.0, std::abs(b(row)))) {
            kept[static_cast<std::size_t>(row)] = false;
        }
    }

    FactorConstraintSystem out;
    out.redundancy_removed = true;
    Eigen::Index count = 0;
    for (bool k : kept) {
        count += k ? 1 : 0;
    }
    out.A.resize(count, d);
    out.b.resize(count);
    Eigen::Index at = 0;
    for (Eigen::Index i = 0; i < r; ++i) {
        if (kept[static_cast<std::size_t>(i)]) {
            out.A.row(at) = system.A.row(i);
            out.b(at) = system.b(i);
            ++at;
        }
    }
    return out;
}

void write_constraints(std::ostream& out, const ConstraintSystem& system) {
    for (Eigen::Index i = 0; i < system.rows(); ++i) {
        out << to_string(system.family[static_cast<std::size_t>(i)]) << ',';
        bool first = true;
        for (Eigen::Index j = 0; j < system.A.cols(); ++j) {
            double v = system.A(i, j);
            if (v != 0.0) {
                out << (first ? "" : " ") << j << ':' << format_double(v);
                first = false;
            }
        }
        out << ',' << format_double(system.b(i)) << '\n';
    }
}

}  // namespace optrisk
