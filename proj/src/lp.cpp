#include "optrisk/lp.hpp"

#include "optrisk/errors.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace optrisk {

const char* to_string(LpStatus status) {
    switch (status) {
        case LpStatus::optimal:
            return "optimal";
        case LpStatus::infeasible:
            return "infeasible";
        case LpStatus::unbounded:
            return "unbounded";
    }
    return "unknown";
}

namespace {

constexpr double pivot_tolerance = 1e-11;
constexpr std::size_t degenerate_run_before_bland = 50;

enum class Sense { ge, le, eq };

// x_j = offset_j + sum over parts (sign * column value)
struct VariableMap {
    double offset = 0.0;
    int column = -1;
    double sign = 1.0;
    int negative_column = -1;  // free variables split into two columns
};

struct StdRow {
    Eigen::VectorXd coeffs;  // over structural columns
    double rhs = 0.0;
    Sense sense = Sense::ge;
    double flip = 1.0;  // -1 when the row was negated to make rhs >= 0
    int slack = -1;
    double slack_coeff = 0.0;
    int artificial = -1;
};

class Tableau {
public:
    Tableau(Eigen::Index rows, Eigen::Index cols) : t_(Eigen::MatrixXd::Zero(rows + 1, cols + 1)), basis_(rows, -1) {}

    Eigen::Index rows() const { return t_.rows() - 1; }
    Eigen::Index cols() const { return t_.cols() - 1; }

    double& at(Eigen::Index i, Eigen::Index j) { return t_(i, j); }
    double at(Eigen::Index i, Eigen::Index j) const { return t_(i, j); }
    double& rhs(Eigen::Index i) { return t_(i, cols()); }
    double& cost(Eigen::Index j) { return t_(rows(), j); }
    double& value() { return t_(rows(), cols()); }
    std::vector<int>& basis() { return basis_; }

    void pivot(Eigen::Index r, Eigen::Index q) {
        double p = t_(r, q);
        t_.row(r) /= p;
        Eigen::VectorXd column = t_.col(q);
        column(r) = 0.0;
        t_.noalias() -= column * t_.row(r);
        basis_[static_cast<std::size_t>(r)] = static_cast<int>(q);
    }

private:
    Eigen::MatrixXd t_;
    std::vector<int> basis_;
};

// Runs simplex iterations on the current cost row over columns allowed[j].
LpStatus iterate(Tableau& tab, const std::vector<bool>& allowed, const LpOptions& options, std::size_t& iterations) {
    std::size_t degenerate_run = 0;
    const Eigen::Index m = tab.rows();
    const Eigen::Index n = tab.cols();
    while (true) {
        if (iterations >= options.max_iterations) {
            throw NumericError("solve_lp: iteration cap of " + std::to_string(options.max_iterations) + " reached");
        }
        const bool bland = degenerate_run >= degenerate_run_before_bland;
        Eigen::Index entering = -1;
        double best = -options.tolerance;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (!allowed[static_cast<std::size_t>(j)]) {
                continue;
            }
            double d = tab.cost(j);
            if (d < best) {
                entering = j;
                if (bland) {
                    break;
                }
                best = d;
            }
        }
        if (entering < 0) {
            return LpStatus::optimal;
        }

        Eigen::Index leaving = -1;
        double best_ratio = std::numeric_limits<double>::infinity();
        double best_pivot = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) {
            double a = tab.at(i, entering);
            if (a <= pivot_tolerance) {
                continue;
            }
            double ratio = std::max(tab.rhs(i), 0.0) / a;
            bool take = false;
            if (ratio < best_ratio - 1e-12) {
                take = true;
            } else if (ratio <= best_ratio + 1e-12 && leaving >= 0) {
                if (bland) {
                    take = tab.basis()[static_cast<std::size_t>(i)] < tab.basis()[static_cast<std::size_t>(leaving)];
                } else {
                    take = a > best_pivot;
                }
            }
            if (take) {
                leaving = i;
                best_ratio = std::min(ratio, best_ratio);
                best_pivot = a;
            }
        }
        if (leaving < 0) {
            return LpStatus::unbounded;
        }
        degenerate_run = best_ratio <= 1e-12 ? degenerate_run + 1 : 0;
        tab.pivot(leaving, entering);
        ++iterations;
    }
}

}  // namespace

LpResult solve_lp(const LinearProgram& lp, const LpOptions& options) {
    const Eigen::Index n = lp.objective.size();
    const Eigen::Index n_ineq = lp.ineq_A.rows();
    const Eigen::Index n_eq = lp.eq_A.rows();
    if (n == 0) {
        throw DomainError("solve_lp: empty objective");
    }
    if ((n_ineq > 0 && (lp.ineq_A.cols() != n || lp.ineq_b.size() != n_ineq)) ||
        (n_eq > 0 && (lp.eq_A.cols() != n || lp.eq_b.size() != n_eq)) ||
        (lp.lower.size() != 0 && lp.lower.size() != n) || (lp.upper.size() != 0 && lp.upper.size() != n)) {
        throw DomainError("solve_lp: inconsistent dimensions");
    }
    if (!lp.objective.allFinite() || (n_ineq > 0 && (!lp.ineq_A.allFinite() || !lp.ineq_b.allFinite())) ||
        (n_eq > 0 && (!lp.eq_A.allFinite() || !lp.eq_b.allFinite()))) {
        throw DomainError("solve_lp: non-finite coefficients");
    }

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<VariableMap> vars(static_cast<std::size_t>(n));
    std::vector<std::pair<Eigen::Index, double>> upper_rows;  // (structural column, bound)
    int n_struct = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        double lo = lp.lower.size() ? lp.lower(j) : 0.0;
        double hi = lp.upper.size() ? lp.upper(j) : inf;
        if (std::isnan(lo) || std::isnan(hi) || lo > hi || lo == inf || hi == -inf) {
            throw DomainError("solve_lp: invalid bounds on variable " + std::to_string(j));
        }
        auto& v = vars[static_cast<std::size_t>(j)];
        if (std::isfinite(lo)) {
            v.offset = lo;
            v.column = n_struct++;
            if (std::isfinite(hi)) {
                upper_rows.emplace_back(v.column, hi - lo);
            }
        } else if (std::isfinite(hi)) {
            v.offset = hi;
            v.sign = -1.0;
            v.column = n_struct++;
        } else {
            v.column = n_struct++;
            v.negative_column = n_struct++;
        }
    }

    auto map_row = [&](const Eigen::RowVectorXd& a, double b, Sense sense) {
        StdRow row;
        row.coeffs = Eigen::VectorXd::Zero(n_struct);
        double shift = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& v = vars[static_cast<std::size_t>(j)];
            shift += a(j) * v.offset;
            row.coeffs(v.column) += v.sign * a(j);
            if (v.negative_column >= 0) {
                row.coeffs(v.negative_column) -= a(j);
            }
        }
        row.rhs = b - shift;
        row.sense = sense;
        return row;
    };

    std::vector<StdRow> rows;
    rows.reserve(static_cast<std::size_t>(n_ineq + n_eq) + upper_rows.size());
    for (Eigen::Index i = 0; i < n_ineq; ++i) {
        rows.push_back(map_row(lp.ineq_A.row(i), lp.ineq_b(i), Sense::ge));
    }
    for (Eigen::Index i = 0; i < n_eq; ++i) {
        rows.push_back(map_row(lp.eq_A.row(i), lp.eq_b(i), Sense::eq));
    }
    for (auto [col, bound] : upper_rows) {
        StdRow row;
        row.coeffs = Eigen::VectorXd::Zero(n_struct);
        row.coeffs(col) = 1.0;
        row.rhs = bound;
        row.sense = Sense::le;
        rows.push_back(std::move(row));
    }

    int n_cols = n_struct;
    for (auto& row : rows) {
        if (row.sense != Sense::eq) {
            row.slack = n_cols++;
            row.slack_coeff = row.sense == Sense::ge ? -1.0 : 1.0;
        }
        if (row.rhs < 0.0) {
            row.flip = -1.0;
            row.coeffs = -row.coeffs;
            row.rhs = -row.rhs;
            row.slack_coeff = -row.slack_coeff;
        }
    }
    for (auto& row : rows) {
        if (!(row.slack >= 0 && row.slack_coeff > 0.0)) {
            row.artificial = n_cols++;
        }
    }

    const auto m = static_cast<Eigen::Index>(rows.size());
    Tableau tab(m, n_cols);
    std::vector<bool> is_artificial(static_cast<std::size_t>(n_cols), false);
    double rhs_scale = 1.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto& row = rows[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < n_struct; ++j) {
            tab.at(i, j) = row.coeffs(j);
        }
        if (row.slack >= 0) {
            tab.at(i, row.slack) = row.slack_coeff;
        }
        if (row.artificial >= 0) {
            tab.at(i, row.artificial) = 1.0;
            is_artificial[static_cast<std::size_t>(row.artificial)] = true;
            tab.basis()[static_cast<std::size_t>(i)] = row.artificial;
        } else {
            tab.basis()[static_cast<std::size_t>(i)] = row.slack;
        }
        tab.rhs(i) = row.rhs;
        rhs_scale = std::max(rhs_scale, std::abs(row.rhs));
    }

    LpResult result;
    std::size_t iterations = 0;

    // Phase 1: minimize the sum of artificials.
    bool any_artificial = false;
    for (Eigen::Index i = 0; i < m; ++i) {
        if (rows[static_cast<std::size_t>(i)].artificial >= 0) {
            any_artificial = true;
            for (Eigen::Index j = 0; j <= n_cols; ++j) {
                if (j < n_cols && is_artificial[static_cast<std::size_t>(j)]) {
                    continue;
                }
                tab.at(m, j) -= tab.at(i, j);
            }
        }
    }
    if (any_artificial) {
        std::vector<bool> allowed(static_cast<std::size_t>(n_cols), true);
        iterate(tab, allowed, options, iterations);
        double infeasibility = -tab.value();
        if (infeasibility > options.tolerance * rhs_scale) {
            result.status = LpStatus::infeasible;
            result.iterations = iterations;
            return result;
        }
        // Drive zero-level artificials out of the basis where possible.
        for (Eigen::Index i = 0; i < m; ++i) {
            int b = tab.basis()[static_cast<std::size_t>(i)];
            if (!is_artificial[static_cast<std::size_t>(b)]) {
                continue;
            }
            Eigen::Index best = -1;
            double best_abs = 1e-9;
            for (Eigen::Index j = 0; j < n_cols; ++j) {
                if (!is_artificial[static_cast<std::size_t>(j)] && std::abs(tab.at(i, j)) > best_abs) {
                    best_abs = std::abs(tab.at(i, j));
                    best = j;
                }
            }
            if (best >= 0) {
                tab.pivot(i, best);
                ++iterations;
            }
        }
    }

    // Phase 2 cost row: d_j = c_j - c_B^T (B^-1 A)_j.
    Eigen::VectorXd cost = Eigen::VectorXd::Zero(n_cols);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& v = vars[static_cast<std::size_t>(j)];
        cost(v.column) += v.sign * lp.objective(j);
        if (v.negative_column >= 0) {
            cost(v.negative_column) -= lp.objective(j);
        }
    }
    for (Eigen::Index j = 0; j <= n_cols; ++j) {
        tab.at(m, j) = j < n_cols ? cost(j) : 0.0;
    }
    for (Eigen::Index i = 0; i < m; ++i) {
        double cb = cost(tab.basis()[static_cast<std::size_t>(i)]);
        if (cb != 0.0) {
            for (Eigen::Index j = 0; j <= n_cols; ++j) {
                tab.at(m, j) -= cb * tab.at(i, j);
            }
        }
    }
    std::vector<bool> allowed(static_cast<std::size_t>(n_cols));
    for (Eigen::Index j = 0; j < n_cols; ++j) {
        allowed[static_cast<std::size_t>(j)] = !is_artificial[static_cast<std::size_t>(j)];
    }
    LpStatus status = iterate(tab, allowed, options, iterations);
    result.iterations = iterations;
    result.status = status;
    if (status != LpStatus::optimal) {
        return result;
    }

    Eigen::VectorXd column_values = Eigen::VectorXd::Zero(n_cols);
    for (Eigen::Index i = 0; i < m; ++i) {
        column_values(tab.basis()[static_cast<std::size_t>(i)]) = std::max(tab.rhs(i), 0.0);
    }
    result.x.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& v = vars[static_cast<std::size_t>(j)];
        double value = v.offset + v.sign * column_values(v.column);
        if (v.negative_column >= 0) {
            value -= column_values(v.negative_column);
        }
        result.x(j) = value;
    }
    result.objective = lp.objective.dot(result.x);

    auto row_dual = [&](const StdRow& row) {
        double y = 0.0;
        if (row.slack >= 0) {
            y = -tab.cost(row.slack) / row.slack_coeff;
        } else if (row.artificial >= 0) {
            y = -tab.cost(row.artificial);
        }
        return y * row.flip;
    };
    result.ineq_duals.resize(n_ineq);
    for (Eigen::Index i = 0; i < n_ineq; ++i) {
        result.ineq_duals(i) = row_dual(rows[static_cast<std::size_t>(i)]);
    }
    result.eq_duals.resize(n_eq);
    for (Eigen::Index i = 0; i < n_eq; ++i) {
        result.eq_duals(i) = row_dual(rows[static_cast<std::size_t>(n_ineq + i)]);
    }
    return result;
}

}  // namespace optrisk
