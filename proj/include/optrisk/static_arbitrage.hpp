#pragma once

#include "optrisk/lattice.hpp"
#include "optrisk/lp.hpp"

#include <Eigen/Dense>

#include <iosfwd>
#include <string>
#include <vector>

namespace optrisk {

enum class ConstraintFamily { bound, monotonicity, convexity, calendar };

const char* to_string(ConstraintFamily family);

// Static-arbitrage inequalities A c >= b on normalized lattice prices.
struct ConstraintSystem {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    std::vector<ConstraintFamily> family;

    Eigen::Index rows() const { return A.rows(); }
};

// Constraints on primary factors: A xi >= b.
struct FactorConstraintSystem {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    bool redundancy_removed = false;

    Eigen::Index rows() const { return A.rows(); }
    bool contains(const Eigen::VectorXd& xi, double tol = 0.0) const;
};

inline constexpr double detect_tolerance = 1e-8;

ConstraintSystem build_constraints(const LiquidLattice& lattice);

struct ViolationReport {
    std::vector<Eigen::Index> rows;
    double fraction = 0.0;

    bool clean() const { return rows.empty(); }
};

ViolationReport detect(const ConstraintSystem& system, const Eigen::VectorXd& c, double tol = detect_tolerance);

// Minimal l1 repair: returns c + eps with A (c + eps) >= b.
Eigen::VectorXd repair_l1(const ConstraintSystem& system, const Eigen::VectorXd& c);

// Minimal l1 perturbation of coordinates x in a basis B (p x N):
//   min |eps|_1  s.t.  A (base + B^T (x + eps)) >= b.
// Returns x + eps. Used both for raw prices (B = I) and for secondary factors.
Eigen::VectorXd repair_in_basis(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, const Eigen::VectorXd& base,
                                const Eigen::MatrixXd& basis, const Eigen::VectorXd& x);

// Projects price constraints onto factor coordinates where
// c = diag(inv_weights) (G0 + G^T xi). Rows with a vanishing projection are dropped
// when trivially satisfied.
FactorConstraintSystem project_constraints(const ConstraintSystem& system, const Eigen::VectorXd& inv_weights,
                                           const Eigen::VectorXd& G0, const Eigen::MatrixXd& G);

FactorConstraintSystem eliminate_redundant(const FactorConstraintSystem& system);

// One line per row: family_tag,idx:val idx:val ...,rhs
void write_constraints(std::ostream& out, const ConstraintSystem& system);

}  // namespace optrisk
