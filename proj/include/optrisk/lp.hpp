#pragma once

#include <Eigen/Dense>

#include <cstddef>

namespace optrisk {

// minimize objective . x
// subject to  ineq_A x >= ineq_b,  eq_A x = eq_b,  lower <= x <= upper.
// Empty lower means x >= 0; empty upper means no upper bound. Infinite entries
// are allowed in either bound vector.
struct LinearProgram {
    Eigen::VectorXd objective;
    Eigen::MatrixXd ineq_A;
    Eigen::VectorXd ineq_b;
    Eigen::MatrixXd eq_A;
    Eigen::VectorXd eq_b;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
};

enum class LpStatus { optimal, infeasible, unbounded };

struct LpResult {
    LpStatus status = LpStatus::infeasible;
    Eigen::VectorXd x;
    double objective = 0.0;
    // Multipliers of the original rows at the optimum: ineq_duals >= 0 and
    // objective = ineq_A^T ineq_duals + eq_A^T eq_duals + bound multipliers.
    Eigen::VectorXd ineq_duals;
    Eigen::VectorXd eq_duals;
    std::size_t iterations = 0;
};

struct LpOptions {
    double tolerance = 1e-9;
    std::size_t max_iterations = 1'000'000;
};

LpResult solve_lp(const LinearProgram& lp, const LpOptions& options = {});

const char* to_string(LpStatus status);

}  // namespace optrisk
