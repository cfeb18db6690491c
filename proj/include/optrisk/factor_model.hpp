#pragma once

#include "optrisk/lattice.hpp"
#include "optrisk/market_data.hpp"
#include "optrisk/static_arbitrage.hpp"

#include <Eigen/Dense>

#include <iosfwd>
#include <vector>

namespace optrisk {

// lambda_j = 1 / (time-average Black-Scholes vega at node j).
struct VegaWeights {
    Eigen::VectorXd lambda;

    Eigen::VectorXd inverse() const { return lambda.cwiseInverse(); }
};

VegaWeights compute_vega_weights(const SurfacePanel& panel);

// Linear maps from lattice prices to d/dtau, d/dm and d^2/dm^2 at the nodes:
// natural splines in m within each expiry, central differences across expiries
// at fixed m (one-sided at the ends, linear continuation of the neighbour's
// spline outside its range).
struct SurfaceDerivatives {
    Eigen::MatrixXd d_tau;
    Eigen::MatrixXd d_m;
    Eigen::MatrixXd d_mm;

    explicit SurfaceDerivatives(const LiquidLattice& lattice);
};

// Weighted prices Lambda c_t = G0 + G^T xi_t + G_sec^T xi_sec_t + residual_t.
struct FactorModel {
    LiquidLattice lattice;
    VegaWeights weights;
    Eigen::VectorXd G0;
    Eigen::MatrixXd G;       // primary basis, d x N, orthonormal rows
    Eigen::MatrixXd G_sec;   // secondary basis, d_s x N
    Eigen::MatrixXd xi;      // L x d
    Eigen::MatrixXd xi_sec;  // L x d_s
    Eigen::MatrixXd residuals;  // L x N
    FactorConstraintSystem constraints;  // on primary factors
    std::vector<bool> arbitrage_flags;   // decoded row outside the constraint polytope

    Eigen::Index primary() const { return G.rows(); }
    Eigen::Index secondary() const { return G_sec.rows(); }

    // Normalized (unweighted) prices for the given factor values.
    Eigen::VectorXd prices(const Eigen::VectorXd& primary, const Eigen::VectorXd& secondary) const;
};

struct DecodeOptions {
    int primary = 2;             // 2 or 3
    int search_components = 10;  // principal components spanned by the static-arbitrage search
    int angle_grid = 48;         // rotation angles per plane in the direction search
    int sweeps = 2;
    std::size_t pda_sample_dates = 400;  // dates used when searching the third direction
};

FactorModel decode_primary(const SurfacePanel& panel, const VegaWeights& weights, const ConstraintSystem& constraints,
                           const DecodeOptions& options = {});

struct SecondaryFactors {
    Eigen::MatrixXd basis;     // d_s x N
    Eigen::MatrixXd series;    // L x d_s
    Eigen::MatrixXd residual;  // L x N after removing the secondary part
};

SecondaryFactors decode_secondary(const Eigen::MatrixXd& residuals, int count);

// decode_secondary applied to model.residuals, stored in the model.
void attach_secondary(FactorModel& model, int count);

// Least-squares coordinates (G G^T)^{-1} G (weighted_c - G0).
Eigen::VectorXd solve_factors(const Eigen::VectorXd& weighted_c, const Eigen::VectorXd& G0, const Eigen::MatrixXd& G);

// Drift/diffusion of all included factors and index vol per date, used by PDA.
// One row (or one matrix) means the value is constant across dates.
struct PdaInputs {
    Eigen::VectorXd gamma;                  // L or 1
    Eigen::MatrixXd drift;                  // L x k or 1 x k
    std::vector<Eigen::MatrixXd> diffusion;  // L or 1 matrices, k x k
};

// Sample estimates: constant drift and Cholesky factor of the increment
// covariance, constant index vol from log returns. Only consecutive rows of
// the same underlying contribute.
PdaInputs sample_pda_inputs(const Eigen::MatrixXd& factors, const SurfacePanel& panel);

struct ReconstructionMetrics {
    double mape = 0.0;
    double psas = 0.0;
    double pda = 0.0;
    std::vector<double> magnitude;  // range of each factor over that of the first primary factor
};

// Metrics of the reconstruction with all primary factors and the first
// secondary_count secondary factors.
ReconstructionMetrics compute_metrics(const FactorModel& model, const SurfacePanel& panel,
                                      const ConstraintSystem& constraints, int secondary_count,
                                      const PdaInputs* inputs = nullptr);

void write_factor_model(std::ostream& out, const FactorModel& model);
FactorModel read_factor_model(std::istream& in);

}  // namespace optrisk
