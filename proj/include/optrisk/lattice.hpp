#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace optrisk {

inline constexpr double days_per_year = 365.0;

struct LatticeNode {
    double tau = 0.0;    // year fraction
    double m = 0.0;      // log-moneyness ln(K/F)
    double delta = 0.0;  // delta label that generated m
};

// Fixed option lattice, grouped by expiry with moneyness ascending inside each
// group. Expiries ascend.
class LiquidLattice {
public:
    LiquidLattice() = default;
    explicit LiquidLattice(std::vector<LatticeNode> nodes);

    std::size_t size() const { return nodes_.size(); }
    const LatticeNode& operator[](std::size_t j) const { return nodes_[j]; }
    const std::vector<LatticeNode>& nodes() const { return nodes_; }

    const std::vector<double>& expiries() const { return expiries_; }
    // Half-open node ranges [begin, end) per expiry, aligned with expiries().
    const std::vector<std::pair<std::size_t, std::size_t>>& groups() const { return groups_; }

    // Node index with the given expiry group and delta label, or npos.
    std::size_t find(std::size_t group, double delta) const;
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    std::string fingerprint() const;

private:
    std::vector<LatticeNode> nodes_;
    std::vector<double> expiries_;
    std::vector<std::pair<std::size_t, std::size_t>> groups_;
};

// Lattice with m from Black-Scholes delta inversion at a reference vol. Used by
// tests and the synthetic generator; real lattices come from build_lattice.
LiquidLattice make_delta_lattice(const std::vector<int>& tau_days, const std::vector<double>& deltas, double ref_vol);

// The 10 expiries x 13 deltas layout of the reference dataset.
std::vector<int> standard_expiry_days();
std::vector<double> standard_deltas();

}  // namespace optrisk
