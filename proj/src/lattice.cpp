#include "optrisk/lattice.hpp"

#include "optrisk/black_scholes.hpp"
#include "optrisk/errors.hpp"
#include "optrisk/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace optrisk {

namespace {

constexpr double tau_match = 1e-12;
constexpr double delta_match = 1e-9;

}  // namespace

LiquidLattice::LiquidLattice(std::vector<LatticeNode> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.empty()) {
        throw DomainError("lattice: no nodes");
    }
    for (const auto& node : nodes_) {
        if (!(node.tau > 0.0) || !std::isfinite(node.m) || !(node.delta > 0.0 && node.delta < 1.0)) {
            throw DomainError("lattice: invalid node");
        }
    }
    std::stable_sort(nodes_.begin(), nodes_.end(), [](const LatticeNode& a, const LatticeNode& b) {
        if (std::abs(a.tau - b.tau) > tau_match) {
            return a.tau < b.tau;
        }
        return a.m < b.m;
    });
    std::size_t begin = 0;
    for (std::size_t j = 1; j <= nodes_.size(); ++j) {
        if (j == nodes_.size() || std::abs(nodes_[j].tau - nodes_[begin].tau) > tau_match) {
            expiries_.push_back(nodes_[begin].tau);
            groups_.emplace_back(begin, j);
            begin = j;
        }
    }
    for (const auto& [b, e] : groups_) {
        for (std::size_t j = b + 1; j < e; ++j) {
            if (!(nodes_[j].m > nodes_[j - 1].m)) {
                throw ConstraintError("lattice: duplicate moneyness within expiry " + std::to_string(nodes_[b].tau));
            }
        }
    }
}

std::size_t LiquidLattice::find(std::size_t group, double delta) const {
    const auto& [b, e] = groups_.at(group);
    for (std::size_t j = b; j < e; ++j) {
        if (std::abs(nodes_[j].delta - delta) < delta_match) {
            return j;
        }
    }
    return npos;
}

std::string LiquidLattice::fingerprint() const {
    std::string text;
    char buf[96];
    for (const auto& node : nodes_) {
        std::snprintf(buf, sizeof buf, "%.12g;%.12g;%.12g\n", node.tau, node.m, node.delta);
        text += buf;
    }
    return sha256_hex(text).substr(0, 16);
}

LiquidLattice make_delta_lattice(const std::vector<int>& tau_days, const std::vector<double>& deltas, double ref_vol) {
    std::vector<LatticeNode> nodes;
    for (int days : tau_days) {
        double tau = days / days_per_year;
        for (double delta : deltas) {
            nodes.push_back({tau, moneyness_from_delta(tau, delta, ref_vol), delta});
        }
    }
    return LiquidLattice(std::move(nodes));
}

std::vector<int> standard_expiry_days() {
    return {30, 60, 91, 122, 152, 182, 273, 365, 547, 730};
}

std::vector<double> standard_deltas() {
    std::vector<double> deltas;
    for (int i = 0; i < 13; ++i) {
        deltas.push_back(std::round((0.2 + 0.05 * i) * 100.0) / 100.0);
    }
    return deltas;
}

}  // namespace optrisk
