#pragma once

// Distributions over full token sequences and the distances between them.

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "dos/core.hpp"

namespace dos {

/// Sparse probability table over full sequences. Ordered for stable output.
using SequenceDistribution = std::map<Tokens, double>;

inline double total_mass(const SequenceDistribution& d) {
    double z = 0.0;
    for (const auto& [_, p] : d) z += p;
    return z;
}

/// Normalized frequency table of the observed sequences.
inline SequenceDistribution empirical_distribution(const std::vector<Tokens>& samples) {
    if (samples.empty()) throw std::invalid_argument("empirical_distribution needs at least one sample");
    SequenceDistribution d;
    for (const auto& s : samples) d[s] += 1.0;
    const double n = static_cast<double>(samples.size());
    for (auto& [_, p] : d) p /= n;
    return d;
}

/// (1/2) sum |p - q| over the union of supports.
inline double tv_distance(const SequenceDistribution& p, const SequenceDistribution& q) {
    double acc = 0.0;
    auto ip = p.begin();
    auto iq = q.begin();
    while (ip != p.end() || iq != q.end()) {
        if (iq == q.end() || (ip != p.end() && ip->first < iq->first)) {
            acc += std::abs(ip->second);
            ++ip;
        } else if (ip == p.end() || iq->first < ip->first) {
            acc += std::abs(iq->second);
            ++iq;
        } else {
            acc += std::abs(ip->second - iq->second);
            ++ip;
            ++iq;
        }
    }
    return std::min(1.0, 0.5 * acc);
}

/// KL(p || q) over sequences; q is floored at 1e-12 so the value is finite.
inline double kl_sequences(const SequenceDistribution& p, const SequenceDistribution& q) {
    constexpr double kFloor = 1e-12;
    double acc = 0.0;
    for (const auto& [seq, pv] : p) {
        if (pv <= 0.0) continue;
        auto it = q.find(seq);
        const double qv = std::max(it == q.end() ? 0.0 : it->second, kFloor);
        acc += pv * std::log(pv / qv);
    }
    // equal distributions built along different paths leave a -1e-16 residue
    return std::max(0.0, acc);
}

}  // namespace dos
