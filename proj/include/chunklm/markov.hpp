#pragma once

#include <cstdint>
#include <vector>

#include "chunklm/rng.hpp"

namespace chunklm {

// Finite-state Markov token source. Rows of the transition matrix must be
// stochastic and the positive-entry graph strongly connected, so that the
// stationary distribution (and with it every entropy quantity) is unique.
class MarkovSource {
public:
    MarkovSource(std::vector<std::vector<double>> transition, std::vector<double> initial,
                 std::vector<int32_t> vocab_map = {});

    // delta * (single-cycle permutation) + (1 - delta) * uniform. Doubly
    // stochastic, so the stationary distribution is exactly uniform and
    // offset entropies have a closed form; mixes for any delta < 1.
    static MarkovSource noisy_cycle(int states, double delta, uint64_t seed);

    int states() const { return static_cast<int>(p_.size()); }
    const std::vector<std::vector<double>>& transition() const { return p_; }
    const std::vector<double>& initial() const { return initial_; }
    int32_t token_of(int state) const { return vocab_map_[state]; }

    std::vector<int32_t> sample(int64_t n, Rng& rng) const;
    // Exact log-likelihood of a token stream under this source (natural log).
    // Requires an injective vocab map; unseen tokens are rejected.
    double log_likelihood(const std::vector<int32_t>& tokens) const;

    // Stationary distribution by direct linear solve (replaces one balance
    // equation with the normalization constraint).
    std::vector<double> stationary_direct() const;
    // Stationary distribution by power iteration to 1e-14 residual.
    std::vector<double> stationary_power() const;

    // Mean conditional entropy one step ahead, weighted by the stationary
    // distribution: sum_s pi(s) H(P(s, .)). Natural log (nats).
    double entropy_rate() const;
    // Mean conditional entropy d steps ahead: sum_s pi(s) H(P^d(s, .)).
    // offset_entropy(1) == entropy_rate() exactly (same code path).
    double offset_entropy(int d) const;

private:
    std::vector<std::vector<double>> p_;
    std::vector<double> initial_;
    std::vector<int32_t> vocab_map_;
    std::vector<int32_t> state_of_token_; // inverse map, -1 where undefined
};

} // namespace chunklm
