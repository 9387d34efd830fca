#include "chunklm/markov.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace chunklm {

namespace {

constexpr double kRowSumTol = 1e-12;

void reach(const std::vector<std::vector<double>>& p, int start, bool transpose,
           std::vector<uint8_t>& seen) {
    const int s = static_cast<int>(p.size());
    std::vector<int> stack{start};
    seen.assign(static_cast<size_t>(s), 0);
    seen[start] = 1;
    while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (int v = 0; v < s; ++v) {
            const double w = transpose ? p[v][u] : p[u][v];
            if (w > 0.0 && !seen[v]) {
                seen[v] = 1;
                stack.push_back(v);
            }
        }
    }
}

double row_entropy(const std::vector<double>& row) {
    double h = 0.0;
    for (double x : row)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

std::vector<std::vector<double>> matmul_square(const std::vector<std::vector<double>>& a,
                                               const std::vector<std::vector<double>>& b) {
    const int s = static_cast<int>(a.size());
    std::vector<std::vector<double>> c(s, std::vector<double>(s, 0.0));
    for (int i = 0; i < s; ++i)
        for (int k = 0; k < s; ++k) {
            const double av = a[i][k];
            if (av == 0.0) continue;
            for (int j = 0; j < s; ++j) c[i][j] += av * b[k][j];
        }
    return c;
}

} // namespace

MarkovSource::MarkovSource(std::vector<std::vector<double>> transition,
                           std::vector<double> initial, std::vector<int32_t> vocab_map)
    : p_(std::move(transition)), initial_(std::move(initial)), vocab_map_(std::move(vocab_map)) {
    const int s = static_cast<int>(p_.size());
    if (s == 0) throw std::invalid_argument("markov: empty transition matrix");
    for (int i = 0; i < s; ++i) {
        if (static_cast<int>(p_[i].size()) != s)
            throw std::invalid_argument("markov: transition row " + std::to_string(i) +
                                        " has wrong width");
        double sum = 0.0;
        for (double x : p_[i]) {
            if (x < 0.0)
                throw std::invalid_argument("markov: negative entry in row " + std::to_string(i));
            sum += x;
        }
        if (std::fabs(sum - 1.0) > kRowSumTol)
            throw std::invalid_argument("markov: row " + std::to_string(i) +
                                        " sums to " + std::to_string(sum));
    }
    if (static_cast<int>(initial_.size()) != s)
        throw std::invalid_argument("markov: initial distribution size mismatch");
    double isum = 0.0;
    for (double x : initial_) {
        if (x < 0.0) throw std::invalid_argument("markov: negative initial probability");
        isum += x;
    }
    if (std::fabs(isum - 1.0) > kRowSumTol)
        throw std::invalid_argument("markov: initial distribution sums to " +
                                    std::to_string(isum));

    std::vector<uint8_t> fwd, bwd;
    reach(p_, 0, false, fwd);
    reach(p_, 0, true, bwd);
    for (int i = 0; i < s; ++i)
        if (!fwd[i] || !bwd[i])
            throw std::invalid_argument("markov: chain is not irreducible (state " +
                                        std::to_string(i) + " unreachable)");

    if (vocab_map_.empty()) {
        vocab_map_.resize(static_cast<size_t>(s));
        for (int i = 0; i < s; ++i) vocab_map_[i] = i;
    }
    if (static_cast<int>(vocab_map_.size()) != s)
        throw std::invalid_argument("markov: vocab map size mismatch");
    int32_t max_tok = 0;
    for (int32_t t : vocab_map_) {
        if (t < 0) throw std::invalid_argument("markov: negative token in vocab map");
        max_tok = std::max(max_tok, t);
    }
    state_of_token_.assign(static_cast<size_t>(max_tok) + 1, -1);
    for (int i = 0; i < s; ++i) {
        if (state_of_token_[vocab_map_[i]] != -1)
            throw std::invalid_argument("markov: vocab map is not injective");
        state_of_token_[vocab_map_[i]] = i;
    }
}

MarkovSource MarkovSource::noisy_cycle(int states, double delta, uint64_t seed) {
    if (states < 2 || delta < 0.0 || delta >= 1.0)
        throw std::invalid_argument("markov: noisy_cycle needs states >= 2 and delta in [0,1)");
    // Seeded random single-cycle permutation (Sattolo's algorithm).
    std::vector<int> perm(static_cast<size_t>(states));
    for (int i = 0; i < states; ++i) perm[i] = i;
    Rng rng(seed, {0x6d61726b6f76ull});
    for (int i = states - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i)));
        std::swap(perm[i], perm[j]);
    }
    const double base = (1.0 - delta) / static_cast<double>(states);
    std::vector<std::vector<double>> p(static_cast<size_t>(states),
                                       std::vector<double>(static_cast<size_t>(states), base));
    for (int i = 0; i < states; ++i) p[i][perm[i]] += delta;
    std::vector<double> init(static_cast<size_t>(states), 1.0 / static_cast<double>(states));
    return MarkovSource(std::move(p), std::move(init));
}

std::vector<int32_t> MarkovSource::sample(int64_t n, Rng& rng) const {
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(n));
    if (n <= 0) return out;
    auto draw = [&](const std::vector<double>& dist) {
        const double u = rng.next_unit();
        double acc = 0.0;
        for (size_t i = 0; i < dist.size(); ++i) {
            acc += dist[i];
            if (u < acc) return static_cast<int>(i);
        }
        return static_cast<int>(dist.size()) - 1;
    };
    int state = draw(initial_);
    out.push_back(vocab_map_[state]);
    for (int64_t i = 1; i < n; ++i) {
        state = draw(p_[state]);
        out.push_back(vocab_map_[state]);
    }
    return out;
}

double MarkovSource::log_likelihood(const std::vector<int32_t>& tokens) const {
    if (tokens.empty()) return 0.0;
    auto state_of = [&](int32_t tok, size_t pos) {
        if (tok < 0 || tok >= static_cast<int32_t>(state_of_token_.size()) ||
            state_of_token_[tok] < 0)
            throw std::invalid_argument("markov: token " + std::to_string(tok) +
                                        " at position " + std::to_string(pos) +
                                        " is not produced by this source");
        return state_of_token_[tok];
    };
    int prev = state_of(tokens[0], 0);
    double ll = std::log(initial_[prev]);
    for (size_t i = 1; i < tokens.size(); ++i) {
        const int cur = state_of(tokens[i], i);
        const double w = p_[prev][cur];
        ll += w > 0.0 ? std::log(w) : -1e30; // impossible transition
        prev = cur;
    }
    return ll;
}

std::vector<double> MarkovSource::stationary_direct() const {
    // Solve pi (P - I) = 0 with sum(pi) = 1: transpose to (P^T - I) pi = 0,
    // overwrite the last equation with the normalization row.
    const int s = states();
    std::vector<std::vector<double>> a(static_cast<size_t>(s),
                                       std::vector<double>(static_cast<size_t>(s) + 1, 0.0));
    for (int i = 0; i < s; ++i) {
        for (int j = 0; j < s; ++j) a[i][j] = p_[j][i] - (i == j ? 1.0 : 0.0);
        a[i][s] = 0.0;
    }
    for (int j = 0; j < s; ++j) a[s - 1][j] = 1.0;
    a[s - 1][s] = 1.0;

    for (int col = 0; col < s; ++col) {
        int piv = col;
        for (int r = col + 1; r < s; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
        if (std::fabs(a[piv][col]) < 1e-14)
            throw std::runtime_error("markov: singular system for stationary distribution");
        std::swap(a[col], a[piv]);
        for (int r = 0; r < s; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            if (f == 0.0) continue;
            for (int j = col; j <= s; ++j) a[r][j] -= f * a[col][j];
        }
    }
    std::vector<double> pi(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) pi[i] = a[i][s] / a[i][i];
    return pi;
}

std::vector<double> MarkovSource::stationary_power() const {
    const int s = states();
    std::vector<double> pi(static_cast<size_t>(s), 1.0 / static_cast<double>(s));
    std::vector<double> next(static_cast<size_t>(s));
    for (int it = 0; it < 200000; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (int i = 0; i < s; ++i) {
            const double w = pi[i];
            if (w == 0.0) continue;
            for (int j = 0; j < s; ++j) next[j] += w * p_[i][j];
        }
        double norm = 0.0;
        for (double x : next) norm += x;
        for (double& x : next) x /= norm;
        double resid = 0.0;
        for (int i = 0; i < s; ++i) resid += std::fabs(next[i] - pi[i]);
        pi.swap(next);
        if (resid < 1e-14) return pi;
    }
    throw std::runtime_error("markov: power iteration did not converge");
}

double MarkovSource::entropy_rate() const { return offset_entropy(1); }

double MarkovSource::offset_entropy(int d) const {
    if (d < 1) throw std::invalid_argument("markov: offset must be >= 1");
    const std::vector<double> pi = stationary_direct();
    std::vector<std::vector<double>> pd = p_;
    for (int k = 1; k < d; ++k) pd = matmul_square(pd, p_);
    double h = 0.0;
    for (int i = 0; i < states(); ++i) h += pi[static_cast<size_t>(i)] * row_entropy(pd[i]);
    return h;
}

} // namespace chunklm
