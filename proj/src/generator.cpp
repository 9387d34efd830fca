#include "chunklm/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "chunklm/graph.hpp"

namespace chunklm {

int32_t top_k_sample(const Tensor& logits, int64_t row, const SamplerConfig& sampler, Rng& rng) {
    if (logits.dims.size() != 2)
        throw std::invalid_argument("top_k_sample: logits must be a matrix, got " +
                                    logits.shape_str());
    const int64_t vocab = logits.dims[1];
    if (row < 0 || row >= logits.dims[0])
        throw std::invalid_argument("top_k_sample: row " + std::to_string(row) +
                                    " outside logits " + logits.shape_str());
    if (sampler.top_k < 1) throw std::invalid_argument("top_k_sample: top_k must be positive");
    if (sampler.temperature < 0.0)
        throw std::invalid_argument("top_k_sample: temperature must be non-negative");
    const double* values = logits.data.data() + row * vocab;
    for (int64_t i = 0; i < vocab; ++i)
        if (!std::isfinite(values[i]))
            throw std::runtime_error("top_k_sample: non-finite logit at id " + std::to_string(i));

    if (sampler.temperature == 0.0) {
        int64_t best = 0;
        for (int64_t i = 1; i < vocab; ++i)
            if (values[i] > values[best]) best = i;
        return static_cast<int32_t>(best);
    }

    const int64_t k = std::min(sampler.top_k, vocab);
    std::vector<int64_t> ids(static_cast<size_t>(vocab));
    std::iota(ids.begin(), ids.end(), int64_t{0});
    // Ties at the cut keep the lower id.
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int64_t a, int64_t b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    });

    double max_scaled = values[ids[0]] / sampler.temperature;
    std::vector<double> weights(static_cast<size_t>(k));
    double total = 0.0;
    for (int64_t i = 0; i < k; ++i) {
        weights[static_cast<size_t>(i)] = std::exp(values[ids[i]] / sampler.temperature - max_scaled);
        total += weights[static_cast<size_t>(i)];
    }
    const double threshold = rng.next_unit() * total;
    double cumulative = 0.0;
    for (int64_t i = 0; i < k; ++i) {
        cumulative += weights[static_cast<size_t>(i)];
        if (cumulative >= threshold) return static_cast<int32_t>(ids[i]);
    }
    return static_cast<int32_t>(ids[k - 1]);
}

StreamSession::StreamSession(const ModelParams& params, const TokenStream& prompt,
                             const SamplerConfig& sampler, Rng rng)
    : params_(&params), sampler_(sampler), rng_(rng) {
    params.config.validate();
    if (sampler.top_k < 1)
        throw std::invalid_argument("stream session: top_k must be positive");
    if (sampler.temperature < 0.0)
        throw std::invalid_argument("stream session: temperature must be non-negative");
    const int64_t chunk = params.config.chunk;
    if (static_cast<int64_t>(prompt.size()) % chunk != 0)
        throw std::invalid_argument("stream session: prompt of " + std::to_string(prompt.size()) +
                                    " tokens is not a whole number of " + std::to_string(chunk) +
                                    "-token chunks");
    cache_.k.assign(static_cast<size_t>(params.config.layers), Tensor::zeros({0, params.config.model_dim}));
    cache_.v.assign(static_cast<size_t>(params.config.layers), Tensor::zeros({0, params.config.model_dim}));
    history_ = prompt;
    prompt_len_ = static_cast<int64_t>(prompt.size());
    for (int64_t start = 0; start < prompt_len_; start += chunk) {
        const TokenStream piece(prompt.begin() + start, prompt.begin() + start + chunk);
        evict_for(start + chunk - 1);
        forward_chunk(piece, start);
    }
    next_position_ = prompt_len_;
}

int64_t StreamSession::cache_rows() const {
    return cache_.k.empty() ? 0 : cache_.k[0].dims[0];
}

const Tensor& StreamSession::pending_logits() const {
    if (!has_pending_)
        throw std::runtime_error("stream session: no pending logits before the first forward");
    return pending_;
}

void StreamSession::evict_for(int64_t chunk_end) {
    const int64_t keep_from = chunk_end - params_->config.window + 1;
    size_t drop = 0;
    while (drop < cache_.positions.size() && cache_.positions[drop] < keep_from) ++drop;
    if (drop == 0) return;
    cache_.positions.erase(cache_.positions.begin(),
                           cache_.positions.begin() + static_cast<ptrdiff_t>(drop));
    const int64_t dim = params_->config.model_dim;
    for (size_t l = 0; l < cache_.k.size(); ++l) {
        for (Tensor* t : {&cache_.k[l], &cache_.v[l]}) {
            const int64_t rows = t->dims[0] - static_cast<int64_t>(drop);
            Tensor next = Tensor::zeros({rows, dim});
            std::copy(t->data.begin() + static_cast<ptrdiff_t>(drop * static_cast<size_t>(dim)),
                      t->data.end(), next.data.begin());
            *t = std::move(next);
        }
    }
}

void StreamSession::forward_chunk(const TokenStream& chunk, int64_t first_position) {
    Graph g;
    std::vector<int64_t> positions(chunk.size());
    std::iota(positions.begin(), positions.end(), first_position);
    const KvCache* cache = cache_.positions.empty() ? nullptr : &cache_;
    const ForwardNodes nodes = build_forward(g, *params_, chunk, positions, cache);
    g.forward();
    pending_ = g.value(nodes.logits);
    has_pending_ = true;

    const int64_t dim = params_->config.model_dim;
    const int64_t old_rows = cache_rows();
    const int64_t new_rows = old_rows + static_cast<int64_t>(chunk.size());
    for (size_t l = 0; l < cache_.k.size(); ++l) {
        const Tensor& k_rows = g.value(nodes.layer_k[l]);
        const Tensor& v_rows = g.value(nodes.layer_v[l]);
        for (std::pair<Tensor*, const Tensor*> pair :
             {std::pair<Tensor*, const Tensor*>{&cache_.k[l], &k_rows},
              std::pair<Tensor*, const Tensor*>{&cache_.v[l], &v_rows}}) {
            Tensor next = Tensor::zeros({new_rows, dim});
            std::copy(pair.first->data.begin(), pair.first->data.end(), next.data.begin());
            std::copy(pair.second->data.begin(), pair.second->data.end(),
                      next.data.begin() + static_cast<ptrdiff_t>(old_rows * dim));
            *pair.first = std::move(next);
        }
    }
    for (int64_t p : positions) cache_.positions.push_back(p);
}

TokenStream StreamSession::step() {
    const int64_t chunk = params_->config.chunk;
    const int64_t vocab = params_->config.vocab;
    TokenStream next(static_cast<size_t>(chunk));
    if (!has_pending_) {
        for (int64_t j = 0; j < chunk; ++j)
            next[static_cast<size_t>(j)] =
                static_cast<int32_t>(rng_.next_below(static_cast<uint64_t>(vocab)));
    } else {
        for (int64_t j = 0; j < chunk; ++j)
            next[static_cast<size_t>(j)] = top_k_sample(pending_, j, sampler_, rng_);
    }
    evict_for(next_position_ + chunk - 1);
    forward_chunk(next, next_position_);
    history_.insert(history_.end(), next.begin(), next.end());
    next_position_ += chunk;
    decode_steps_ += 1;
    return next;
}

TokenStream generate_tokens(StreamSession& session, int64_t n_tokens) {
    if (n_tokens < 1) throw std::invalid_argument("generate_tokens: n_tokens must be positive");
    const int64_t start = session.generated();
    while (session.generated() - start < n_tokens) session.step();
    const TokenStream& all = session.tokens();
    const size_t from = all.size() - static_cast<size_t>(session.generated() - start);
    return TokenStream(all.begin() + static_cast<ptrdiff_t>(from),
                       all.begin() + static_cast<ptrdiff_t>(from + static_cast<size_t>(n_tokens)));
}

std::vector<TokenStream> generate_continuations(const ModelParams& params,
                                                const TokenStream& prompt, int64_t count,
                                                int64_t n_tokens, const SamplerConfig& sampler,
                                                uint64_t seed) {
    if (count < 1)
        throw std::invalid_argument("generate_continuations: count must be positive");
    std::vector<TokenStream> out;
    const Rng parent(seed, {0x636f6e74ull});
    for (int64_t i = 0; i < count; ++i) {
        StreamSession session(params, prompt, sampler, parent.fork(static_cast<uint64_t>(i)));
        out.push_back(generate_tokens(session, n_tokens));
    }
    return out;
}

} // namespace chunklm
