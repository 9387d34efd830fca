#pragma once

#include <cstdint>
#include <vector>

#include "chunklm/model.hpp"
#include "chunklm/rng.hpp"
#include "chunklm/tokens.hpp"

namespace chunklm {

struct SamplerConfig {
    int64_t top_k = 30;
    double temperature = 0.8;
};

// Draws one token from a logits row: the top_k highest entries (ties broken
// toward the lower id) renormalized at the given temperature. Temperature
// zero is a deterministic argmax and consumes no randomness; otherwise the
// call consumes exactly one draw, which keeps replay accounting simple.
int32_t top_k_sample(const Tensor& logits, int64_t row, const SamplerConfig& sampler, Rng& rng);

// Incremental chunk-by-chunk decoding with a sliding key/value cache. The
// prompt is forced through the same chunk steps the decoder uses, so every
// cached row is computed under exactly the mask a single batched forward
// would apply and the sampled stream is bit-identical to re-scoring the
// final sequence in one pass.
class StreamSession {
public:
    // The prompt must be a whole number of chunks (see pad_to_chunk). An
    // empty prompt is allowed: the first chunk is drawn uniformly.
    StreamSession(const ModelParams& params, const TokenStream& prompt,
                  const SamplerConfig& sampler, Rng rng);

    // Samples the next chunk from the pending logits, forwards it, and
    // returns it.
    TokenStream step();

    const TokenStream& tokens() const { return history_; }
    int64_t generated() const { return static_cast<int64_t>(history_.size()) - prompt_len_; }
    int64_t decode_steps() const { return decode_steps_; }
    int64_t cache_rows() const;
    const std::vector<int64_t>& cache_positions() const { return cache_.positions; }
    // Logits for the positions that predict the next chunk; invalid before
    // any forward has run (empty prompt, no steps yet).
    const Tensor& pending_logits() const;

private:
    void forward_chunk(const TokenStream& chunk, int64_t first_position);
    void evict_for(int64_t chunk_end);

    const ModelParams* params_;
    SamplerConfig sampler_;
    Rng rng_;
    KvCache cache_;
    Tensor pending_;
    bool has_pending_ = false;
    TokenStream history_;
    int64_t prompt_len_ = 0;
    int64_t next_position_ = 0;
    int64_t decode_steps_ = 0;
};

// Runs a session until at least n_tokens have been generated and returns
// exactly the first n_tokens of the continuation.
TokenStream generate_tokens(StreamSession& session, int64_t n_tokens);

// Independent continuations of one prompt from per-index forked streams;
// continuation i is the same no matter how many are requested.
std::vector<TokenStream> generate_continuations(const ModelParams& params,
                                                const TokenStream& prompt, int64_t count,
                                                int64_t n_tokens, const SamplerConfig& sampler,
                                                uint64_t seed);

} // namespace chunklm
