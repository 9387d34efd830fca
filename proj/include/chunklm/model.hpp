#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunklm/graph.hpp"
#include "chunklm/tokens.hpp"

namespace chunklm {

struct ModelConfig {
    int64_t vocab = 2048;
    int64_t chunk = 4;
    int64_t window = 512;
    int64_t layers = 4;
    int64_t heads = 4;
    int64_t model_dim = 256;
    int64_t max_position = int64_t{1} << 40;

    void validate() const;
};

// Position q may attend to position k iff k's chunk is no later than q's
// and k lies within the window measured back from the end of q's chunk, so
// every query in a chunk shares one attention span.
struct MaskPolicy {
    int64_t chunk = 4;
    int64_t window = 512;

    bool allowed(int64_t q, int64_t k) const {
        const int64_t chunk_end = (q / chunk + 1) * chunk - 1;
        return k / chunk <= q / chunk && k >= chunk_end - window + 1;
    }
};

MaskRef build_mask(int64_t length, const MaskPolicy& policy);
MaskRef build_mask_rect(const std::vector<int64_t>& query_positions,
                        const std::vector<int64_t>& key_positions, const MaskPolicy& policy);

// Named parameter tensors in a fixed order shared by the optimizer and the
// checkpoint format. All values live on the float32 grid.
struct ModelParams {
    ModelConfig config;
    std::vector<std::string> names;
    std::vector<Tensor> values;

    static ModelParams init(const ModelConfig& config, uint64_t seed);

    Tensor& tensor(const std::string& name);
    const Tensor& tensor(const std::string& name) const;
    int64_t total_entries() const;
    MaskPolicy policy() const { return {config.chunk, config.window}; }
};

// Attention state carried across incremental decode steps: per-layer K rows
// (rotary encoding already applied) and V rows in ascending-position order,
// plus the absolute position of each row.
struct KvCache {
    std::vector<Tensor> k;
    std::vector<Tensor> v;
    std::vector<int64_t> positions;
};

struct ForwardNodes {
    int logits = -1;
    std::vector<int> layer_k;  // per layer, K rows for the new positions
    std::vector<int> layer_v;  // per layer, V rows for the new positions
    std::vector<int> params;   // external leaves aligned with ModelParams order
};

// Builds the forward graph for `tokens` at absolute `positions`. With a
// cache, its rows join the key/value set of every layer, which is exactly
// what full recomputation over the concatenated sequence would produce.
ForwardNodes build_forward(Graph& g, const ModelParams& params, const TokenStream& tokens,
                           const std::vector<int64_t>& positions, const KvCache* cache = nullptr);

// Same network with every parameter copied into a graph-owned leaf, so the
// finite-difference checker may perturb any of them in place.
ForwardNodes build_forward_owned(Graph& g, const ModelParams& params, const TokenStream& tokens,
                                 const std::vector<int64_t>& positions);

std::vector<int64_t> iota_positions(int64_t count, int64_t first = 0);
Tensor forward_logits(const ModelParams& params, const TokenStream& tokens);

struct Targets {
    std::vector<int32_t> ids;
    std::vector<uint8_t> valid;
    int64_t valid_count = 0;
};

// Next-chunk targets: target[t] = tokens[t + C]; the last C positions are
// flagged invalid and excluded from every loss.
Targets shift_targets(const TokenStream& tokens, int64_t chunk);

struct NllResult {
    double total = 0.0;
    double mean = 0.0;
    int64_t valid_count = 0;
    std::vector<double> per_position;  // zero at invalid positions
};

NllResult stream_nll(const ModelParams& params, const TokenStream& tokens);

} // namespace chunklm
