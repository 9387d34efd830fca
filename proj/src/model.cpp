#include "chunklm/model.hpp"

#include <cmath>
#include <stdexcept>

#include "chunklm/rng.hpp"

namespace chunklm {

namespace {

constexpr double kInitStd = 0.02;

double to_float_grid(double x) { return static_cast<double>(static_cast<float>(x)); }

Tensor normal_matrix(int64_t rows, int64_t cols, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    for (double& x : t.data) x = to_float_grid(kInitStd * rng.next_normal());
    return t;
}

} // namespace

void ModelConfig::validate() const {
    if (vocab < 2) throw std::invalid_argument("model config: vocab must be at least 2");
    if (chunk < 1) throw std::invalid_argument("model config: chunk must be positive");
    if (window < 1) throw std::invalid_argument("model config: window must be positive");
    if (window % chunk != 0) {
        throw std::invalid_argument("model config: window must be a multiple of the chunk size");
    }
    if (layers < 1) throw std::invalid_argument("model config: layers must be positive");
    if (heads < 1) throw std::invalid_argument("model config: heads must be positive");
    if (model_dim < 1) throw std::invalid_argument("model config: model dim must be positive");
    if (model_dim % heads != 0) {
        throw std::invalid_argument("model config: model dim must be divisible by heads");
    }
    if ((model_dim / heads) % 2 != 0) {
        throw std::invalid_argument("model config: head dim must be even for rotary pairs");
    }
    if (max_position < 1) throw std::invalid_argument("model config: max position must be positive");
}

MaskRef build_mask(int64_t length, const MaskPolicy& policy) {
    return build_mask_rect(iota_positions(length), iota_positions(length), policy);
}

MaskRef build_mask_rect(const std::vector<int64_t>& query_positions,
                        const std::vector<int64_t>& key_positions, const MaskPolicy& policy) {
    auto mask = std::make_shared<MaskBuf>(query_positions.size() * key_positions.size());
    size_t idx = 0;
    for (const int64_t q : query_positions) {
        for (const int64_t k : key_positions) {
            (*mask)[idx++] = policy.allowed(q, k) ? 1 : 0;
        }
    }
    return mask;
}

ModelParams ModelParams::init(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed, {0x6d6f64656cull});
    ModelParams p;
    p.config = config;
    auto put = [&](const std::string& name, Tensor t) {
        p.names.push_back(name);
        p.values.push_back(std::move(t));
    };

    const int64_t d = config.model_dim;
    const int64_t hidden = 4 * d;
    put("embedding", normal_matrix(config.vocab, d, rng));
    for (int64_t l = 0; l < config.layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        put(prefix + "attn_norm.gain", Tensor::full({d}, 1.0));
        put(prefix + "attn_norm.bias", Tensor::zeros({d}));
        put(prefix + "attn.wq", normal_matrix(d, d, rng));
        put(prefix + "attn.wk", normal_matrix(d, d, rng));
        put(prefix + "attn.wv", normal_matrix(d, d, rng));
        put(prefix + "attn.wo", normal_matrix(d, d, rng));
        put(prefix + "mlp_norm.gain", Tensor::full({d}, 1.0));
        put(prefix + "mlp_norm.bias", Tensor::zeros({d}));
        put(prefix + "mlp.w1", normal_matrix(d, hidden, rng));
        put(prefix + "mlp.b1", Tensor::zeros({hidden}));
        put(prefix + "mlp.w2", normal_matrix(hidden, d, rng));
        put(prefix + "mlp.b2", Tensor::zeros({d}));
    }
    put("final_norm.gain", Tensor::full({d}, 1.0));
    put("final_norm.bias", Tensor::zeros({d}));
    put("head", normal_matrix(d, config.vocab, rng));
    return p;
}

Tensor& ModelParams::tensor(const std::string& name) {
    for (size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return values[i];
    }
    throw std::invalid_argument("model params: no tensor named '" + name + "'");
}

const Tensor& ModelParams::tensor(const std::string& name) const {
    return const_cast<ModelParams*>(this)->tensor(name);
}

int64_t ModelParams::total_entries() const {
    int64_t n = 0;
    for (const Tensor& t : values) n += t.numel();
    return n;
}

std::vector<int64_t> iota_positions(int64_t count, int64_t first) {
    std::vector<int64_t> p(count);
    for (int64_t i = 0; i < count; ++i) p[i] = first + i;
    return p;
}

namespace {

ForwardNodes build_network(Graph& g, const ModelParams& params, const TokenStream& tokens,
                           const std::vector<int64_t>& positions, const KvCache* cache,
                           std::vector<int> param_nodes) {
    const ModelConfig& cfg = params.config;
    cfg.validate();
    if (tokens.empty()) throw std::invalid_argument("forward: empty token stream");
    if (positions.size() != tokens.size()) {
        throw std::invalid_argument("forward: positions do not match tokens");
    }
    for (size_t i = 0; i < positions.size(); ++i) {
        if (positions[i] < 0 || positions[i] >= cfg.max_position) {
            throw std::invalid_argument("forward: position " + std::to_string(i) +
                                        " outside [0, max_position)");
        }
    }
    if (cache) {
        if (static_cast<int64_t>(cache->k.size()) != cfg.layers ||
            static_cast<int64_t>(cache->v.size()) != cfg.layers) {
            throw std::invalid_argument("forward: cache layer count mismatch");
        }
        for (int64_t l = 0; l < cfg.layers; ++l) {
            const int64_t rows = static_cast<int64_t>(cache->positions.size());
            if (cache->k[l].dims != std::vector<int64_t>{rows, cfg.model_dim} ||
                cache->v[l].dims != std::vector<int64_t>{rows, cfg.model_dim}) {
                throw std::invalid_argument("forward: cache tensor shape mismatch at layer " +
                                            std::to_string(l));
            }
        }
    }

    ForwardNodes out;
    out.params = std::move(param_nodes);
    auto node_of = [&](const std::string& name) {
        for (size_t i = 0; i < params.names.size(); ++i) {
            if (params.names[i] == name) return out.params[i];
        }
        throw std::logic_error("forward: missing parameter '" + name + "'");
    };

    const int heads = static_cast<int>(cfg.heads);
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim / cfg.heads));
    std::vector<int64_t> key_positions;
    if (cache) {
        key_positions = cache->positions;
        key_positions.insert(key_positions.end(), positions.begin(), positions.end());
    } else {
        key_positions = positions;
    }
    const MaskRef mask = build_mask_rect(positions, key_positions, params.policy());

    int x = g.embedding(node_of("embedding"), tokens);
    for (int64_t l = 0; l < cfg.layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        const int normed =
            g.layer_norm(x, node_of(prefix + "attn_norm.gain"), node_of(prefix + "attn_norm.bias"));
        const int q = g.rope(g.matmul(normed, node_of(prefix + "attn.wq")), positions, heads);
        const int k = g.rope(g.matmul(normed, node_of(prefix + "attn.wk")), positions, heads);
        const int v = g.matmul(normed, node_of(prefix + "attn.wv"));
        out.layer_k.push_back(k);
        out.layer_v.push_back(v);

        int k_all = k, v_all = v;
        if (cache) {
            k_all = g.concat_rows(g.external_leaf(&cache->k[l]), k);
            v_all = g.concat_rows(g.external_leaf(&cache->v[l]), v);
        }
        const int attn = g.attention(q, k_all, v_all, mask, heads, attn_scale);
        x = g.add(x, g.matmul(attn, node_of(prefix + "attn.wo")));

        const int normed2 =
            g.layer_norm(x, node_of(prefix + "mlp_norm.gain"), node_of(prefix + "mlp_norm.bias"));
        const int h1 = g.gelu(g.bias_add(g.matmul(normed2, node_of(prefix + "mlp.w1")),
                                         node_of(prefix + "mlp.b1")));
        const int h2 = g.bias_add(g.matmul(h1, node_of(prefix + "mlp.w2")),
                                  node_of(prefix + "mlp.b2"));
        x = g.add(x, h2);
    }
    const int final_normed =
        g.layer_norm(x, node_of("final_norm.gain"), node_of("final_norm.bias"));
    out.logits = g.matmul(final_normed, node_of("head"));
    return out;
}

} // namespace

ForwardNodes build_forward(Graph& g, const ModelParams& params, const TokenStream& tokens,
                           const std::vector<int64_t>& positions, const KvCache* cache) {
    std::vector<int> bound;
    bound.reserve(params.values.size());
    for (const Tensor& t : params.values) bound.push_back(g.external_leaf(&t));
    return build_network(g, params, tokens, positions, cache, std::move(bound));
}

ForwardNodes build_forward_owned(Graph& g, const ModelParams& params, const TokenStream& tokens,
                                 const std::vector<int64_t>& positions) {
    std::vector<int> bound;
    bound.reserve(params.values.size());
    for (const Tensor& t : params.values) bound.push_back(g.leaf(t));
    return build_network(g, params, tokens, positions, nullptr, std::move(bound));
}

Tensor forward_logits(const ModelParams& params, const TokenStream& tokens) {
    Graph g;
    const ForwardNodes nodes = build_forward(g, params, tokens, iota_positions(tokens.size()));
    g.forward();
    return g.value(nodes.logits);
}

Targets shift_targets(const TokenStream& tokens, int64_t chunk) {
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (chunk < 1) throw std::invalid_argument("shift_targets: chunk must be positive");
    if (t < chunk) {
        throw std::invalid_argument("shift_targets: stream of " + std::to_string(t) +
                                    " tokens is shorter than the chunk size " +
                                    std::to_string(chunk));
    }
    Targets targets;
    targets.ids.assign(t, 0);
    targets.valid.assign(t, 0);
    for (int64_t i = 0; i + chunk < t; ++i) {
        targets.ids[i] = tokens[i + chunk];
        targets.valid[i] = 1;
    }
    targets.valid_count = t - chunk;
    return targets;
}

NllResult stream_nll(const ModelParams& params, const TokenStream& tokens) {
    const int64_t c = params.config.chunk;
    if (static_cast<int64_t>(tokens.size()) <= c) {
        throw std::invalid_argument("nll: stream must be longer than the chunk size");
    }
    const Targets targets = shift_targets(tokens, c);

    Graph g;
    const ForwardNodes nodes = build_forward(g, params, tokens, iota_positions(tokens.size()));
    const int ce = g.cross_entropy(nodes.logits, targets.ids, targets.valid);
    g.forward();

    NllResult result;
    result.mean = g.value(ce)[0];
    result.valid_count = targets.valid_count;
    const Tensor& per_pos = g.nll_per_position(ce);
    result.per_position.assign(per_pos.data.begin(), per_pos.data.end());
    for (int64_t i = 0; i < per_pos.numel(); ++i) result.total += per_pos[i];
    return result;
}

} // namespace chunklm
