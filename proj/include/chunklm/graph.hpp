#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "chunklm/tensor.hpp"

namespace chunklm {

// Boolean attention mask, row-major [n_q x n_k]; 1 = may attend.
using MaskBuf = std::vector<uint8_t>;
using MaskRef = std::shared_ptr<const MaskBuf>;

// Additive pre-softmax penalty for masked score entries. exp(x - max)
// underflows to exactly 0.0 once x - max < -745, so any realistic score
// (|score| is checked to stay below 1e8) is wiped out completely and
// masked positions carry an attention weight of exact zero.
inline constexpr double kMaskPenalty = -1e9;

enum class OpKind : uint8_t {
    leaf,
    external_leaf,
    matmul,
    add,
    bias_add,
    hadamard,
    scale,
    embedding,
    softmax_rows,
    layer_norm,
    gelu,
    rope,
    concat_rows,
    attention,
    cross_entropy,
    sum_all,
    mean_all,
};

const char* op_name(OpKind k);

// Reverse-mode tape over tensor ops. Build the graph (shapes are checked at
// build time), call forward(), then backward(loss). Leaf values may be
// mutated in place and forward() re-run; this is what the finite-difference
// checker relies on. Execution of one graph is strictly single-threaded;
// many graphs may run concurrently over shared read-only parameter tensors
// bound through external_leaf().
class Graph {
public:
    struct Node {
        OpKind kind{OpKind::leaf};
        int a{-1}, b{-1}, c{-1};
        Tensor value;
        Tensor grad;
        const Tensor* external{nullptr}; // external_leaf payload
        std::vector<int32_t> ids;        // embedding ids / cross-entropy targets
        std::vector<uint8_t> flags;      // cross-entropy validity flags
        std::vector<int64_t> positions;  // rope absolute positions
        MaskRef mask;                    // attention mask
        int heads{1};
        double scalar{0.0};
        Tensor cache1, cache2;           // op-specific forward caches
    };

    int leaf(Tensor v);
    int external_leaf(const Tensor* v);

    int matmul(int a, int b);
    int add(int a, int b);
    int bias_add(int a, int bias);
    int hadamard(int a, int b);
    int scale(int a, double s);
    int embedding(int table, std::vector<int32_t> ids);
    int softmax_rows(int a);
    int layer_norm(int x, int gain, int bias, double eps = 1e-5);
    int gelu(int a);
    int rope(int a, std::vector<int64_t> positions, int heads, double base = 10000.0);
    int concat_rows(int a, int b);
    int attention(int q, int k, int v, MaskRef mask, int heads, double scale);
    int cross_entropy(int logits, std::vector<int32_t> targets, std::vector<uint8_t> valid);
    int sum_all(int a);
    int mean_all(int a);

    void forward();
    void backward(int loss);

    const Tensor& value(int id) const { return nodes_[id].value; }
    const Tensor& grad(int id) const { return nodes_[id].grad; }
    Tensor& leaf_value(int id);

    // Per-position negative log-likelihoods cached by cross_entropy.
    const Tensor& nll_per_position(int ce_node) const;
    // Flattened per-head attention probabilities [heads*n_q, n_k].
    const Tensor& attention_probs(int attn_node) const;

    size_t node_count() const { return nodes_.size(); }
    OpKind kind(int id) const { return nodes_[id].kind; }

private:
    int push(Node n);
    const Tensor& in(int id) const;
    void compute(int id);
    void propagate(int id);
    void check_finite(int id) const;

    std::vector<Node> nodes_;
    bool forwarded_{false};
};

// Central-difference gradient check for one owned-leaf parameter of a graph
// whose loss node is scalar. Runs forward+backward for the analytic gradient,
// then perturbs every parameter entry by +/-epsilon. Returns the maximum
// relative error max(|analytic - central| / max(1, |analytic|)).
double finite_diff_check(Graph& g, int loss, int parameter, double epsilon);

} // namespace chunklm
