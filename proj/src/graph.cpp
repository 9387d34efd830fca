#include "chunklm/graph.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace chunklm {

namespace {

constexpr double kScoreLimit = 1e8; // sanity bound so kMaskPenalty always dominates

[[noreturn]] void bad_dims(const char* op, int id, const std::string& detail) {
    throw std::invalid_argument("graph: " + std::string(op) + "(node " + std::to_string(id) +
                                "): " + detail);
}

// c[m,n] = a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        std::memset(ci, 0, sizeof(double) * static_cast<size_t>(n));
        const double* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

// In-place row softmax with max subtraction; writes per-row logsumexp into
// lse if non-null. Summation runs in ascending index order; masked entries
// arrive as score + kMaskPenalty and underflow to exact zero, so the result
// is bit-identical whether or not masked columns are present at all.
void softmax_row(double* row, int64_t n, double* lse) {
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j)
        if (row[j] > mx) mx = row[j];
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < n; ++j) row[j] *= inv;
    if (lse) *lse = mx + std::log(sum);
}

} // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::external_leaf: return "external_leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::bias_add: return "bias_add";
        case OpKind::hadamard: return "hadamard";
        case OpKind::scale: return "scale";
        case OpKind::embedding: return "embedding";
        case OpKind::softmax_rows: return "softmax_rows";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::gelu: return "gelu";
        case OpKind::rope: return "rope";
        case OpKind::concat_rows: return "concat_rows";
        case OpKind::attention: return "attention";
        case OpKind::cross_entropy: return "cross_entropy";
        case OpKind::sum_all: return "sum_all";
        case OpKind::mean_all: return "mean_all";
    }
    return "?";
}

int Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    forwarded_ = false;
    return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Graph::in(int id) const {
    const Node& n = nodes_[id];
    return n.kind == OpKind::external_leaf ? *n.external : n.value;
}

Tensor& Graph::leaf_value(int id) {
    if (nodes_[id].kind != OpKind::leaf)
        throw std::invalid_argument("graph: leaf_value on non-leaf node " + std::to_string(id));
    return nodes_[id].value;
}

int Graph::leaf(Tensor v) {
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(v);
    return push(std::move(n));
}

int Graph::external_leaf(const Tensor* v) {
    if (!v) throw std::invalid_argument("graph: external_leaf requires a tensor");
    Node n;
    n.kind = OpKind::external_leaf;
    n.external = v;
    return push(std::move(n));
}

int Graph::matmul(int a, int b) {
    const Tensor& ta = in(a);
    const Tensor& tb = in(b);
    int id = static_cast<int>(nodes_.size());
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dims[1] != tb.dims[0])
        bad_dims("matmul", id, "dims " + ta.shape_str() + " x " + tb.shape_str() + " mismatch");
    Node n;
    n.kind = OpKind::matmul;
    n.a = a;
    n.b = b;
    n.value = Tensor::zeros({ta.dims[0], tb.dims[1]});
    return push(std::move(n));
}

int Graph::add(int a, int b) {
    const Tensor& ta = in(a);
    const Tensor& tb = in(b);
    int id = static_cast<int>(nodes_.size());
    if (!ta.same_shape(tb))
        bad_dims("add", id, "dims " + ta.shape_str() + " vs " + tb.shape_str() + " mismatch");
    Node n;
    n.kind = OpKind::add;
    n.a = a;
    n.b = b;
    n.value = Tensor::zeros(ta.dims);
    return push(std::move(n));
}

int Graph::bias_add(int a, int bias) {
    const Tensor& ta = in(a);
    const Tensor& tb = in(bias);
    int id = static_cast<int>(nodes_.size());
    if (ta.rank() != 2 || tb.rank() != 1 || tb.dims[0] != ta.dims[1])
        bad_dims("bias_add", id, "dims " + ta.shape_str() + " vs bias " + tb.shape_str());
    Node n;
    n.kind = OpKind::bias_add;
    n.a = a;
    n.b = bias;
    n.value = Tensor::zeros(ta.dims);
    return push(std::move(n));
}

int Graph::hadamard(int a, int b) {
    const Tensor& ta = in(a);
    const Tensor& tb = in(b);
    int id = static_cast<int>(nodes_.size());
    if (!ta.same_shape(tb))
        bad_dims("hadamard", id, "dims " + ta.shape_str() + " vs " + tb.shape_str() + " mismatch");
    Node n;
    n.kind = OpKind::hadamard;
    n.a = a;
    n.b = b;
    n.value = Tensor::zeros(ta.dims);
    return push(std::move(n));
}

int Graph::scale(int a, double s) {
    Node n;
    n.kind = OpKind::scale;
    n.a = a;
    n.scalar = s;
    n.value = Tensor::zeros(in(a).dims);
    return push(std::move(n));
}

int Graph::embedding(int table, std::vector<int32_t> ids) {
    const Tensor& tt = in(table);
    int id = static_cast<int>(nodes_.size());
    if (tt.rank() != 2) bad_dims("embedding", id, "table dims " + tt.shape_str());
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || ids[i] >= tt.dims[0])
            throw std::invalid_argument("graph: embedding(node " + std::to_string(id) +
                                        "): token id " + std::to_string(ids[i]) +
                                        " out of range at position " + std::to_string(i));
    Node n;
    n.kind = OpKind::embedding;
    n.a = table;
    n.value = Tensor::zeros({static_cast<int64_t>(ids.size()), tt.dims[1]});
    n.ids = std::move(ids);
    return push(std::move(n));
}

int Graph::softmax_rows(int a) {
    const Tensor& ta = in(a);
    int id = static_cast<int>(nodes_.size());
    if (ta.rank() != 2) bad_dims("softmax_rows", id, "dims " + ta.shape_str());
    Node n;
    n.kind = OpKind::softmax_rows;
    n.a = a;
    n.value = Tensor::zeros(ta.dims);
    return push(std::move(n));
}

int Graph::layer_norm(int x, int gain, int bias, double eps) {
    const Tensor& tx = in(x);
    const Tensor& tg = in(gain);
    const Tensor& tb = in(bias);
    int id = static_cast<int>(nodes_.size());
    if (tx.rank() != 2 || tg.rank() != 1 || tb.rank() != 1 || tg.dims[0] != tx.dims[1] ||
        tb.dims[0] != tx.dims[1])
        bad_dims("layer_norm", id,
                 "dims " + tx.shape_str() + " g " + tg.shape_str() + " b " + tb.shape_str());
    Node n;
    n.kind = OpKind::layer_norm;
    n.a = x;
    n.b = gain;
    n.c = bias;
    n.scalar = eps;
    n.value = Tensor::zeros(tx.dims);
    n.cache1 = Tensor::zeros(tx.dims);    // normalized rows
    n.cache2 = Tensor::zeros({tx.dims[0]}); // inverse stddev per row
    return push(std::move(n));
}

int Graph::gelu(int a) {
    Node n;
    n.kind = OpKind::gelu;
    n.a = a;
    n.value = Tensor::zeros(in(a).dims);
    return push(std::move(n));
}

int Graph::rope(int a, std::vector<int64_t> positions, int heads, double base) {
    const Tensor& ta = in(a);
    int id = static_cast<int>(nodes_.size());
    if (ta.rank() != 2 || heads < 1 || ta.dims[1] % heads != 0 || (ta.dims[1] / heads) % 2 != 0)
        bad_dims("rope", id,
                 "dims " + ta.shape_str() + " with " + std::to_string(heads) + " heads");
    if (static_cast<int64_t>(positions.size()) != ta.dims[0])
        bad_dims("rope", id, "positions size " + std::to_string(positions.size()) + " vs rows " +
                                 std::to_string(ta.dims[0]));
    Node n;
    n.kind = OpKind::rope;
    n.a = a;
    n.heads = heads;
    n.scalar = base;
    n.positions = std::move(positions);
    n.value = Tensor::zeros(ta.dims);
    return push(std::move(n));
}

int Graph::concat_rows(int a, int b) {
    const Tensor& ta = in(a);
    const Tensor& tb = in(b);
    int id = static_cast<int>(nodes_.size());
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dims[1] != tb.dims[1])
        bad_dims("concat_rows", id, "dims " + ta.shape_str() + " | " + tb.shape_str());
    Node n;
    n.kind = OpKind::concat_rows;
    n.a = a;
    n.b = b;
    n.value = Tensor::zeros({ta.dims[0] + tb.dims[0], ta.dims[1]});
    return push(std::move(n));
}

int Graph::attention(int q, int k, int v, MaskRef mask, int heads, double sc) {
    const Tensor& tq = in(q);
    const Tensor& tk = in(k);
    const Tensor& tv = in(v);
    int id = static_cast<int>(nodes_.size());
    if (tq.rank() != 2 || tk.rank() != 2 || tv.rank() != 2 || tq.dims[1] != tk.dims[1] ||
        tk.dims != tv.dims || heads < 1 || tq.dims[1] % heads != 0)
        bad_dims("attention", id, "q " + tq.shape_str() + " k " + tk.shape_str() + " v " +
                                      tv.shape_str() + " heads " + std::to_string(heads));
    const int64_t nq = tq.dims[0], nk = tk.dims[0];
    if (!mask || static_cast<int64_t>(mask->size()) != nq * nk)
        bad_dims("attention", id, "mask size mismatch for " + std::to_string(nq) + "x" +
                                      std::to_string(nk));
    for (int64_t i = 0; i < nq; ++i) {
        bool any = false;
        for (int64_t j = 0; j < nk && !any; ++j) any = (*mask)[i * nk + j] != 0;
        if (!any)
            throw std::invalid_argument("graph: attention(node " + std::to_string(id) +
                                        "): query row " + std::to_string(i) +
                                        " masks out every key");
    }
    Node n;
    n.kind = OpKind::attention;
    n.a = q;
    n.b = k;
    n.c = v;
    n.mask = std::move(mask);
    n.heads = heads;
    n.scalar = sc;
    n.value = Tensor::zeros(tq.dims);
    n.cache1 = Tensor::zeros({static_cast<int64_t>(heads) * nq, nk}); // probabilities
    return push(std::move(n));
}

int Graph::cross_entropy(int logits, std::vector<int32_t> targets, std::vector<uint8_t> valid) {
    const Tensor& tl = in(logits);
    int id = static_cast<int>(nodes_.size());
    if (tl.rank() != 2) bad_dims("cross_entropy", id, "logits dims " + tl.shape_str());
    const int64_t t = tl.dims[0], vocab = tl.dims[1];
    if (static_cast<int64_t>(targets.size()) != t || static_cast<int64_t>(valid.size()) != t)
        bad_dims("cross_entropy", id, "targets/valid length vs " + std::to_string(t) + " rows");
    int64_t n_valid = 0;
    for (int64_t i = 0; i < t; ++i) {
        if (!valid[i]) continue;
        ++n_valid;
        if (targets[i] < 0 || targets[i] >= vocab)
            throw std::invalid_argument("graph: cross_entropy(node " + std::to_string(id) +
                                        "): target " + std::to_string(targets[i]) +
                                        " out of range at position " + std::to_string(i));
    }
    if (n_valid == 0)
        throw std::invalid_argument("graph: cross_entropy(node " + std::to_string(id) +
                                    "): no valid positions");
    Node n;
    n.kind = OpKind::cross_entropy;
    n.a = logits;
    n.ids = std::move(targets);
    n.flags = std::move(valid);
    n.value = Tensor::zeros({1});
    n.cache1 = Tensor::zeros(tl.dims); // row softmax
    n.cache2 = Tensor::zeros({t});     // per-position nll (0 where invalid)
    return push(std::move(n));
}

int Graph::sum_all(int a) {
    Node n;
    n.kind = OpKind::sum_all;
    n.a = a;
    n.value = Tensor::zeros({1});
    return push(std::move(n));
}

int Graph::mean_all(int a) {
    int id = static_cast<int>(nodes_.size());
    if (in(a).numel() == 0) bad_dims("mean_all", id, "empty input");
    Node n;
    n.kind = OpKind::mean_all;
    n.a = a;
    n.value = Tensor::zeros({1});
    return push(std::move(n));
}

void Graph::check_finite(int id) const {
    const Node& n = nodes_[id];
    for (double x : n.value.data)
        if (!std::isfinite(x))
            throw std::runtime_error("graph: non-finite value out of " +
                                     std::string(op_name(n.kind)) + "(node " + std::to_string(id) +
                                     ")");
}

void Graph::compute(int id) {
    Node& n = nodes_[id];
    switch (n.kind) {
        case OpKind::leaf:
        case OpKind::external_leaf:
            return;
        case OpKind::matmul: {
            const Tensor& a = in(n.a);
            const Tensor& b = in(n.b);
            gemm_nn(a.data.data(), b.data.data(), n.value.data.data(), a.dims[0], a.dims[1],
                    b.dims[1]);
            break;
        }
        case OpKind::add: {
            const Tensor& a = in(n.a);
            const Tensor& b = in(n.b);
            for (int64_t i = 0; i < a.numel(); ++i) n.value[i] = a[i] + b[i];
            break;
        }
        case OpKind::bias_add: {
            const Tensor& a = in(n.a);
            const Tensor& b = in(n.b);
            const int64_t rows = a.dims[0], cols = a.dims[1];
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < cols; ++j) n.value.at(i, j) = a.at(i, j) + b[j];
            break;
        }
        case OpKind::hadamard: {
            const Tensor& a = in(n.a);
            const Tensor& b = in(n.b);
            for (int64_t i = 0; i < a.numel(); ++i) n.value[i] = a[i] * b[i];
            break;
        }
        case OpKind::scale: {
            const Tensor& a = in(n.a);
            for (int64_t i = 0; i < a.numel(); ++i) n.value[i] = a[i] * n.scalar;
            break;
        }
        case OpKind::embedding: {
            const Tensor& t = in(n.a);
            const int64_t d = t.dims[1];
            for (size_t i = 0; i < n.ids.size(); ++i)
                std::memcpy(&n.value.data[i * static_cast<size_t>(d)], &t.data[n.ids[i] * d],
                            sizeof(double) * static_cast<size_t>(d));
            break;
        }
        case OpKind::softmax_rows: {
            const Tensor& a = in(n.a);
            n.value.data = a.data;
            for (int64_t i = 0; i < a.dims[0]; ++i)
                softmax_row(&n.value.data[i * a.dims[1]], a.dims[1], nullptr);
            break;
        }
        case OpKind::layer_norm: {
            const Tensor& x = in(n.a);
            const Tensor& g = in(n.b);
            const Tensor& b = in(n.c);
            const int64_t rows = x.dims[0], d = x.dims[1];
            for (int64_t i = 0; i < rows; ++i) {
                const double* xi = &x.data[i * d];
                double mu = 0.0;
                for (int64_t j = 0; j < d; ++j) mu += xi[j];
                mu /= static_cast<double>(d);
                double var = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double c = xi[j] - mu;
                    var += c * c;
                }
                var /= static_cast<double>(d);
                const double inv = 1.0 / std::sqrt(var + n.scalar);
                n.cache2[i] = inv;
                for (int64_t j = 0; j < d; ++j) {
                    const double xh = (xi[j] - mu) * inv;
                    n.cache1.at(i, j) = xh;
                    n.value.at(i, j) = xh * g[j] + b[j];
                }
            }
            break;
        }
        case OpKind::gelu: {
            const Tensor& a = in(n.a);
            for (int64_t i = 0; i < a.numel(); ++i) {
                const double x = a[i];
                n.value[i] = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
            }
            break;
        }
        case OpKind::rope: {
            const Tensor& a = in(n.a);
            const int64_t rows = a.dims[0], d = a.dims[1];
            const int64_t dh = d / n.heads;
            for (int64_t i = 0; i < rows; ++i) {
                const double pos = static_cast<double>(n.positions[i]);
                for (int h = 0; h < n.heads; ++h) {
                    const int64_t off = h * dh;
                    for (int64_t p = 0; p < dh / 2; ++p) {
                        const double theta =
                            std::pow(n.scalar, -2.0 * static_cast<double>(p) /
                                                   static_cast<double>(dh));
                        const double ang = pos * theta;
                        const double cs = std::cos(ang), sn = std::sin(ang);
                        const double x0 = a.at(i, off + 2 * p);
                        const double x1 = a.at(i, off + 2 * p + 1);
                        n.value.at(i, off + 2 * p) = x0 * cs - x1 * sn;
                        n.value.at(i, off + 2 * p + 1) = x0 * sn + x1 * cs;
                    }
                }
            }
            break;
        }
        case OpKind::concat_rows: {
            const Tensor& a = in(n.a);
            const Tensor& b = in(n.b);
            std::memcpy(n.value.data.data(), a.data.data(), sizeof(double) * a.data.size());
            std::memcpy(n.value.data.data() + a.data.size(), b.data.data(),
                        sizeof(double) * b.data.size());
            break;
        }
        case OpKind::attention: {
            const Tensor& q = in(n.a);
            const Tensor& k = in(n.b);
            const Tensor& v = in(n.c);
            const int64_t nq = q.dims[0], nk = k.dims[0], d = q.dims[1];
            const int64_t dh = d / n.heads;
            const MaskBuf& m = *n.mask;
            for (int h = 0; h < n.heads; ++h) {
                const int64_t off = h * dh;
                for (int64_t i = 0; i < nq; ++i) {
                    double* prow = &n.cache1.data[(h * nq + i) * nk];
                    const double* qi = &q.data[i * d + off];
                    for (int64_t j = 0; j < nk; ++j) {
                        const double* kj = &k.data[j * d + off];
                        double s = 0.0;
                        for (int64_t p = 0; p < dh; ++p) s += qi[p] * kj[p];
                        s *= n.scalar;
                        if (std::fabs(s) > kScoreLimit)
                            throw std::runtime_error(
                                "graph: attention(node " + std::to_string(id) +
                                "): score magnitude exceeds mask penalty headroom");
                        prow[j] = m[i * nk + j] ? s : s + kMaskPenalty;
                    }
                    softmax_row(prow, nk, nullptr);
                    double* out = &n.value.data[i * d + off];
                    std::memset(out, 0, sizeof(double) * static_cast<size_t>(dh));
                    for (int64_t j = 0; j < nk; ++j) {
                        const double pj = prow[j];
                        if (pj == 0.0) continue;
                        const double* vj = &v.data[j * d + off];
                        for (int64_t p = 0; p < dh; ++p) out[p] += pj * vj[p];
                    }
                }
            }
            break;
        }
        case OpKind::cross_entropy: {
            const Tensor& l = in(n.a);
            const int64_t t = l.dims[0], vocab = l.dims[1];
            n.cache1.data = l.data;
            double total = 0.0;
            int64_t n_valid = 0;
            for (int64_t i = 0; i < t; ++i) {
                double lse = 0.0;
                double* row = &n.cache1.data[i * vocab];
                const double target_logit = n.flags[i] ? row[n.ids[i]] : 0.0;
                softmax_row(row, vocab, &lse);
                if (n.flags[i]) {
                    const double nll = lse - target_logit;
                    n.cache2[i] = nll;
                    total += nll;
                    ++n_valid;
                } else {
                    n.cache2[i] = 0.0;
                }
            }
            n.value[0] = total / static_cast<double>(n_valid);
            break;
        }
        case OpKind::sum_all: {
            const Tensor& a = in(n.a);
            double s = 0.0;
            for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
            n.value[0] = s;
            break;
        }
        case OpKind::mean_all: {
            const Tensor& a = in(n.a);
            double s = 0.0;
            for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
            n.value[0] = s / static_cast<double>(a.numel());
            break;
        }
    }
    check_finite(id);
}

void Graph::forward() {
    for (int id = 0; id < static_cast<int>(nodes_.size()); ++id) compute(id);
    forwarded_ = true;
}

void Graph::propagate(int id) {
    Node& n = nodes_[id];
    const Tensor& dy = n.grad;
    auto g = [&](int i) -> Tensor& { return nodes_[i].grad; };
    switch (n.kind) {
        case OpKind::leaf:
        case OpKind::external_leaf:
            return;
        case OpKind::matmul: {
            const Tensor& a = in(n.a);
            const Tensor& b = in(n.b);
            gemm_nt_acc(dy.data.data(), b.data.data(), g(n.a).data.data(), a.dims[0], b.dims[1],
                        a.dims[1]);
            gemm_tn_acc(a.data.data(), dy.data.data(), g(n.b).data.data(), a.dims[0], a.dims[1],
                        b.dims[1]);
            break;
        }
        case OpKind::add: {
            for (int64_t i = 0; i < dy.numel(); ++i) {
                g(n.a)[i] += dy[i];
                g(n.b)[i] += dy[i];
            }
            break;
        }
        case OpKind::bias_add: {
            const int64_t rows = dy.dims[0], cols = dy.dims[1];
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < cols; ++j) {
                    g(n.a).at(i, j) += dy.at(i, j);
                    g(n.b)[j] += dy.at(i, j);
                }
            break;
        }
        case OpKind::hadamard: {
            const Tensor& a = in(n.a);
            const Tensor& b = in(n.b);
            for (int64_t i = 0; i < dy.numel(); ++i) {
                g(n.a)[i] += dy[i] * b[i];
                g(n.b)[i] += dy[i] * a[i];
            }
            break;
        }
        case OpKind::scale: {
            for (int64_t i = 0; i < dy.numel(); ++i) g(n.a)[i] += dy[i] * n.scalar;
            break;
        }
        case OpKind::embedding: {
            Tensor& gt = g(n.a);
            const int64_t d = gt.dims[1];
            for (size_t i = 0; i < n.ids.size(); ++i) {
                double* dst = &gt.data[n.ids[i] * d];
                const double* src = &dy.data[i * static_cast<size_t>(d)];
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            break;
        }
        case OpKind::softmax_rows: {
            const Tensor& y = n.value;
            const int64_t rows = y.dims[0], cols = y.dims[1];
            for (int64_t i = 0; i < rows; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < cols; ++j) dot += dy.at(i, j) * y.at(i, j);
                for (int64_t j = 0; j < cols; ++j)
                    g(n.a).at(i, j) += y.at(i, j) * (dy.at(i, j) - dot);
            }
            break;
        }
        case OpKind::layer_norm: {
            const Tensor& gain = in(n.b);
            const int64_t rows = dy.dims[0], d = dy.dims[1];
            const double invd = 1.0 / static_cast<double>(d);
            for (int64_t i = 0; i < rows; ++i) {
                const double inv = n.cache2[i];
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    const double gd = dy.at(i, j) * gain[j];
                    m1 += gd;
                    m2 += gd * n.cache1.at(i, j);
                }
                m1 *= invd;
                m2 *= invd;
                for (int64_t j = 0; j < d; ++j) {
                    const double gd = dy.at(i, j) * gain[j];
                    g(n.a).at(i, j) += (gd - m1 - n.cache1.at(i, j) * m2) * inv;
                    g(n.b)[j] += dy.at(i, j) * n.cache1.at(i, j);
                    g(n.c)[j] += dy.at(i, j);
                }
            }
            break;
        }
        case OpKind::gelu: {
            const Tensor& a = in(n.a);
            for (int64_t i = 0; i < dy.numel(); ++i) {
                const double x = a[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
                g(n.a)[i] += dy[i] * (cdf + x * pdf);
            }
            break;
        }
        case OpKind::rope: {
            const int64_t rows = dy.dims[0], d = dy.dims[1];
            const int64_t dh = d / n.heads;
            for (int64_t i = 0; i < rows; ++i) {
                const double pos = static_cast<double>(n.positions[i]);
                for (int h = 0; h < n.heads; ++h) {
                    const int64_t off = h * dh;
                    for (int64_t p = 0; p < dh / 2; ++p) {
                        const double theta =
                            std::pow(n.scalar, -2.0 * static_cast<double>(p) /
                                                   static_cast<double>(dh));
                        const double ang = pos * theta;
                        const double cs = std::cos(ang), sn = std::sin(ang);
                        const double d0 = dy.at(i, off + 2 * p);
                        const double d1 = dy.at(i, off + 2 * p + 1);
                        g(n.a).at(i, off + 2 * p) += d0 * cs + d1 * sn;
                        g(n.a).at(i, off + 2 * p + 1) += -d0 * sn + d1 * cs;
                    }
                }
            }
            break;
        }
        case OpKind::concat_rows: {
            Tensor& ga = g(n.a);
            Tensor& gb = g(n.b);
            for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += dy.data[i];
            for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += dy.data[ga.data.size() + i];
            break;
        }
        case OpKind::attention: {
            const Tensor& q = in(n.a);
            const Tensor& k = in(n.b);
            const Tensor& v = in(n.c);
            const int64_t nq = q.dims[0], nk = k.dims[0], d = q.dims[1];
            const int64_t dh = d / n.heads;
            std::vector<double> dp(static_cast<size_t>(nk));
            for (int h = 0; h < n.heads; ++h) {
                const int64_t off = h * dh;
                for (int64_t i = 0; i < nq; ++i) {
                    const double* prow = &n.cache1.data[(h * nq + i) * nk];
                    const double* dout = &dy.data[i * d + off];
                    double dot = 0.0;
                    for (int64_t j = 0; j < nk; ++j) {
                        const double* vj = &v.data[j * d + off];
                        double s = 0.0;
                        for (int64_t p = 0; p < dh; ++p) s += dout[p] * vj[p];
                        dp[static_cast<size_t>(j)] = s;
                        dot += s * prow[j];
                        // dV_j += p_ij * dout
                        if (prow[j] != 0.0) {
                            double* gv = &g(n.c).data[j * d + off];
                            for (int64_t p = 0; p < dh; ++p) gv[p] += prow[j] * dout[p];
                        }
                    }
                    const double* qi = &q.data[i * d + off];
                    double* gq = &g(n.a).data[i * d + off];
                    for (int64_t j = 0; j < nk; ++j) {
                        const double ds = prow[j] * (dp[static_cast<size_t>(j)] - dot) * n.scalar;
                        if (ds == 0.0) continue;
                        const double* kj = &k.data[j * d + off];
                        double* gk = &g(n.b).data[j * d + off];
                        for (int64_t p = 0; p < dh; ++p) {
                            gq[p] += ds * kj[p];
                            gk[p] += ds * qi[p];
                        }
                    }
                }
            }
            break;
        }
        case OpKind::cross_entropy: {
            const int64_t t = n.cache1.dims[0], vocab = n.cache1.dims[1];
            int64_t n_valid = 0;
            for (int64_t i = 0; i < t; ++i) n_valid += n.flags[i] ? 1 : 0;
            const double w = dy[0] / static_cast<double>(n_valid);
            for (int64_t i = 0; i < t; ++i) {
                if (!n.flags[i]) continue;
                double* gl = &g(n.a).data[i * vocab];
                const double* p = &n.cache1.data[i * vocab];
                for (int64_t j = 0; j < vocab; ++j) gl[j] += w * p[j];
                gl[n.ids[i]] -= w;
            }
            break;
        }
        case OpKind::sum_all: {
            for (int64_t i = 0; i < g(n.a).numel(); ++i) g(n.a)[i] += dy[0];
            break;
        }
        case OpKind::mean_all: {
            const double w = dy[0] / static_cast<double>(g(n.a).numel());
            for (int64_t i = 0; i < g(n.a).numel(); ++i) g(n.a)[i] += w;
            break;
        }
    }
}

void Graph::backward(int loss) {
    if (!forwarded_) forward();
    if (nodes_[loss].value.numel() != 1)
        throw std::invalid_argument("graph: backward requires a scalar loss, node " +
                                    std::to_string(loss) + " has shape " +
                                    nodes_[loss].value.shape_str());

    // Mark ancestors of the loss; everything else keeps exact zero gradients.
    std::vector<uint8_t> live(nodes_.size(), 0);
    live[loss] = 1;
    for (int id = loss; id >= 0; --id) {
        if (!live[id]) continue;
        const Node& n = nodes_[id];
        if (n.a >= 0) live[n.a] = 1;
        if (n.b >= 0) live[n.b] = 1;
        if (n.c >= 0) live[n.c] = 1;
    }
    for (auto& n : nodes_) {
        const std::vector<int64_t>& d =
            n.kind == OpKind::external_leaf ? n.external->dims : n.value.dims;
        if (n.grad.dims != d)
            n.grad = Tensor::zeros(d);
        else
            std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
    nodes_[loss].grad[0] = 1.0;
    // Reverse topological sweep; creation order is already topological, so
    // each node is visited exactly once.
    for (int id = loss; id >= 0; --id)
        if (live[id]) propagate(id);
}

const Tensor& Graph::nll_per_position(int ce_node) const {
    if (nodes_[ce_node].kind != OpKind::cross_entropy)
        throw std::invalid_argument("graph: node " + std::to_string(ce_node) +
                                    " is not cross_entropy");
    return nodes_[ce_node].cache2;
}

const Tensor& Graph::attention_probs(int attn_node) const {
    if (nodes_[attn_node].kind != OpKind::attention)
        throw std::invalid_argument("graph: node " + std::to_string(attn_node) +
                                    " is not attention");
    return nodes_[attn_node].cache1;
}

double finite_diff_check(Graph& g, int loss, int parameter, double epsilon) {
    if (epsilon < 1e-7 || epsilon > 1e-4)
        throw std::invalid_argument("finite_diff_check: epsilon " + std::to_string(epsilon) +
                                    " outside [1e-7, 1e-4]");
    g.forward();
    g.backward(loss);
    const Tensor analytic = g.grad(parameter);
    Tensor& p = g.leaf_value(parameter);
    double worst = 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
        const double keep = p[i];
        p[i] = keep + epsilon;
        g.forward();
        const double up = g.value(loss)[0];
        p[i] = keep - epsilon;
        g.forward();
        const double down = g.value(loss)[0];
        p[i] = keep;
        const double central = (up - down) / (2.0 * epsilon);
        const double err =
            std::fabs(analytic[i] - central) / std::max(1.0, std::fabs(analytic[i]));
        if (err > worst) worst = err;
    }
    g.forward(); // restore values
    return worst;
}

} // namespace chunklm
