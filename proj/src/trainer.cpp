#include "chunklm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "chunklm/io.hpp"

namespace chunklm {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr int64_t kValSegments = 16;
constexpr uint32_t kCheckpointVersion = 1;

// Parameters and optimizer moments are kept on the float32 grid so the
// float-valued checkpoint format stores them without loss.
void to_float_grid(Tensor& t) {
    for (double& x : t.data) x = static_cast<double>(static_cast<float>(x));
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void shuffle_valid_targets(Targets& targets, Rng& rng) {
    for (int64_t i = targets.valid_count - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(i + 1)));
        std::swap(targets.ids[i], targets.ids[j]);
    }
}

} // namespace

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be positive");
    if (!(learning_rate > 0.0))
        throw std::invalid_argument("train config: learning_rate must be positive");
    if (weight_decay < 0.0)
        throw std::invalid_argument("train config: weight_decay must be non-negative");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("train config: clip_norm must be positive");
    if (!(plateau_factor > 0.0) || plateau_factor > 1.0)
        throw std::invalid_argument("train config: plateau_factor must be in (0, 1]");
    if (plateau_min_delta < 0.0)
        throw std::invalid_argument("train config: plateau_min_delta must be non-negative");
    if (!(segment_seconds > 0.0))
        throw std::invalid_argument("train config: segment_seconds must be positive");
    if (patience_epochs < 1)
        throw std::invalid_argument("train config: patience_epochs must be positive");
    if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be positive");
    if (steps_per_epoch < 1)
        throw std::invalid_argument("train config: steps_per_epoch must be positive");
    if (frame_rate_hz < 1)
        throw std::invalid_argument("train config: frame_rate_hz must be positive");
    if (segment_tokens() < 1)
        throw std::invalid_argument("train config: segment shorter than one token");
}

OptimizerState OptimizerState::init(const ModelParams& params, double initial_lr) {
    OptimizerState s;
    s.m.reserve(params.values.size());
    s.v.reserve(params.values.size());
    for (const Tensor& t : params.values) {
        s.m.push_back(Tensor::zeros(t.dims));
        s.v.push_back(Tensor::zeros(t.dims));
    }
    s.step = 0;
    s.lr = initial_lr;
    return s;
}

TokenStream sample_segment(const TokenStream& stream, int64_t segment_tokens,
                           int32_t silence_token, Rng& rng) {
    if (stream.empty()) throw std::invalid_argument("sample_segment: empty token stream");
    if (segment_tokens < 1)
        throw std::invalid_argument("sample_segment: segment length must be positive");
    const int64_t n = static_cast<int64_t>(stream.size());
    if (n >= segment_tokens) {
        const int64_t start =
            static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(n - segment_tokens + 1)));
        return TokenStream(stream.begin() + start, stream.begin() + start + segment_tokens);
    }
    TokenStream out(stream);
    out.resize(static_cast<size_t>(segment_tokens), silence_token);
    return out;
}

double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
    if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (double x : g.data) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
        throw std::runtime_error("training halted: gradient norm is not finite");
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor& g : grads)
            for (double& x : g.data) x *= s;
    }
    return norm;
}

void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                const std::vector<uint8_t>& decay_flags, OptimizerState& state,
                const TrainConfig& config) {
    if (params.size() != grads.size() || params.size() != decay_flags.size() ||
        params.size() != state.m.size() || params.size() != state.v.size())
        throw std::invalid_argument("adamw_step: parameter, gradient, and state counts differ");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        const Tensor& g = grads[i];
        if (!p.same_shape(g))
            throw std::invalid_argument("adamw_step: gradient shape " + g.shape_str() +
                                        " does not match parameter " + p.shape_str());
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        const double wd = decay_flags[i] ? config.weight_decay : 0.0;
        for (size_t e = 0; e < p.data.size(); ++e) {
            m.data[e] = kBeta1 * m.data[e] + (1.0 - kBeta1) * g.data[e];
            v.data[e] = kBeta2 * v.data[e] + (1.0 - kBeta2) * g.data[e] * g.data[e];
            const double mhat = m.data[e] / bc1;
            const double vhat = v.data[e] / bc2;
            p.data[e] -= state.lr * (mhat / (std::sqrt(vhat) + kAdamEps) + wd * p.data[e]);
        }
    }
}

std::vector<uint8_t> decay_flags(const ModelParams& params) {
    std::vector<uint8_t> flags;
    flags.reserve(params.values.size());
    for (const Tensor& t : params.values)
        flags.push_back(t.dims.size() == 2 ? 1 : 0);
    return flags;
}

void scheduler_step(SchedulerState& sched, OptimizerState& opt, double val_loss,
                    const TrainConfig& config) {
    if (!std::isfinite(val_loss))
        throw std::runtime_error("training halted: validation loss is not finite");
    if (!sched.has_best) {
        sched.best_loss = val_loss;
        sched.has_best = true;
        sched.epochs_since_improvement = 0;
        return;
    }
    if (sched.best_loss - val_loss < config.plateau_min_delta) {
        opt.lr *= config.plateau_factor;
        sched.epochs_since_improvement += 1;
    } else {
        sched.best_loss = val_loss;
        sched.epochs_since_improvement = 0;
    }
}

TrainerState make_trainer(ModelParams params, TrainConfig config, int32_t silence_token) {
    config.validate();
    params.config.validate();
    if (silence_token < 0 || silence_token >= params.config.vocab)
        throw std::invalid_argument("make_trainer: silence token outside the vocabulary");
    TrainerState state;
    state.opt = OptimizerState::init(params, config.learning_rate);
    state.sched.initial_lr = config.learning_rate;
    state.params = std::move(params);
    state.config = config;
    state.rng = Rng(config.seed, {0x747261696eull});
    state.silence_token = silence_token;
    return state;
}

ValReport evaluate_segments(const ModelParams& params, const std::vector<TokenStream>& segments,
                            bool shuffle_targets, uint64_t shuffle_seed) {
    if (segments.empty()) throw std::invalid_argument("evaluate_segments: no segments");
    const int64_t chunk = params.config.chunk;
    ValReport report;
    report.per_offset_nll.assign(static_cast<size_t>(chunk), 0.0);
    std::vector<int64_t> offset_counts(static_cast<size_t>(chunk), 0);
    double total = 0.0;
    int64_t count = 0;
    Rng shuffle_rng(shuffle_seed, {0x76616c736866ull});
    for (size_t s = 0; s < segments.size(); ++s) {
        const TokenStream& seg = segments[s];
        Targets targets = shift_targets(seg, chunk);
        if (shuffle_targets) {
            Rng r = shuffle_rng.fork(s);
            shuffle_valid_targets(targets, r);
        }
        Graph g;
        ForwardNodes nodes = build_forward(g, params, seg, iota_positions(static_cast<int64_t>(seg.size())));
        const int ce = g.cross_entropy(nodes.logits, targets.ids, targets.valid);
        g.forward();
        const Tensor& per_position = g.nll_per_position(ce);
        for (int64_t t = 0; t < targets.valid_count; ++t) {
            const int64_t offset = chunk - 1 - (t % chunk);
            report.per_offset_nll[static_cast<size_t>(offset)] += per_position.data[static_cast<size_t>(t)];
            offset_counts[static_cast<size_t>(offset)] += 1;
            total += per_position.data[static_cast<size_t>(t)];
        }
        count += targets.valid_count;
    }
    if (count == 0) throw std::invalid_argument("evaluate_segments: segments have no valid targets");
    report.mean_nll = total / static_cast<double>(count);
    for (int64_t r = 0; r < chunk; ++r) {
        if (offset_counts[static_cast<size_t>(r)] > 0)
            report.per_offset_nll[static_cast<size_t>(r)] /=
                static_cast<double>(offset_counts[static_cast<size_t>(r)]);
    }
    return report;
}

TrainResult run_training(TrainerState& state, const std::vector<TokenStream>& corpus) {
    state.config.validate();
    state.params.config.validate();
    if (corpus.empty()) throw std::invalid_argument("run_training: training corpus is empty");
    const TrainConfig& config = state.config;
    const int64_t chunk = state.params.config.chunk;
    const int64_t segment_tokens = config.segment_tokens();
    if (segment_tokens <= chunk)
        throw std::invalid_argument("run_training: segments must be longer than one chunk");

    // The utterance split and the validation segments are derived from the
    // config seed alone, so a resumed session sees the identical data.
    std::vector<size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng split_rng(config.seed, {0x73706c6974ull});
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[split_rng.next_below(i)]);
    const size_t n_val = corpus.size() >= 2 ? std::max<size_t>(1, corpus.size() / 20) : 0;
    std::vector<size_t> train_idx(order.begin(), order.end() - static_cast<ptrdiff_t>(n_val));
    std::vector<size_t> val_idx(order.end() - static_cast<ptrdiff_t>(n_val), order.end());
    if (val_idx.empty()) val_idx = train_idx;

    std::vector<TokenStream> val_segments;
    Rng val_rng(config.seed, {0x76616c736567ull});
    for (int64_t i = 0; i < kValSegments; ++i) {
        const TokenStream& u = corpus[val_idx[val_rng.next_below(val_idx.size())]];
        val_segments.push_back(sample_segment(u, segment_tokens, state.silence_token, val_rng));
    }

    const std::vector<uint8_t> flags = decay_flags(state.params);
    const std::vector<int64_t> positions = iota_positions(segment_tokens);
    const double inv_batch = 1.0 / static_cast<double>(config.batch_size);

    TrainResult result;
    while (state.epoch < config.max_epochs) {
        double epoch_loss = 0.0;
        for (int64_t step = 0; step < config.steps_per_epoch; ++step) {
            std::vector<Tensor> grads;
            grads.reserve(state.params.values.size());
            for (const Tensor& t : state.params.values) grads.push_back(Tensor::zeros(t.dims));
            double batch_loss = 0.0;
            for (int64_t b = 0; b < config.batch_size; ++b) {
                const TokenStream& utt = corpus[train_idx[state.rng.next_below(train_idx.size())]];
                const TokenStream seg =
                    sample_segment(utt, segment_tokens, state.silence_token, state.rng);
                Targets targets = shift_targets(seg, chunk);
                if (config.shuffle_targets) shuffle_valid_targets(targets, state.rng);
                Graph g;
                ForwardNodes nodes = build_forward(g, state.params, seg, positions);
                const int ce = g.cross_entropy(nodes.logits, targets.ids, targets.valid);
                g.forward();
                g.backward(ce);
                batch_loss += g.value(ce).data[0] * inv_batch;
                for (size_t i = 0; i < grads.size(); ++i) {
                    const Tensor& src = g.grad(nodes.params[i]);
                    for (size_t e = 0; e < src.data.size(); ++e)
                        grads[i].data[e] += src.data[e] * inv_batch;
                }
            }
            clip_gradients(grads, config.clip_norm);
            adamw_step(state.params.values, grads, flags, state.opt, config);
            for (Tensor& t : state.params.values) to_float_grid(t);
            for (Tensor& t : state.opt.m) to_float_grid(t);
            for (Tensor& t : state.opt.v) to_float_grid(t);
            epoch_loss += batch_loss / static_cast<double>(config.steps_per_epoch);
        }

        const ValReport val =
            evaluate_segments(state.params, val_segments, config.shuffle_targets, config.seed);
        const double lr_used = state.opt.lr;
        scheduler_step(state.sched, state.opt, val.mean_nll, config);

        state.epoch += 1;
        const EpochRow row{state.epoch, epoch_loss, val.mean_nll, lr_used};
        state.curve.push_back(row);
        result.curve.push_back(row);
        result.per_offset_val_nll = val.per_offset_nll;
        result.epochs_run += 1;

        if (state.sched.epochs_since_improvement >= config.patience_epochs) {
            if (config.lr_reset_enabled && !state.sched.reset_used) {
                state.opt.lr = state.sched.initial_lr;
                state.sched.reset_used = true;
                state.sched.epochs_since_improvement = 0;
            } else {
                result.early_stopped = true;
                break;
            }
        }
    }
    return result;
}

namespace {

void write_tensor_record(BinaryWriter& w, const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.dims.size()));
    for (int64_t d : t.dims) w.u32(static_cast<uint32_t>(d));
    for (double x : t.data) w.f32(static_cast<float>(x));
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("checkpoint missing key '" + key + "'");
    return it->second;
}

int64_t kv_int(const std::map<std::string, std::string>& kv, const std::string& key) {
    return std::stoll(require(kv, key));
}

uint64_t kv_u64(const std::map<std::string, std::string>& kv, const std::string& key) {
    return std::stoull(require(kv, key));
}

double kv_double(const std::map<std::string, std::string>& kv, const std::string& key) {
    return std::stod(require(kv, key));
}

} // namespace

void save_checkpoint(const std::string& path, const TrainerState& state) {
    std::ostringstream h;
    const ModelConfig& mc = state.params.config;
    h << "model.vocab=" << mc.vocab << "\n";
    h << "model.chunk=" << mc.chunk << "\n";
    h << "model.window=" << mc.window << "\n";
    h << "model.layers=" << mc.layers << "\n";
    h << "model.heads=" << mc.heads << "\n";
    h << "model.model_dim=" << mc.model_dim << "\n";
    h << "model.max_position=" << mc.max_position << "\n";
    const TrainConfig& tc = state.config;
    h << "train.batch_size=" << tc.batch_size << "\n";
    h << "train.learning_rate=" << fmt_double(tc.learning_rate) << "\n";
    h << "train.weight_decay=" << fmt_double(tc.weight_decay) << "\n";
    h << "train.clip_norm=" << fmt_double(tc.clip_norm) << "\n";
    h << "train.plateau_factor=" << fmt_double(tc.plateau_factor) << "\n";
    h << "train.plateau_min_delta=" << fmt_double(tc.plateau_min_delta) << "\n";
    h << "train.segment_seconds=" << fmt_double(tc.segment_seconds) << "\n";
    h << "train.patience_epochs=" << tc.patience_epochs << "\n";
    h << "train.lr_reset_enabled=" << (tc.lr_reset_enabled ? 1 : 0) << "\n";
    h << "train.max_epochs=" << tc.max_epochs << "\n";
    h << "train.steps_per_epoch=" << tc.steps_per_epoch << "\n";
    h << "train.frame_rate_hz=" << tc.frame_rate_hz << "\n";
    h << "train.seed=" << tc.seed << "\n";
    h << "train.shuffle_targets=" << (tc.shuffle_targets ? 1 : 0) << "\n";
    h << "opt.step=" << state.opt.step << "\n";
    h << "opt.lr=" << fmt_double(state.opt.lr) << "\n";
    h << "sched.initial_lr=" << fmt_double(state.sched.initial_lr) << "\n";
    h << "sched.best_loss=" << fmt_double(state.sched.best_loss) << "\n";
    h << "sched.has_best=" << (state.sched.has_best ? 1 : 0) << "\n";
    h << "sched.epochs_since_improvement=" << state.sched.epochs_since_improvement << "\n";
    h << "sched.reset_used=" << (state.sched.reset_used ? 1 : 0) << "\n";
    h << "rng.key=" << state.rng.key() << "\n";
    h << "rng.counter=" << state.rng.counter() << "\n";
    h << "epoch=" << state.epoch << "\n";
    h << "silence_token=" << state.silence_token << "\n";
    h << "curve.rows=" << state.curve.size() << "\n";
    for (size_t i = 0; i < state.curve.size(); ++i) {
        const EpochRow& row = state.curve[i];
        h << "curve." << i << "=" << row.epoch << " " << fmt_double(row.train_nll) << " "
          << fmt_double(row.val_nll) << " " << fmt_double(row.lr) << "\n";
    }
    const std::string header = h.str();

    BinaryWriter w(path);
    w.bytes("WSLM", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<uint32_t>(header.size()));
    w.bytes(header.data(), header.size());
    for (size_t i = 0; i < state.params.values.size(); ++i)
        write_tensor_record(w, state.params.names[i], state.params.values[i]);
    for (size_t i = 0; i < state.opt.m.size(); ++i)
        write_tensor_record(w, "adam_m." + state.params.names[i], state.opt.m[i]);
    for (size_t i = 0; i < state.opt.v.size(); ++i)
        write_tensor_record(w, "adam_v." + state.params.names[i], state.opt.v[i]);
    w.close();
}

TrainerState load_checkpoint(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic("WSLM", "checkpoint " + path);
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                                 std::to_string(version));
    const uint32_t header_len = r.u32();
    std::string header(header_len, '\0');
    r.bytes(header.data(), header.size());
    const auto kv = parse_kv_text(header);

    ModelConfig mc;
    mc.vocab = kv_int(kv, "model.vocab");
    mc.chunk = kv_int(kv, "model.chunk");
    mc.window = kv_int(kv, "model.window");
    mc.layers = kv_int(kv, "model.layers");
    mc.heads = kv_int(kv, "model.heads");
    mc.model_dim = kv_int(kv, "model.model_dim");
    mc.max_position = kv_int(kv, "model.max_position");
    mc.validate();

    TrainConfig tc;
    tc.batch_size = kv_int(kv, "train.batch_size");
    tc.learning_rate = kv_double(kv, "train.learning_rate");
    tc.weight_decay = kv_double(kv, "train.weight_decay");
    tc.clip_norm = kv_double(kv, "train.clip_norm");
    tc.plateau_factor = kv_double(kv, "train.plateau_factor");
    tc.plateau_min_delta = kv_double(kv, "train.plateau_min_delta");
    tc.segment_seconds = kv_double(kv, "train.segment_seconds");
    tc.patience_epochs = kv_int(kv, "train.patience_epochs");
    tc.lr_reset_enabled = kv_int(kv, "train.lr_reset_enabled") != 0;
    tc.max_epochs = kv_int(kv, "train.max_epochs");
    tc.steps_per_epoch = kv_int(kv, "train.steps_per_epoch");
    tc.frame_rate_hz = kv_int(kv, "train.frame_rate_hz");
    tc.seed = kv_u64(kv, "train.seed");
    tc.shuffle_targets = kv_int(kv, "train.shuffle_targets") != 0;
    tc.validate();

    TrainerState state;
    state.params = ModelParams::init(mc, 0);
    state.opt = OptimizerState::init(state.params, kv_double(kv, "opt.lr"));
    state.opt.step = kv_int(kv, "opt.step");
    state.config = tc;
    state.sched.initial_lr = kv_double(kv, "sched.initial_lr");
    state.sched.best_loss = kv_double(kv, "sched.best_loss");
    state.sched.has_best = kv_int(kv, "sched.has_best") != 0;
    state.sched.epochs_since_improvement = kv_int(kv, "sched.epochs_since_improvement");
    state.sched.reset_used = kv_int(kv, "sched.reset_used") != 0;
    state.rng = Rng::from_state(kv_u64(kv, "rng.key"), kv_u64(kv, "rng.counter"));
    state.epoch = kv_int(kv, "epoch");
    state.silence_token = static_cast<int32_t>(kv_int(kv, "silence_token"));

    const size_t curve_rows = static_cast<size_t>(kv_int(kv, "curve.rows"));
    for (size_t i = 0; i < curve_rows; ++i) {
        std::istringstream line(require(kv, "curve." + std::to_string(i)));
        EpochRow row;
        if (!(line >> row.epoch >> row.train_nll >> row.val_nll >> row.lr))
            throw std::runtime_error("checkpoint " + path + ": malformed curve row " +
                                     std::to_string(i));
        state.curve.push_back(row);
    }

    std::map<std::string, size_t> index;
    for (size_t i = 0; i < state.params.names.size(); ++i) index[state.params.names[i]] = i;
    std::vector<uint8_t> filled(3 * state.params.names.size(), 0);
    while (!r.at_end()) {
        const std::string name = r.str();
        const uint32_t rank = r.u32();
        std::vector<int64_t> dims(rank);
        for (uint32_t d = 0; d < rank; ++d) dims[d] = static_cast<int64_t>(r.u32());
        std::string base = name;
        size_t group = 0;
        if (name.rfind("adam_m.", 0) == 0) {
            base = name.substr(7);
            group = 1;
        } else if (name.rfind("adam_v.", 0) == 0) {
            base = name.substr(7);
            group = 2;
        }
        auto it = index.find(base);
        if (it == index.end())
            throw std::runtime_error("checkpoint " + path + ": unknown tensor '" + name + "'");
        Tensor& dst = group == 0   ? state.params.values[it->second]
                      : group == 1 ? state.opt.m[it->second]
                                   : state.opt.v[it->second];
        if (dims != dst.dims)
            throw std::runtime_error("checkpoint " + path + ": tensor '" + name +
                                     "' has unexpected shape");
        for (double& x : dst.data) x = static_cast<double>(r.f32());
        filled[group * state.params.names.size() + it->second] = 1;
    }
    for (size_t g = 0; g < 3; ++g)
        for (size_t i = 0; i < state.params.names.size(); ++i)
            if (!filled[g * state.params.names.size() + i]) {
                const char* prefix = g == 0 ? "" : (g == 1 ? "adam_m." : "adam_v.");
                throw std::runtime_error("checkpoint " + path + ": missing tensor '" +
                                         prefix + state.params.names[i] + "'");
            }
    return state;
}

void write_loss_curve(const std::string& path, const std::vector<EpochRow>& curve) {
    std::ostringstream out;
    out << "epoch,train_nll,val_nll,lr\n";
    for (const EpochRow& row : curve)
        out << row.epoch << "," << fmt_double(row.train_nll) << "," << fmt_double(row.val_nll)
            << "," << fmt_double(row.lr) << "\n";
    write_text_file(path, out.str());
}

} // namespace chunklm
