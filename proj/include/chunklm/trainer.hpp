#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunklm/model.hpp"
#include "chunklm/rng.hpp"
#include "chunklm/tokens.hpp"

namespace chunklm {

struct TrainConfig {
    int64_t batch_size = 16;
    double learning_rate = 0.0001;
    double weight_decay = 0.01;
    double clip_norm = 5.0;
    double plateau_factor = 0.9;
    double plateau_min_delta = 0.0025;
    double segment_seconds = 30.0;
    int64_t patience_epochs = 5;
    bool lr_reset_enabled = false;

    // Desk-scale budget knobs; the paper-scale recipe leaves these open.
    int64_t max_epochs = 50;
    int64_t steps_per_epoch = 20;
    int64_t frame_rate_hz = 50;
    uint64_t seed = 0;
    // Diagnostic mode: permute targets across positions within every
    // segment, destroying the token-target correspondence while keeping
    // the marginal distribution.
    bool shuffle_targets = false;

    int64_t segment_tokens() const {
        return static_cast<int64_t>(segment_seconds * frame_rate_hz);
    }
    void validate() const;
};

struct OptimizerState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    int64_t step = 0;
    double lr = 0.0;

    static OptimizerState init(const ModelParams& params, double initial_lr);
};

struct SchedulerState {
    double initial_lr = 0.0;
    double best_loss = 0.0;
    bool has_best = false;
    int64_t epochs_since_improvement = 0;
    bool reset_used = false;
};

// Uniform random window of segment_tokens tokens; shorter streams are
// right-padded with the silence token.
TokenStream sample_segment(const TokenStream& stream, int64_t segment_tokens,
                           int32_t silence_token, Rng& rng);

// Scales all gradients to a global L2 norm of at most max_norm; returns the
// pre-clip norm. Non-finite gradients halt training.
double clip_gradients(std::vector<Tensor>& grads, double max_norm);

// Decoupled-weight-decay Adam with betas (0.9, 0.999) and epsilon 1e-8,
// bias-corrected; decay applies only where decay_flags is set. Pure double
// arithmetic.
void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                const std::vector<uint8_t>& decay_flags, OptimizerState& state,
                const TrainConfig& config);

// Weight matrices decay; gains, biases, and other vectors do not.
std::vector<uint8_t> decay_flags(const ModelParams& params);

// Reduce-on-plateau: multiplies lr by plateau_factor when val_loss fails to
// beat the best by plateau_min_delta, otherwise records the new best.
void scheduler_step(SchedulerState& sched, OptimizerState& opt, double val_loss,
                    const TrainConfig& config);

struct EpochRow {
    int64_t epoch = 0;
    double train_nll = 0.0;
    double val_nll = 0.0;
    double lr = 0.0;
};

struct TrainerState {
    ModelParams params;
    OptimizerState opt;
    SchedulerState sched;
    TrainConfig config;
    Rng rng;
    int64_t epoch = 0;
    int32_t silence_token = 0;
    std::vector<EpochRow> curve;
};

struct TrainResult {
    std::vector<EpochRow> curve;               // rows appended by this run
    std::vector<double> per_offset_val_nll;    // indexed by chunk_end(p) - p
    int64_t epochs_run = 0;
    bool early_stopped = false;
};

TrainerState make_trainer(ModelParams params, TrainConfig config, int32_t silence_token);

// Runs epochs until the budget or the plateau patience is exhausted,
// mutating `state` in place so training may be checkpointed and resumed at
// any epoch boundary with bit-identical results.
TrainResult run_training(TrainerState& state, const std::vector<TokenStream>& corpus);

// Mean NLL over fixed evaluation segments, plus the per-offset breakdown.
struct ValReport {
    double mean_nll = 0.0;
    std::vector<double> per_offset_nll;
};
ValReport evaluate_segments(const ModelParams& params, const std::vector<TokenStream>& segments,
                            bool shuffle_targets, uint64_t shuffle_seed);

void save_checkpoint(const std::string& path, const TrainerState& state);
TrainerState load_checkpoint(const std::string& path);

void write_loss_curve(const std::string& path, const std::vector<EpochRow>& curve);

} // namespace chunklm
