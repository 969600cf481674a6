#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "model.hpp"
#include "srcd.hpp"

namespace cram {

struct MetricsRow {
    std::size_t step = 0;
    double lr = 0.0;
    double temperature = 0.0;
    double total_loss = 0.0;
    double task_loss = 0.0;
    double ce_loss = 0.0;
    double dyn_loss = 0.0;
    double cons_loss = 0.0;      // semantic-vs-episodic reconstruction error
    double retrieval_acc = 0.0;  // cumulative training accuracy at query rows
    double attention_fraction = 0.0;
    double shadow_fraction = 0.0;  // shadow ops / decisions
    double mean_q = 0.0;
    std::array<double, 3> action_fractions{};
    double buffer_fill = 0.0;  // mean occupancy across layers, 0..1
    double grad_norm = 0.0;

    static std::string csv_header();
    std::string csv_line() const;  // %.17g doubles, comma-separated
};

using MetricsCallback = std::function<void(const MetricsRow&)>;

struct TrainReport {
    std::vector<MetricsRow> log;  // one row per step
};

// AdamW over the model's trainable parameters: cosine lr decay to a floor,
// linear router-temperature anneal, batches walked through `sequences` in
// order, episodic buffers reset before every sequence (each is an
// independent stream; only the weights carry across). Deterministic for a
// fixed (model, sequences) pair; throws naming the step if the task loss
// leaves the reals.
TrainReport train_model(CramModel& model, const std::vector<SrcdSequence>& sequences,
                        const MetricsCallback& callback = {});

struct EvalReport {
    double dyn_mse = 0.0;
    double retrieval_accuracy = 0.0;
    double attention_fraction = 0.0;
    double shadow_fraction = 0.0;
    double mean_q = 0.0;
    std::array<double, 3> action_fractions{};
    std::size_t query_count = 0;
    std::size_t decisions = 0;
};

// Argmax routing, no noise. Runs against a throwaway copy of the model with
// buffers cleared before each sequence, so results are independent of
// training-time buffer content and the model itself is untouched.
EvalReport evaluate(const CramModel& model, const std::vector<SrcdSequence>& sequences);

// --- checkpoints ---------------------------------------------------------
// <dir>/manifest.json (config, step, array directory, buffer snapshots)
// plus one raw little-endian float64 blob per named array under
// <dir>/arrays/. Round trips are bit-exact.

void save_checkpoint(const CramModel& model, const std::string& dir, std::size_t step);

struct Checkpoint {
    ModelConfig config;
    std::size_t step = 0;
    CramModel model;
};

Checkpoint load_checkpoint(const std::string& dir);

// --- transfer ------------------------------------------------------------

struct TransferOptions {
    bool freeze_semantic = true;
    bool freeze_router = true;
    bool freeze_episodic = false;
    bool freeze_ct = false;
    bool freeze_rest = false;  // embeddings, FFN, norms, and the task heads:
                               // freezing everything makes training a no-op
    std::size_t steps = 200;
};

struct TransferReport {
    EvalReport tuned;    // pretrained weights, frozen groups excluded
    EvalReport scratch;  // fresh initialization, all parameters trained
    TrainReport tuned_log;
    TrainReport scratch_log;
    CramModel tuned_model;    // final fine-tuned state, ready to save
    CramModel scratch_model;  // final control state
};

// Fine-tune a pretrained model on a new task with chosen parameter groups
// frozen, against a from-scratch control trained with the identical seed
// and schedule. Freezing the router also freezes its feature statistics.
TransferReport transfer_eval(const CramModel& pretrained, const TransferOptions& options,
                             const std::vector<SrcdSequence>& train_sequences,
                             const std::vector<SrcdSequence>& eval_sequences);

}  // namespace cram
