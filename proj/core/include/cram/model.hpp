#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "memory.hpp"
#include "rng.hpp"
#include "srcd.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace cram {

// Full model: an embedding front end, a stack of memory layers (continuous-
// time expert + episodic buffer + semantic adapter, tied together by a
// learned per-token router), and task heads for value retrieval and
// one-step dynamics prediction.
//
// Per token the router picks one of three actions:
//   1 — CT expert only
//   2 — add an episodic retrieval to the CT output (costs attention)
//   3 — add the semantic adapter's reconstruction (no attention)
// Training uses straight-through Gumbel-softmax selection; evaluation takes
// the argmax with no noise. Episodic attention is executed iff action 2 is
// chosen, so cost accounting can count executions directly.

struct ModelConfig {
    std::size_t dim = 64;              // token state width d
    std::size_t layers = 2;            // L
    std::size_t ct_steps = 3;          // Euler steps K inside the CT expert
    std::size_t buffer_capacity = 128; // episodic slots M per layer
    std::size_t adapter_rank = 4;      // semantic bottleneck r (d/16)
    std::size_t ffn_mult = 1;          // feed-forward hidden = ffn_mult * d
    std::size_t key_vocab = 64;
    std::size_t value_vocab = 64;
    double novelty_threshold = 0.5;
    double sigma_sq = 1.0;             // scale in q = exp(-mse / sigma_sq)
    double shadow_fraction = 0.1;      // quality-probe rate off the episodic path

    // loss weights
    double lambda_e = 0.1;             // episodic-use penalty
    double lambda_s = 0.05;            // semantic-use reward (scaled by q)
    double gamma = 0.5;                // consolidation loss weight
    double consolidation_grad_scale = 0.1;  // adapter lr ratio for L_cons

    // optimization (consumed by the trainer; stored here so one config
    // describes a run end to end)
    double lr = 3e-4;
    double lr_floor = 0.1;             // cosine decays to lr_floor * lr
    double weight_decay = 0.01;
    std::size_t batch = 8;
    std::size_t steps = 4000;
    double temp_start = 1.0;
    double temp_end = 0.1;
    std::size_t anneal_steps = 3000;

    // ablations
    bool no_consolidation_loss = false;
    bool no_q_feature = false;         // router feature z3 pinned to 0
    bool no_semantic_path = false;     // action 3 contributes nothing; implies
                                       // no_consolidation_loss
    bool ct_only = false;              // force action 1, no buffer activity
    bool full_attention = false;       // force action 2 every token

    std::uint64_t seed = 0;

    void validate() const;  // throws std::runtime_error on bad settings
};

enum class Mode { train, eval };

// Two-layer router: 4 features -> 16 -> 3 logits. The CT-only logit starts
// with a positive bias so early routing matches the no-memory baseline and
// the memory paths have to earn their way in.
struct RouterMlp {
    Tensor w1, b1;  // 4 x 16, 16
    Tensor w2, b2;  // 16 x 3, 3

    RouterMlp() = default;
    RouterMlp(Rng& rng);
    void bind(Tape& tape) const;
    std::vector<Tensor> params() const;
};

struct RouteResult {
    Tensor logits;            // clean logits (no noise), length 3
    Tensor soft;              // probabilities backing the straight-through
                              // weight: Gumbel-perturbed in train mode,
                              // plain softmax in eval mode
    int action = 0;           // 1, 2, or 3
    std::array<double, 3> pi{};  // value of soft
};

// Router forward plus action selection. Train mode draws one Gumbel-softmax
// sample at the given temperature; eval mode is the noiseless argmax.
RouteResult route(Tape& tape, const RouterMlp& router, const Tensor& z,
                  double temperature, Rng& rng, Mode mode);

struct LayerState {
    CtExpert ct;
    EpisodicBuffer buffer;
    SemanticAdapter adapter;
    RouterMlp router;
    Tensor ln1_gain, ln1_bias;
    Tensor ln2_gain, ln2_bias;
    Tensor ffn_w1, ffn_b1;  // d x (ffn_mult*d)
    Tensor ffn_w2, ffn_b2;  // (ffn_mult*d) x d

    // Running feature statistics for router-input standardization
    // (z1 log-gap, z2 dyn magnitude, z3 quality, z4 prev entropy).
    // Updated with momentum in train mode only; frozen in eval.
    std::array<double, 4> feat_mean{0.0, 0.0, 0.0, 0.0};
    std::array<double, 4> feat_var{1.0, 1.0, 1.0, 1.0};
};

struct ForwardStats {
    std::size_t decisions = 0;        // routed tokens (T * L)
    std::size_t attention_ops = 0;    // executed episodic retrievals
    std::size_t shadow_ops = 0;       // quality probes off the episodic path
    std::size_t writes = 0;           // accepted buffer writes
    std::array<std::size_t, 3> action_counts{};  // indexed by action - 1
    double q_sum = 0.0;               // summed per-decision quality
    std::size_t q_count = 0;

    double attention_fraction() const {
        return decisions ? static_cast<double>(attention_ops) /
                               static_cast<double>(decisions)
                         : 0.0;
    }
    double mean_q() const { return q_count ? q_sum / static_cast<double>(q_count) : 0.0; }
    void accumulate(const ForwardStats& other);
};

// One sequence's forward pass: losses ready for backward plus everything
// evaluation and the routing penalty need.
// One routing decision as seen during a traced pass.
struct RouteSample {
    std::size_t layer = 0;
    int pattern = 0;           // 0 = novel token
    long long repetition = 0;  // earlier occurrences of the pattern
    double pi2 = 0.0;          // softmax mass on the episodic action (clean logits)
    int action = 0;            // 1 ct, 2 episodic, 3 semantic
    double q = 0.0;            // quality estimate at decision time
};

// Optional per-token capture for offline analysis: layer inputs paired with
// the dense episodic readout they would produce (for redundancy probing),
// plus every routing decision. Reusable across sequences; rows append.
// Tokens seen while a buffer is still empty are skipped.
struct ForwardTrace {
    std::vector<std::vector<std::vector<double>>> probe_inputs;   // [layer][row][d]
    std::vector<std::vector<std::vector<double>>> probe_targets;  // [layer][row][d]
    std::vector<RouteSample> routes;
};

struct ForwardResult {
    Tensor value_logits;              // query rows x value_vocab
    std::vector<int> value_targets;   // 0-indexed, aligned with value_logits
    Tensor dyn_pred;                  // T x 1 one-step dynamics prediction
    Tensor ce_loss;                   // scalar; 0 constant when no queries
    Tensor dyn_loss;                  // scalar; 0 constant when T < 2
    Tensor task_loss;                 // ce_loss + dyn_loss
    std::vector<Tensor> routing_logits;  // clean logits per decision (empty
                                         // under forced-action ablations)
    std::vector<double> routing_q;       // quality per decision, aligned
    std::vector<Tensor> cons_semantic;   // adapter outputs at action-2 tokens
    std::vector<Tensor> cons_episodic;   // matching retrievals
    ForwardStats stats;
};

class CramModel {
public:
    CramModel() = default;
    CramModel(const ModelConfig& config, Rng& rng);

    const ModelConfig& config() const { return config_; }
    std::vector<LayerState>& layers() { return layers_; }
    const std::vector<LayerState>& layers() const { return layers_; }

    // Parameters the optimizer should touch under the current ablation
    // flags (ct_only drops buffer/adapter/router, etc.).
    std::vector<Tensor> trainable_params() const;
    // Every parameter, named for checkpointing; independent of flags.
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    void bind(Tape& tape) const;

    // Run one sequence. Mutates the episodic buffers (writes, access counts)
    // and, in train mode, the router feature statistics. rng drives Gumbel
    // noise and shadow sampling in train mode; eval mode never touches it.
    // A non-null trace collects probe activations and routing decisions.
    ForwardResult forward(Tape& tape, const SrcdSequence& seq, Mode mode,
                          double temperature, Rng& rng,
                          ForwardTrace* trace = nullptr);

    // task + routing penalty + gamma * consolidation loss, per the config's
    // weights and ablation flags.
    Tensor total_loss(Tape& tape, const ForwardResult& result);

    void reset_buffers();

    // Copy parameter values, buffer contents, and feature statistics from a
    // model with the same architecture. Used for fine-tuning clones.
    void copy_state_from(const CramModel& other);

    // When set, train-mode forwards stop updating the router feature
    // statistics (used when the router is frozen during fine-tuning).
    void freeze_feature_stats(bool frozen) { feature_stats_frozen_ = frozen; }

    // Token states entering the first layer: symbol + bound-value + role
    // embeddings plus the continuous value times a learned direction.
    Tensor embed(Tape& tape, const SrcdSequence& seq) const;

private:
    ModelConfig config_;
    Tensor embed_symbol_;  // (key_vocab+1) x d, row 0 = no symbol
    Tensor embed_value_;   // (value_vocab+1) x d, row 0 = no bound value
    Tensor embed_role_;    // 3 x d
    Tensor embed_vchan_;   // d: continuous channel direction
    std::vector<LayerState> layers_;
    Tensor head_value_w_, head_value_b_;  // d x value_vocab, value_vocab
    Tensor head_dyn_w_, head_dyn_b_;      // d x 1, 1
    bool feature_stats_frozen_ = false;
};

}  // namespace cram
