#pragma once

#include <cstddef>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace cram {

// --- continuous-time expert ---------------------------------------------
//
// Per-token K-step Euler integration of a gated nonlinear state, modulated
// by the time gap since the previous token:
//
//     h_0 = 0
//     g   = sigmoid(log(1 + dtau) * w_tau)          (per-dimension gate)
//     h_{k+1} = h_k + dt * g .* tanh(h_k W1 + x W2)
//     output  = h_K W_out + x                       (residual)
//
// dt is fixed at 1/K so the integration span stays constant as K varies.

struct CtExpert {
    std::size_t dim = 0;
    std::size_t steps = 3;
    Tensor w1, w2, w_out;  // d x d
    Tensor w_tau;          // length d: log-gap -> gate pre-activation

    CtExpert() = default;
    CtExpert(std::size_t d, std::size_t k_steps, Rng& rng);
    void bind(Tape& tape) const;
    std::vector<Tensor> params() const;
};

struct CtOutputs {
    Tensor output;   // T x d
    Tensor dyn_mag;  // length T: ||h_K|| per token (router feature)
};

// x is a T x d block of token states; dtau holds the T positive time gaps.
CtOutputs ct_forward(Tape& tape, const CtExpert& p, const Tensor& x,
                     const std::vector<double>& dtau);

// --- episodic buffer -----------------------------------------------------

struct EpisodicEntry {
    Tensor key;    // length d
    Tensor value;  // length d
    double tau = 0.0;
    long long access = 0;
};

struct EpisodicRetrieval {
    Tensor r_e;               // length d; zero constant when the buffer is cold
    double max_alpha = 0.0;   // peak softmax weight (1.0 for a singleton buffer)
    std::size_t argmax = 0;
    bool cold = false;        // empty buffer: r_e is zero, nothing was accessed
};

// Bounded slot store with learned query/key/value projections. Retrieval is
// exact softmax attention over the current entries. Write decisions use a
// novelty score computed against the same attention scores *plus a unit null
// sink*: max_score = exp(s_max) / (1 + sum_i exp(s_i)). Without the sink the
// plain softmax maximum is >= 1/m, so a buffer holding one or two entries
// could never admit another (novelty 1 - max could not exceed the 0.5
// threshold); the sink vanishes as the buffer grows and leaves retrieval
// untouched.
//
// Copying the buffer yields an independent evaluation clone: entries share
// immutable value stores, while access counts and membership diverge freely.

class EpisodicBuffer {
public:
    EpisodicBuffer() = default;
    EpisodicBuffer(std::size_t d, std::size_t capacity, double novelty_threshold,
                   Rng& rng);

    Tensor w_q, w_k, w_v;  // d x d projections

    void bind(Tape& tape) const;
    std::vector<Tensor> params() const;

    // Attention over the buffer; increments the access count of the peak
    // entry. Cold (empty) buffers return a zero vector with max_alpha = 0
    // rather than throwing: early training hits this constantly.
    EpisodicRetrieval retrieve(Tape& tape, const Tensor& x_row);

    // Sink-augmented peak attention score for the write decision. Pure
    // bookkeeping: no tape nodes, no access-count changes. 0 when empty.
    double probe_max_score(const Tensor& x_row) const;

    // Numeric-only retrieval: same attention as retrieve(), but no tape
    // nodes and no access-count side effects. Zeros when empty. Feeds the
    // consolidation-quality estimate for tokens that skip the real lookup.
    std::vector<double> shadow_retrieve(const Tensor& x_row) const;

    // novelty = 1 - max_score; writes iff novelty > threshold. When full,
    // evicts the least-accessed entry, ties broken by oldest write time.
    // Returns whether a write happened.
    bool maybe_write(Tape& tape, const Tensor& x_row, double tau, double max_score);

    void reset() { entries_.clear(); }
    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    double novelty_threshold() const { return threshold_; }
    const std::vector<EpisodicEntry>& entries() const { return entries_; }
    // Checkpoint restore; validates entry widths against dim().
    void restore_entries(std::vector<EpisodicEntry> entries);

private:
    std::size_t dim_ = 0;
    std::size_t capacity_ = 0;
    double threshold_ = 0.5;
    std::vector<EpisodicEntry> entries_;
};

// --- semantic adapter ----------------------------------------------------

struct SemanticAdapter {
    std::size_t dim = 0;
    std::size_t rank = 0;
    Tensor w_down;  // d x r
    Tensor w_up;    // r x d

    SemanticAdapter() = default;
    SemanticAdapter(std::size_t d, std::size_t r, Rng& rng);
    void bind(Tape& tape) const;
    std::vector<Tensor> params() const;
};

// relu(x W_down) W_up for a single row or a T x d block.
Tensor semantic_forward(Tape& tape, const SemanticAdapter& a, const Tensor& x);

// --- consolidation -------------------------------------------------------

// q = exp(-mean_j (r_s[j] - r_e[j])^2 / sigma_sq), in (0, 1]; the mean over
// dimensions keeps sigma_sq comparable across widths.
double consolidation_quality(const double* r_s, const double* r_e, std::size_t d,
                             double sigma_sq);
double consolidation_quality(const Tensor& r_s, const Tensor& r_e, double sigma_sq);

// Mean over sample pairs of the per-dimension squared error between the
// semantic reconstruction and a detached episodic target. Gradients reach
// only the semantic side (episodic rows pass through stop_gradient), scaled
// by adapter_grad_scale so this loss can run at a reduced effective rate
// without a second optimizer. Empty sample set yields a zero constant.
Tensor consolidation_loss(Tape& tape, const std::vector<Tensor>& semantic_rows,
                          const std::vector<Tensor>& episodic_rows,
                          double adapter_grad_scale);

}  // namespace cram
