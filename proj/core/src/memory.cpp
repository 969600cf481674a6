#include "cram/memory.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "cram/kernels.hpp"

namespace cram {

namespace {

Tensor init_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    for (double& v : t.data()) v = rng.normal() * scale;
    t.requires_grad = true;
    return t;
}

void check_finite(const Tensor& x, const char* op) {
    for (double v : x.data())
        if (!std::isfinite(v)) throw std::runtime_error(std::string(op) + ": non-finite input");
}

}  // namespace

// --- continuous-time expert ---------------------------------------------

CtExpert::CtExpert(std::size_t d, std::size_t k_steps, Rng& rng)
    : dim(d), steps(k_steps) {
    if (d == 0) throw std::runtime_error("CtExpert: dimension must be positive");
    if (k_steps == 0) throw std::runtime_error("CtExpert: step count must be positive");
    double scale = 1.0 / std::sqrt(static_cast<double>(d));
    w1 = init_matrix(d, d, scale, rng);
    w2 = init_matrix(d, d, scale, rng);
    w_out = init_matrix(d, d, scale, rng);
    w_tau = Tensor::zeros({d});  // neutral gate sigmoid(0) = 1/2 at start
    w_tau.requires_grad = true;
}

void CtExpert::bind(Tape& tape) const {
    tape.bind(w1);
    tape.bind(w2);
    tape.bind(w_out);
    tape.bind(w_tau);
}

std::vector<Tensor> CtExpert::params() const { return {w1, w2, w_out, w_tau}; }

CtOutputs ct_forward(Tape& tape, const CtExpert& p, const Tensor& x,
                     const std::vector<double>& dtau) {
    if (x.rank() != 2 || x.shape[1] != p.dim)
        throw std::runtime_error("ct_forward: expected a T x " + std::to_string(p.dim) +
                                 " block, got " + Tensor::shape_str(x.shape));
    if (dtau.size() != x.shape[0])
        throw std::runtime_error("ct_forward: gap count does not match token count");
    check_finite(x, "ct_forward");

    std::size_t rows = x.shape[0];
    std::vector<double> log_gaps(rows);
    for (std::size_t t = 0; t < rows; ++t) {
        if (!(dtau[t] > 0.0) || !std::isfinite(dtau[t]))
            throw std::runtime_error("ct_forward: time gaps must be positive and finite");
        log_gaps[t] = std::log1p(dtau[t]);
    }

    Tensor gate = tape.sigmoid(
        tape.colvec_outer(tape.constant({rows}, std::move(log_gaps)), p.w_tau));
    Tensor drive = tape.matmul(x, p.w2);  // shared by every integration step
    double dt = 1.0 / static_cast<double>(p.steps);

    // h_0 = 0, so the first step needs no h W1 term.
    Tensor h = tape.scale(tape.mul(gate, tape.tanh(drive)), dt);
    for (std::size_t k = 1; k < p.steps; ++k) {
        Tensor pre = tape.add(tape.matmul(h, p.w1), drive);
        h = tape.add(h, tape.scale(tape.mul(gate, tape.tanh(pre)), dt));
    }

    CtOutputs out;
    out.output = tape.add(tape.matmul(h, p.w_out), x);
    out.dyn_mag = tape.row_norms(h);
    return out;
}

// --- episodic buffer -----------------------------------------------------

EpisodicBuffer::EpisodicBuffer(std::size_t d, std::size_t capacity,
                               double novelty_threshold, Rng& rng)
    : dim_(d), capacity_(capacity), threshold_(novelty_threshold) {
    if (d == 0) throw std::runtime_error("EpisodicBuffer: dimension must be positive");
    if (capacity == 0) throw std::runtime_error("EpisodicBuffer: capacity must be positive");
    if (novelty_threshold < 0.0 || novelty_threshold >= 1.0)
        throw std::runtime_error("EpisodicBuffer: novelty threshold must lie in [0, 1)");
    double scale = 1.0 / std::sqrt(static_cast<double>(d));
    w_q = init_matrix(d, d, scale, rng);
    w_k = init_matrix(d, d, scale, rng);
    w_v = init_matrix(d, d, scale, rng);
}

void EpisodicBuffer::bind(Tape& tape) const {
    tape.bind(w_q);
    tape.bind(w_k);
    tape.bind(w_v);
}

std::vector<Tensor> EpisodicBuffer::params() const { return {w_q, w_k, w_v}; }

EpisodicRetrieval EpisodicBuffer::retrieve(Tape& tape, const Tensor& x_row) {
    if (x_row.numel() != dim_)
        throw std::runtime_error("episodic retrieve: query width does not match buffer");
    EpisodicRetrieval out;
    if (entries_.empty()) {
        out.r_e = tape.constant(Tensor::zeros({dim_}));
        out.cold = true;
        return out;
    }
    Tensor q = tape.matmul(x_row, w_q);
    std::vector<AttendRow> keys, vals;
    keys.reserve(entries_.size());
    vals.reserve(entries_.size());
    for (const auto& e : entries_) {
        keys.push_back(attend_row(tape, e.key));
        vals.push_back(attend_row(tape, e.value));
    }
    AttendInfo info;
    out.r_e = tape.attend(q, keys, vals, &info);
    out.max_alpha = info.max_alpha;
    out.argmax = info.argmax;
    entries_[info.argmax].access += 1;
    return out;
}

double EpisodicBuffer::probe_max_score(const Tensor& x_row) const {
    if (x_row.numel() != dim_)
        throw std::runtime_error("episodic probe: query width does not match buffer");
    if (entries_.empty()) return 0.0;
    std::vector<double> q(dim_, 0.0);
    kern::mm_nn(x_row.ptr(), w_q.ptr(), q.data(), 1, dim_, dim_);
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim_));
    double smax = -std::numeric_limits<double>::infinity();
    std::vector<double> scores(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        scores[i] = kern::dot(q.data(), entries_[i].key.ptr(), dim_) * inv_sqrt_d;
        smax = std::max(smax, scores[i]);
    }
    // exp(s_max) / (1 + sum exp(s_i)), computed against the larger of the
    // peak score and the sink's implicit 0 for stability.
    double shift = std::max(smax, 0.0);
    double denom = std::exp(-shift);  // the sink
    for (double s : scores) denom += std::exp(s - shift);
    return std::exp(smax - shift) / denom;
}

std::vector<double> EpisodicBuffer::shadow_retrieve(const Tensor& x_row) const {
    if (x_row.numel() != dim_)
        throw std::runtime_error("episodic shadow retrieve: query width does not match buffer");
    std::vector<double> r(dim_, 0.0);
    if (entries_.empty()) return r;
    std::vector<double> q(dim_, 0.0);
    kern::mm_nn(x_row.ptr(), w_q.ptr(), q.data(), 1, dim_, dim_);
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim_));
    double smax = -std::numeric_limits<double>::infinity();
    std::vector<double> scores(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        scores[i] = kern::dot(q.data(), entries_[i].key.ptr(), dim_) * inv_sqrt_d;
        smax = std::max(smax, scores[i]);
    }
    double denom = 0.0;
    for (double s : scores) denom += std::exp(s - smax);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        double alpha = std::exp(scores[i] - smax) / denom;
        kern::axpy(alpha, entries_[i].value.ptr(), r.data(), dim_);
    }
    return r;
}

bool EpisodicBuffer::maybe_write(Tape& tape, const Tensor& x_row, double tau,
                                 double max_score) {
    if (!(1.0 - max_score > threshold_)) return false;
    EpisodicEntry e;
    e.key = tape.matmul(x_row, w_k);
    e.value = tape.matmul(x_row, w_v);
    e.tau = tau;
    if (entries_.size() >= capacity_) {
        std::size_t victim = 0;
        for (std::size_t i = 1; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = entries_[victim];
            if (a.access < b.access || (a.access == b.access && a.tau < b.tau)) victim = i;
        }
        entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(victim));
    }
    entries_.push_back(std::move(e));
    return true;
}

void EpisodicBuffer::restore_entries(std::vector<EpisodicEntry> entries) {
    for (const auto& e : entries)
        if (e.key.numel() != dim_ || e.value.numel() != dim_)
            throw std::runtime_error("episodic restore: entry width does not match buffer");
    if (entries.size() > capacity_)
        throw std::runtime_error("episodic restore: entry count exceeds capacity");
    entries_ = std::move(entries);
}

// --- semantic adapter ----------------------------------------------------

SemanticAdapter::SemanticAdapter(std::size_t d, std::size_t r, Rng& rng)
    : dim(d), rank(r) {
    if (d == 0 || r == 0)
        throw std::runtime_error("SemanticAdapter: dimension and rank must be positive");
    w_down = init_matrix(d, r, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    w_up = init_matrix(r, d, 1.0 / std::sqrt(static_cast<double>(r)), rng);
}

void SemanticAdapter::bind(Tape& tape) const {
    tape.bind(w_down);
    tape.bind(w_up);
}

std::vector<Tensor> SemanticAdapter::params() const { return {w_down, w_up}; }

Tensor semantic_forward(Tape& tape, const SemanticAdapter& a, const Tensor& x) {
    return tape.matmul(tape.relu(tape.matmul(x, a.w_down)), a.w_up);
}

// --- consolidation -------------------------------------------------------

double consolidation_quality(const double* r_s, const double* r_e, std::size_t d,
                             double sigma_sq) {
    if (!(sigma_sq > 0.0))
        throw std::runtime_error("consolidation_quality: sigma_sq must be positive");
    if (d == 0) throw std::runtime_error("consolidation_quality: empty vectors");
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double diff = r_s[j] - r_e[j];
        acc += diff * diff;
    }
    return std::exp(-acc / (static_cast<double>(d) * sigma_sq));
}

double consolidation_quality(const Tensor& r_s, const Tensor& r_e, double sigma_sq) {
    if (r_s.numel() != r_e.numel())
        throw std::runtime_error("consolidation_quality: vector widths differ");
    return consolidation_quality(r_s.ptr(), r_e.ptr(), r_s.numel(), sigma_sq);
}

Tensor consolidation_loss(Tape& tape, const std::vector<Tensor>& semantic_rows,
                          const std::vector<Tensor>& episodic_rows,
                          double adapter_grad_scale) {
    if (semantic_rows.size() != episodic_rows.size())
        throw std::runtime_error("consolidation_loss: sample lists differ in length");
    if (semantic_rows.empty()) return tape.constant(Tensor::scalar(0.0));
    Tensor total;
    for (std::size_t i = 0; i < semantic_rows.size(); ++i) {
        Tensor term = tape.mse(tape.grad_scale(semantic_rows[i], adapter_grad_scale),
                               tape.stop_gradient(episodic_rows[i]));
        total = (i == 0) ? term : tape.add(total, term);
    }
    return tape.scale(total, 1.0 / static_cast<double>(semantic_rows.size()));
}

}  // namespace cram
