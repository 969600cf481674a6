#pragma once

#include <cstddef>
#include <vector>

#include "cram/tape.hpp"
#include "cram/tensor.hpp"

namespace cram {

struct AdamwConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double max_grad_norm = 0.0;  // 0 disables clipping
};

// Decoupled-weight-decay Adam. Parameters are registered once and updated in
// place; gradients are read back from the GradMap of the step's tape, so the
// caller must bind() every registered parameter on that tape each step.
class AdamW {
  public:
    explicit AdamW(AdamwConfig cfg) : cfg_(cfg) {}

    void add_param(const Tensor& p);
    void add_params(const std::vector<Tensor>& ps);

    // Applies one update using grads from `gm`. Parameters missing from the
    // map are treated as having zero gradient (decay still applies).
    void step(const GradMap& gm);

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    std::size_t step_count() const { return t_; }
    std::size_t param_count() const { return params_.size(); }
    // Global gradient norm over registered params as of the last step().
    double last_grad_norm() const { return last_grad_norm_; }

  private:
    AdamwConfig cfg_;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
    double last_grad_norm_ = 0.0;
};

// Half-cosine decay from `base` to `base * floor_frac` over `total` steps.
double cosine_lr(double base, std::size_t step, std::size_t total, double floor_frac = 0.1);

// Linear ramp from `start` at step 0 to `end` at step >= total.
double linear_schedule(double start, double end, std::size_t step, std::size_t total);

}  // namespace cram
