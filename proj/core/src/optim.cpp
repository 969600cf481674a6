#include "cram/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cram {

void AdamW::add_param(const Tensor& p) {
    if (!p.requires_grad)
        throw std::runtime_error("AdamW: parameter must have requires_grad set");
    params_.push_back(p);
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
}

void AdamW::add_params(const std::vector<Tensor>& ps) {
    for (const auto& p : ps) add_param(p);
}

void AdamW::step(const GradMap& gm) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    double sq = 0.0;
    for (const auto& p : params_) {
        const auto* g = gm.raw(p);
        if (!g) continue;
        for (double v : *g) sq += v * v;
    }
    last_grad_norm_ = std::sqrt(sq);
    double gscale = 1.0;
    if (cfg_.max_grad_norm > 0.0 && last_grad_norm_ > cfg_.max_grad_norm)
        gscale = cfg_.max_grad_norm / last_grad_norm_;

    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].data();
        const auto* g = gm.raw(params_[i]);
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            double gj = g ? (*g)[j] * gscale : 0.0;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            p[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                               cfg_.weight_decay * p[j]);
        }
    }
}

double cosine_lr(double base, std::size_t step, std::size_t total, double floor_frac) {
    if (total == 0 || step >= total) return base * floor_frac;
    double floor = base * floor_frac;
    double phase = static_cast<double>(step) / static_cast<double>(total);
    return floor + (base - floor) * 0.5 * (1.0 + std::cos(phase * 3.14159265358979323846));
}

double linear_schedule(double start, double end, std::size_t step, std::size_t total) {
    if (total == 0 || step >= total) return end;
    double frac = static_cast<double>(step) / static_cast<double>(total);
    return start + (end - start) * frac;
}

}  // namespace cram
