#pragma once

#include <cstddef>
#include <vector>

#include "rng.hpp"

namespace cram {

// --- redundancy probe ----------------------------------------------------
//
// How predictable is a memory-path output a from the layer input h? A ridge
// probe h -> a is fit in closed form on the first 80% of tokens and scored
// on the rest with the per-token redundancy
//
//     R_t = 1 - ||a_t - probe(h_t)|| / ||a_t||
//
// R = 1 needs a zero residual; independent targets push R toward (and past)
// zero. Tokens with ||a_t|| = 0 are skipped. Inputs are augmented with a
// bias column; the ridge penalty applies to every coefficient uniformly.

struct ProbeResult {
    std::size_t layer = 0;  // caller-assigned label
    std::size_t d_in = 0;   // input width (without the bias column)
    std::size_t d_out = 0;
    std::vector<double> weights;  // (d_in + 1) x d_out, bias row last
    double r = 0.0;               // mean held-out redundancy
    double r_min = 0.0;           // held-out distribution summary
    double r_median = 0.0;
    double r_max = 0.0;
    std::size_t eval_tokens = 0;
    std::size_t skipped_tokens = 0;  // zero-norm targets
};

// Requires at least 10 * d_in samples; a singular system at ridge = 0
// produces an error suggesting a nonzero penalty.
ProbeResult train_redundancy_probe(const std::vector<std::vector<double>>& inputs,
                                   const std::vector<std::vector<double>>& targets,
                                   double ridge);

// Mean per-token redundancy of a fixed probe on the given tokens. Zero
// weights give R = 0 exactly on nonzero targets.
double redundancy_score(const std::vector<double>& weights, std::size_t d_in,
                        std::size_t d_out,
                        const std::vector<std::vector<double>>& inputs,
                        const std::vector<std::vector<double>>& targets);

// Partition per-unit redundancy scores by the fixed thresholds, boundaries
// assigned downward: redundant means R > 0.8, partial 0.5 < R <= 0.8,
// novel R <= 0.5.
struct TaxonomyCounts {
    std::size_t redundant = 0;
    std::size_t partial = 0;
    std::size_t novel = 0;
};

TaxonomyCounts head_taxonomy(const std::vector<double>& r_values);

// --- power-law fit of episodic routing -----------------------------------
//
// Does the soft episodic probability decay as a power of how often the
// pattern has been seen? Samples (k, pi2) with k >= 1 are binned into
// log-spaced bins (base 1.5 from k = 1), and ordinary least squares on
// (log mean-k, log mean-pi2) over bins holding at least 20 samples fits
//
//     pi2(k) ~ p0 * k^(-gamma).

struct PowerSample {
    long long repetition = 0;  // earlier sightings of the pattern
    double pi2 = 0.0;          // soft episodic routing probability
};

struct PowerBin {
    double k_mean = 0.0;
    double pi_mean = 0.0;
    std::size_t count = 0;
};

struct PowerLawFit {
    double p0 = 0.0;
    double gamma = 0.0;
    double gamma_se = 0.0;  // bootstrap standard error, 200 resamples
    double r2 = 0.0;
    std::vector<PowerBin> bins;      // the bins that entered the fit
    std::size_t sample_count = 0;    // samples with k >= 1 and pi2 > 0
    std::size_t skipped_samples = 0;
};

// Throws when fewer than 3 bins meet the count floor. The rng drives only
// the bootstrap resampling.
PowerLawFit fit_power_law(const std::vector<PowerSample>& samples, Rng& rng);

// --- phase-transition detection ------------------------------------------
//
// The transition step is the first step whose attention fraction falls
// below half the mean of the preceding 500 steps. The reduction factor
// compares the mean over the first 5% of steps to the mean over the last
// 5% (infinite when the tail sits at exactly zero).

struct TransitionResult {
    bool found = false;
    std::size_t step = 0;
    double pre_mean = 0.0;
    double post_mean = 0.0;
    double reduction_factor = 0.0;
};

// Requires at least 1000 logged steps.
TransitionResult detect_transition(const std::vector<double>& attention_fractions);

}  // namespace cram
