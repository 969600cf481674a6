#pragma once

#include <cstddef>
#include <vector>

namespace cram {

// --- static-routing lower bound ------------------------------------------
//
// A stream of n positions contains f*n retrieval events spread evenly over K
// recurring patterns. A static router fixes, per pattern, whether lookups go
// through attention (correct, one op per event) or are skipped (an error per
// event). By symmetry only the number of attention-routed patterns matters:
//
//     error(s)     = f * (K - s) / K        (fraction of all n positions)
//     attention(s) = f * n * s / K          (expected ops)
//
// so any router holding error <= eps must spend at least (f - eps) * n ops.

struct StaticTask {
    std::size_t n = 0;   // stream length
    double f = 0.0;      // retrieval fraction, in (0,1)
    std::size_t k = 0;   // recurring pattern count
    double eps = 0.0;    // tolerated error rate

    void validate() const;  // throws std::runtime_error on bad settings
};

struct FrontierRow {
    std::size_t routed = 0;      // |S|: patterns routed through attention
    double error_rate = 0.0;     // f * (K - |S|) / K
    double attention_ops = 0.0;  // f * n * |S| / K
};

// Closed-form frontier, one row per subset size 0..K. Cheap for any K.
std::vector<FrontierRow> static_routing_frontier(const StaticTask& task);

// Least attention on the closed-form frontier with error_rate <= eps.
double frontier_min_attention(const StaticTask& task);

// Integer occurrence counts per pattern: floor(f*n / K) each, remainder
// spread over the first patterns so the counts sum to round(f*n).
std::vector<std::size_t> pattern_occurrences(const StaticTask& task);

// Brute force over all 2^K subsets with integer occurrence counts: the
// least total attention among subsets whose miss count stays within
// eps * n. Verification path for the closed form; K is capped at 20.
double enumerate_min_attention(const StaticTask& task);

// Attention spent by a consolidating router that pays attention for each
// pattern's first m exposures and for the eps_cons fraction that never
// consolidates: eps_cons * f * n + (1 - eps_cons) * K * m. With K fixed
// this grows like eps_cons * f * n, beating the static bound (f - eps) * n.
double consolidation_schedule_cost(const StaticTask& task, double eps_cons,
                                   std::size_t m);

// --- consolidation phase model -------------------------------------------
//
// Coupled mean-field dynamics of consolidation quality q and semantic
// routing probability p:
//
//     dq/dt = eta_q * p * (1 - q)
//     dp/dt = eta_p * (q - q_star)
//
// Fixed point at (1,1); saddle on the q = q_star line. q never decreases,
// so trajectories either push q past q_star and run to (1,1) or stall with
// p pinned at 0 below the threshold.

struct PhaseState {
    double q = 0.0;       // mean consolidation quality
    double p = 0.0;       // probability of semantic routing
    double eta_q = 1.0;   // quality adaptation rate
    double eta_p = 1.0;   // routing adaptation rate
    double q_star = 0.83; // routing threshold quality

    void validate() const;
};

struct PhasePoint {
    double t = 0.0;
    double q = 0.0;
    double p = 0.0;
};

// Explicit Euler with q, p clipped to [0,1] after each step; returns the
// initial state plus one point per step. Requires dt > 0 and
// dt * max(eta_q, eta_p) < 0.1 (stability guard).
std::vector<PhasePoint> phase_simulate(const PhaseState& initial, double dt,
                                       std::size_t steps);

// True if the trajectory from `initial` reaches q > 0.99 within the basin
// horizon (5000 steps of dt = 0.01); such runs converge to (1,1).
bool phase_reaches_high(const PhaseState& initial);

// Bisection on the initial quality q0 for fixed p0: smallest q0 whose
// trajectory escapes to (1,1), found to `tolerance`. Throws if q0 = 0 and
// q0 = 1 land in the same basin.
double find_separatrix(double p0, double q_star, double eta_q, double eta_p,
                       double tolerance);

}  // namespace cram
