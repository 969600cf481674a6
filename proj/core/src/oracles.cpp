#include "cram/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace cram {

namespace {

constexpr std::size_t kEnumerationBound = 20;
constexpr double kBasinDt = 0.01;
constexpr std::size_t kBasinSteps = 5000;  // saturates well before this at default rates

double clip01(double x) { return std::min(1.0, std::max(0.0, x)); }

}  // namespace

void StaticTask::validate() const {
    auto fail = [](const std::string& what) {
        throw std::runtime_error("static task: " + what);
    };
    if (n == 0) fail("stream length must be positive");
    if (!(f > 0.0) || !(f < 1.0)) fail("retrieval fraction must lie in (0,1)");
    if (k == 0) fail("pattern count must be positive");
    if (f * static_cast<double>(n) < static_cast<double>(k))
        fail("fewer retrieval events than patterns; every pattern needs one occurrence");
    if (eps < 0.0) fail("error tolerance must be nonnegative");
}

std::vector<FrontierRow> static_routing_frontier(const StaticTask& task) {
    task.validate();
    std::vector<FrontierRow> rows(task.k + 1);
    double fn = task.f * static_cast<double>(task.n);
    for (std::size_t s = 0; s <= task.k; ++s) {
        rows[s].routed = s;
        rows[s].error_rate =
            task.f * static_cast<double>(task.k - s) / static_cast<double>(task.k);
        rows[s].attention_ops =
            fn * static_cast<double>(s) / static_cast<double>(task.k);
    }
    return rows;
}

double frontier_min_attention(const StaticTask& task) {
    // error falls and attention rises with |S|, so the first admissible row wins
    for (const FrontierRow& row : static_routing_frontier(task))
        if (row.error_rate <= task.eps + 1e-12) return row.attention_ops;
    throw std::runtime_error("static frontier: no admissible routing");  // unreachable: s=K has error 0
}

std::vector<std::size_t> pattern_occurrences(const StaticTask& task) {
    task.validate();
    auto total = static_cast<std::size_t>(
        std::llround(task.f * static_cast<double>(task.n)));
    std::size_t base = total / task.k;
    std::size_t rem = total % task.k;
    std::vector<std::size_t> counts(task.k, base);
    for (std::size_t i = 0; i < rem; ++i) ++counts[i];
    return counts;
}

double enumerate_min_attention(const StaticTask& task) {
    task.validate();
    if (task.k > kEnumerationBound)
        throw std::runtime_error(
            "static oracle: " + std::to_string(task.k) +
            " patterns exceeds the enumeration bound of " +
            std::to_string(kEnumerationBound) + "; use the closed-form frontier");
    std::vector<std::size_t> counts = pattern_occurrences(task);
    std::size_t total = 0;
    for (std::size_t c : counts) total += c;
    double miss_budget = task.eps * static_cast<double>(task.n) + 1e-9;
    std::size_t best = total + 1;
    for (std::size_t mask = 0; mask < (std::size_t{1} << task.k); ++mask) {
        std::size_t attended = 0;
        for (std::size_t i = 0; i < task.k; ++i)
            if (mask & (std::size_t{1} << i)) attended += counts[i];
        if (static_cast<double>(total - attended) <= miss_budget)
            best = std::min(best, attended);
    }
    return static_cast<double>(best);
}

double consolidation_schedule_cost(const StaticTask& task, double eps_cons,
                                   std::size_t m) {
    task.validate();
    if (eps_cons < 0.0 || eps_cons > 1.0)
        throw std::runtime_error(
            "consolidation cost: failure fraction must lie in [0,1]");
    if (m == 0)
        throw std::runtime_error(
            "consolidation cost: at least one exposure per pattern is required");
    double fn = task.f * static_cast<double>(task.n);
    return eps_cons * fn +
           (1.0 - eps_cons) * static_cast<double>(task.k) * static_cast<double>(m);
}

void PhaseState::validate() const {
    auto fail = [](const std::string& what) {
        throw std::runtime_error("phase state: " + what);
    };
    if (q < 0.0 || q > 1.0) fail("quality must lie in [0,1]");
    if (p < 0.0 || p > 1.0) fail("routing probability must lie in [0,1]");
    if (!(eta_q > 0.0) || !(eta_p > 0.0)) fail("rates must be positive");
    if (!(q_star > 0.0) || !(q_star < 1.0)) fail("threshold must lie in (0,1)");
}

std::vector<PhasePoint> phase_simulate(const PhaseState& initial, double dt,
                                       std::size_t steps) {
    initial.validate();
    if (!(dt > 0.0)) throw std::runtime_error("phase simulate: dt must be positive");
    if (dt * std::max(initial.eta_q, initial.eta_p) >= 0.1)
        throw std::runtime_error(
            "phase simulate: dt * max(eta) must stay below 0.1 for stability");
    std::vector<PhasePoint> traj;
    traj.reserve(steps + 1);
    double q = initial.q, p = initial.p;
    traj.push_back({0.0, q, p});
    for (std::size_t i = 1; i <= steps; ++i) {
        double dq = initial.eta_q * p * (1.0 - q);
        double dp = initial.eta_p * (q - initial.q_star);
        q = clip01(q + dt * dq);
        p = clip01(p + dt * dp);
        traj.push_back({static_cast<double>(i) * dt, q, p});
    }
    return traj;
}

bool phase_reaches_high(const PhaseState& initial) {
    return phase_simulate(initial, kBasinDt, kBasinSteps).back().q > 0.99;
}

double find_separatrix(double p0, double q_star, double eta_q, double eta_p,
                       double tolerance) {
    if (!(tolerance > 0.0))
        throw std::runtime_error("find separatrix: tolerance must be positive");
    auto escapes = [&](double q0) {
        PhaseState s;
        s.q = q0;
        s.p = p0;
        s.eta_q = eta_q;
        s.eta_p = eta_p;
        s.q_star = q_star;
        return phase_reaches_high(s);
    };
    double lo = 0.0, hi = 1.0;
    if (escapes(lo) == escapes(hi))
        throw std::runtime_error(
            "find separatrix: both endpoints land in the same basin");
    while (hi - lo > tolerance) {
        double mid = 0.5 * (lo + hi);
        (escapes(mid) ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace cram
