#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cram {

// Sparse Retrieval in Continuous Dynamics: an AR(1) continuous channel with
// Pareto-distributed time gaps, sparse key/query positions, and a fixed
// dictionary of recurring key-value patterns that a consolidating model can
// learn to answer without episodic lookups.

struct SrcdConfig {
    std::size_t seq_len = 2048;
    double query_fraction = 0.05;
    double recurring_fraction = 0.70;
    std::size_t pattern_count = 100;
    std::size_t key_vocab = 128;
    std::size_t value_vocab = 64;
    double ar_coeff = 0.95;
    double dyn_amplitude = 0.3;
    double dyn_frequency = 1.0;
    double noise_std = 0.05;
    double pareto_shape = 1.5;
    double gap_clip_lo = 0.1;
    double gap_clip_hi = 1000.0;
    std::uint64_t seed = 0;

    void validate() const;  // throws std::runtime_error on bad settings
};

enum class Role : int { plain = 0, key = 1, query = 2 };

struct SrcdToken {
    double v = 0.0;          // continuous dynamics value
    double dtau = 1.0;       // time gap to the previous token
    int symbol = 0;          // 0 = none, else 1..key_vocab
    int bound_value = 0;     // 0 = none, else 1..value_vocab (key tokens)
    Role role = Role::plain;
    int target_value = 0;    // query tokens: value bound by the most recent matching key
    int pattern = 0;         // 0 = novel, else 1..pattern_count; metadata only
    long long repetition = 0;  // earlier occurrences of this pattern in the stream
};

struct SrcdSequence {
    std::vector<SrcdToken> tokens;
    std::uint64_t config_hash = 0;
};

struct SrcdDataset {
    SrcdConfig config;        // shape parameters the model reads
    std::string config_json;  // canonical header text; hashed below
    std::uint64_t config_hash = 0;
    std::vector<SrcdSequence> sequences;
};

// Deterministic for fixed (config, count); sequence i draws from a child
// stream of the config seed, and repetition counters run over the whole
// stream in generation order.
SrcdDataset generate_srcd(const SrcdConfig& config, std::size_t count);

// Fraction of queries that cannot be answered from consolidated patterns:
// query_fraction * (1 - recurring_fraction).
double theoretical_opt(const SrcdConfig& config);

// Minimal copy task in the same record schema: copy_count keys in the first
// half of each sequence, matching queries in the second half, no dynamics
// signal (v = 0, gaps = 1), fresh symbols every sequence.
struct CopyConfig {
    std::size_t seq_len = 64;
    std::size_t vocab = 64;        // key symbols
    std::size_t value_vocab = 64;  // bound values
    std::size_t copy_count = 2;
    std::uint64_t seed = 0;

    void validate() const;
};

SrcdDataset generate_copy_task(const CopyConfig& config, std::size_t count);

// Text format: one header line "<fnv1a-hex16> <config-json>", then one line
// per token: v dtau symbol bound_value role target_value pattern repetition.
// Sequence boundaries are implicit every seq_len records.
void write_dataset(const SrcdDataset& data, const std::string& path);
SrcdDataset read_dataset(const std::string& path);

std::string srcd_config_json(const SrcdConfig& config);

}  // namespace cram
