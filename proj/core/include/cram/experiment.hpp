#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cram/analysis.hpp"
#include "cram/oracles.hpp"
#include "cram/srcd.hpp"
#include "cram/trainer.hpp"

namespace cram {

// One end-to-end run described by a single INI file. The [experiment] seed
// is the only random seed: the model uses it directly and dataset seeds are
// derived from child streams, so [data]/[copy] carry no seed keys.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string task = "srcd";  // or "copy"
    std::size_t train_sequences = 64;
    std::size_t eval_sequences = 16;
    ModelConfig model;  // model.seed is overwritten with `seed` at run time
    SrcdConfig data;    // used when task == "srcd"; its seed field is ignored
    CopyConfig copy;    // used when task == "copy"; its seed field is ignored
    double probe_ridge = 1e-3;

    void validate() const;  // throws std::runtime_error naming the problem
};

// Desk-scale defaults: d=64, two layers, 256-token sequences, 20 recurring
// patterns, 4000 steps. The reference profile for reproduction suites.
ExperimentConfig desk_config();

// Tiny profile (d=16, one layer, 50 steps) that finishes in seconds.
ExperimentConfig smoke_config();

// Strict INI: unknown sections and unknown keys are errors naming the
// offender. serialize() emits the canonical form; parse(serialize(c))
// round-trips exactly, and the config hash is the FNV-1a of that text.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string serialize_experiment_config(const ExperimentConfig& cfg);
std::uint64_t experiment_config_hash(const ExperimentConfig& cfg);

struct ExperimentResult {
    ExperimentConfig config;
    std::string config_hash;  // 16 hex digits, embedded in every artifact
    std::string out_dir;
    TrainReport train;
    EvalReport eval;
    double consolidation_ratio = 0.0;  // late / early attention fraction
    bool transition_found = false;
    TransitionResult transition;
    bool powerlaw_found = false;
    PowerLawFit powerlaw;
    bool powerlaw_monotone = false;  // binned means non-increasing in k
    std::string powerlaw_error;      // set when the fit was not possible
    std::vector<ProbeResult> probes;       // one per layer that could be probed
    std::vector<std::string> probe_errors; // aligned with layers; "" = probed
};

// Runs the pipeline into out_dir: config.ini snapshot, metrics.csv (one row
// per step), routing-log.csv, analysis/*.csv, checkpoint/, summary.json.
// Every CSV starts with "# config-hash: <hex>". Datasets are cached under
// cache_dir, the CRAM_CACHE_DIR environment variable, or out_dir/cache, in
// that order of preference. On failure a FAILED marker holding the error is
// left in out_dir and the exception propagates.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                std::string cache_dir = "");

// Integrity check for a finished run directory: canonical config, matching
// embedded hashes, complete metrics, loadable checkpoint, no FAILED marker.
// Returns human-readable problems; empty means verified.
std::vector<std::string> verify_run_dir(const std::string& dir);

struct SuiteOutcome {
    std::vector<std::string> completed;  // member directory names
    std::vector<std::pair<std::string, std::string>> failures;  // name, error
};

// Reruns a named suite (table1-desk, ablations-desk, phase, powerlaw,
// oracle) across five seeds into out_dir/<member>/ and writes
// suite-summary.json and suite-summary.csv with per-variant mean and std.
// Members whose directory already holds a verified same-config summary are
// skipped, so an interrupted suite resumes where it stopped. Failures are
// collected, not fatal: the summary covers whatever completed.
SuiteOutcome reproduce_suite(const std::string& suite, const std::string& out_dir,
                             std::string cache_dir = "");

// --- artifact readers -----------------------------------------------------

// Column values from a CSV written by this tool ("# config-hash" comment,
// header line, then rows). Throws if the column is missing.
std::vector<double> read_csv_column(const std::string& path, const std::string& column);

// Rebuild power-law samples from a routing-log.csv.
std::vector<PowerSample> read_routing_log(const std::string& path);

// Eval-mode pass over `sequences` against a throwaway copy of the model,
// collecting probe activations and routing decisions. The model and its
// buffers are untouched.
ForwardTrace trace_model(const CramModel& model, const std::vector<SrcdSequence>& sequences);

}  // namespace cram
