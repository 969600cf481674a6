#include "cram/experiment.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string_view>

#include "json.hpp"

#include "cram/serialize.hpp"

namespace fs = std::filesystem;

namespace cram {

namespace {

constexpr std::uint64_t kTrainDataSalt = 0x64617461u;  // "data"
constexpr std::uint64_t kEvalDataSalt = 0x6576616cu;   // "eval"
constexpr std::uint64_t kBootstrapSalt = 0x626f6f74u;  // "boot"

std::uint64_t derived_seed(std::uint64_t root, std::uint64_t salt) {
    return Rng(root).child(salt).raw();
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::uint64_t parse_u64(const std::string& s) {
    if (s.empty() || s[0] == '-') throw std::runtime_error("bad unsigned '" + s + "'");
    errno = 0;
    char* end = nullptr;
    unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (errno != 0 || end != s.c_str() + s.size())
        throw std::runtime_error("bad unsigned '" + s + "'");
    return v;
}

std::size_t parse_size(const std::string& s) {
    return static_cast<std::size_t>(parse_u64(s));
}

double parse_f64(const std::string& s) {
    if (s.empty()) throw std::runtime_error("empty number");
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (errno != 0 || end != s.c_str() + s.size() || !std::isfinite(v))
        throw std::runtime_error("bad number '" + s + "'");
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::runtime_error("bad boolean '" + s + "' (use true/false)");
}

using Getter = std::function<std::string(const ExperimentConfig&)>;
using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

struct FieldDef {
    const char* section;
    const char* key;
    Getter get;
    Setter set;
};

// One accessor lambda per field hands out a mutable reference; the getter
// reuses it on a const object through a const_cast that never writes.
const std::vector<FieldDef>& field_table() {
    static const std::vector<FieldDef> table = [] {
        std::vector<FieldDef> defs;
        auto u64_field = [&defs](const char* sec, const char* key,
                                 std::function<std::uint64_t&(ExperimentConfig&)> ref) {
            defs.push_back({sec, key,
                            [ref](const ExperimentConfig& c) {
                                return std::to_string(ref(const_cast<ExperimentConfig&>(c)));
                            },
                            [ref](ExperimentConfig& c, const std::string& v) {
                                ref(c) = parse_u64(v);
                            }});
        };
        auto size_field = [&defs](const char* sec, const char* key,
                                  std::function<std::size_t&(ExperimentConfig&)> ref) {
            defs.push_back({sec, key,
                            [ref](const ExperimentConfig& c) {
                                return std::to_string(ref(const_cast<ExperimentConfig&>(c)));
                            },
                            [ref](ExperimentConfig& c, const std::string& v) {
                                ref(c) = parse_size(v);
                            }});
        };
        auto f64_field = [&defs](const char* sec, const char* key,
                                 std::function<double&(ExperimentConfig&)> ref) {
            defs.push_back({sec, key,
                            [ref](const ExperimentConfig& c) {
                                return fmt_g17(ref(const_cast<ExperimentConfig&>(c)));
                            },
                            [ref](ExperimentConfig& c, const std::string& v) {
                                ref(c) = parse_f64(v);
                            }});
        };
        auto bool_field = [&defs](const char* sec, const char* key,
                                  std::function<bool&(ExperimentConfig&)> ref) {
            defs.push_back({sec, key,
                            [ref](const ExperimentConfig& c) {
                                return std::string(
                                    ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
                            },
                            [ref](ExperimentConfig& c, const std::string& v) {
                                ref(c) = parse_bool(v);
                            }});
        };
        auto text_field = [&defs](const char* sec, const char* key,
                                  std::function<std::string&(ExperimentConfig&)> ref) {
            defs.push_back({sec, key,
                            [ref](const ExperimentConfig& c) {
                                return ref(const_cast<ExperimentConfig&>(c));
                            },
                            [ref](ExperimentConfig& c, const std::string& v) {
                                if (v.empty()) throw std::runtime_error("empty value");
                                ref(c) = v;
                            }});
        };
        using E = ExperimentConfig;

        u64_field("experiment", "seed", [](E& c) -> std::uint64_t& { return c.seed; });
        text_field("experiment", "task", [](E& c) -> std::string& { return c.task; });
        size_field("experiment", "train_sequences",
                   [](E& c) -> std::size_t& { return c.train_sequences; });
        size_field("experiment", "eval_sequences",
                   [](E& c) -> std::size_t& { return c.eval_sequences; });

        size_field("model", "dim", [](E& c) -> std::size_t& { return c.model.dim; });
        size_field("model", "layers", [](E& c) -> std::size_t& { return c.model.layers; });
        size_field("model", "ct_steps", [](E& c) -> std::size_t& { return c.model.ct_steps; });
        size_field("model", "buffer_capacity",
                   [](E& c) -> std::size_t& { return c.model.buffer_capacity; });
        size_field("model", "adapter_rank",
                   [](E& c) -> std::size_t& { return c.model.adapter_rank; });
        size_field("model", "ffn_mult", [](E& c) -> std::size_t& { return c.model.ffn_mult; });
        size_field("model", "key_vocab", [](E& c) -> std::size_t& { return c.model.key_vocab; });
        size_field("model", "value_vocab",
                   [](E& c) -> std::size_t& { return c.model.value_vocab; });
        f64_field("model", "novelty_threshold",
                  [](E& c) -> double& { return c.model.novelty_threshold; });
        f64_field("model", "sigma_sq", [](E& c) -> double& { return c.model.sigma_sq; });
        f64_field("model", "shadow_fraction",
                  [](E& c) -> double& { return c.model.shadow_fraction; });
        f64_field("model", "lambda_e", [](E& c) -> double& { return c.model.lambda_e; });
        f64_field("model", "lambda_s", [](E& c) -> double& { return c.model.lambda_s; });
        f64_field("model", "gamma", [](E& c) -> double& { return c.model.gamma; });
        f64_field("model", "consolidation_grad_scale",
                  [](E& c) -> double& { return c.model.consolidation_grad_scale; });
        bool_field("model", "no_consolidation_loss",
                   [](E& c) -> bool& { return c.model.no_consolidation_loss; });
        bool_field("model", "no_q_feature",
                   [](E& c) -> bool& { return c.model.no_q_feature; });
        bool_field("model", "no_semantic_path",
                   [](E& c) -> bool& { return c.model.no_semantic_path; });
        bool_field("model", "ct_only", [](E& c) -> bool& { return c.model.ct_only; });
        bool_field("model", "full_attention",
                   [](E& c) -> bool& { return c.model.full_attention; });

        f64_field("train", "lr", [](E& c) -> double& { return c.model.lr; });
        f64_field("train", "lr_floor", [](E& c) -> double& { return c.model.lr_floor; });
        f64_field("train", "weight_decay",
                  [](E& c) -> double& { return c.model.weight_decay; });
        size_field("train", "batch", [](E& c) -> std::size_t& { return c.model.batch; });
        size_field("train", "steps", [](E& c) -> std::size_t& { return c.model.steps; });
        f64_field("train", "temp_start", [](E& c) -> double& { return c.model.temp_start; });
        f64_field("train", "temp_end", [](E& c) -> double& { return c.model.temp_end; });
        size_field("train", "anneal_steps",
                   [](E& c) -> std::size_t& { return c.model.anneal_steps; });

        size_field("data", "seq_len", [](E& c) -> std::size_t& { return c.data.seq_len; });
        f64_field("data", "query_fraction",
                  [](E& c) -> double& { return c.data.query_fraction; });
        f64_field("data", "recurring_fraction",
                  [](E& c) -> double& { return c.data.recurring_fraction; });
        size_field("data", "pattern_count",
                   [](E& c) -> std::size_t& { return c.data.pattern_count; });
        size_field("data", "key_vocab", [](E& c) -> std::size_t& { return c.data.key_vocab; });
        size_field("data", "value_vocab",
                   [](E& c) -> std::size_t& { return c.data.value_vocab; });
        f64_field("data", "ar_coeff", [](E& c) -> double& { return c.data.ar_coeff; });
        f64_field("data", "dyn_amplitude",
                  [](E& c) -> double& { return c.data.dyn_amplitude; });
        f64_field("data", "dyn_frequency",
                  [](E& c) -> double& { return c.data.dyn_frequency; });
        f64_field("data", "noise_std", [](E& c) -> double& { return c.data.noise_std; });
        f64_field("data", "pareto_shape",
                  [](E& c) -> double& { return c.data.pareto_shape; });
        f64_field("data", "gap_clip_lo", [](E& c) -> double& { return c.data.gap_clip_lo; });
        f64_field("data", "gap_clip_hi", [](E& c) -> double& { return c.data.gap_clip_hi; });

        size_field("copy", "seq_len", [](E& c) -> std::size_t& { return c.copy.seq_len; });
        size_field("copy", "vocab", [](E& c) -> std::size_t& { return c.copy.vocab; });
        size_field("copy", "value_vocab",
                   [](E& c) -> std::size_t& { return c.copy.value_vocab; });
        size_field("copy", "copy_count",
                   [](E& c) -> std::size_t& { return c.copy.copy_count; });

        f64_field("analysis", "probe_ridge",
                  [](E& c) -> double& { return c.probe_ridge; });
        return defs;
    }();
    return table;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t count) {
    double sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) sum += v[from + i];
    return sum / static_cast<double>(count);
}

// Late-phase over early-phase attention usage, edges sized like the
// transition detector's (first and last twentieth of the log).
double late_over_early(const std::vector<double>& attn) {
    std::size_t n = attn.size();
    if (n == 0) return 1.0;
    std::size_t edge = std::max<std::size_t>(1, n / 20);
    double pre = mean_of(attn, 0, edge);
    double post = mean_of(attn, n - edge, edge);
    if (pre == 0.0) return post == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return post / pre;
}

std::string resolve_cache_dir(const std::string& explicit_dir, const std::string& out_dir) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (const char* env = std::getenv("CRAM_CACHE_DIR"); env != nullptr && *env != '\0')
        return env;
    return (fs::path(out_dir) / "cache").string();
}

std::string dataset_cache_key(const ExperimentConfig& cfg, std::uint64_t seed,
                              std::size_t count) {
    std::ostringstream key;
    if (cfg.task == "srcd") {
        SrcdConfig d = cfg.data;
        d.seed = seed;
        key << srcd_config_json(d);
    } else {
        const CopyConfig& c = cfg.copy;
        key << "copy seq_len=" << c.seq_len << " vocab=" << c.vocab
            << " value_vocab=" << c.value_vocab << " copy_count=" << c.copy_count
            << " seed=" << seed;
    }
    key << " count=" << count;
    return hex16(fnv1a64(key.str()));
}

SrcdDataset load_or_generate(const ExperimentConfig& cfg, std::uint64_t seed,
                             std::size_t count, const std::string& cache_dir) {
    fs::path file = fs::path(cache_dir) /
                    (cfg.task + "-" + dataset_cache_key(cfg, seed, count) + ".txt");
    if (fs::exists(file)) {
        try {
            SrcdDataset cached = read_dataset(file.string());
            if (cached.sequences.size() == count) return cached;
        } catch (const std::exception&) {
            // Unreadable cache entries are regenerated below.
        }
    }
    SrcdDataset data;
    if (cfg.task == "srcd") {
        SrcdConfig d = cfg.data;
        d.seed = seed;
        data = generate_srcd(d, count);
    } else {
        CopyConfig c = cfg.copy;
        c.seed = seed;
        data = generate_copy_task(c, count);
    }
    fs::create_directories(file.parent_path());
    write_dataset(data, file.string());
    return data;
}

void write_routing_log(const std::string& path, const std::string& hash,
                       const ForwardTrace& trace) {
    std::ostringstream out;
    out << "# config-hash: " << hash << "\n";
    out << "layer,pattern,repetition,pi2,action,q\n";
    for (const auto& r : trace.routes)
        out << r.layer << ',' << r.pattern << ',' << r.repetition << ','
            << fmt_g17(r.pi2) << ',' << r.action << ',' << fmt_g17(r.q) << '\n';
    write_text_file(path, out.str());
}

void write_powerlaw_csv(const std::string& path, const std::string& hash,
                        const PowerLawFit& fit) {
    std::ostringstream out;
    out << "# config-hash: " << hash << "\n";
    out << "k_mean,pi_mean,count,fitted\n";
    for (const auto& bin : fit.bins)
        out << fmt_g17(bin.k_mean) << ',' << fmt_g17(bin.pi_mean) << ',' << bin.count
            << ',' << fmt_g17(fit.p0 * std::pow(bin.k_mean, -fit.gamma)) << '\n';
    write_text_file(path, out.str());
}

void write_redundancy_csv(const std::string& path, const std::string& hash,
                          const std::vector<ProbeResult>& probes) {
    std::ostringstream out;
    out << "# config-hash: " << hash << "\n";
    out << "layer,r,r_min,r_median,r_max,eval_tokens,skipped_tokens\n";
    for (const auto& p : probes)
        out << p.layer << ',' << fmt_g17(p.r) << ',' << fmt_g17(p.r_min) << ','
            << fmt_g17(p.r_median) << ',' << fmt_g17(p.r_max) << ',' << p.eval_tokens
            << ',' << p.skipped_tokens << '\n';
    write_text_file(path, out.str());
}

bool non_increasing(const std::vector<PowerBin>& bins) {
    for (std::size_t i = 1; i < bins.size(); ++i)
        if (bins[i].pi_mean > bins[i - 1].pi_mean) return false;
    return true;
}

nlohmann::ordered_json summary_json(const ExperimentResult& res) {
    nlohmann::ordered_json s;
    s["format"] = "cram-summary-v1";
    s["config_hash"] = res.config_hash;
    s["seed"] = res.config.seed;
    s["task"] = res.config.task;
    if (res.config.task == "srcd")
        s["theoretical_opt"] = theoretical_opt(res.config.data);
    else
        s["theoretical_opt"] = nullptr;

    const MetricsRow& last = res.train.log.back();
    std::vector<double> attn;
    attn.reserve(res.train.log.size());
    for (const auto& row : res.train.log) attn.push_back(row.attention_fraction);
    std::size_t edge = std::max<std::size_t>(1, attn.size() / 20);
    nlohmann::ordered_json train;
    train["steps"] = res.train.log.size();
    train["final_total_loss"] = last.total_loss;
    train["final_task_loss"] = last.task_loss;
    train["final_retrieval_acc"] = last.retrieval_acc;
    train["early_attention_fraction"] = mean_of(attn, 0, edge);
    train["late_attention_fraction"] = mean_of(attn, attn.size() - edge, edge);
    s["train"] = train;

    nlohmann::ordered_json ev;
    ev["retrieval_accuracy"] = res.eval.retrieval_accuracy;
    ev["dyn_mse"] = res.eval.dyn_mse;
    ev["attention_fraction"] = res.eval.attention_fraction;
    ev["shadow_fraction"] = res.eval.shadow_fraction;
    ev["mean_q"] = res.eval.mean_q;
    ev["action_fractions"] = res.eval.action_fractions;
    ev["query_count"] = res.eval.query_count;
    ev["decisions"] = res.eval.decisions;
    s["eval"] = ev;

    s["consolidation_ratio"] = res.consolidation_ratio;

    if (res.transition_found) {
        nlohmann::ordered_json t;
        t["step"] = res.transition.step;
        t["pre_mean"] = res.transition.pre_mean;
        t["post_mean"] = res.transition.post_mean;
        t["reduction_factor"] = std::isfinite(res.transition.reduction_factor)
                                    ? nlohmann::ordered_json(res.transition.reduction_factor)
                                    : nlohmann::ordered_json("inf");
        s["transition"] = t;
    } else {
        s["transition"] = nullptr;
    }

    if (res.powerlaw_found) {
        nlohmann::ordered_json p;
        p["gamma"] = res.powerlaw.gamma;
        p["gamma_se"] = res.powerlaw.gamma_se;
        p["p0"] = res.powerlaw.p0;
        p["r2"] = res.powerlaw.r2;
        p["bins"] = res.powerlaw.bins.size();
        p["sample_count"] = res.powerlaw.sample_count;
        p["monotone_bins"] = res.powerlaw_monotone;
        s["powerlaw"] = p;
    } else {
        s["powerlaw"] = nullptr;
        s["powerlaw_error"] = res.powerlaw_error;
    }

    nlohmann::ordered_json probes = nlohmann::ordered_json::array();
    for (const auto& p : res.probes) {
        nlohmann::ordered_json row;
        row["layer"] = p.layer;
        row["r"] = p.r;
        row["r_min"] = p.r_min;
        row["r_median"] = p.r_median;
        row["r_max"] = p.r_max;
        row["eval_tokens"] = p.eval_tokens;
        row["skipped_tokens"] = p.skipped_tokens;
        probes.push_back(row);
    }
    s["probes"] = probes;
    nlohmann::ordered_json probe_errors = nlohmann::ordered_json::array();
    for (const auto& e : res.probe_errors)
        if (!e.empty()) probe_errors.push_back(e);
    s["probe_errors"] = probe_errors;
    return s;
}

ExperimentResult run_experiment_impl(const ExperimentConfig& cfg, const std::string& out_dir,
                                     const std::string& cache_dir) {
    cfg.validate();
    ExperimentResult res;
    res.config = cfg;
    res.out_dir = out_dir;
    std::string snapshot = serialize_experiment_config(cfg);
    res.config_hash = hex16(fnv1a64(snapshot));
    write_text_file((fs::path(out_dir) / "config.ini").string(), snapshot);

    SrcdDataset train_data = load_or_generate(cfg, derived_seed(cfg.seed, kTrainDataSalt),
                                              cfg.train_sequences, cache_dir);
    SrcdDataset eval_data = load_or_generate(cfg, derived_seed(cfg.seed, kEvalDataSalt),
                                             cfg.eval_sequences, cache_dir);

    ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    Rng init_rng(cfg.seed);
    CramModel model(mc, init_rng);

    std::ofstream metrics((fs::path(out_dir) / "metrics.csv").string());
    if (!metrics)
        throw std::runtime_error("run: cannot open " + out_dir + "/metrics.csv");
    metrics << "# config-hash: " << res.config_hash << "\n"
            << MetricsRow::csv_header() << "\n";
    res.train = train_model(model, train_data.sequences, [&](const MetricsRow& row) {
        metrics << row.csv_line() << "\n";
    });
    metrics.close();
    if (!metrics)
        throw std::runtime_error("run: failed writing " + out_dir + "/metrics.csv");

    res.eval = evaluate(model, eval_data.sequences);

    ForwardTrace trace = trace_model(model, train_data.sequences);
    write_routing_log((fs::path(out_dir) / "routing-log.csv").string(), res.config_hash,
                      trace);

    fs::create_directories(fs::path(out_dir) / "analysis");
    std::vector<double> attn;
    attn.reserve(res.train.log.size());
    for (const auto& row : res.train.log) attn.push_back(row.attention_fraction);
    res.consolidation_ratio = late_over_early(attn);
    try {
        res.transition = detect_transition(attn);
        res.transition_found = res.transition.found;
    } catch (const std::exception&) {
        res.transition_found = false;  // short logs have no transition to find
    }

    std::vector<PowerSample> samples;
    for (const auto& r : trace.routes)
        if (r.pattern > 0) samples.push_back({r.repetition, r.pi2});
    try {
        Rng boot = Rng(cfg.seed).child(kBootstrapSalt);
        res.powerlaw = fit_power_law(samples, boot);
        res.powerlaw_found = true;
        res.powerlaw_monotone = non_increasing(res.powerlaw.bins);
        write_powerlaw_csv((fs::path(out_dir) / "analysis" / "powerlaw.csv").string(),
                           res.config_hash, res.powerlaw);
    } catch (const std::exception& e) {
        res.powerlaw_error = e.what();
    }

    for (std::size_t l = 0; l < trace.probe_inputs.size(); ++l) {
        try {
            ProbeResult probe = train_redundancy_probe(trace.probe_inputs[l],
                                                       trace.probe_targets[l],
                                                       cfg.probe_ridge);
            probe.layer = l;
            res.probes.push_back(probe);
            res.probe_errors.push_back("");
        } catch (const std::exception& e) {
            res.probe_errors.push_back("layer " + std::to_string(l) + ": " + e.what());
        }
    }
    write_redundancy_csv((fs::path(out_dir) / "analysis" / "redundancy.csv").string(),
                         res.config_hash, res.probes);

    save_checkpoint(model, (fs::path(out_dir) / "checkpoint").string(), mc.steps);
    write_text_file((fs::path(out_dir) / "summary.json").string(),
                    summary_json(res).dump(2) + "\n");
    return res;
}

// --- suites ---------------------------------------------------------------

ExperimentConfig variant_config(const std::string& variant, std::uint64_t seed) {
    ExperimentConfig cfg = desk_config();
    cfg.seed = seed;
    if (variant == "full") {
    } else if (variant == "no-consolidation") {
        cfg.model.no_consolidation_loss = true;
    } else if (variant == "no-q") {
        cfg.model.no_q_feature = true;
    } else if (variant == "ct-only") {
        cfg.model.ct_only = true;
    } else if (variant == "full-attention") {
        cfg.model.full_attention = true;
    } else {
        throw std::runtime_error("unknown variant " + variant);
    }
    return cfg;
}

std::vector<std::string> suite_variants(const std::string& suite) {
    if (suite == "table1-desk") return {"full", "no-consolidation"};
    if (suite == "ablations-desk")
        return {"full", "no-consolidation", "no-q", "ct-only", "full-attention"};
    if (suite == "powerlaw") return {"full"};
    throw std::runtime_error("unknown suite " + suite +
                             " (expected table1-desk, ablations-desk, phase, powerlaw, "
                             "or oracle)");
}

bool member_done(const fs::path& dir, const std::string& canonical_config) {
    if (!fs::exists(dir / "summary.json") || fs::exists(dir / "FAILED")) return false;
    if (canonical_config.empty()) return true;  // members without a config file
    try {
        return read_text_file((dir / "config.ini").string()) == canonical_config;
    } catch (const std::exception&) {
        return false;
    }
}

double sample_std(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

// Metric values worth aggregating across seeds, pulled from a member's
// summary.json. Missing entries are simply absent from the map.
std::vector<std::pair<std::string, double>> member_metrics(const nlohmann::json& s) {
    std::vector<std::pair<std::string, double>> m;
    auto grab = [&](const char* name, const nlohmann::json& node) {
        if (node.is_number()) m.emplace_back(name, node.get<double>());
    };
    if (s.contains("eval")) {
        grab("retrieval_accuracy", s["eval"].value("retrieval_accuracy", nlohmann::json()));
        grab("dyn_mse", s["eval"].value("dyn_mse", nlohmann::json()));
        grab("attention_fraction",
             s["eval"].value("attention_fraction", nlohmann::json()));
        grab("mean_q", s["eval"].value("mean_q", nlohmann::json()));
    }
    grab("consolidation_ratio", s.value("consolidation_ratio", nlohmann::json()));
    if (s.contains("transition") && s["transition"].is_object())
        grab("transition_step", s["transition"].value("step", nlohmann::json()));
    if (s.contains("powerlaw") && s["powerlaw"].is_object()) {
        grab("gamma", s["powerlaw"].value("gamma", nlohmann::json()));
        grab("gamma_se", s["powerlaw"].value("gamma_se", nlohmann::json()));
        grab("powerlaw_r2", s["powerlaw"].value("r2", nlohmann::json()));
    }
    grab("separatrix_q0", s.value("separatrix_q0", nlohmann::json()));
    grab("bound_violations", s.value("bound_violations", nlohmann::json()));
    return m;
}

void write_suite_summary(const std::string& suite, const fs::path& out,
                         const std::vector<std::string>& member_names,
                         const SuiteOutcome& outcome) {
    // variant -> metric -> samples, in first-seen order
    std::vector<std::string> variant_order;
    std::map<std::string, std::vector<std::pair<std::string, std::vector<double>>>> agg;
    for (const auto& name : member_names) {
        fs::path summary = out / name / "summary.json";
        if (!fs::exists(summary)) continue;
        nlohmann::json s;
        try {
            s = nlohmann::json::parse(read_text_file(summary.string()));
        } catch (const std::exception&) {
            continue;
        }
        std::string variant = name.substr(0, name.rfind("-seed"));
        if (agg.find(variant) == agg.end()) variant_order.push_back(variant);
        auto& rows = agg[variant];
        for (const auto& [metric, value] : member_metrics(s)) {
            auto it = std::find_if(rows.begin(), rows.end(),
                                   [&](const auto& r) { return r.first == metric; });
            if (it == rows.end()) {
                rows.push_back({metric, {value}});
            } else {
                it->second.push_back(value);
            }
        }
    }

    std::ostringstream csv;
    csv << "# suite: " << suite << "\n";
    csv << "variant,metric,mean,std,count\n";
    nlohmann::ordered_json js;
    js["format"] = "cram-suite-v1";
    js["suite"] = suite;
    nlohmann::ordered_json members = nlohmann::ordered_json::array();
    for (const auto& name : member_names) {
        nlohmann::ordered_json m;
        m["name"] = name;
        auto failed = std::find_if(outcome.failures.begin(), outcome.failures.end(),
                                   [&](const auto& f) { return f.first == name; });
        if (failed != outcome.failures.end()) {
            m["status"] = "failed";
            m["error"] = failed->second;
        } else {
            m["status"] = "ok";
        }
        members.push_back(m);
    }
    js["members"] = members;
    nlohmann::ordered_json aggregate;
    for (const auto& variant : variant_order) {
        nlohmann::ordered_json vj;
        for (const auto& [metric, values] : agg[variant]) {
            double mean = mean_of(values, 0, values.size());
            double sd = sample_std(values, mean);
            nlohmann::ordered_json mj;
            mj["mean"] = mean;
            mj["std"] = sd;
            mj["count"] = values.size();
            vj[metric] = mj;
            csv << variant << ',' << metric << ',' << fmt_g17(mean) << ',' << fmt_g17(sd)
                << ',' << values.size() << '\n';
        }
        aggregate[variant] = vj;
    }
    js["aggregate"] = aggregate;
    js["failure_count"] = outcome.failures.size();
    write_text_file((out / "suite-summary.csv").string(), csv.str());
    write_text_file((out / "suite-summary.json").string(), js.dump(2) + "\n");
}

SuiteOutcome training_suite(const std::string& suite, const std::string& out_dir,
                            const std::string& cache_dir) {
    SuiteOutcome outcome;
    fs::create_directories(out_dir);
    std::vector<std::string> member_names;
    for (const auto& variant : suite_variants(suite)) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            std::string name = variant + "-seed" + std::to_string(seed);
            member_names.push_back(name);
            ExperimentConfig cfg = variant_config(variant, seed);
            fs::path dir = fs::path(out_dir) / name;
            std::string canonical = serialize_experiment_config(cfg);
            if (member_done(dir, canonical)) {
                outcome.completed.push_back(name);
                continue;
            }
            try {
                run_experiment(cfg, dir.string(),
                               resolve_cache_dir(cache_dir, out_dir));
                outcome.completed.push_back(name);
            } catch (const std::exception& e) {
                outcome.failures.emplace_back(name, e.what());
            }
        }
    }
    write_suite_summary(suite, out_dir, member_names, outcome);
    return outcome;
}

void write_phase_member(const fs::path& dir) {
    fs::create_directories(dir);
    const double dt = 0.01;
    const std::size_t steps = 2000;

    std::ostringstream traj;
    traj << "q0,p0,t,q,p\n";
    for (auto [q0, p0] : {std::pair{0.90, 0.17}, std::pair{0.50, 0.17}}) {
        PhaseState start;
        start.q = q0;
        start.p = p0;
        for (const auto& pt : phase_simulate(start, dt, steps))
            traj << fmt_g17(q0) << ',' << fmt_g17(p0) << ',' << fmt_g17(pt.t) << ','
                 << fmt_g17(pt.q) << ',' << fmt_g17(pt.p) << '\n';
    }
    write_text_file((dir / "trajectories.csv").string(), traj.str());

    std::ostringstream sep;
    sep << "p0,critical_q0\n";
    double crit_at_017 = 0.0;
    bool monotone = true;
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 20; ++i) {
        double p0 = 0.05 * i;
        double crit;
        try {
            crit = find_separatrix(p0, 0.83, 1.0, 1.0, 1e-4);
        } catch (const std::exception&) {
            continue;  // both endpoints in one basin: no separatrix to report
        }
        sep << fmt_g17(p0) << ',' << fmt_g17(crit) << '\n';
        if (crit > prev + 1e-9) monotone = false;
        prev = crit;
    }
    crit_at_017 = find_separatrix(0.17, 0.83, 1.0, 1.0, 1e-4);
    write_text_file((dir / "separatrix.csv").string(), sep.str());

    PhaseState high;
    high.q = 0.90;
    high.p = 0.17;
    PhaseState low;
    low.q = 0.50;
    low.p = 0.17;
    nlohmann::ordered_json s;
    s["format"] = "cram-phase-v1";
    s["separatrix_q0"] = crit_at_017;  // at p0 = 0.17
    s["separatrix_monotone_in_p0"] = monotone;
    s["high_start_escapes"] = phase_reaches_high(high);
    s["low_start_collapses"] = !phase_reaches_high(low);
    write_text_file((dir / "summary.json").string(), s.dump(2) + "\n");
}

void write_oracle_member(const fs::path& dir) {
    fs::create_directories(dir);
    std::ostringstream frontier;
    frontier << "f,n,K,eps,min_attention,lower_bound,bound_holds\n";
    std::size_t violations = 0;
    std::size_t rows = 0;
    for (double f : {0.02, 0.05, 0.10}) {
        for (std::size_t n : {std::size_t{512}, std::size_t{2048}, std::size_t{8192}}) {
            for (std::size_t k : {std::size_t{20}, std::size_t{100}}) {
                for (double eps : {0.005, 0.01, 0.02}) {
                    StaticTask task{n, f, k, eps};
                    if (f * static_cast<double>(n) < static_cast<double>(k)) continue;
                    double attn = frontier_min_attention(task);
                    double lower = std::max(0.0, (f - eps) * static_cast<double>(n));
                    bool holds = attn >= lower - 1e-9;
                    if (!holds) ++violations;
                    ++rows;
                    frontier << fmt_g17(f) << ',' << n << ',' << k << ',' << fmt_g17(eps)
                             << ',' << fmt_g17(attn) << ',' << fmt_g17(lower) << ','
                             << (holds ? "true" : "false") << '\n';
                }
            }
        }
    }
    write_text_file((dir / "frontier.csv").string(), frontier.str());

    std::ostringstream cons;
    cons << "f,n,K,eps,eps_cons,m,cost,static_min,beats_static\n";
    for (std::size_t n : {std::size_t{2048}, std::size_t{16384}, std::size_t{131072}}) {
        StaticTask task{n, 0.05, 100, 0.01};
        double static_min = frontier_min_attention(task);
        for (double eps_cons : {0.01, 0.05, 0.10}) {
            for (std::size_t m : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
                double cost = consolidation_schedule_cost(task, eps_cons, m);
                cons << "0.05," << n << ",100,0.01," << fmt_g17(eps_cons) << ',' << m
                     << ',' << fmt_g17(cost) << ',' << fmt_g17(static_min) << ','
                     << (cost < static_min ? "true" : "false") << '\n';
            }
        }
    }
    write_text_file((dir / "consolidation.csv").string(), cons.str());

    nlohmann::ordered_json s;
    s["format"] = "cram-oracle-v1";
    s["frontier_rows"] = rows;
    s["bound_violations"] = violations;
    write_text_file((dir / "summary.json").string(), s.dump(2) + "\n");
}

SuiteOutcome closed_form_suite(const std::string& suite, const std::string& out_dir) {
    SuiteOutcome outcome;
    fs::create_directories(out_dir);
    std::vector<std::string> member_names;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        std::string name = suite + "-seed" + std::to_string(seed);
        member_names.push_back(name);
        fs::path dir = fs::path(out_dir) / name;
        if (member_done(dir, "")) {
            outcome.completed.push_back(name);
            continue;
        }
        try {
            if (suite == "phase")
                write_phase_member(dir);
            else
                write_oracle_member(dir);
            outcome.completed.push_back(name);
        } catch (const std::exception& e) {
            outcome.failures.emplace_back(name, e.what());
            try {
                write_text_file((dir / "FAILED").string(), std::string(e.what()) + "\n");
            } catch (const std::exception&) {
            }
        }
    }
    write_suite_summary(suite, out_dir, member_names, outcome);
    return outcome;
}

}  // namespace

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& msg) {
        throw std::runtime_error("experiment config: " + msg);
    };
    if (task != "srcd" && task != "copy") fail("task must be srcd or copy, got " + task);
    if (train_sequences == 0) fail("train_sequences must be positive");
    if (eval_sequences == 0) fail("eval_sequences must be positive");
    if (probe_ridge < 0.0) fail("probe_ridge must be non-negative");
    ModelConfig m = model;
    m.seed = seed;
    m.validate();
    if (task == "srcd") {
        SrcdConfig d = data;
        d.seed = seed;
        d.validate();
        if (model.key_vocab < data.key_vocab)
            fail("model key_vocab must cover the data key_vocab");
        if (model.value_vocab < data.value_vocab)
            fail("model value_vocab must cover the data value_vocab");
    } else {
        CopyConfig c = copy;
        c.seed = seed;
        c.validate();
        if (model.key_vocab < copy.vocab)
            fail("model key_vocab must cover the copy vocab");
        if (model.value_vocab < copy.value_vocab)
            fail("model value_vocab must cover the copy value_vocab");
    }
}

ExperimentConfig desk_config() {
    ExperimentConfig cfg;
    cfg.seed = 1;
    cfg.data.seq_len = 256;
    cfg.data.pattern_count = 20;
    cfg.data.key_vocab = 64;
    cfg.data.value_vocab = 64;
    return cfg;
}

ExperimentConfig smoke_config() {
    ExperimentConfig cfg;
    cfg.seed = 7;
    cfg.train_sequences = 8;
    cfg.eval_sequences = 4;
    cfg.model.dim = 16;
    cfg.model.layers = 1;
    cfg.model.ct_steps = 2;
    cfg.model.buffer_capacity = 32;
    cfg.model.adapter_rank = 2;
    cfg.model.key_vocab = 16;
    cfg.model.value_vocab = 16;
    cfg.model.lr = 1e-3;
    cfg.model.batch = 4;
    cfg.model.steps = 50;
    cfg.model.anneal_steps = 40;
    cfg.data.seq_len = 64;
    cfg.data.query_fraction = 0.1;
    cfg.data.pattern_count = 8;
    cfg.data.key_vocab = 16;
    cfg.data.value_vocab = 16;
    cfg.copy.seq_len = 32;
    cfg.copy.vocab = 16;
    cfg.copy.value_vocab = 16;
    return cfg;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    ExperimentConfig cfg = desk_config();
    std::set<std::string> known_sections;
    for (const auto& f : field_table()) known_sections.insert(f.section);

    std::istringstream in(text);
    std::string raw;
    std::string section;
    std::size_t line_no = 0;
    auto fail = [](const std::string& msg) {
        throw std::runtime_error("config parse: " + msg);
    };
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                fail("unterminated section header at line " + std::to_string(line_no));
            section = trim(line.substr(1, line.size() - 2));
            if (known_sections.find(section) == known_sections.end())
                fail("unknown section [" + section + "]");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            fail("expected key = value at line " + std::to_string(line_no));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (section.empty()) fail("key '" + key + "' appears before any section");
        const FieldDef* def = nullptr;
        for (const auto& f : field_table())
            if (section == f.section && key == f.key) {
                def = &f;
                break;
            }
        if (def == nullptr) fail("unknown key '" + key + "' in section [" + section + "]");
        try {
            def->set(cfg, value);
        } catch (const std::exception& e) {
            fail("bad value for '" + key + "' in section [" + section + "]: " + e.what());
        }
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    ExperimentConfig cfg = parse_experiment_config(read_text_file(path));
    cfg.validate();
    return cfg;
}

std::string serialize_experiment_config(const ExperimentConfig& cfg) {
    std::string out;
    std::string_view current;
    for (const auto& f : field_table()) {
        if (current != f.section) {
            if (!out.empty()) out += '\n';
            out += '[';
            out += f.section;
            out += "]\n";
            current = f.section;
        }
        out += f.key;
        out += " = ";
        out += f.get(cfg);
        out += '\n';
    }
    return out;
}

std::uint64_t experiment_config_hash(const ExperimentConfig& cfg) {
    return fnv1a64(serialize_experiment_config(cfg));
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                std::string cache_dir) {
    fs::create_directories(out_dir);
    fs::remove(fs::path(out_dir) / "FAILED");
    try {
        return run_experiment_impl(cfg, out_dir, resolve_cache_dir(cache_dir, out_dir));
    } catch (const std::exception& e) {
        try {
            write_text_file((fs::path(out_dir) / "FAILED").string(),
                            std::string(e.what()) + "\n");
        } catch (const std::exception&) {
            // The original error matters more than a marker we cannot write.
        }
        throw;
    }
}

std::vector<std::string> verify_run_dir(const std::string& dir) {
    std::vector<std::string> problems;
    auto note = [&](std::string msg) { problems.push_back(std::move(msg)); };
    fs::path root(dir);
    if (!fs::exists(root)) return {"missing directory " + dir};
    if (fs::exists(root / "FAILED")) {
        std::string text;
        try {
            text = read_text_file((root / "FAILED").string());
        } catch (const std::exception&) {
        }
        std::size_t nl = text.find('\n');
        note("FAILED marker present: " + text.substr(0, nl));
    }

    std::string snapshot;
    try {
        snapshot = read_text_file((root / "config.ini").string());
    } catch (const std::exception&) {
        note("missing config.ini");
        return problems;
    }
    ExperimentConfig cfg;
    try {
        cfg = parse_experiment_config(snapshot);
        cfg.validate();
    } catch (const std::exception& e) {
        note(std::string("config.ini does not parse: ") + e.what());
        return problems;
    }
    if (serialize_experiment_config(cfg) != snapshot)
        note("config.ini is not in canonical form; it was edited after the run");
    std::string hash = hex16(experiment_config_hash(cfg));

    auto check_csv = [&](const fs::path& rel, bool required) {
        fs::path p = root / rel;
        if (!fs::exists(p)) {
            if (required) note("missing " + rel.string());
            return false;
        }
        std::string text;
        try {
            text = read_text_file(p.string());
        } catch (const std::exception& e) {
            note(rel.string() + ": " + e.what());
            return false;
        }
        std::string expect = "# config-hash: " + hash;
        std::size_t nl = text.find('\n');
        if (text.substr(0, nl) != expect)
            note(rel.string() + " carries a different config hash than config.ini");
        return true;
    };

    if (check_csv("metrics.csv", true)) {
        std::string text = read_text_file((root / "metrics.csv").string());
        std::istringstream in(text);
        std::string line;
        std::getline(in, line);  // hash comment
        std::getline(in, line);
        if (line != MetricsRow::csv_header()) note("metrics.csv header changed");
        std::size_t rows = 0;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        if (rows != cfg.model.steps)
            note("metrics.csv holds " + std::to_string(rows) + " rows, expected " +
                 std::to_string(cfg.model.steps));
    }
    check_csv("routing-log.csv", true);
    check_csv(fs::path("analysis") / "redundancy.csv", true);
    check_csv(fs::path("analysis") / "powerlaw.csv", false);

    if (fs::exists(root / "summary.json")) {
        try {
            nlohmann::json s =
                nlohmann::json::parse(read_text_file((root / "summary.json").string()));
            if (s.value("format", "") != "cram-summary-v1")
                note("summary.json format marker changed");
            if (s.value("config_hash", "") != hash)
                note("summary.json carries a different config hash than config.ini");
        } catch (const std::exception& e) {
            note(std::string("summary.json does not parse: ") + e.what());
        }
    } else {
        note("missing summary.json");
    }

    try {
        Checkpoint ck = load_checkpoint((root / "checkpoint").string());
        if (ck.config.seed != cfg.seed) note("checkpoint seed differs from config.ini");
        if (ck.step != cfg.model.steps)
            note("checkpoint step " + std::to_string(ck.step) + " differs from configured " +
                 std::to_string(cfg.model.steps));
    } catch (const std::exception& e) {
        note(std::string("checkpoint does not load: ") + e.what());
    }
    return problems;
}

SuiteOutcome reproduce_suite(const std::string& suite, const std::string& out_dir,
                             std::string cache_dir) {
    if (suite == "phase" || suite == "oracle") return closed_form_suite(suite, out_dir);
    suite_variants(suite);  // rejects unknown names before any directory appears
    return training_suite(suite, out_dir, cache_dir);
}

std::vector<double> read_csv_column(const std::string& path, const std::string& column) {
    std::istringstream in(read_text_file(path));
    std::string line;
    std::string header;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] == '#') continue;
        header = line;
        break;
    }
    if (header.empty()) throw std::runtime_error("read csv: no header in " + path);
    std::vector<std::string> names = split_csv(header);
    std::size_t col = names.size();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == column) {
            col = i;
            break;
        }
    if (col == names.size())
        throw std::runtime_error("read csv: no column '" + column + "' in " + path);
    std::vector<double> values;
    std::size_t row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty()) continue;
        std::vector<std::string> fields = split_csv(line);
        if (fields.size() != names.size())
            throw std::runtime_error("read csv: row " + std::to_string(row_no) + " in " +
                                     path + " has " + std::to_string(fields.size()) +
                                     " fields, expected " + std::to_string(names.size()));
        values.push_back(parse_f64(fields[col]));
    }
    return values;
}

std::vector<PowerSample> read_routing_log(const std::string& path) {
    std::vector<double> patterns = read_csv_column(path, "pattern");
    std::vector<double> repetitions = read_csv_column(path, "repetition");
    std::vector<double> pis = read_csv_column(path, "pi2");
    std::vector<PowerSample> samples;
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        if (patterns[i] <= 0.0) continue;
        samples.push_back({static_cast<long long>(std::llround(repetitions[i])), pis[i]});
    }
    return samples;
}

ForwardTrace trace_model(const CramModel& model, const std::vector<SrcdSequence>& sequences) {
    CramModel probe = model;
    ForwardTrace trace;
    Rng unused(0);
    double temp = probe.config().temp_end;
    for (const auto& seq : sequences) {
        probe.reset_buffers();
        Tape tape;
        probe.bind(tape);
        probe.forward(tape, seq, Mode::eval, temp, unused, &trace);
    }
    return trace;
}

}  // namespace cram
