#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cram/experiment.hpp"
#include "cram/serialize.hpp"

namespace fs = std::filesystem;

namespace {

int g_exit = 0;  // callbacks flag partial failures; main returns it

// Dataset arguments accept either a file or a directory holding exactly one
// .txt dataset.
std::string resolve_dataset_path(const std::string& path) {
    if (!fs::exists(path)) throw std::runtime_error("no dataset at " + path);
    if (!fs::is_directory(path)) return path;
    std::vector<std::string> found;
    for (const auto& entry : fs::directory_iterator(path))
        if (entry.is_regular_file() && entry.path().extension() == ".txt")
            found.push_back(entry.path().string());
    if (found.empty()) throw std::runtime_error("no .txt dataset inside " + path);
    if (found.size() > 1) {
        std::sort(found.begin(), found.end());
        std::string msg = "several datasets inside " + path + ":";
        for (const auto& f : found) msg += " " + f;
        throw std::runtime_error(msg + "; pass the file directly");
    }
    return found.front();
}

void apply_ablation(cram::ExperimentConfig& cfg, const std::string& flag) {
    if (flag == "no-consolidation") {
        cfg.model.no_consolidation_loss = true;
    } else if (flag == "no-q") {
        cfg.model.no_q_feature = true;
    } else if (flag == "no-semantic") {
        cfg.model.no_semantic_path = true;
        cfg.model.no_consolidation_loss = true;
    } else if (flag == "ct-only") {
        cfg.model.ct_only = true;
    } else if (flag == "full-attention") {
        cfg.model.full_attention = true;
    } else {
        throw std::runtime_error(
            "unknown ablation '" + flag +
            "' (expected no-consolidation, no-q, no-semantic, ct-only, full-attention)");
    }
}

nlohmann::ordered_json eval_json(const cram::EvalReport& rep) {
    nlohmann::ordered_json j;
    j["retrieval_accuracy"] = rep.retrieval_accuracy;
    j["dyn_mse"] = rep.dyn_mse;
    j["attention_fraction"] = rep.attention_fraction;
    j["shadow_fraction"] = rep.shadow_fraction;
    j["mean_q"] = rep.mean_q;
    j["action_fractions"] = rep.action_fractions;
    j["query_count"] = rep.query_count;
    j["decisions"] = rep.decisions;
    return j;
}

void print_json(const nlohmann::ordered_json& j) {
    std::printf("%s\n", j.dump(2).c_str());
}

void add_train(CLI::App& app) {
    auto* cmd = app.add_subcommand("train", "Run a full training experiment from an INI config");
    auto config = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto cache = std::make_shared<std::string>();
    auto ablations = std::make_shared<std::vector<std::string>>();
    cmd->add_option("--config", *config, "experiment INI file")->required();
    cmd->add_option("--out", *out, "output directory for run artifacts")->required();
    cmd->add_option("--cache", *cache,
                    "dataset cache directory (default: $CRAM_CACHE_DIR or <out>/cache)");
    cmd->add_option("--ablation", *ablations,
                    "ablation switch, repeatable: no-consolidation, no-q, no-semantic, "
                    "ct-only, full-attention");
    cmd->callback([config, out, cache, ablations] {
        cram::ExperimentConfig cfg = cram::load_experiment_config(*config);
        for (const auto& flag : *ablations) apply_ablation(cfg, flag);
        cfg.validate();
        cram::ExperimentResult res = cram::run_experiment(cfg, *out, *cache);
        std::printf("run complete: %s\n", out->c_str());
        std::printf("  config hash          %s\n", res.config_hash.c_str());
        std::printf("  eval retrieval acc   %.4f\n", res.eval.retrieval_accuracy);
        std::printf("  eval attention frac  %.4f\n", res.eval.attention_fraction);
        std::printf("  consolidation ratio  %.4f\n", res.consolidation_ratio);
        if (res.powerlaw_found)
            std::printf("  routing power law    gamma %.3f (r2 %.3f)\n",
                        res.powerlaw.gamma, res.powerlaw.r2);
        std::printf("  summary              %s/summary.json\n", out->c_str());
    });
}

void add_eval(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    auto ckpt = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    cmd->add_option("--ckpt", *ckpt, "checkpoint directory or manifest.json")->required();
    cmd->add_option("--data", *data, "dataset file or directory")->required();
    cmd->callback([ckpt, data] {
        cram::Checkpoint ck = cram::load_checkpoint(*ckpt);
        cram::SrcdDataset ds = cram::read_dataset(resolve_dataset_path(*data));
        cram::EvalReport rep = cram::evaluate(ck.model, ds.sequences);
        print_json(eval_json(rep));
    });
}

void add_transfer(CLI::App& app) {
    auto* cmd = app.add_subcommand(
        "transfer", "Fine-tune a checkpoint on the copy task against a scratch control");
    auto ckpt = std::make_shared<std::string>();
    auto freeze = std::make_shared<std::string>("semantic,router");
    auto steps = std::make_shared<std::size_t>(200);
    auto train_count = std::make_shared<std::size_t>(64);
    auto eval_count = std::make_shared<std::size_t>(16);
    auto seed = std::make_shared<std::uint64_t>(1);
    auto out = std::make_shared<std::string>();
    cmd->add_option("--ckpt", *ckpt, "pretrained checkpoint")->required();
    cmd->add_option("--freeze", *freeze,
                    "comma list of frozen groups: semantic, router, episodic, ct, rest; "
                    "'none' trains everything");
    cmd->add_option("--steps", *steps, "fine-tuning steps");
    cmd->add_option("--train-count", *train_count, "copy-task training sequences");
    cmd->add_option("--eval-count", *eval_count, "copy-task evaluation sequences");
    cmd->add_option("--seed", *seed, "seed for the generated copy task");
    cmd->add_option("--out", *out, "optional directory for the tuned checkpoints");
    cmd->callback([ckpt, freeze, steps, train_count, eval_count, seed, out] {
        cram::Checkpoint ck = cram::load_checkpoint(*ckpt);
        cram::TransferOptions opts;
        opts.freeze_semantic = opts.freeze_router = false;
        opts.freeze_episodic = opts.freeze_ct = opts.freeze_rest = false;
        opts.steps = *steps;
        std::string list = *freeze;
        while (!list.empty()) {
            std::size_t comma = list.find(',');
            std::string token = list.substr(0, comma);
            list = comma == std::string::npos ? "" : list.substr(comma + 1);
            if (token == "semantic")
                opts.freeze_semantic = true;
            else if (token == "router")
                opts.freeze_router = true;
            else if (token == "episodic")
                opts.freeze_episodic = true;
            else if (token == "ct")
                opts.freeze_ct = true;
            else if (token == "rest")
                opts.freeze_rest = true;
            else if (token != "none" && !token.empty())
                throw std::runtime_error("unknown freeze group '" + token + "'");
        }

        cram::CopyConfig copy;
        copy.vocab = std::min(copy.vocab, ck.config.key_vocab);
        copy.value_vocab = std::min(copy.value_vocab, ck.config.value_vocab);
        cram::CopyConfig train_cfg = copy;
        train_cfg.seed = cram::Rng(*seed).child(1).raw();
        cram::CopyConfig eval_cfg = copy;
        eval_cfg.seed = cram::Rng(*seed).child(2).raw();
        cram::SrcdDataset train_ds = cram::generate_copy_task(train_cfg, *train_count);
        cram::SrcdDataset eval_ds = cram::generate_copy_task(eval_cfg, *eval_count);

        cram::TransferReport rep =
            cram::transfer_eval(ck.model, opts, train_ds.sequences, eval_ds.sequences);
        nlohmann::ordered_json j;
        j["frozen"] = *freeze;
        j["steps"] = *steps;
        j["tuned"] = eval_json(rep.tuned);
        j["scratch"] = eval_json(rep.scratch);
        j["tuned_uses_no_more_attention"] =
            rep.tuned.attention_fraction <= rep.scratch.attention_fraction;
        print_json(j);
        if (!out->empty()) {
            cram::save_checkpoint(rep.tuned_model, (fs::path(*out) / "tuned").string(),
                                  *steps);
            cram::save_checkpoint(rep.scratch_model, (fs::path(*out) / "scratch").string(),
                                  *steps);
            cram::write_text_file((fs::path(*out) / "transfer.json").string(),
                                  j.dump(2) + "\n");
        }
    });
}

void add_oracle_static(CLI::App& app) {
    auto* cmd = app.add_subcommand(
        "oracle-static", "Closed-form attention floor for a static routing policy");
    auto f = std::make_shared<double>(0.05);
    auto n = std::make_shared<std::size_t>(2048);
    auto k = std::make_shared<std::size_t>(100);
    auto eps = std::make_shared<double>(0.01);
    auto out = std::make_shared<std::string>();
    cmd->add_option("--f", *f, "retrieval fraction");
    cmd->add_option("--n", *n, "stream length");
    cmd->add_option("--K", *k, "recurring pattern count");
    cmd->add_option("--eps", *eps, "tolerated error rate");
    cmd->add_option("--out", *out, "optional CSV of the whole frontier");
    cmd->callback([f, n, k, eps, out] {
        cram::StaticTask task{*n, *f, *k, *eps};
        double min_attention = cram::frontier_min_attention(task);
        double lower = std::max(0.0, (*f - *eps) * static_cast<double>(*n));
        if (!out->empty()) {
            std::string csv = "# f=" + cram::fmt_g17(*f) + " n=" + std::to_string(*n) +
                              " K=" + std::to_string(*k) + " eps=" + cram::fmt_g17(*eps) +
                              "\nrouted,error_rate,attention_ops\n";
            for (const auto& row : cram::static_routing_frontier(task))
                csv += std::to_string(row.routed) + "," + cram::fmt_g17(row.error_rate) +
                       "," + cram::fmt_g17(row.attention_ops) + "\n";
            cram::write_text_file(*out, csv);
            std::printf("frontier written to %s\n", out->c_str());
        }
        std::printf("minimum attention for error <= %g: %.6f ops\n", *eps, min_attention);
        std::printf("lower bound (f - eps) * n:        %.6f ops\n", lower);
    });
}

void add_simulate_phase(CLI::App& app) {
    auto* cmd = app.add_subcommand(
        "simulate-phase", "Integrate the consolidation quality / routing dynamics");
    auto q0 = std::make_shared<double>(0.9);
    auto p0 = std::make_shared<double>(0.17);
    auto eta_q = std::make_shared<double>(1.0);
    auto eta_p = std::make_shared<double>(1.0);
    auto q_star = std::make_shared<double>(0.83);
    auto dt = std::make_shared<double>(0.01);
    auto steps = std::make_shared<std::size_t>(2000);
    auto out = std::make_shared<std::string>();
    cmd->add_option("--q0", *q0, "initial consolidation quality");
    cmd->add_option("--p0", *p0, "initial semantic routing probability");
    cmd->add_option("--eta-q", *eta_q, "quality adaptation rate");
    cmd->add_option("--eta-p", *eta_p, "routing adaptation rate");
    cmd->add_option("--q-star", *q_star, "routing threshold quality");
    cmd->add_option("--dt", *dt, "Euler step size");
    cmd->add_option("--steps", *steps, "integration steps");
    cmd->add_option("--out", *out, "optional trajectory CSV");
    cmd->callback([q0, p0, eta_q, eta_p, q_star, dt, steps, out] {
        cram::PhaseState start;
        start.q = *q0;
        start.p = *p0;
        start.eta_q = *eta_q;
        start.eta_p = *eta_p;
        start.q_star = *q_star;
        std::vector<cram::PhasePoint> traj = cram::phase_simulate(start, *dt, *steps);
        if (!out->empty()) {
            std::string csv = "# q0=" + cram::fmt_g17(*q0) + " p0=" + cram::fmt_g17(*p0) +
                              " q_star=" + cram::fmt_g17(*q_star) + "\nt,q,p\n";
            for (const auto& pt : traj)
                csv += cram::fmt_g17(pt.t) + "," + cram::fmt_g17(pt.q) + "," +
                       cram::fmt_g17(pt.p) + "\n";
            cram::write_text_file(*out, csv);
            std::printf("trajectory written to %s\n", out->c_str());
        }
        const cram::PhasePoint& last = traj.back();
        std::printf("final state at t=%.3f: q=%.6f p=%.6f (%s)\n", last.t, last.q, last.p,
                    cram::phase_reaches_high(start) ? "escapes to full consolidation"
                                                    : "collapses to episodic routing");
    });
}

void add_find_separatrix(CLI::App& app) {
    auto* cmd = app.add_subcommand(
        "find-separatrix", "Critical initial quality separating the two routing basins");
    auto p0 = std::make_shared<double>(0.17);
    auto eta_q = std::make_shared<double>(1.0);
    auto eta_p = std::make_shared<double>(1.0);
    auto q_star = std::make_shared<double>(0.83);
    auto tol = std::make_shared<double>(1e-6);
    cmd->add_option("--p0", *p0, "initial semantic routing probability");
    cmd->add_option("--eta-q", *eta_q, "quality adaptation rate");
    cmd->add_option("--eta-p", *eta_p, "routing adaptation rate");
    cmd->add_option("--q-star", *q_star, "routing threshold quality");
    cmd->add_option("--tol", *tol, "bisection tolerance");
    cmd->callback([p0, eta_q, eta_p, q_star, tol] {
        double crit = cram::find_separatrix(*p0, *q_star, *eta_q, *eta_p, *tol);
        std::printf("critical q0 at p0=%g: %.8f\n", *p0, crit);
    });
}

void add_fit_powerlaw(CLI::App& app) {
    auto* cmd = app.add_subcommand(
        "fit-powerlaw", "Fit the episodic routing decay against pattern repetition");
    auto log = std::make_shared<std::string>();
    auto seed = std::make_shared<std::uint64_t>(1);
    cmd->add_option("--log", *log, "routing-log.csv from a run directory")->required();
    cmd->add_option("--seed", *seed, "bootstrap seed");
    cmd->callback([log, seed] {
        std::vector<cram::PowerSample> samples = cram::read_routing_log(*log);
        cram::Rng rng(*seed);
        cram::PowerLawFit fit = cram::fit_power_law(samples, rng);
        bool monotone = true;
        for (std::size_t i = 1; i < fit.bins.size(); ++i)
            if (fit.bins[i].pi_mean > fit.bins[i - 1].pi_mean) monotone = false;
        nlohmann::ordered_json j;
        j["gamma"] = fit.gamma;
        j["gamma_se"] = fit.gamma_se;
        j["p0"] = fit.p0;
        j["r2"] = fit.r2;
        j["bins"] = fit.bins.size();
        j["sample_count"] = fit.sample_count;
        j["monotone_bins"] = monotone;
        print_json(j);
    });
}

void add_probe_redundancy(CLI::App& app) {
    auto* cmd = app.add_subcommand(
        "probe-redundancy",
        "Linear probes predicting episodic readouts from layer inputs");
    auto ckpt = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto ridge = std::make_shared<double>(1e-3);
    cmd->add_option("--ckpt", *ckpt, "checkpoint directory or manifest.json")->required();
    cmd->add_option("--data", *data, "dataset file or directory")->required();
    cmd->add_option("--ridge", *ridge, "probe ridge penalty");
    cmd->callback([ckpt, data, ridge] {
        cram::Checkpoint ck = cram::load_checkpoint(*ckpt);
        cram::SrcdDataset ds = cram::read_dataset(resolve_dataset_path(*data));
        cram::ForwardTrace trace = cram::trace_model(ck.model, ds.sequences);
        nlohmann::ordered_json rows = nlohmann::ordered_json::array();
        std::vector<double> r_values;
        for (std::size_t l = 0; l < trace.probe_inputs.size(); ++l) {
            nlohmann::ordered_json row;
            row["layer"] = l;
            try {
                cram::ProbeResult probe = cram::train_redundancy_probe(
                    trace.probe_inputs[l], trace.probe_targets[l], *ridge);
                row["r"] = probe.r;
                row["r_min"] = probe.r_min;
                row["r_median"] = probe.r_median;
                row["r_max"] = probe.r_max;
                row["eval_tokens"] = probe.eval_tokens;
                row["skipped_tokens"] = probe.skipped_tokens;
                r_values.push_back(probe.r);
            } catch (const std::exception& e) {
                row["error"] = e.what();
            }
            rows.push_back(row);
        }
        cram::TaxonomyCounts tax = cram::head_taxonomy(r_values);
        nlohmann::ordered_json j;
        j["probes"] = rows;
        j["taxonomy"] = {{"redundant", tax.redundant},
                         {"partial", tax.partial},
                         {"novel", tax.novel}};
        print_json(j);
    });
}

void add_detect_transition(CLI::App& app) {
    auto* cmd = app.add_subcommand(
        "detect-transition", "Locate the attention collapse in a training metrics log");
    auto log = std::make_shared<std::string>();
    cmd->add_option("--log", *log, "metrics.csv from a run directory")->required();
    cmd->callback([log] {
        std::vector<double> attn = cram::read_csv_column(*log, "attention_fraction");
        cram::TransitionResult t = cram::detect_transition(attn);
        nlohmann::ordered_json j;
        j["found"] = t.found;
        if (t.found) {
            j["step"] = t.step;
            j["pre_mean"] = t.pre_mean;
            j["post_mean"] = t.post_mean;
            if (std::isfinite(t.reduction_factor))
                j["reduction_factor"] = t.reduction_factor;
            else
                j["reduction_factor"] = "inf";
        }
        print_json(j);
    });
}

void add_reproduce(CLI::App& app) {
    auto* cmd = app.add_subcommand("reproduce", "Rerun a reproduction suite over 5 seeds");
    auto suite = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto cache = std::make_shared<std::string>();
    cmd->add_option("suite", *suite,
                    "table1-desk, ablations-desk, phase, powerlaw, or oracle")
        ->required();
    cmd->add_option("--out", *out, "suite output directory (default runs/<suite>)");
    cmd->add_option("--cache", *cache,
                    "dataset cache directory (default: $CRAM_CACHE_DIR or <out>/cache)");
    cmd->callback([suite, out, cache] {
        std::string dir = out->empty() ? "runs/" + *suite : *out;
        cram::SuiteOutcome outcome = cram::reproduce_suite(*suite, dir, *cache);
        for (const auto& name : outcome.completed)
            std::printf("  ok      %s\n", name.c_str());
        for (const auto& [name, error] : outcome.failures)
            std::printf("  FAILED  %s: %s\n", name.c_str(), error.c_str());
        std::printf("suite summary: %s/suite-summary.json\n", dir.c_str());
        if (!outcome.failures.empty()) {
            std::printf("%zu member(s) failed; results above are partial\n",
                        outcome.failures.size());
            g_exit = 1;
        }
    });
}

void add_verify(CLI::App& app) {
    auto* cmd = app.add_subcommand("verify", "Re-check the artifacts of a finished run");
    auto dir = std::make_shared<std::string>();
    cmd->add_option("dir", *dir, "run directory")->required();
    cmd->callback([dir] {
        std::vector<std::string> problems = cram::verify_run_dir(*dir);
        if (problems.empty()) {
            std::printf("verified: %s\n", dir->c_str());
            return;
        }
        for (const auto& p : problems) std::printf("  problem: %s\n", p.c_str());
        g_exit = 1;
    });
}

void add_gen_srcd(CLI::App& app) {
    auto* cmd = app.add_subcommand("gen-srcd",
                                   "Generate a sparse-recall benchmark dataset");
    auto cfg = std::make_shared<cram::SrcdConfig>();
    auto out = std::make_shared<std::string>();
    auto count = std::make_shared<std::size_t>(256);
    cmd->add_option("--out", *out, "output dataset path")->required();
    cmd->add_option("--count", *count, "number of sequences");
    cmd->add_option("--seq-len", cfg->seq_len, "tokens per sequence");
    cmd->add_option("--query-fraction", cfg->query_fraction,
                    "fraction of positions that are queries");
    cmd->add_option("--recurring", cfg->recurring_fraction,
                    "fraction of queries drawn from the recurring dictionary");
    cmd->add_option("--patterns", cfg->pattern_count, "recurring dictionary size");
    cmd->add_option("--key-vocab", cfg->key_vocab, "key symbol vocabulary");
    cmd->add_option("--value-vocab", cfg->value_vocab, "value vocabulary");
    cmd->add_option("--ar-coeff", cfg->ar_coeff, "dynamics AR(1) coefficient");
    cmd->add_option("--dyn-amplitude", cfg->dyn_amplitude, "dynamics drive amplitude");
    cmd->add_option("--dyn-frequency", cfg->dyn_frequency, "dynamics drive frequency");
    cmd->add_option("--noise-std", cfg->noise_std, "dynamics noise std");
    cmd->add_option("--pareto-shape", cfg->pareto_shape, "gap distribution shape");
    cmd->add_option("--seed", cfg->seed, "master seed");
    cmd->callback([cfg, out, count] {
        cram::SrcdDataset data = cram::generate_srcd(*cfg, *count);
        cram::write_dataset(data, *out);
        std::printf("wrote %zu sequences (%zu tokens each) to %s\n",
                    data.sequences.size(), cfg->seq_len, out->c_str());
        std::printf("config hash %016llx, theoretical optimum error %.6f\n",
                    static_cast<unsigned long long>(data.config_hash),
                    cram::theoretical_opt(*cfg));
    });
}

void add_gen_copy(CLI::App& app) {
    auto* cmd = app.add_subcommand("gen-copy",
                                   "Generate a key/value copy-task dataset");
    auto cfg = std::make_shared<cram::CopyConfig>();
    auto out = std::make_shared<std::string>();
    auto count = std::make_shared<std::size_t>(256);
    cmd->add_option("--out", *out, "output dataset path")->required();
    cmd->add_option("--count", *count, "number of sequences");
    cmd->add_option("--seq-len", cfg->seq_len, "tokens per sequence");
    cmd->add_option("--copy-count", cfg->copy_count, "key/query pairs per sequence");
    cmd->add_option("--vocab", cfg->vocab, "key symbol vocabulary");
    cmd->add_option("--value-vocab", cfg->value_vocab, "value vocabulary");
    cmd->add_option("--seed", cfg->seed, "master seed");
    cmd->callback([cfg, out, count] {
        cram::SrcdDataset data = cram::generate_copy_task(*cfg, *count);
        cram::write_dataset(data, *out);
        std::printf("wrote %zu copy sequences (%zu tokens each) to %s\n",
                    data.sequences.size(), cfg->seq_len, out->c_str());
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"consolidation-routed memory: training, evaluation, and analysis"};
    app.require_subcommand(1);
    add_gen_srcd(app);
    add_gen_copy(app);
    add_train(app);
    add_eval(app);
    add_transfer(app);
    add_oracle_static(app);
    add_simulate_phase(app);
    add_find_separatrix(app);
    add_fit_powerlaw(app);
    add_probe_redundancy(app);
    add_detect_transition(app);
    add_reproduce(app);
    add_verify(app);
    try {
        CLI11_PARSE(app, argc, argv);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "cram: %s\n", e.what());
        return 1;
    }
    return g_exit;
}
