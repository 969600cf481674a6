#include "cram/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

#include "cram/optim.hpp"
#include "cram/serialize.hpp"

namespace cram {

namespace {

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["dim"] = c.dim;
    j["layers"] = c.layers;
    j["ct_steps"] = c.ct_steps;
    j["buffer_capacity"] = c.buffer_capacity;
    j["adapter_rank"] = c.adapter_rank;
    j["ffn_mult"] = c.ffn_mult;
    j["key_vocab"] = c.key_vocab;
    j["value_vocab"] = c.value_vocab;
    j["novelty_threshold"] = c.novelty_threshold;
    j["sigma_sq"] = c.sigma_sq;
    j["shadow_fraction"] = c.shadow_fraction;
    j["lambda_e"] = c.lambda_e;
    j["lambda_s"] = c.lambda_s;
    j["gamma"] = c.gamma;
    j["consolidation_grad_scale"] = c.consolidation_grad_scale;
    j["lr"] = c.lr;
    j["lr_floor"] = c.lr_floor;
    j["weight_decay"] = c.weight_decay;
    j["batch"] = c.batch;
    j["steps"] = c.steps;
    j["temp_start"] = c.temp_start;
    j["temp_end"] = c.temp_end;
    j["anneal_steps"] = c.anneal_steps;
    j["no_consolidation_loss"] = c.no_consolidation_loss;
    j["no_q_feature"] = c.no_q_feature;
    j["no_semantic_path"] = c.no_semantic_path;
    j["ct_only"] = c.ct_only;
    j["full_attention"] = c.full_attention;
    j["seed"] = c.seed;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    std::size_t consumed = 0;
    auto take = [&](const char* key, auto& field) {
        if (!j.contains(key))
            throw std::runtime_error(std::string("checkpoint config: missing key ") + key);
        field = j.at(key).get<std::decay_t<decltype(field)>>();
        ++consumed;
    };
    take("dim", c.dim);
    take("layers", c.layers);
    take("ct_steps", c.ct_steps);
    take("buffer_capacity", c.buffer_capacity);
    take("adapter_rank", c.adapter_rank);
    take("ffn_mult", c.ffn_mult);
    take("key_vocab", c.key_vocab);
    take("value_vocab", c.value_vocab);
    take("novelty_threshold", c.novelty_threshold);
    take("sigma_sq", c.sigma_sq);
    take("shadow_fraction", c.shadow_fraction);
    take("lambda_e", c.lambda_e);
    take("lambda_s", c.lambda_s);
    take("gamma", c.gamma);
    take("consolidation_grad_scale", c.consolidation_grad_scale);
    take("lr", c.lr);
    take("lr_floor", c.lr_floor);
    take("weight_decay", c.weight_decay);
    take("batch", c.batch);
    take("steps", c.steps);
    take("temp_start", c.temp_start);
    take("temp_end", c.temp_end);
    take("anneal_steps", c.anneal_steps);
    take("no_consolidation_loss", c.no_consolidation_loss);
    take("no_q_feature", c.no_q_feature);
    take("no_semantic_path", c.no_semantic_path);
    take("ct_only", c.ct_only);
    take("full_attention", c.full_attention);
    take("seed", c.seed);
    if (j.size() != consumed)
        for (const auto& [key, val] : j.items())
            throw std::runtime_error("checkpoint config: unknown key " + key);
    c.validate();
    return c;
}

// Same value the consolidation term contributes to the loss: mean over
// aligned pairs of the per-row mean squared difference. Recomputed from the
// forward outputs so logging never touches the tape.
double consolidation_value(const ForwardResult& res) {
    if (res.cons_semantic.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < res.cons_semantic.size(); ++i) {
        const double* s = res.cons_semantic[i].ptr();
        const double* e = res.cons_episodic[i].ptr();
        std::size_t d = res.cons_semantic[i].numel();
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double diff = s[j] - e[j];
            acc += diff * diff;
        }
        sum += acc / static_cast<double>(d);
    }
    return sum / static_cast<double>(res.cons_semantic.size());
}

std::size_t correct_queries(const ForwardResult& res, std::size_t vocab) {
    std::size_t correct = 0;
    const double* logits = res.value_logits.numel() ? res.value_logits.ptr() : nullptr;
    for (std::size_t r = 0; r < res.value_targets.size(); ++r) {
        const double* row = logits + r * vocab;
        std::size_t best = 0;
        for (std::size_t v = 1; v < vocab; ++v)
            if (row[v] > row[best]) best = v;
        if (static_cast<int>(best) == res.value_targets[r]) ++correct;
    }
    return correct;
}

MetricsRow make_row(std::size_t step, double lr, double temp, double total, double task,
                    double ce, double dyn, double cons, double retrieval_acc,
                    const ForwardStats& stats, const CramModel& model,
                    double grad_norm) {
    MetricsRow row;
    row.step = step;
    row.lr = lr;
    row.temperature = temp;
    row.total_loss = total;
    row.task_loss = task;
    row.ce_loss = ce;
    row.dyn_loss = dyn;
    row.cons_loss = cons;
    row.retrieval_acc = retrieval_acc;
    row.attention_fraction = stats.attention_fraction();
    double dec = static_cast<double>(stats.decisions);
    row.shadow_fraction = stats.decisions ? stats.shadow_ops / dec : 0.0;
    row.mean_q = stats.mean_q();
    for (std::size_t i = 0; i < 3; ++i)
        row.action_fractions[i] = stats.decisions ? stats.action_counts[i] / dec : 0.0;
    double fill = 0.0;
    for (const auto& layer : model.layers())
        fill += static_cast<double>(layer.buffer.size()) /
                static_cast<double>(layer.buffer.capacity());
    row.buffer_fill = fill / static_cast<double>(model.layers().size());
    row.grad_norm = grad_norm;
    return row;
}

TrainReport run_training(CramModel& model, const std::vector<SrcdSequence>& sequences,
                         const std::vector<Tensor>& params, std::size_t total_steps,
                         const MetricsCallback& callback) {
    if (sequences.empty()) throw std::runtime_error("train: no sequences");
    if (total_steps == 0) throw std::runtime_error("train: zero steps");
    const ModelConfig& cfg = model.config();
    AdamwConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.beta1 = 0.9;
    ocfg.beta2 = 0.98;
    ocfg.eps = 1e-8;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(ocfg);
    opt.add_params(params);

    Rng rng = Rng(cfg.seed).child(0x747261696eull);  // training stream
    std::size_t n = sequences.size();
    std::size_t correct_total = 0, query_total = 0;
    TrainReport report;

    for (std::size_t step = 0; step < total_steps; ++step) {
        std::size_t pos = step * cfg.batch;
        double lr = cosine_lr(cfg.lr, step, total_steps, cfg.lr_floor);
        double temp =
            linear_schedule(cfg.temp_start, cfg.temp_end, step, cfg.anneal_steps);
        opt.set_lr(lr);

        Tape tape;
        model.bind(tape);
        ForwardStats stats;
        double task_sum = 0.0, ce_sum = 0.0, dyn_sum = 0.0, cons_sum = 0.0;
        Tensor batch_loss;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const SrcdSequence& seq = sequences[(pos + b) % n];
            // Each sequence is an independent stream: episodic state never
            // carries across; only the weights accumulate experience.
            model.reset_buffers();
            ForwardResult res = model.forward(tape, seq, Mode::train, temp, rng);
            double task = res.task_loss.value();
            if (!std::isfinite(task))
                throw std::runtime_error("training diverged at step " +
                                         std::to_string(step) + ": task loss is not finite");
            Tensor total = model.total_loss(tape, res);
            batch_loss = b == 0 ? total : tape.add(batch_loss, total);
            stats.accumulate(res.stats);
            task_sum += task;
            ce_sum += res.ce_loss.value();
            dyn_sum += res.dyn_loss.value();
            cons_sum += consolidation_value(res);
            correct_total += correct_queries(res, cfg.value_vocab);
            query_total += res.value_targets.size();
        }
        batch_loss = tape.scale(batch_loss, 1.0 / static_cast<double>(cfg.batch));
        if (!std::isfinite(batch_loss.value()))
            throw std::runtime_error("training diverged at step " + std::to_string(step) +
                                     ": total loss is not finite");
        GradMap gm = tape.backward(batch_loss);
        opt.step(gm);

        double inv_b = 1.0 / static_cast<double>(cfg.batch);
        double racc = query_total ? static_cast<double>(correct_total) /
                                        static_cast<double>(query_total)
                                  : 0.0;
        MetricsRow row =
            make_row(step, lr, temp, batch_loss.value(), task_sum * inv_b,
                     ce_sum * inv_b, dyn_sum * inv_b, cons_sum * inv_b, racc,
                     stats, model, opt.last_grad_norm());
        report.log.push_back(row);
        if (callback) callback(row);
    }
    return report;
}

}  // namespace

std::string MetricsRow::csv_header() {
    return "step,lr,temperature,total_loss,task_loss,ce_loss,dyn_loss,cons_loss,"
           "retrieval_acc,attention_fraction,shadow_fraction,mean_q,action1_fraction,"
           "action2_fraction,action3_fraction,buffer_fill,grad_norm";
}

std::string MetricsRow::csv_line() const {
    std::string out = std::to_string(step);
    for (double v : {lr, temperature, total_loss, task_loss, ce_loss, dyn_loss,
                     cons_loss, retrieval_acc, attention_fraction, shadow_fraction,
                     mean_q, action_fractions[0],
                     action_fractions[1], action_fractions[2], buffer_fill, grad_norm}) {
        out += ',';
        out += fmt_g17(v);
    }
    return out;
}

TrainReport train_model(CramModel& model, const std::vector<SrcdSequence>& sequences,
                        const MetricsCallback& callback) {
    return run_training(model, sequences, model.trainable_params(),
                        model.config().steps, callback);
}

EvalReport evaluate(const CramModel& model, const std::vector<SrcdSequence>& sequences) {
    if (sequences.empty()) throw std::runtime_error("evaluate: no sequences");
    CramModel probe = model;  // parameters shared read-only, buffers copied
    Rng unused(0);
    ForwardStats stats;
    double sq_sum = 0.0;
    std::size_t dyn_rows = 0, correct = 0, queries = 0;
    std::size_t vocab = model.config().value_vocab;
    for (const auto& seq : sequences) {
        probe.reset_buffers();  // each sequence evaluated in a fresh context
        Tape tape;
        probe.bind(tape);
        ForwardResult res =
            probe.forward(tape, seq, Mode::eval, model.config().temp_end, unused);
        stats.accumulate(res.stats);
        for (std::size_t r = 0; r < res.value_targets.size(); ++r) {
            const double* row = res.value_logits.ptr() + r * vocab;
            std::size_t best = 0;
            for (std::size_t i = 1; i < vocab; ++i)
                if (row[i] > row[best]) best = i;
            if (static_cast<int>(best) == res.value_targets[r]) ++correct;
            ++queries;
        }
        if (seq.tokens.size() >= 2) {
            sq_sum += res.dyn_loss.value() * static_cast<double>(seq.tokens.size() - 1);
            dyn_rows += seq.tokens.size() - 1;
        }
    }
    EvalReport rep;
    rep.dyn_mse = dyn_rows ? sq_sum / static_cast<double>(dyn_rows) : 0.0;
    rep.retrieval_accuracy =
        queries ? static_cast<double>(correct) / static_cast<double>(queries) : 0.0;
    rep.attention_fraction = stats.attention_fraction();
    double dec = static_cast<double>(stats.decisions);
    rep.shadow_fraction = stats.decisions ? stats.shadow_ops / dec : 0.0;
    rep.mean_q = stats.mean_q();
    for (std::size_t i = 0; i < 3; ++i)
        rep.action_fractions[i] = stats.decisions ? stats.action_counts[i] / dec : 0.0;
    rep.query_count = queries;
    rep.decisions = stats.decisions;
    return rep;
}

void save_checkpoint(const CramModel& model, const std::string& dir, std::size_t step) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "arrays");
    nlohmann::ordered_json man;
    man["format"] = "cram-checkpoint-v1";
    man["step"] = step;
    man["config"] = config_to_json(model.config());
    auto arrays = nlohmann::ordered_json::array();
    for (const auto& [name, param] : model.named_params()) {
        arrays.push_back({{"name", name}, {"shape", param.shape}});
        write_f64_blob((fs::path(dir) / "arrays" / (name + ".f64")).string(),
                       param.data());
    }
    man["arrays"] = std::move(arrays);
    auto layers = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
        const auto& layer = model.layers()[l];
        nlohmann::ordered_json jl;
        jl["feat_mean"] = layer.feat_mean;
        jl["feat_var"] = layer.feat_var;
        std::vector<double> taus, keys, values;
        std::vector<long long> accesses;
        for (const auto& e : layer.buffer.entries()) {
            taus.push_back(e.tau);
            accesses.push_back(e.access);
            keys.insert(keys.end(), e.key.ptr(), e.key.ptr() + e.key.numel());
            values.insert(values.end(), e.value.ptr(), e.value.ptr() + e.value.numel());
        }
        jl["buffer"] = {{"taus", taus}, {"accesses", accesses}};
        if (!taus.empty()) {
            std::string stem = "layer" + std::to_string(l) + ".buffer.";
            write_f64_blob((fs::path(dir) / "arrays" / (stem + "keys.f64")).string(), keys);
            write_f64_blob((fs::path(dir) / "arrays" / (stem + "values.f64")).string(),
                           values);
        }
        layers.push_back(std::move(jl));
    }
    man["layers"] = std::move(layers);
    write_text_file((fs::path(dir) / "manifest.json").string(), man.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir_in) {
    namespace fs = std::filesystem;
    fs::path dir(dir_in);
    if (dir.filename() == "manifest.json") dir = dir.parent_path();
    nlohmann::json man;
    try {
        man = nlohmann::json::parse(read_text_file((dir / "manifest.json").string()));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint load: bad manifest: " + std::string(e.what()));
    }
    if (!man.contains("format") || man.at("format") != "cram-checkpoint-v1")
        throw std::runtime_error("checkpoint load: unrecognized format");
    ModelConfig cfg = config_from_json(man.at("config"));
    Rng rng(cfg.seed);
    Checkpoint ck{cfg, man.at("step").get<std::size_t>(), CramModel(cfg, rng)};

    std::unordered_map<std::string, Tensor> by_name;
    for (const auto& [name, param] : ck.model.named_params()) by_name.emplace(name, param);
    std::size_t loaded = 0;
    for (const auto& entry : man.at("arrays")) {
        std::string name = entry.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint load: unknown array " + name);
        auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape != it->second.shape)
            throw std::runtime_error("checkpoint load: shape mismatch for " + name);
        std::vector<double> data =
            read_f64_blob((dir / "arrays" / (name + ".f64")).string());
        if (data.size() != it->second.numel())
            throw std::runtime_error("checkpoint load: size mismatch for " + name);
        it->second.data() = std::move(data);
        ++loaded;
    }
    if (loaded != by_name.size())
        throw std::runtime_error("checkpoint load: missing arrays (have " +
                                 std::to_string(loaded) + ", expected " +
                                 std::to_string(by_name.size()) + ")");

    const auto& jlayers = man.at("layers");
    auto& layers = ck.model.layers();
    if (jlayers.size() != layers.size())
        throw std::runtime_error("checkpoint load: layer count mismatch");
    std::size_t d = cfg.dim;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].feat_mean = jlayers[l].at("feat_mean").get<std::array<double, 4>>();
        layers[l].feat_var = jlayers[l].at("feat_var").get<std::array<double, 4>>();
        auto taus = jlayers[l].at("buffer").at("taus").get<std::vector<double>>();
        auto accesses =
            jlayers[l].at("buffer").at("accesses").get<std::vector<long long>>();
        if (taus.size() != accesses.size())
            throw std::runtime_error("checkpoint load: buffer metadata mismatch");
        std::vector<EpisodicEntry> entries;
        if (!taus.empty()) {
            std::string stem = "layer" + std::to_string(l) + ".buffer.";
            auto keys = read_f64_blob((dir / "arrays" / (stem + "keys.f64")).string());
            auto values = read_f64_blob((dir / "arrays" / (stem + "values.f64")).string());
            if (keys.size() != taus.size() * d || values.size() != taus.size() * d)
                throw std::runtime_error("checkpoint load: buffer blob size mismatch");
            for (std::size_t e = 0; e < taus.size(); ++e) {
                EpisodicEntry entry;
                entry.key = Tensor::from(
                    {d}, std::vector<double>(keys.begin() + e * d, keys.begin() + (e + 1) * d));
                entry.value = Tensor::from({d}, std::vector<double>(values.begin() + e * d,
                                                                    values.begin() + (e + 1) * d));
                entry.tau = taus[e];
                entry.access = accesses[e];
                entries.push_back(std::move(entry));
            }
        }
        layers[l].buffer.restore_entries(std::move(entries));
    }
    return ck;
}

TransferReport transfer_eval(const CramModel& pretrained, const TransferOptions& options,
                             const std::vector<SrcdSequence>& train_sequences,
                             const std::vector<SrcdSequence>& eval_sequences) {
    const ModelConfig& cfg = pretrained.config();
    Rng tuned_rng(cfg.seed);
    CramModel tuned(cfg, tuned_rng);
    tuned.copy_state_from(pretrained);
    Rng scratch_rng(cfg.seed);
    CramModel scratch(cfg, scratch_rng);  // same init the pretrained run started from

    auto group_frozen = [&](const std::string& name) {
        if (name.find(".adapter.") != std::string::npos) return options.freeze_semantic;
        if (name.find(".router.") != std::string::npos) return options.freeze_router;
        if (name.find(".buffer.") != std::string::npos) return options.freeze_episodic;
        if (name.find(".ct.") != std::string::npos) return options.freeze_ct;
        return options.freeze_rest;
    };
    std::vector<Tensor> tuned_params;
    for (const auto& [name, param] : tuned.named_params())
        if (!group_frozen(name)) tuned_params.push_back(param);
    if (options.freeze_router) tuned.freeze_feature_stats(true);

    TransferReport rep;
    rep.tuned_log = run_training(tuned, train_sequences, tuned_params, options.steps, {});
    rep.scratch_log = run_training(scratch, train_sequences, scratch.trainable_params(),
                                   options.steps, {});
    rep.tuned = evaluate(tuned, eval_sequences);
    rep.scratch = evaluate(scratch, eval_sequences);
    rep.tuned_model = std::move(tuned);
    rep.scratch_model = std::move(scratch);
    return rep;
}

}  // namespace cram
