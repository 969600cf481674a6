#include "cram/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cram {

namespace {

Tensor init_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    for (double& v : t.data()) v = rng.normal() * scale;
    t.requires_grad = true;
    return t;
}

Tensor init_vector(std::size_t n, double scale, Rng& rng) {
    Tensor t = Tensor::zeros({n});
    for (double& v : t.data()) v = rng.normal() * scale;
    t.requires_grad = true;
    return t;
}

Tensor grad_zeros(std::vector<std::size_t> shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    t.requires_grad = true;
    return t;
}

Tensor grad_ones(std::size_t n) {
    Tensor t = Tensor::from({n}, std::vector<double>(n, 1.0));
    t.requires_grad = true;
    return t;
}

// Bias b broadcast over the rows of a T x n block.
Tensor broadcast_rows(Tape& tape, const Tensor& ones_col, const Tensor& bias) {
    return tape.colvec_outer(ones_col, bias);
}

double entropy_of_softmax(const Tensor& logits) {
    double mx = logits.at(0);
    for (std::size_t i = 1; i < logits.numel(); ++i) mx = std::max(mx, logits.at(i));
    double z = 0.0;
    for (std::size_t i = 0; i < logits.numel(); ++i) z += std::exp(logits.at(i) - mx);
    double h = 0.0;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        double p = std::exp(logits.at(i) - mx) / z;
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

// Softmax mass on the episodic action, from the clean routing logits.
double episodic_mass(const Tensor& logits) {
    double mx = std::max({logits.at(0), logits.at(1), logits.at(2)});
    double z = 0.0;
    for (std::size_t i = 0; i < 3; ++i) z += std::exp(logits.at(i) - mx);
    return std::exp(logits.at(1) - mx) / z;
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::runtime_error("model config: " + msg); };
    if (dim == 0) fail("dim must be positive");
    if (layers == 0) fail("layers must be positive");
    if (ct_steps == 0) fail("ct_steps must be positive");
    if (buffer_capacity == 0) fail("buffer_capacity must be positive");
    if (adapter_rank == 0) fail("adapter_rank must be at least 1");
    if (ffn_mult == 0) fail("ffn_mult must be at least 1");
    if (key_vocab == 0 || value_vocab == 0) fail("vocabularies must be positive");
    if (!(novelty_threshold >= 0.0 && novelty_threshold < 1.0))
        fail("novelty_threshold must lie in [0, 1)");
    if (!(sigma_sq > 0.0)) fail("sigma_sq must be positive");
    if (!(shadow_fraction >= 0.0 && shadow_fraction <= 1.0))
        fail("shadow_fraction must lie in [0, 1]");
    if (lambda_e < 0.0 || lambda_s < 0.0 || gamma < 0.0)
        fail("loss weights must be non-negative");
    if (!(consolidation_grad_scale >= 0.0)) fail("consolidation_grad_scale must be >= 0");
    if (!(lr > 0.0)) fail("lr must be positive");
    if (!(lr_floor > 0.0 && lr_floor <= 1.0)) fail("lr_floor must lie in (0, 1]");
    if (weight_decay < 0.0) fail("weight_decay must be non-negative");
    if (batch == 0) fail("batch must be positive");
    if (steps == 0) fail("steps must be positive");
    if (!(temp_end > 0.0) || temp_start < temp_end)
        fail("temperature schedule needs temp_start >= temp_end > 0");
    if (anneal_steps == 0) fail("anneal_steps must be positive");
    if (no_semantic_path && !no_consolidation_loss)
        fail("no_semantic_path requires no_consolidation_loss (nothing to consolidate)");
    if (ct_only && full_attention) fail("ct_only and full_attention are mutually exclusive");
}

RouterMlp::RouterMlp(Rng& rng) {
    w1 = init_matrix(4, 16, 0.5, rng);
    b1 = grad_zeros({16});
    w2 = init_matrix(16, 3, 0.25, rng);
    // Start heavily biased toward the CT-only action: memory paths begin
    // near-silent and are recruited by the loss rather than by init noise.
    b2 = Tensor::from({3}, {2.7, 0.0, 0.0});
    b2.requires_grad = true;
}

void RouterMlp::bind(Tape& tape) const {
    tape.bind(w1);
    tape.bind(b1);
    tape.bind(w2);
    tape.bind(b2);
}

std::vector<Tensor> RouterMlp::params() const { return {w1, b1, w2, b2}; }

RouteResult route(Tape& tape, const RouterMlp& router, const Tensor& z,
                  double temperature, Rng& rng, Mode mode) {
    if (z.numel() != 4) throw std::runtime_error("route: expected 4 features");
    Tensor h = tape.relu(tape.add(tape.matmul(z, router.w1), router.b1));
    RouteResult r;
    r.logits = tape.add(tape.matmul(h, router.w2), router.b2);
    if (mode == Mode::train) {
        GumbelSample g = tape.gumbel_softmax(r.logits, temperature, rng);
        r.soft = g.soft;
        r.action = g.hard + 1;
    } else {
        r.soft = tape.softmax(r.logits, 0);
        std::size_t best = 0;
        for (std::size_t i = 1; i < 3; ++i)
            if (r.soft.at(i) > r.soft.at(best)) best = i;
        r.action = static_cast<int>(best) + 1;
    }
    for (std::size_t i = 0; i < 3; ++i) r.pi[i] = r.soft.at(i);
    return r;
}

void ForwardStats::accumulate(const ForwardStats& other) {
    decisions += other.decisions;
    attention_ops += other.attention_ops;
    shadow_ops += other.shadow_ops;
    writes += other.writes;
    for (std::size_t i = 0; i < 3; ++i) action_counts[i] += other.action_counts[i];
    q_sum += other.q_sum;
    q_count += other.q_count;
}

CramModel::CramModel(const ModelConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    std::size_t d = config_.dim;
    double scale = 1.0 / std::sqrt(static_cast<double>(d));
    embed_symbol_ = init_matrix(config_.key_vocab + 1, d, scale, rng);
    embed_value_ = init_matrix(config_.value_vocab + 1, d, scale, rng);
    embed_role_ = init_matrix(3, d, scale, rng);
    embed_vchan_ = init_vector(d, scale, rng);
    std::size_t f = config_.ffn_mult * d;
    for (std::size_t l = 0; l < config_.layers; ++l) {
        LayerState layer;
        layer.ct = CtExpert(d, config_.ct_steps, rng);
        layer.buffer =
            EpisodicBuffer(d, config_.buffer_capacity, config_.novelty_threshold, rng);
        layer.adapter = SemanticAdapter(d, config_.adapter_rank, rng);
        layer.router = RouterMlp(rng);
        layer.ln1_gain = grad_ones(d);
        layer.ln1_bias = grad_zeros({d});
        layer.ln2_gain = grad_ones(d);
        layer.ln2_bias = grad_zeros({d});
        layer.ffn_w1 = init_matrix(d, f, scale, rng);
        layer.ffn_b1 = grad_zeros({f});
        layer.ffn_w2 = init_matrix(f, d, 1.0 / std::sqrt(static_cast<double>(f)), rng);
        layer.ffn_b2 = grad_zeros({d});
        layers_.push_back(std::move(layer));
    }
    head_value_w_ = init_matrix(d, config_.value_vocab, scale, rng);
    head_value_b_ = grad_zeros({config_.value_vocab});
    head_dyn_w_ = init_matrix(d, 1, scale, rng);
    head_dyn_b_ = grad_zeros({1});
}

std::vector<Tensor> CramModel::trainable_params() const {
    std::vector<Tensor> out = {embed_symbol_, embed_value_, embed_role_, embed_vchan_};
    bool use_buffer = !config_.ct_only;
    bool use_adapter = !config_.ct_only && !config_.no_semantic_path;
    bool use_router = !config_.ct_only && !config_.full_attention;
    for (const auto& layer : layers_) {
        for (const auto& p : layer.ct.params()) out.push_back(p);
        if (use_buffer)
            for (const auto& p : layer.buffer.params()) out.push_back(p);
        if (use_adapter)
            for (const auto& p : layer.adapter.params()) out.push_back(p);
        if (use_router)
            for (const auto& p : layer.router.params()) out.push_back(p);
        out.push_back(layer.ln1_gain);
        out.push_back(layer.ln1_bias);
        out.push_back(layer.ln2_gain);
        out.push_back(layer.ln2_bias);
        out.push_back(layer.ffn_w1);
        out.push_back(layer.ffn_b1);
        out.push_back(layer.ffn_w2);
        out.push_back(layer.ffn_b2);
    }
    out.push_back(head_value_w_);
    out.push_back(head_value_b_);
    out.push_back(head_dyn_w_);
    out.push_back(head_dyn_b_);
    return out;
}

std::vector<std::pair<std::string, Tensor>> CramModel::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embed.symbol", embed_symbol_);
    out.emplace_back("embed.value", embed_value_);
    out.emplace_back("embed.role", embed_role_);
    out.emplace_back("embed.vchan", embed_vchan_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& layer = layers_[l];
        std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "ct.w1", layer.ct.w1);
        out.emplace_back(p + "ct.w2", layer.ct.w2);
        out.emplace_back(p + "ct.w_out", layer.ct.w_out);
        out.emplace_back(p + "ct.w_tau", layer.ct.w_tau);
        out.emplace_back(p + "buffer.w_q", layer.buffer.w_q);
        out.emplace_back(p + "buffer.w_k", layer.buffer.w_k);
        out.emplace_back(p + "buffer.w_v", layer.buffer.w_v);
        out.emplace_back(p + "adapter.w_down", layer.adapter.w_down);
        out.emplace_back(p + "adapter.w_up", layer.adapter.w_up);
        out.emplace_back(p + "router.w1", layer.router.w1);
        out.emplace_back(p + "router.b1", layer.router.b1);
        out.emplace_back(p + "router.w2", layer.router.w2);
        out.emplace_back(p + "router.b2", layer.router.b2);
        out.emplace_back(p + "ln1.gain", layer.ln1_gain);
        out.emplace_back(p + "ln1.bias", layer.ln1_bias);
        out.emplace_back(p + "ln2.gain", layer.ln2_gain);
        out.emplace_back(p + "ln2.bias", layer.ln2_bias);
        out.emplace_back(p + "ffn.w1", layer.ffn_w1);
        out.emplace_back(p + "ffn.b1", layer.ffn_b1);
        out.emplace_back(p + "ffn.w2", layer.ffn_w2);
        out.emplace_back(p + "ffn.b2", layer.ffn_b2);
    }
    out.emplace_back("head.value.w", head_value_w_);
    out.emplace_back("head.value.b", head_value_b_);
    out.emplace_back("head.dyn.w", head_dyn_w_);
    out.emplace_back("head.dyn.b", head_dyn_b_);
    return out;
}

void CramModel::bind(Tape& tape) const {
    for (const auto& [name, param] : named_params()) tape.bind(param);
}

Tensor CramModel::embed(Tape& tape, const SrcdSequence& seq) const {
    std::size_t t_count = seq.tokens.size();
    std::vector<std::size_t> sym_ids(t_count), val_ids(t_count), role_ids(t_count);
    std::vector<double> v(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
        const SrcdToken& tok = seq.tokens[t];
        if (tok.symbol < 0 || static_cast<std::size_t>(tok.symbol) > config_.key_vocab)
            throw std::runtime_error("model forward: symbol id out of range at token " +
                                     std::to_string(t));
        if (tok.bound_value < 0 ||
            static_cast<std::size_t>(tok.bound_value) > config_.value_vocab)
            throw std::runtime_error("model forward: bound value out of range at token " +
                                     std::to_string(t));
        int role = static_cast<int>(tok.role);
        if (role < 0 || role > 2)
            throw std::runtime_error("model forward: bad role at token " + std::to_string(t));
        if (!std::isfinite(tok.v))
            throw std::runtime_error("model forward: non-finite dynamics value at token " +
                                     std::to_string(t));
        sym_ids[t] = static_cast<std::size_t>(tok.symbol);
        val_ids[t] = static_cast<std::size_t>(tok.bound_value);
        role_ids[t] = static_cast<std::size_t>(role);
        v[t] = tok.v;
    }
    Tensor vcol = tape.constant({t_count}, std::move(v));
    Tensor x = tape.add(tape.gather_rows(embed_symbol_, sym_ids),
                        tape.gather_rows(embed_value_, val_ids));
    x = tape.add(x, tape.gather_rows(embed_role_, role_ids));
    return tape.add(x, tape.colvec_outer(vcol, embed_vchan_));
}

ForwardResult CramModel::forward(Tape& tape, const SrcdSequence& seq, Mode mode,
                                 double temperature, Rng& rng, ForwardTrace* trace) {
    std::size_t t_count = seq.tokens.size();
    if (t_count == 0) throw std::runtime_error("model forward: empty sequence");
    std::size_t d = config_.dim;
    bool have_semantic = !config_.no_semantic_path;
    if (trace && trace->probe_inputs.size() < layers_.size()) {
        trace->probe_inputs.resize(layers_.size());
        trace->probe_targets.resize(layers_.size());
    }

    std::vector<double> dtau(t_count);
    for (std::size_t t = 0; t < t_count; ++t) dtau[t] = seq.tokens[t].dtau;

    ForwardResult res;
    Tensor ones_col = tape.constant({t_count}, std::vector<double>(t_count, 1.0));
    Tensor x = embed(tape, seq);
    std::vector<double> zero_row(d, 0.0);

    // Deterministic probe cadence for eval mode (train mode samples).
    std::size_t shadow_period = 0;
    if (config_.shadow_fraction > 0.0)
        shadow_period =
            static_cast<std::size_t>(std::lround(1.0 / config_.shadow_fraction));

    for (std::size_t li = 0; li < layers_.size(); ++li) {
        auto& layer = layers_[li];
        CtOutputs ct = ct_forward(tape, layer.ct, x, dtau);
        Tensor r_s_block;
        if (have_semantic) r_s_block = semantic_forward(tape, layer.adapter, x);

        double cached_q = 1.0;     // consolidation quality, refreshed by retrievals
        double prev_entropy = 0.0;  // uncertainty feature, 0 at sequence start
        double tau = 0.0;
        std::vector<MixUpdate> updates;

        for (std::size_t t = 0; t < t_count; ++t) {
            tau += dtau[t];
            res.stats.decisions += 1;

            if (config_.ct_only) {
                res.stats.action_counts[0] += 1;
                continue;
            }

            Tensor x_row = tape.slice_row(x, t);
            const double* rs_ptr =
                have_semantic ? r_s_block.ptr() + t * d : zero_row.data();

            if (trace && layer.buffer.size() > 0) {
                const double* xp = x_row.ptr();
                trace->probe_inputs[li].emplace_back(xp, xp + d);
                trace->probe_targets[li].push_back(layer.buffer.shadow_retrieve(x_row));
            }

            // Off-path quality probe: numeric-only retrieval refreshing the
            // q estimate for tokens the router keeps off the episodic path.
            // Redundant when every token retrieves for real.
            bool shadow = false;
            if (!config_.full_attention) {
                if (mode == Mode::train)
                    shadow = rng.bernoulli(config_.shadow_fraction);
                else
                    shadow = shadow_period != 0 && t % shadow_period == 0;
            }
            if (shadow) {
                std::vector<double> r_shadow = layer.buffer.shadow_retrieve(x_row);
                cached_q =
                    consolidation_quality(rs_ptr, r_shadow.data(), d, config_.sigma_sq);
                res.stats.shadow_ops += 1;
            }

            int action;
            RouteResult decision;
            bool routed = !config_.full_attention;
            if (routed) {
                double z1 = std::log1p(dtau[t]);
                double z2 = ct.dyn_mag.at(t);
                double z3 = config_.no_q_feature ? 0.0 : cached_q;
                double z4 = prev_entropy;
                std::array<double, 4> raw{z1, 0.0, z3, z4};
                std::array<double, 4> inv_std;
                for (std::size_t i = 0; i < 4; ++i)
                    inv_std[i] = 1.0 / std::sqrt(layer.feat_var[i] + 1e-6);
                Tensor z = tape.assemble_features(ct.dyn_mag, t, raw, layer.feat_mean,
                                                  inv_std);
                if (mode == Mode::train && !feature_stats_frozen_) {
                    // Standardization statistics update after use, so the
                    // feature a token sees never depends on its own value.
                    const double momentum = 0.01;
                    std::array<double, 4> observed{z1, z2, z3, z4};
                    for (std::size_t i = 0; i < 4; ++i) {
                        layer.feat_mean[i] += momentum * (observed[i] - layer.feat_mean[i]);
                        double delta = observed[i] - layer.feat_mean[i];
                        layer.feat_var[i] =
                            (1.0 - momentum) * layer.feat_var[i] + momentum * delta * delta;
                    }
                }
                decision = route(tape, layer.router, z, temperature, rng, mode);
                action = decision.action;
                prev_entropy = entropy_of_softmax(decision.logits);
                res.routing_logits.push_back(decision.logits);
            } else {
                action = 2;
            }
            res.stats.action_counts[action - 1] += 1;

            if (trace && routed) {
                RouteSample sample;
                sample.layer = li;
                sample.pattern = seq.tokens[t].pattern;
                sample.repetition = seq.tokens[t].repetition;
                sample.pi2 = episodic_mass(decision.logits);
                sample.action = action;
                sample.q = cached_q;
                trace->routes.push_back(sample);
            }

            if (action == 2) {
                EpisodicRetrieval ret = layer.buffer.retrieve(tape, x_row);
                res.stats.attention_ops += 1;
                cached_q =
                    consolidation_quality(rs_ptr, ret.r_e.ptr(), d, config_.sigma_sq);
                Tensor weight = (routed && mode == Mode::train)
                                    ? tape.st_one(decision.soft, 1)
                                    : tape.constant({1}, {1.0});
                updates.push_back({t, weight, ret.r_e});
                if (have_semantic && !config_.no_consolidation_loss) {
                    res.cons_semantic.push_back(tape.slice_row(r_s_block, t));
                    res.cons_episodic.push_back(ret.r_e);
                }
            } else if (action == 3 && have_semantic) {
                Tensor weight = mode == Mode::train ? tape.st_one(decision.soft, 2)
                                                    : tape.constant({1}, {1.0});
                updates.push_back({t, weight, tape.slice_row(r_s_block, t)});
            }

            if (routed) res.routing_q.push_back(cached_q);
            res.stats.q_sum += cached_q;
            res.stats.q_count += 1;

            // Write decision after retrieval: a token can only look up the
            // past, never its own fresh entry.
            double score = layer.buffer.probe_max_score(x_row);
            if (layer.buffer.maybe_write(tape, x_row, tau, score))
                res.stats.writes += 1;
        }

        Tensor y = updates.empty() ? ct.output : tape.mix_rows(ct.output, updates);
        y = tape.layer_norm(y, layer.ln1_gain, layer.ln1_bias);
        Tensor hidden = tape.relu(tape.add(tape.matmul(y, layer.ffn_w1),
                                           broadcast_rows(tape, ones_col, layer.ffn_b1)));
        Tensor ffn = tape.add(tape.matmul(hidden, layer.ffn_w2),
                              broadcast_rows(tape, ones_col, layer.ffn_b2));
        x = tape.layer_norm(tape.add(y, ffn), layer.ln2_gain, layer.ln2_bias);
    }

    // Value-retrieval head at query positions.
    std::vector<std::size_t> query_rows;
    std::vector<int> targets;
    for (std::size_t t = 0; t < t_count; ++t) {
        const SrcdToken& tok = seq.tokens[t];
        if (tok.role != Role::query) continue;
        if (tok.target_value < 1 ||
            static_cast<std::size_t>(tok.target_value) > config_.value_vocab)
            throw std::runtime_error("model forward: query without valid target at token " +
                                     std::to_string(t));
        query_rows.push_back(t);
        targets.push_back(tok.target_value - 1);
    }
    if (!query_rows.empty()) {
        Tensor qstates = tape.gather_rows(x, query_rows);
        Tensor qones =
            tape.constant({query_rows.size()}, std::vector<double>(query_rows.size(), 1.0));
        res.value_logits = tape.add(tape.matmul(qstates, head_value_w_),
                                    broadcast_rows(tape, qones, head_value_b_));
        res.ce_loss = tape.cross_entropy_rows(res.value_logits, targets);
    } else {
        res.ce_loss = tape.constant({1}, {0.0});
    }
    res.value_targets = std::move(targets);

    // One-step dynamics head: predict v_{t+1} from the state at t.
    res.dyn_pred = tape.add(tape.matmul(x, head_dyn_w_),
                            broadcast_rows(tape, ones_col, head_dyn_b_));
    if (t_count >= 2) {
        std::vector<std::size_t> rows(t_count - 1);
        std::vector<double> next_v(t_count - 1);
        for (std::size_t t = 0; t + 1 < t_count; ++t) {
            rows[t] = t;
            next_v[t] = seq.tokens[t + 1].v;
        }
        res.dyn_loss = tape.rows_mse(res.dyn_pred, rows, std::move(next_v), 1.0);
    } else {
        res.dyn_loss = tape.constant({1}, {0.0});
    }
    res.task_loss = tape.add(res.ce_loss, res.dyn_loss);
    return res;
}

Tensor CramModel::total_loss(Tape& tape, const ForwardResult& result) {
    Tensor loss = result.task_loss;
    if (!result.routing_logits.empty()) {
        Tensor penalty = tape.routing_penalty(result.routing_logits, result.routing_q,
                                              config_.lambda_e, config_.lambda_s);
        loss = tape.add(loss, penalty);
    }
    if (config_.gamma > 0.0 && !config_.no_consolidation_loss &&
        !result.cons_semantic.empty()) {
        Tensor cons = consolidation_loss(tape, result.cons_semantic, result.cons_episodic,
                                         config_.consolidation_grad_scale);
        loss = tape.add(loss, tape.scale(cons, config_.gamma));
    }
    return loss;
}

void CramModel::reset_buffers() {
    for (auto& layer : layers_) layer.buffer.reset();
}

void CramModel::copy_state_from(const CramModel& other) {
    auto dst = named_params();
    auto src = other.named_params();
    if (dst.size() != src.size())
        throw std::runtime_error("copy_state_from: parameter sets differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].first != src[i].first || dst[i].second.numel() != src[i].second.numel())
            throw std::runtime_error("copy_state_from: mismatch at " + dst[i].first);
        dst[i].second.data() = src[i].second.data();
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        layers_[l].feat_mean = other.layers_[l].feat_mean;
        layers_[l].feat_var = other.layers_[l].feat_var;
        layers_[l].buffer.restore_entries(other.layers_[l].buffer.entries());
    }
}

}  // namespace cram
