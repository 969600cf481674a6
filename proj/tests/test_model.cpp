#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "cram/model.hpp"
#include "cram/srcd.hpp"
#include "fd_check.hpp"

using namespace cram;
using cram::testutil::check_gradients;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.dim = 8;
    c.layers = 2;
    c.ct_steps = 2;
    c.buffer_capacity = 16;
    c.adapter_rank = 2;
    c.ffn_mult = 1;
    c.key_vocab = 8;
    c.value_vocab = 8;
    return c;
}

SrcdToken make_token(double v, double dtau, int symbol, int bound, Role role,
                     int target) {
    SrcdToken t;
    t.v = v;
    t.dtau = dtau;
    t.symbol = symbol;
    t.bound_value = bound;
    t.role = role;
    t.target_value = target;
    return t;
}

// Ten tokens with gaps spanning three regimes (0.1 / 0.5 / 5.0), two key
// bindings and one query.
SrcdSequence hand_sequence() {
    SrcdSequence seq;
    seq.tokens = {
        make_token(0.00, 0.5, 0, 0, Role::plain, 0),
        make_token(0.10, 5.0, 0, 0, Role::plain, 0),
        make_token(0.20, 0.1, 3, 5, Role::key, 0),
        make_token(0.15, 5.0, 0, 0, Role::plain, 0),
        make_token(0.30, 0.5, 0, 0, Role::plain, 0),
        make_token(0.25, 0.1, 4, 2, Role::key, 0),
        make_token(0.40, 5.0, 0, 0, Role::plain, 0),
        make_token(0.35, 0.5, 0, 0, Role::plain, 0),
        make_token(0.50, 0.1, 0, 0, Role::plain, 0),
        make_token(0.45, 5.0, 3, 0, Role::query, 5),
    };
    return seq;
}

void fill(Tensor& t, const std::vector<double>& v) {
    REQUIRE(t.numel() == v.size());
    std::copy(v.begin(), v.end(), t.data().begin());
}

void zero(Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); }

// Rewire a router so the action is a pure function of the log-gap feature:
// logits = (0.5, z1, 0.8 - z1). Gaps of 0.5 / 5.0 / 0.1 then pick actions
// 1 / 2 / 3 with comfortable margins, and the other three features carry
// zero weight so their value cannot disturb the decision.
void wire_gap_router(RouterMlp& r) {
    zero(r.w1);
    r.w1.data()[0] = 1.0;  // feature 0 -> hidden 0
    zero(r.b1);
    zero(r.w2);
    r.w2.data()[0 * 3 + 1] = 1.0;   // hidden 0 -> logit 1
    r.w2.data()[0 * 3 + 2] = -1.0;  // hidden 0 -> logit 2
    fill(r.b2, {0.5, 0.0, 0.8});
}

// Pin the router to constant logits regardless of features.
void wire_constant_router(RouterMlp& r, const std::vector<double>& logits) {
    zero(r.w1);
    zero(r.b1);
    zero(r.w2);
    fill(r.b2, logits);
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());

    c = tiny_config();
    c.no_semantic_path = true;
    CHECK_THROWS_AS(c.validate(), std::runtime_error);
    c.no_consolidation_loss = true;
    CHECK_NOTHROW(c.validate());

    c = tiny_config();
    c.ct_only = true;
    c.full_attention = true;
    CHECK_THROWS_AS(c.validate(), std::runtime_error);

    c = tiny_config();
    c.adapter_rank = 0;
    CHECK_THROWS_AS(c.validate(), std::runtime_error);

    c = tiny_config();
    c.novelty_threshold = 1.0;
    CHECK_THROWS_AS(c.validate(), std::runtime_error);

    c = tiny_config();
    c.temp_end = 2.0;  // above temp_start
    CHECK_THROWS_AS(c.validate(), std::runtime_error);

    c = tiny_config();
    c.lambda_s = -0.1;
    CHECK_THROWS_AS(c.validate(), std::runtime_error);
}

TEST_CASE("forced logits pick their action almost surely in train mode") {
    Rng rng(11);
    RouterMlp router(rng);
    wire_constant_router(router, {10.0, -10.0, -10.0});
    Tape tape;
    router.bind(tape);
    Tensor z = tape.constant({4}, {0.3, -0.2, 0.5, 0.1});
    Rng noise(99);
    std::size_t hits = 0;
    const std::size_t draws = 20000;
    for (std::size_t i = 0; i < draws; ++i) {
        RouteResult r = route(tape, router, z, 0.1, noise, Mode::train);
        if (r.action == 1) ++hits;
    }
    CHECK(static_cast<double>(hits) / static_cast<double>(draws) > 0.999);
}

TEST_CASE("eval routing is deterministic and never draws noise") {
    Rng rng(12);
    RouterMlp router(rng);
    Rng a(31), b(31);
    int first_action = 0;
    for (int trial = 0; trial < 3; ++trial) {
        Tape tape;
        router.bind(tape);
        Tensor z = tape.constant({4}, {0.7, -1.1, 0.4, 0.2});
        RouteResult r = route(tape, router, z, 0.1, a, Mode::eval);
        if (trial == 0)
            first_action = r.action;
        else
            CHECK(r.action == first_action);
        CHECK(r.pi[0] + r.pi[1] + r.pi[2] == doctest::Approx(1.0));
    }
    CHECK(a.raw() == b.raw());  // untouched stream
}

TEST_CASE("adding a constant to all logits leaves the eval action unchanged") {
    Rng rng(13);
    for (double shift : {-5.0, 0.0, 5.0}) {
        RouterMlp router(rng);
        wire_constant_router(router, {0.4 + shift, 0.9 + shift, -0.3 + shift});
        Tape tape;
        router.bind(tape);
        Tensor z = tape.constant({4}, {0.0, 0.0, 0.0, 0.0});
        Rng noise(1);
        RouteResult r = route(tape, router, z, 0.5, noise, Mode::eval);
        CHECK(r.action == 2);
    }
}

TEST_CASE("ct_only runs zero buffer activity and routes nothing") {
    ModelConfig c = tiny_config();
    c.ct_only = true;
    Rng rng(21);
    CramModel model(c, rng);
    Tape tape;
    model.bind(tape);
    Rng run(5);
    ForwardResult res = model.forward(tape, hand_sequence(), Mode::train, 1.0, run);
    CHECK(res.stats.decisions == 20);  // 10 tokens x 2 layers
    CHECK(res.stats.attention_ops == 0);
    CHECK(res.stats.shadow_ops == 0);
    CHECK(res.stats.writes == 0);
    CHECK(res.stats.action_counts[0] == 20);
    CHECK(res.stats.attention_fraction() == 0.0);
    CHECK(res.routing_logits.empty());
    for (const auto& layer : model.layers()) CHECK(layer.buffer.size() == 0);
    CHECK(std::isfinite(model.total_loss(tape, res).value()));
}

TEST_CASE("full_attention retrieves on every token with fraction exactly 1") {
    ModelConfig c = tiny_config();
    c.full_attention = true;
    Rng rng(22);
    CramModel model(c, rng);
    Tape tape;
    model.bind(tape);
    Rng run(5);
    ForwardResult res = model.forward(tape, hand_sequence(), Mode::train, 1.0, run);
    CHECK(res.stats.decisions == 20);
    CHECK(res.stats.attention_ops == 20);
    CHECK(res.stats.action_counts[1] == 20);
    CHECK(res.stats.attention_fraction() == 1.0);
    CHECK(res.stats.shadow_ops == 0);  // every token already retrieves
    CHECK(res.routing_logits.empty());
    CHECK(res.stats.writes > 0);
}

TEST_CASE("attention ops are counted exactly when executed") {
    ModelConfig c = tiny_config();
    Rng rng(23);
    CramModel model(c, rng);
    Tape tape;
    model.bind(tape);
    Rng run(7);
    ForwardResult res = model.forward(tape, hand_sequence(), Mode::train, 1.0, run);
    CHECK(res.stats.decisions == 20);
    CHECK(res.stats.attention_ops == res.stats.action_counts[1]);
    CHECK(res.stats.action_counts[0] + res.stats.action_counts[1] +
              res.stats.action_counts[2] ==
          res.stats.decisions);
    CHECK(res.routing_logits.size() == res.stats.decisions);
    CHECK(res.routing_q.size() == res.routing_logits.size());
    for (double q : res.routing_q) {
        CHECK(q > 0.0);
        CHECK(q <= 1.0);
    }
}

TEST_CASE("identically seeded models produce identical forwards") {
    ModelConfig c = tiny_config();
    SrcdSequence seq = hand_sequence();

    auto run_once = [&](Mode mode) {
        Rng ctor_rng(31);
        CramModel model(c, ctor_rng);
        Tape tape;
        model.bind(tape);
        Rng run(17);
        ForwardResult res = model.forward(tape, seq, mode, 0.7, run);
        std::vector<double> out = res.dyn_pred.data();
        const auto& logits = res.value_logits.data();
        out.insert(out.end(), logits.begin(), logits.end());
        out.push_back(model.total_loss(tape, res).value());
        out.push_back(static_cast<double>(res.stats.attention_ops));
        return out;
    };

    CHECK(run_once(Mode::train) == run_once(Mode::train));
    CHECK(run_once(Mode::eval) == run_once(Mode::eval));
}

TEST_CASE("eval forward never consumes randomness and freezes feature stats") {
    ModelConfig c = tiny_config();
    Rng rng(32);
    CramModel model(c, rng);
    Tape tape;
    model.bind(tape);
    Rng a(41), b(41);
    ForwardResult res = model.forward(tape, hand_sequence(), Mode::eval, 0.1, a);
    CHECK(a.raw() == b.raw());
    for (const auto& layer : model.layers()) {
        for (double m : layer.feat_mean) CHECK(m == 0.0);
        for (double v : layer.feat_var) CHECK(v == 1.0);
    }
    CHECK(std::isfinite(res.task_loss.value()));
}

TEST_CASE("train forward updates feature statistics") {
    ModelConfig c = tiny_config();
    Rng rng(33);
    CramModel model(c, rng);
    Tape tape;
    model.bind(tape);
    Rng run(9);
    model.forward(tape, hand_sequence(), Mode::train, 1.0, run);
    bool moved = false;
    for (const auto& layer : model.layers())
        for (double m : layer.feat_mean)
            if (m != 0.0) moved = true;
    CHECK(moved);
}

TEST_CASE("embedding composes symbol, value, role, and continuous channel") {
    ModelConfig c = tiny_config();
    Rng rng(34);
    CramModel model(c, rng);
    SrcdSequence seq;
    seq.tokens = {make_token(0.7, 1.0, 2, 3, Role::key, 0)};
    Tape tape;
    model.bind(tape);
    Tensor x = model.embed(tape, seq);
    REQUIRE(x.shape == std::vector<std::size_t>{1, 8});

    const Tensor *sym = nullptr, *val = nullptr, *role = nullptr, *vchan = nullptr;
    for (const auto& [name, p] : model.named_params()) {
        if (name == "embed.symbol") sym = &p;
        if (name == "embed.value") val = &p;
        if (name == "embed.role") role = &p;
        if (name == "embed.vchan") vchan = &p;
    }
    REQUIRE((sym && val && role && vchan));
    for (std::size_t j = 0; j < 8; ++j) {
        double expect = sym->at(2 * 8 + j) + val->at(3 * 8 + j) +
                        role->at(static_cast<std::size_t>(Role::key) * 8 + j) +
                        0.7 * vchan->at(j);
        CHECK(x.at(j) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("rejects out-of-range token fields") {
    ModelConfig c = tiny_config();
    Rng rng(35);
    CramModel model(c, rng);
    Rng run(1);

    SrcdSequence seq;
    seq.tokens = {make_token(0.0, 1.0, 9, 0, Role::plain, 0)};  // symbol > vocab
    Tape t1;
    model.bind(t1);
    CHECK_THROWS_AS(model.forward(t1, seq, Mode::eval, 0.1, run), std::runtime_error);

    seq.tokens = {make_token(0.0, 1.0, 1, 0, Role::query, 0)};  // query, no target
    Tape t2;
    model.bind(t2);
    CHECK_THROWS_AS(model.forward(t2, seq, Mode::eval, 0.1, run), std::runtime_error);

    seq.tokens.clear();
    Tape t3;
    model.bind(t3);
    CHECK_THROWS_AS(model.forward(t3, seq, Mode::eval, 0.1, run), std::runtime_error);
}

TEST_CASE("zero loss weights reduce the total to the task loss") {
    ModelConfig c = tiny_config();
    c.lambda_e = 0.0;
    c.lambda_s = 0.0;
    c.gamma = 0.0;
    Rng rng(36);
    CramModel model(c, rng);
    Tape tape;
    model.bind(tape);
    Rng run(3);
    ForwardResult res = model.forward(tape, hand_sequence(), Mode::train, 1.0, run);
    CHECK(model.total_loss(tape, res).value() ==
          doctest::Approx(res.task_loss.value()).epsilon(1e-12));
}

TEST_CASE("all-episodic routing adds exactly the mean episodic penalty") {
    // Router pinned hard to action 2: pi = (~0, ~1, ~0) for every token, so
    // the penalty term contributes lambda_e * mean(pi_2) = lambda_e.
    ModelConfig c = tiny_config();
    c.no_consolidation_loss = true;
    Rng rng(37);
    CramModel model(c, rng);
    for (auto& layer : model.layers()) wire_constant_router(layer.router, {-20.0, 20.0, -20.0});
    Tape tape;
    model.bind(tape);
    Rng run(3);
    ForwardResult res = model.forward(tape, hand_sequence(), Mode::eval, 0.1, run);
    CHECK(res.stats.attention_ops == res.stats.decisions);
    double total = model.total_loss(tape, res).value();
    CHECK(total == doctest::Approx(res.task_loss.value() + c.lambda_e).epsilon(1e-9));
}

TEST_CASE("raising consolidation quality lowers the total loss") {
    Tape tape;
    std::vector<Tensor> logits;
    for (int t = 0; t < 4; ++t)
        logits.push_back(tape.constant({3}, {0.2, -0.1, 0.6}));
    std::vector<double> q_lo(4, 0.2), q_hi(4, 0.9);
    double lo = tape.routing_penalty(logits, q_lo, 0.1, 0.05).value();
    double hi = tape.routing_penalty(logits, q_hi, 0.1, 0.05).value();
    CHECK(hi < lo);
}

TEST_CASE("penalty gradient pushes toward the semantic action as q grows") {
    auto grad_l3 = [](double q) {
        Tape tape;
        Tensor logits = Tensor::from({3}, {0.1, 0.2, 0.3});
        logits.requires_grad = true;
        tape.bind(logits);
        Tensor pen = tape.routing_penalty({tape.add(logits, tape.constant({3}, {0, 0, 0}))},
                                          {q}, 0.0, 1.0);
        GradMap gm = tape.backward(pen);
        return gm.grad(logits).at(2);
    };
    double g_small = grad_l3(0.1);
    double g_large = grad_l3(0.9);
    CHECK(g_small < 0.0);  // descending increases logit 3
    CHECK(g_large < g_small);  // stronger pull at higher quality
}

TEST_CASE("task gradients match finite differences under full attention") {
    ModelConfig c = tiny_config();
    c.full_attention = true;
    c.no_consolidation_loss = true;
    Rng rng(38);
    CramModel model(c, rng);
    SrcdSequence seq = hand_sequence();

    auto build = [&](Tape& tape) {
        model.reset_buffers();
        model.bind(tape);
        Rng run(2);
        ForwardResult res = model.forward(tape, seq, Mode::eval, 0.1, run);
        return model.total_loss(tape, res);
    };
    check_gradients(model.trainable_params(), build, 1e-3, 1e-5);
}

TEST_CASE("end-to-end gradients cover every parameter group") {
    // Routed eval pass exercising all three actions: gaps steer the rewired
    // router, action 2 pulls episodic entries written earlier in the same
    // pass, action 3 pulls the adapter, and the episodic-use penalty gives
    // the router a finite-difference-consistent gradient path.
    ModelConfig c = tiny_config();
    c.no_consolidation_loss = true;  // detached-target branch is off
    c.lambda_e = 0.1;
    c.lambda_s = 0.0;  // quality multiplies no gradient-bearing term
    Rng rng(39);
    CramModel model(c, rng);
    for (auto& layer : model.layers()) wire_gap_router(layer.router);
    SrcdSequence seq = hand_sequence();

    {
        Tape probe;
        model.bind(probe);
        Rng run(2);
        ForwardResult res = model.forward(probe, seq, Mode::eval, 0.1, run);
        CHECK(res.stats.action_counts[0] == 6);
        CHECK(res.stats.action_counts[1] == 8);
        CHECK(res.stats.action_counts[2] == 6);
        model.reset_buffers();
    }

    auto build = [&](Tape& tape) {
        model.reset_buffers();
        model.bind(tape);
        Rng run(2);
        ForwardResult res = model.forward(tape, seq, Mode::eval, 0.1, run);
        return model.total_loss(tape, res);
    };
    check_gradients(model.trainable_params(), build, 1e-3, 1e-5);
}

TEST_CASE("single-token sequences run with empty query and dynamics losses") {
    ModelConfig c = tiny_config();
    Rng rng(40);
    CramModel model(c, rng);
    SrcdSequence seq;
    seq.tokens = {make_token(0.3, 1.0, 1, 0, Role::plain, 0)};
    Tape tape;
    model.bind(tape);
    Rng run(4);
    ForwardResult res = model.forward(tape, seq, Mode::train, 1.0, run);
    CHECK(res.ce_loss.value() == 0.0);
    CHECK(res.dyn_loss.value() == 0.0);
    CHECK(res.task_loss.value() == 0.0);
    CHECK(res.stats.decisions == 2);
    CHECK(std::isfinite(model.total_loss(tape, res).value()));
}

TEST_CASE("trainable parameter set respects ablation flags") {
    Rng rng(41);
    ModelConfig c = tiny_config();
    std::size_t full = CramModel(c, rng).trainable_params().size();

    c.ct_only = true;
    std::size_t ct = CramModel(c, rng).trainable_params().size();
    c.ct_only = false;

    c.full_attention = true;
    std::size_t fa = CramModel(c, rng).trainable_params().size();
    c.full_attention = false;

    c.no_semantic_path = true;
    c.no_consolidation_loss = true;
    std::size_t nosem = CramModel(c, rng).trainable_params().size();

    // per layer: buffer 3, adapter 2, router 4 tensors
    CHECK(full - ct == 2 * (3 + 2 + 4));
    CHECK(full - fa == 2 * 4);
    CHECK(full - nosem == 2 * 2);
}
