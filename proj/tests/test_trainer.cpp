#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "cram/serialize.hpp"
#include "cram/trainer.hpp"

using namespace cram;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.dim = 8;
    cfg.layers = 1;
    cfg.ct_steps = 2;
    cfg.buffer_capacity = 16;
    cfg.adapter_rank = 2;
    cfg.ffn_mult = 1;
    cfg.key_vocab = 8;
    cfg.value_vocab = 8;
    cfg.batch = 2;
    cfg.steps = 12;
    cfg.lr = 3e-3;
    cfg.anneal_steps = 10;
    cfg.seed = 7;
    return cfg;
}

SrcdConfig tiny_srcd(std::uint64_t seed) {
    SrcdConfig cfg;
    cfg.seq_len = 24;
    cfg.query_fraction = 0.2;
    cfg.recurring_fraction = 0.5;
    cfg.pattern_count = 4;
    cfg.key_vocab = 8;
    cfg.value_vocab = 8;
    cfg.gap_clip_hi = 50.0;
    cfg.seed = seed;
    return cfg;
}

Tensor find_param(const CramModel& model, const std::string& name) {
    for (const auto& [n, p] : model.named_params())
        if (n == name) return p;
    throw std::runtime_error("test: no param named " + name);
}

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a.ptr()[i] != b.ptr()[i]) return false;
    return true;
}

void check_reports_equal(const EvalReport& a, const EvalReport& b) {
    CHECK(a.dyn_mse == b.dyn_mse);
    CHECK(a.retrieval_accuracy == b.retrieval_accuracy);
    CHECK(a.attention_fraction == b.attention_fraction);
    CHECK(a.shadow_fraction == b.shadow_fraction);
    CHECK(a.mean_q == b.mean_q);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(a.action_fractions[i] == b.action_fractions[i]);
    CHECK(a.query_count == b.query_count);
    CHECK(a.decisions == b.decisions);
}

std::size_t field_count(const std::string& line) {
    std::size_t n = 1;
    for (char c : line)
        if (c == ',') ++n;
    return n;
}

}  // namespace

TEST_CASE("identical seeds produce identical training logs") {
    auto data = generate_srcd(tiny_srcd(11), 8);
    ModelConfig cfg = tiny_config();
    Rng r1(5), r2(5);
    CramModel m1(cfg, r1), m2(cfg, r2);
    TrainReport a = train_model(m1, data.sequences);
    TrainReport b = train_model(m2, data.sequences);
    REQUIRE(a.log.size() == b.log.size());
    REQUIRE(a.log.size() >= 2);
    for (std::size_t i = 0; i < a.log.size(); ++i)
        CHECK(a.log[i].csv_line() == b.log[i].csv_line());
    // and the trained parameters agree exactly
    for (const auto& [name, p] : m1.named_params())
        CHECK(same_values(p, find_param(m2, name)));
}

TEST_CASE("metrics rows form a complete csv") {
    auto data = generate_srcd(tiny_srcd(3), 8);
    ModelConfig cfg = tiny_config();
    Rng rng(1);
    CramModel model(cfg, rng);
    std::vector<MetricsRow> seen;
    TrainReport rep = train_model(model, data.sequences,
                                  [&](const MetricsRow& row) { seen.push_back(row); });
    CHECK(seen.size() == rep.log.size());
    CHECK(rep.log.size() == cfg.steps);  // one row per step
    std::size_t cols = field_count(MetricsRow::csv_header());
    CHECK(cols == 17);
    for (const auto& row : rep.log) {
        CHECK(field_count(row.csv_line()) == cols);
        CHECK(std::isfinite(row.total_loss));
        CHECK(std::isfinite(row.grad_norm));
        CHECK(row.retrieval_acc >= 0.0);
        CHECK(row.retrieval_acc <= 1.0);
        CHECK(row.cons_loss >= 0.0);
        CHECK(row.buffer_fill >= 0.0);
        CHECK(row.buffer_fill <= 1.0);
    }
    for (std::size_t i = 0; i < rep.log.size(); ++i) CHECK(rep.log[i].step == i);
    CHECK(rep.log.front().step == 0);
    CHECK(rep.log.back().step == cfg.steps - 1);
}

TEST_CASE("training reduces the loss on a small dataset") {
    auto data = generate_srcd(tiny_srcd(21), 8);
    ModelConfig cfg = tiny_config();
    cfg.steps = 100;
    cfg.anneal_steps = 80;
    Rng rng(9);
    CramModel model(cfg, rng);
    TrainReport rep = train_model(model, data.sequences);
    double first = rep.log.front().total_loss;
    double last = rep.log.back().total_loss;
    CHECK(last < first);
    CHECK(last < 0.9 * first);
}

TEST_CASE("divergence raises an error naming the step") {
    auto data = generate_srcd(tiny_srcd(4), 4);
    ModelConfig cfg = tiny_config();
    Rng rng(2);
    CramModel model(cfg, rng);
    Tensor w = find_param(model, "head.dyn.w");
    w.ptr()[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train_model(model, data.sequences);
        FAIL("training accepted a non-finite loss");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("diverged at step 0") != std::string::npos);
    }
}

TEST_CASE("evaluation of an untrained model sits near chance") {
    SrcdConfig scfg = tiny_srcd(31);
    scfg.seq_len = 32;
    scfg.query_fraction = 0.25;
    auto data = generate_srcd(scfg, 20);
    ModelConfig cfg = tiny_config();
    Rng rng(13);
    CramModel model(cfg, rng);
    EvalReport rep = evaluate(model, data.sequences);
    CHECK(rep.query_count > 50);
    CHECK(rep.decisions == 20 * 32 * cfg.layers);
    // value vocabulary has 8 entries; an untrained head is near 1/8
    CHECK(rep.retrieval_accuracy < 0.35);
    CHECK(std::isfinite(rep.dyn_mse));
    CHECK(rep.dyn_mse > 0.0);
    CHECK_THROWS_AS(evaluate(model, {}), std::runtime_error);
}

TEST_CASE("full attention evaluates with attention fraction one") {
    auto data = generate_srcd(tiny_srcd(6), 6);
    ModelConfig cfg = tiny_config();
    cfg.full_attention = true;
    Rng rng(3);
    CramModel model(cfg, rng);
    EvalReport rep = evaluate(model, data.sequences);
    CHECK(rep.attention_fraction == 1.0);
    CHECK(rep.action_fractions[0] == 0.0);
    CHECK(rep.action_fractions[1] == 1.0);
    CHECK(rep.action_fractions[2] == 0.0);
    CHECK(rep.shadow_fraction == 0.0);
}

TEST_CASE("evaluation does not disturb the model") {
    auto data = generate_srcd(tiny_srcd(17), 8);
    ModelConfig cfg = tiny_config();
    cfg.steps = 8;
    Rng rng(4);
    CramModel model(cfg, rng);
    train_model(model, data.sequences);
    const auto& buffer = model.layers()[0].buffer;
    REQUIRE(buffer.size() > 0);
    std::vector<double> taus;
    std::vector<long long> accesses;
    for (const auto& e : buffer.entries()) {
        taus.push_back(e.tau);
        accesses.push_back(e.access);
    }
    auto feat_mean = model.layers()[0].feat_mean;

    EvalReport a = evaluate(model, data.sequences);
    EvalReport b = evaluate(model, data.sequences);
    check_reports_equal(a, b);

    REQUIRE(buffer.size() == taus.size());
    for (std::size_t i = 0; i < taus.size(); ++i) {
        CHECK(buffer.entries()[i].tau == taus[i]);
        CHECK(buffer.entries()[i].access == accesses[i]);
    }
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(model.layers()[0].feat_mean[i] == feat_mean[i]);
}

TEST_CASE("checkpoint round trip preserves every array and buffer") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "cram_trainer_ckpt";
    fs::remove_all(dir);

    auto data = generate_srcd(tiny_srcd(8), 8);
    ModelConfig cfg = tiny_config();
    cfg.layers = 2;
    Rng rng(6);
    CramModel model(cfg, rng);
    train_model(model, data.sequences);
    REQUIRE(model.layers()[0].buffer.size() > 0);

    save_checkpoint(model, dir.string(), 12);
    Checkpoint ck = load_checkpoint(dir.string());
    CHECK(ck.step == 12);
    CHECK(ck.config.dim == cfg.dim);
    CHECK(ck.config.layers == cfg.layers);
    CHECK(ck.config.seed == cfg.seed);
    CHECK(ck.config.lambda_e == cfg.lambda_e);
    CHECK(ck.config.novelty_threshold == cfg.novelty_threshold);
    CHECK(ck.config.full_attention == cfg.full_attention);

    for (const auto& [name, p] : model.named_params())
        CHECK(same_values(p, find_param(ck.model, name)));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const auto& src = model.layers()[l];
        const auto& dst = ck.model.layers()[l];
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(src.feat_mean[i] == dst.feat_mean[i]);
            CHECK(src.feat_var[i] == dst.feat_var[i]);
        }
        REQUIRE(src.buffer.size() == dst.buffer.size());
        for (std::size_t e = 0; e < src.buffer.size(); ++e) {
            const auto& se = src.buffer.entries()[e];
            const auto& de = dst.buffer.entries()[e];
            CHECK(se.tau == de.tau);
            CHECK(se.access == de.access);
            CHECK(same_values(se.key, de.key));
            CHECK(same_values(se.value, de.value));
        }
    }

    // the restored model evaluates identically
    check_reports_equal(evaluate(model, data.sequences),
                        evaluate(ck.model, data.sequences));

    // loading via the manifest path works too
    Checkpoint ck2 = load_checkpoint((dir / "manifest.json").string());
    CHECK(ck2.step == 12);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint loading rejects tampering") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "cram_trainer_tamper";
    fs::remove_all(dir);

    ModelConfig cfg = tiny_config();
    Rng rng(1);
    CramModel model(cfg, rng);
    save_checkpoint(model, dir.string(), 0);
    std::string manifest = read_text_file((dir / "manifest.json").string());

    SUBCASE("missing array blob") {
        fs::remove(dir / "arrays" / "embed.symbol.f64");
        CHECK_THROWS_AS(load_checkpoint(dir.string()), std::runtime_error);
    }
    SUBCASE("unknown config key") {
        auto man = nlohmann::json::parse(manifest);
        man["config"]["wombat"] = 1;
        write_text_file((dir / "manifest.json").string(), man.dump());
        CHECK_THROWS_WITH_AS(load_checkpoint(dir.string()),
                             doctest::Contains("unknown key"), std::runtime_error);
    }
    SUBCASE("unrecognized format marker") {
        auto man = nlohmann::json::parse(manifest);
        man["format"] = "not-a-checkpoint";
        write_text_file((dir / "manifest.json").string(), man.dump());
        CHECK_THROWS_WITH_AS(load_checkpoint(dir.string()),
                             doctest::Contains("unrecognized format"), std::runtime_error);
    }
    SUBCASE("truncated blob") {
        write_text_file((dir / "arrays" / "embed.symbol.f64").string(), "abc");
        CHECK_THROWS_AS(load_checkpoint(dir.string()), std::runtime_error);
    }
    fs::remove_all(dir);
}

TEST_CASE("fully frozen transfer is a no-op") {
    auto train_data = generate_srcd(tiny_srcd(41), 8);
    auto eval_data = generate_srcd(tiny_srcd(42), 6);
    ModelConfig cfg = tiny_config();
    cfg.steps = 8;
    Rng rng(14);
    CramModel pre(cfg, rng);
    train_model(pre, train_data.sequences);
    EvalReport base = evaluate(pre, eval_data.sequences);

    TransferOptions opts;
    opts.freeze_semantic = true;
    opts.freeze_router = true;
    opts.freeze_episodic = true;
    opts.freeze_ct = true;
    opts.freeze_rest = true;
    opts.steps = 4;
    TransferReport rep =
        transfer_eval(pre, opts, train_data.sequences, eval_data.sequences);
    check_reports_equal(rep.tuned, base);
    for (const auto& [name, p] : pre.named_params())
        CHECK(same_values(p, find_param(rep.tuned_model, name)));
    // the from-scratch control saw the same evaluation stream
    CHECK(rep.scratch.decisions == base.decisions);
    CHECK(rep.scratch.query_count == base.query_count);
}

TEST_CASE("default transfer freezes adapter and router only") {
    auto train_data = generate_srcd(tiny_srcd(51), 8);
    auto eval_data = generate_srcd(tiny_srcd(52), 6);
    ModelConfig cfg = tiny_config();
    cfg.steps = 8;
    Rng rng(15);
    CramModel pre(cfg, rng);
    train_model(pre, train_data.sequences);

    TransferOptions opts;  // defaults: semantic + router frozen
    opts.steps = 6;
    TransferReport rep =
        transfer_eval(pre, opts, train_data.sequences, eval_data.sequences);

    const CramModel& tuned = rep.tuned_model;
    CHECK(same_values(find_param(pre, "layer0.adapter.w_down"),
                      find_param(tuned, "layer0.adapter.w_down")));
    CHECK(same_values(find_param(pre, "layer0.adapter.w_up"),
                      find_param(tuned, "layer0.adapter.w_up")));
    CHECK(same_values(find_param(pre, "layer0.router.w1"),
                      find_param(tuned, "layer0.router.w1")));
    CHECK(same_values(find_param(pre, "layer0.router.b2"),
                      find_param(tuned, "layer0.router.b2")));
    CHECK_FALSE(same_values(find_param(pre, "layer0.ct.w1"),
                            find_param(tuned, "layer0.ct.w1")));
    CHECK_FALSE(same_values(find_param(pre, "embed.symbol"),
                            find_param(tuned, "embed.symbol")));
    CHECK_FALSE(same_values(find_param(pre, "layer0.buffer.w_q"),
                            find_param(tuned, "layer0.buffer.w_q")));
    CHECK_FALSE(same_values(find_param(pre, "head.value.w"),
                            find_param(tuned, "head.value.w")));
    // frozen router keeps its feature statistics frozen too
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(rep.tuned_model.layers()[0].feat_mean[i] ==
              pre.layers()[0].feat_mean[i]);
    // the control trained from scratch actually moved
    CHECK_FALSE(same_values(find_param(rep.scratch_model, "layer0.ct.w1"),
                            find_param(rep.tuned_model, "layer0.ct.w1")));
}
