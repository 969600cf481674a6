#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "cram/rng.hpp"
#include "cram/serialize.hpp"
#include "cram/srcd.hpp"

using namespace cram;

namespace {

SrcdConfig desk_config(std::uint64_t seed) {
    SrcdConfig c;
    c.seq_len = 256;
    c.pattern_count = 20;
    c.key_vocab = 64;
    c.value_vocab = 64;
    c.seed = seed;
    return c;
}

// Independent resolvability check: walk backward from each query and demand
// a matching key whose bound value equals the stored target.
void check_resolvable(const SrcdDataset& data) {
    for (const auto& seq : data.sequences) {
        for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
            const SrcdToken& tok = seq.tokens[t];
            if (tok.role != Role::query) continue;
            REQUIRE(tok.target_value > 0);
            bool found = false;
            for (std::size_t p = t; p-- > 0;) {
                const SrcdToken& prev = seq.tokens[p];
                if (prev.role == Role::key && prev.symbol == tok.symbol) {
                    CHECK(prev.bound_value == tok.target_value);
                    found = true;
                    break;
                }
            }
            REQUIRE(found);
        }
    }
}

}  // namespace

TEST_CASE("srcd: desk sequences carry exactly floor(f*n) queries with spaced keys") {
    SrcdDataset data = generate_srcd(desk_config(7), 50);
    REQUIRE(data.sequences.size() == 50);
    for (const auto& seq : data.sequences) {
        REQUIRE(seq.tokens.size() == 256);
        std::size_t queries = 0, keys = 0;
        for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
            const SrcdToken& tok = seq.tokens[t];
            if (tok.role == Role::query) {
                ++queries;
                CHECK(t > 256 / 8);
                CHECK(tok.bound_value == 0);
                CHECK(tok.symbol > 0);
            } else if (tok.role == Role::key) {
                ++keys;
                CHECK(tok.bound_value > 0);
                CHECK(tok.target_value == 0);
            } else {
                CHECK(tok.symbol == 0);
                CHECK(tok.pattern == 0);
            }
            CHECK(tok.dtau >= 0.1);
            CHECK(tok.dtau <= 1000.0);
        }
        CHECK(queries == 12);  // floor(0.05 * 256)
        CHECK(keys == 12);
        CHECK(seq.tokens[0].v == 0.0);

        // every query's key sits at least 4 positions earlier
        for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
            if (seq.tokens[t].role != Role::query) continue;
            bool spaced = false;
            for (std::size_t p = 0; p + 4 <= t; ++p)
                if (seq.tokens[p].role == Role::key &&
                    seq.tokens[p].symbol == seq.tokens[t].symbol)
                    spaced = true;
            CHECK(spaced);
        }
    }
    check_resolvable(data);
}

TEST_CASE("srcd: query and recurring fractions at paper defaults over 1000 sequences") {
    SrcdConfig c;  // paper-scale defaults: n=2048, 100 patterns, 128 key symbols
    c.seed = 11;
    SrcdDataset data = generate_srcd(c, 1000);

    std::size_t tokens = 0, queries = 0, recurring = 0;
    for (const auto& seq : data.sequences) {
        for (const auto& tok : seq.tokens) {
            ++tokens;
            if (tok.role == Role::query) {
                ++queries;
                if (tok.pattern > 0) ++recurring;
            }
        }
    }
    double qfrac = static_cast<double>(queries) / static_cast<double>(tokens);
    double rfrac = static_cast<double>(recurring) / static_cast<double>(queries);
    INFO("query fraction " << qfrac << ", recurring fraction " << rfrac);
    CHECK(std::abs(qfrac - 0.05) < 0.005);
    CHECK(std::abs(rfrac - 0.70) < 0.02);

    check_resolvable(data);
}

TEST_CASE("srcd: repetition metadata recomputes exactly from the stream") {
    SrcdDataset data = generate_srcd(desk_config(13), 200);

    std::map<int, long long> counter;
    for (const auto& seq : data.sequences) {
        // map (pattern, repetition) of key tokens in this sequence for the
        // query-side check below
        std::map<std::pair<int, long long>, int> key_insts;
        for (const auto& tok : seq.tokens) {
            if (tok.role == Role::key && tok.pattern > 0) {
                CHECK(tok.repetition == counter[tok.pattern]);
                counter[tok.pattern]++;
                key_insts[{tok.pattern, tok.repetition}]++;
            }
        }
        for (const auto& tok : seq.tokens) {
            if (tok.role == Role::query && tok.pattern > 0) {
                INFO("query pattern " << tok.pattern << " repetition " << tok.repetition);
                CHECK(key_insts.count({tok.pattern, tok.repetition}) == 1);
            }
            if (tok.pattern == 0) CHECK(tok.repetition == 0);
        }
    }
    // patterns actually recur across the stream
    long long total = 0;
    for (auto& [pat, cnt] : counter) total += cnt;
    CHECK(total > 1000);
}

TEST_CASE("srcd: clipped pareto gap mean matches numerical integration") {
    // E[min(X, hi)] for X ~ Pareto(shape, xmin): integrate x f(x) over
    // [xmin, hi] in log space (Simpson), plus the point mass hi * P(X > hi).
    double shape = 1.5, xmin = 0.1, hi = 1000.0;
    auto integrand = [&](double u) {
        // substitute x = e^u: x f(x) dx = shape * xmin^shape * e^{u(1-shape)} du
        return shape * std::pow(xmin, shape) * std::exp(u * (1.0 - shape));
    };
    double lo_u = std::log(xmin), hi_u = std::log(hi);
    const int steps = 20000;  // even
    double h = (hi_u - lo_u) / steps;
    double acc = integrand(lo_u) + integrand(hi_u);
    for (int i = 1; i < steps; ++i)
        acc += integrand(lo_u + h * i) * (i % 2 ? 4.0 : 2.0);
    double expected = acc * h / 3.0 + hi * std::pow(xmin / hi, shape);

    Rng rng(99);
    double sum = 0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) sum += rng.pareto(shape, xmin, hi);
    double empirical = sum / n;
    INFO("integrated " << expected << " empirical " << empirical);
    CHECK(std::abs(empirical - expected) / expected < 0.01);
}

TEST_CASE("srcd: theoretical optimum") {
    SrcdConfig c;
    CHECK(theoretical_opt(c) == doctest::Approx(0.015).epsilon(1e-12));

    c.recurring_fraction = 1.0;
    c.key_vocab = c.pattern_count;  // permitted when nothing novel is drawn
    CHECK(theoretical_opt(c) == doctest::Approx(0.0));

    SrcdConfig c2;
    c2.query_fraction = 0.25;
    c2.recurring_fraction = 0.0;
    CHECK(theoretical_opt(c2) == doctest::Approx(0.25));
}

TEST_CASE("srcd: config validation rejects degenerate settings") {
    SrcdConfig c = desk_config(1);
    c.seq_len = 10;  // floor(0.05 * 10) = 0 queries
    CHECK_THROWS_AS((void)generate_srcd(c, 1), std::runtime_error);

    SrcdConfig c2 = desk_config(1);
    c2.pattern_count = 65;  // exceeds key vocab
    CHECK_THROWS_AS((void)generate_srcd(c2, 1), std::runtime_error);

    SrcdConfig c3 = desk_config(1);
    c3.pattern_count = 64;  // novel pool empty while recurring < 1
    CHECK_THROWS_AS((void)generate_srcd(c3, 1), std::runtime_error);

    SrcdConfig c4 = desk_config(1);
    c4.pareto_shape = 1.0;
    CHECK_THROWS_AS((void)generate_srcd(c4, 1), std::runtime_error);

    SrcdConfig c5 = desk_config(1);
    c5.query_fraction = 0.0;
    CHECK_THROWS_AS((void)generate_srcd(c5, 1), std::runtime_error);
}

TEST_CASE("srcd: fixed seed gives identical bytes, different seed differs") {
    SrcdDataset a = generate_srcd(desk_config(21), 20);
    SrcdDataset b = generate_srcd(desk_config(21), 20);
    SrcdDataset c = generate_srcd(desk_config(22), 20);

    std::string pa = "/tmp/cram_srcd_a.txt", pb = "/tmp/cram_srcd_b.txt",
                pc = "/tmp/cram_srcd_c.txt";
    write_dataset(a, pa);
    write_dataset(b, pb);
    write_dataset(c, pc);
    CHECK(read_text_file(pa) == read_text_file(pb));
    CHECK(read_text_file(pa) != read_text_file(pc));
    std::remove(pa.c_str());
    std::remove(pb.c_str());
    std::remove(pc.c_str());
}

TEST_CASE("srcd: datasets round-trip through the text format exactly") {
    SrcdDataset data = generate_srcd(desk_config(31), 10);
    std::string path = "/tmp/cram_srcd_rt.txt";
    write_dataset(data, path);
    SrcdDataset back = read_dataset(path);

    CHECK(back.config_hash == data.config_hash);
    CHECK(back.config_json == data.config_json);
    CHECK(back.config.seq_len == data.config.seq_len);
    CHECK(back.config.seed == data.config.seed);
    REQUIRE(back.sequences.size() == data.sequences.size());
    for (std::size_t si = 0; si < data.sequences.size(); ++si) {
        const auto& s0 = data.sequences[si].tokens;
        const auto& s1 = back.sequences[si].tokens;
        REQUIRE(s1.size() == s0.size());
        for (std::size_t t = 0; t < s0.size(); ++t) {
            CHECK(s1[t].v == s0[t].v);  // %.17g round-trips doubles exactly
            CHECK(s1[t].dtau == s0[t].dtau);
            CHECK(s1[t].symbol == s0[t].symbol);
            CHECK(s1[t].bound_value == s0[t].bound_value);
            CHECK(s1[t].role == s0[t].role);
            CHECK(s1[t].target_value == s0[t].target_value);
            CHECK(s1[t].pattern == s0[t].pattern);
            CHECK(s1[t].repetition == s0[t].repetition);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("srcd: tampered header hash is rejected") {
    SrcdDataset data = generate_srcd(desk_config(41), 2);
    std::string path = "/tmp/cram_srcd_tamper.txt";
    write_dataset(data, path);
    std::string text = read_text_file(path);
    std::size_t pos = text.find("\"seed\":41");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 9, "\"seed\":42");
    write_text_file(path, text);
    CHECK_THROWS_AS((void)read_dataset(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("copy task: structure, resolvability, determinism") {
    CopyConfig tiny;
    tiny.seq_len = 8;
    tiny.copy_count = 1;
    tiny.vocab = 16;
    tiny.value_vocab = 16;
    tiny.seed = 5;
    SrcdDataset small = generate_copy_task(tiny, 100);
    for (const auto& seq : small.sequences) {
        std::size_t keys = 0, queries = 0;
        for (const auto& tok : seq.tokens) {
            if (tok.role == Role::key) ++keys;
            if (tok.role == Role::query) ++queries;
            CHECK(tok.v == 0.0);
            CHECK(tok.dtau == 1.0);
            CHECK(tok.pattern == 0);
            CHECK(tok.repetition == 0);
        }
        CHECK(keys == 1);
        CHECK(queries == 1);
    }
    check_resolvable(small);

    CopyConfig c;
    c.seed = 6;
    SrcdDataset data = generate_copy_task(c, 1000);
    for (const auto& seq : data.sequences) {
        for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
            if (seq.tokens[t].role == Role::key) CHECK(t < c.seq_len / 2);
            if (seq.tokens[t].role == Role::query) CHECK(t >= c.seq_len / 2);
        }
    }
    check_resolvable(data);

    SrcdDataset again = generate_copy_task(c, 1000);
    std::string pa = "/tmp/cram_copy_a.txt", pb = "/tmp/cram_copy_b.txt";
    write_dataset(data, pa);
    write_dataset(again, pb);
    CHECK(read_text_file(pa) == read_text_file(pb));

    // round trip through the copy header
    SrcdDataset back = read_dataset(pa);
    CHECK(back.config.seq_len == c.seq_len);
    CHECK(back.config.recurring_fraction == 0.0);
    CHECK(back.sequences.size() == 1000);
    std::remove(pa.c_str());
    std::remove(pb.c_str());

    CopyConfig bad;
    bad.vocab = 1;
    bad.copy_count = 2;
    CHECK_THROWS_AS((void)generate_copy_task(bad, 1), std::runtime_error);
}
