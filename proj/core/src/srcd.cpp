#include "cram/srcd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "cram/rng.hpp"
#include "cram/serialize.hpp"

namespace cram {

namespace {

// First count entries of a Fisher-Yates shuffle over `pool`; draws exactly
// `count` indices from rng regardless of pool size.
std::vector<int> sample_without_replacement(std::vector<int> pool, std::size_t count,
                                            Rng& rng) {
    if (count > pool.size())
        throw std::runtime_error("sample_without_replacement: pool too small");
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t j = i + rng.uniform_index(pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    return pool;
}

std::vector<int> iota_pool(int lo, int hi) {  // [lo, hi)
    std::vector<int> pool(static_cast<std::size_t>(hi - lo));
    for (int i = lo; i < hi; ++i) pool[static_cast<std::size_t>(i - lo)] = i;
    return pool;
}

struct Binding {
    std::size_t key_pos, query_pos;
    int symbol, value, pattern;
};

}  // namespace

void SrcdConfig::validate() const {
    if (seq_len == 0) throw std::runtime_error("SrcdConfig: seq_len must be positive");
    if (!(query_fraction > 0.0 && query_fraction < 1.0))
        throw std::runtime_error("SrcdConfig: query_fraction must lie in (0, 1)");
    if (!(recurring_fraction >= 0.0 && recurring_fraction <= 1.0))
        throw std::runtime_error("SrcdConfig: recurring_fraction must lie in [0, 1]");
    if (!(pareto_shape > 1.0))
        throw std::runtime_error("SrcdConfig: pareto_shape must exceed 1");
    if (key_vocab < pattern_count)
        throw std::runtime_error("SrcdConfig: key_vocab must be at least pattern_count");
    if (recurring_fraction < 1.0 && key_vocab == pattern_count)
        throw std::runtime_error(
            "SrcdConfig: novel queries need key symbols outside the pattern dictionary");
    if (value_vocab == 0) throw std::runtime_error("SrcdConfig: value_vocab must be positive");
    if (static_cast<std::size_t>(query_fraction * static_cast<double>(seq_len)) == 0)
        throw std::runtime_error("SrcdConfig: query_fraction * seq_len rounds to zero queries");
    if (!(gap_clip_lo > 0.0 && gap_clip_lo <= gap_clip_hi))
        throw std::runtime_error("SrcdConfig: gap clip range must satisfy 0 < lo <= hi");
    if (noise_std < 0.0) throw std::runtime_error("SrcdConfig: noise_std must be nonnegative");
}

double theoretical_opt(const SrcdConfig& config) {
    config.validate();
    return config.query_fraction * (1.0 - config.recurring_fraction);
}

std::string srcd_config_json(const SrcdConfig& c) {
    nlohmann::ordered_json j;
    j["task"] = "srcd";
    j["seq_len"] = c.seq_len;
    j["query_fraction"] = c.query_fraction;
    j["recurring_fraction"] = c.recurring_fraction;
    j["pattern_count"] = c.pattern_count;
    j["key_vocab"] = c.key_vocab;
    j["value_vocab"] = c.value_vocab;
    j["ar_coeff"] = c.ar_coeff;
    j["dyn_amplitude"] = c.dyn_amplitude;
    j["dyn_frequency"] = c.dyn_frequency;
    j["noise_std"] = c.noise_std;
    j["pareto_shape"] = c.pareto_shape;
    j["gap_clip_lo"] = c.gap_clip_lo;
    j["gap_clip_hi"] = c.gap_clip_hi;
    j["seed"] = c.seed;
    return j.dump();
}

SrcdDataset generate_srcd(const SrcdConfig& config, std::size_t count) {
    config.validate();
    Rng root(config.seed);

    // Pattern dictionary: distinct key symbols, one fixed value each.
    Rng dict_rng = root.child(0);
    std::vector<int> dict_keys =
        sample_without_replacement(iota_pool(1, static_cast<int>(config.key_vocab) + 1),
                                   config.pattern_count, dict_rng);
    std::vector<int> dict_vals(config.pattern_count);
    for (auto& v : dict_vals)
        v = 1 + static_cast<int>(dict_rng.uniform_index(config.value_vocab));
    std::vector<char> in_dict(config.key_vocab + 1, 0);
    for (int k : dict_keys) in_dict[static_cast<std::size_t>(k)] = 1;
    std::vector<int> novel_pool;
    for (int s = 1; s <= static_cast<int>(config.key_vocab); ++s)
        if (!in_dict[static_cast<std::size_t>(s)]) novel_pool.push_back(s);

    SrcdDataset data;
    data.config = config;
    data.config_json = srcd_config_json(config);
    data.config_hash = fnv1a64(data.config_json);

    std::size_t n = config.seq_len;
    std::size_t nq = static_cast<std::size_t>(config.query_fraction * static_cast<double>(n));
    std::size_t min_query_pos = n / 8 + 1;  // queries sit strictly above n/8
    if (min_query_pos + nq > n)
        throw std::runtime_error("generate_srcd: no room for queries above seq_len/8");

    std::vector<std::vector<Binding>> all_bindings(count);
    data.sequences.resize(count);

    for (std::size_t si = 0; si < count; ++si) {
        Rng rng = root.child(1 + si);
        SrcdSequence& seq = data.sequences[si];
        seq.config_hash = data.config_hash;
        seq.tokens.assign(n, SrcdToken{});

        // time gaps, then AR(1) dynamics driven by them
        for (std::size_t t = 0; t < n; ++t)
            seq.tokens[t].dtau =
                rng.pareto(config.pareto_shape, config.gap_clip_lo, config.gap_clip_hi);
        seq.tokens[0].v = 0.0;
        for (std::size_t t = 1; t < n; ++t)
            seq.tokens[t].v =
                config.ar_coeff * seq.tokens[t - 1].v +
                config.dyn_amplitude * std::sin(config.dyn_frequency * seq.tokens[t].dtau) +
                config.noise_std * rng.normal();

        std::vector<int> qpos = sample_without_replacement(
            iota_pool(static_cast<int>(min_query_pos), static_cast<int>(n)), nq, rng);
        std::sort(qpos.begin(), qpos.end());

        std::vector<char> occupied(n, 0);
        for (int q : qpos) occupied[static_cast<std::size_t>(q)] = 1;

        auto& bindings = all_bindings[si];
        for (int q : qpos) {
            Binding b;
            b.query_pos = static_cast<std::size_t>(q);
            if (rng.bernoulli(config.recurring_fraction)) {
                std::size_t pat = rng.uniform_index(config.pattern_count);
                b.symbol = dict_keys[pat];
                b.value = dict_vals[pat];
                b.pattern = static_cast<int>(pat) + 1;
            } else {
                b.symbol = novel_pool[rng.uniform_index(novel_pool.size())];
                b.value = 1 + static_cast<int>(rng.uniform_index(config.value_vocab));
                b.pattern = 0;
            }
            std::vector<int> free;
            for (int p = 0; p + 4 <= q; ++p)
                if (!occupied[static_cast<std::size_t>(p)]) free.push_back(p);
            if (free.empty())
                throw std::runtime_error(
                    "generate_srcd: no free key slot at least 4 positions before a query");
            b.key_pos = static_cast<std::size_t>(free[rng.uniform_index(free.size())]);
            occupied[b.key_pos] = 1;
            bindings.push_back(b);
        }

        for (const Binding& b : bindings) {
            SrcdToken& key = seq.tokens[b.key_pos];
            key.role = Role::key;
            key.symbol = b.symbol;
            key.bound_value = b.value;
            key.pattern = b.pattern;
            SrcdToken& query = seq.tokens[b.query_pos];
            query.role = Role::query;
            query.symbol = b.symbol;
            query.pattern = b.pattern;
        }

        // Target = value bound by the most recent key with the same symbol.
        // Dictionary patterns always rebind the same value; novel symbols may
        // shadow each other, and the latest binding wins.
        for (const Binding& b : bindings) {
            int target = 0;
            for (std::size_t p = b.query_pos; p-- > 0;) {
                const SrcdToken& tok = seq.tokens[p];
                if (tok.role == Role::key && tok.symbol == b.symbol) {
                    target = tok.bound_value;
                    break;
                }
            }
            if (target == 0)
                throw std::runtime_error("generate_srcd: unresolvable query generated");
            seq.tokens[b.query_pos].target_value = target;
        }
    }

    // Repetition metadata: occurrences of each pattern counted over the whole
    // stream, sequences in order, bindings by key position within a sequence.
    std::vector<long long> seen(config.pattern_count + 1, 0);
    for (std::size_t si = 0; si < count; ++si) {
        auto& bindings = all_bindings[si];
        std::sort(bindings.begin(), bindings.end(),
                  [](const Binding& a, const Binding& b) { return a.key_pos < b.key_pos; });
        for (const Binding& b : bindings) {
            if (b.pattern == 0) continue;
            long long k = seen[static_cast<std::size_t>(b.pattern)]++;
            data.sequences[si].tokens[b.key_pos].repetition = k;
            data.sequences[si].tokens[b.query_pos].repetition = k;
        }
    }
    return data;
}

void CopyConfig::validate() const {
    if (copy_count == 0) throw std::runtime_error("CopyConfig: copy_count must be positive");
    if (vocab < copy_count)
        throw std::runtime_error("CopyConfig: vocab too small for distinct copy symbols");
    if (value_vocab == 0) throw std::runtime_error("CopyConfig: value_vocab must be positive");
    if (seq_len / 2 < copy_count || seq_len - seq_len / 2 < copy_count)
        throw std::runtime_error("CopyConfig: seq_len too short for copy_count pairs");
}

SrcdDataset generate_copy_task(const CopyConfig& config, std::size_t count) {
    config.validate();
    Rng root(config.seed);

    SrcdDataset data;
    data.config.seq_len = config.seq_len;
    data.config.query_fraction =
        static_cast<double>(config.copy_count) / static_cast<double>(config.seq_len);
    data.config.recurring_fraction = 0.0;
    data.config.pattern_count = 0;
    data.config.key_vocab = config.vocab;
    data.config.value_vocab = config.value_vocab;
    data.config.ar_coeff = 0.0;
    data.config.dyn_amplitude = 0.0;
    data.config.dyn_frequency = 0.0;
    data.config.noise_std = 0.0;
    data.config.seed = config.seed;

    nlohmann::ordered_json j;
    j["task"] = "copy";
    j["seq_len"] = config.seq_len;
    j["vocab"] = config.vocab;
    j["value_vocab"] = config.value_vocab;
    j["copy_count"] = config.copy_count;
    j["seed"] = config.seed;
    data.config_json = j.dump();
    data.config_hash = fnv1a64(data.config_json);

    std::size_t half = config.seq_len / 2;
    data.sequences.resize(count);
    for (std::size_t si = 0; si < count; ++si) {
        Rng rng = root.child(1 + si);
        SrcdSequence& seq = data.sequences[si];
        seq.config_hash = data.config_hash;
        seq.tokens.assign(config.seq_len, SrcdToken{});
        for (auto& tok : seq.tokens) {
            tok.v = 0.0;
            tok.dtau = 1.0;
        }

        std::vector<int> kpos = sample_without_replacement(
            iota_pool(0, static_cast<int>(half)), config.copy_count, rng);
        std::vector<int> qpos = sample_without_replacement(
            iota_pool(static_cast<int>(half), static_cast<int>(config.seq_len)),
            config.copy_count, rng);
        std::sort(kpos.begin(), kpos.end());
        std::sort(qpos.begin(), qpos.end());
        std::vector<int> symbols = sample_without_replacement(
            iota_pool(1, static_cast<int>(config.vocab) + 1), config.copy_count, rng);
        std::vector<int> order(config.copy_count);
        for (std::size_t i = 0; i < config.copy_count; ++i) order[i] = static_cast<int>(i);
        order = sample_without_replacement(order, config.copy_count, rng);  // permutation

        for (std::size_t i = 0; i < config.copy_count; ++i) {
            int value = 1 + static_cast<int>(rng.uniform_index(config.value_vocab));
            SrcdToken& key = seq.tokens[static_cast<std::size_t>(kpos[i])];
            key.role = Role::key;
            key.symbol = symbols[i];
            key.bound_value = value;
        }
        for (std::size_t i = 0; i < config.copy_count; ++i) {
            std::size_t ki = static_cast<std::size_t>(order[i]);
            SrcdToken& query = seq.tokens[static_cast<std::size_t>(qpos[i])];
            query.role = Role::query;
            query.symbol = symbols[ki];
            query.target_value = seq.tokens[static_cast<std::size_t>(kpos[ki])].bound_value;
        }
    }
    return data;
}

void write_dataset(const SrcdDataset& data, const std::string& path) {
    std::ostringstream out;
    out << hex16(data.config_hash) << ' ' << data.config_json << '\n';
    for (const auto& seq : data.sequences)
        for (const auto& tok : seq.tokens)
            out << fmt_g17(tok.v) << ' ' << fmt_g17(tok.dtau) << ' ' << tok.symbol << ' '
                << tok.bound_value << ' ' << static_cast<int>(tok.role) << ' '
                << tok.target_value << ' ' << tok.pattern << ' ' << tok.repetition << '\n';
    write_text_file(path, out.str());
}

SrcdDataset read_dataset(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string header;
    if (!std::getline(in, header))
        throw std::runtime_error("read_dataset: empty file " + path);
    std::size_t space = header.find(' ');
    if (space == std::string::npos || space != 16)
        throw std::runtime_error("read_dataset: malformed header in " + path);
    std::string hash_text = header.substr(0, space);
    std::string json_text = header.substr(space + 1);
    std::uint64_t stored = std::strtoull(hash_text.c_str(), nullptr, 16);
    if (stored != fnv1a64(json_text))
        throw std::runtime_error("read_dataset: config hash mismatch in " + path);

    nlohmann::json j = nlohmann::json::parse(json_text);
    SrcdDataset data;
    data.config_json = json_text;
    data.config_hash = stored;
    std::string task = j.at("task").get<std::string>();
    if (task == "srcd") {
        SrcdConfig& c = data.config;
        c.seq_len = j.at("seq_len").get<std::size_t>();
        c.query_fraction = j.at("query_fraction").get<double>();
        c.recurring_fraction = j.at("recurring_fraction").get<double>();
        c.pattern_count = j.at("pattern_count").get<std::size_t>();
        c.key_vocab = j.at("key_vocab").get<std::size_t>();
        c.value_vocab = j.at("value_vocab").get<std::size_t>();
        c.ar_coeff = j.at("ar_coeff").get<double>();
        c.dyn_amplitude = j.at("dyn_amplitude").get<double>();
        c.dyn_frequency = j.at("dyn_frequency").get<double>();
        c.noise_std = j.at("noise_std").get<double>();
        c.pareto_shape = j.at("pareto_shape").get<double>();
        c.gap_clip_lo = j.at("gap_clip_lo").get<double>();
        c.gap_clip_hi = j.at("gap_clip_hi").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } else if (task == "copy") {
        SrcdConfig& c = data.config;
        c.seq_len = j.at("seq_len").get<std::size_t>();
        c.key_vocab = j.at("vocab").get<std::size_t>();
        c.value_vocab = j.at("value_vocab").get<std::size_t>();
        std::size_t cc = j.at("copy_count").get<std::size_t>();
        c.query_fraction = static_cast<double>(cc) / static_cast<double>(c.seq_len);
        c.recurring_fraction = 0.0;
        c.pattern_count = 0;
        c.ar_coeff = 0.0;
        c.dyn_amplitude = 0.0;
        c.dyn_frequency = 0.0;
        c.noise_std = 0.0;
        c.seed = j.at("seed").get<std::uint64_t>();
    } else {
        throw std::runtime_error("read_dataset: unknown task '" + task + "' in " + path);
    }

    std::size_t n = data.config.seq_len;
    std::string line;
    std::vector<SrcdToken> tokens;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        SrcdToken tok;
        int role;
        if (!(ls >> tok.v >> tok.dtau >> tok.symbol >> tok.bound_value >> role >>
              tok.target_value >> tok.pattern >> tok.repetition))
            throw std::runtime_error("read_dataset: malformed token record in " + path);
        if (role < 0 || role > 2)
            throw std::runtime_error("read_dataset: token role out of range in " + path);
        tok.role = static_cast<Role>(role);
        tokens.push_back(tok);
    }
    if (tokens.empty() || tokens.size() % n != 0)
        throw std::runtime_error("read_dataset: token count is not a multiple of seq_len in " +
                                 path);
    data.sequences.resize(tokens.size() / n);
    for (std::size_t si = 0; si < data.sequences.size(); ++si) {
        data.sequences[si].config_hash = stored;
        data.sequences[si].tokens.assign(tokens.begin() + static_cast<long>(si * n),
                                         tokens.begin() + static_cast<long>((si + 1) * n));
    }
    return data;
}

}  // namespace cram
