#include "cram/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cram {

namespace {

// Gaussian elimination with partial pivoting on the normal equations:
// solves A X = B in place for A (m x m), B (m x k); throws on a pivot too
// small to trust.
std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b,
                                 std::size_t m, std::size_t k) {
    for (std::size_t col = 0; col < m; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < m; ++r)
            if (std::fabs(a[r * m + col]) > std::fabs(a[pivot * m + col])) pivot = r;
        if (std::fabs(a[pivot * m + col]) < 1e-12)
            throw std::runtime_error(
                "redundancy probe: singular normal equations; use a nonzero ridge");
        if (pivot != col) {
            for (std::size_t c = 0; c < m; ++c)
                std::swap(a[col * m + c], a[pivot * m + c]);
            for (std::size_t c = 0; c < k; ++c)
                std::swap(b[col * k + c], b[pivot * k + c]);
        }
        double inv = 1.0 / a[col * m + col];
        for (std::size_t r = col + 1; r < m; ++r) {
            double factor = a[r * m + col] * inv;
            if (factor == 0.0) continue;
            for (std::size_t c = col; c < m; ++c) a[r * m + c] -= factor * a[col * m + c];
            for (std::size_t c = 0; c < k; ++c) b[r * k + c] -= factor * b[col * k + c];
        }
    }
    std::vector<double> x(m * k);
    for (std::size_t col = m; col-- > 0;) {
        for (std::size_t c = 0; c < k; ++c) {
            double acc = b[col * k + c];
            for (std::size_t j = col + 1; j < m; ++j)
                acc -= a[col * m + j] * x[j * k + c];
            x[col * k + c] = acc / a[col * m + col];
        }
    }
    return x;
}

void check_activation_shapes(const std::vector<std::vector<double>>& inputs,
                             const std::vector<std::vector<double>>& targets) {
    if (inputs.empty() || inputs.size() != targets.size())
        throw std::runtime_error("redundancy probe: inputs and targets must pair up");
    for (std::size_t i = 0; i < inputs.size(); ++i)
        if (inputs[i].size() != inputs[0].size() ||
            targets[i].size() != targets[0].size())
            throw std::runtime_error("redundancy probe: ragged activation rows");
}

double token_redundancy(const double* predicted, const double* target,
                        std::size_t d_out, bool* skipped) {
    double res = 0.0, norm = 0.0;
    for (std::size_t j = 0; j < d_out; ++j) {
        double diff = target[j] - predicted[j];
        res += diff * diff;
        norm += target[j] * target[j];
    }
    if (norm == 0.0) {
        *skipped = true;
        return 0.0;
    }
    *skipped = false;
    return 1.0 - std::sqrt(res) / std::sqrt(norm);
}

void predict_row(const std::vector<double>& weights, const std::vector<double>& input,
                 std::size_t d_in, std::size_t d_out, std::vector<double>& out) {
    for (std::size_t j = 0; j < d_out; ++j) {
        double acc = weights[d_in * d_out + j];  // bias row
        for (std::size_t i = 0; i < d_in; ++i)
            acc += input[i] * weights[i * d_out + j];
        out[j] = acc;
    }
}

std::size_t power_bin_index(long long k) {
    // log-spaced bins, base 1.5, starting at k = 1
    return static_cast<std::size_t>(
        std::floor(std::log(static_cast<double>(k)) / std::log(1.5) + 1e-12));
}

struct OlsFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

OlsFit ols(const std::vector<double>& x, const std::vector<double>& y) {
    double n = static_cast<double>(x.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    OlsFit fit;
    double denom = n * sxx - sx * sx;
    fit.slope = (n * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / n;
    double ss_tot = 0.0, ss_res = 0.0, ybar = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double e = y[i] - (fit.intercept + fit.slope * x[i]);
        ss_res += e * e;
        ss_tot += (y[i] - ybar) * (y[i] - ybar);
    }
    // a flat series fits its own mean perfectly
    fit.r2 = ss_tot < 1e-18 ? 1.0 : 1.0 - ss_res / ss_tot;
    return fit;
}

struct BinnedFit {
    std::vector<PowerBin> bins;
    OlsFit line;
};

constexpr std::size_t kBinCountFloor = 20;
constexpr std::size_t kMinBins = 3;

// Bins the samples and fits the log-log line; false when fewer than
// kMinBins bins clear the count floor.
bool binned_power_fit(const std::vector<PowerSample>& samples, BinnedFit* out) {
    std::vector<double> k_sum, pi_sum;
    std::vector<std::size_t> counts;
    for (const PowerSample& s : samples) {
        if (s.repetition < 1 || !(s.pi2 > 0.0)) continue;
        std::size_t idx = power_bin_index(s.repetition);
        if (idx >= counts.size()) {
            counts.resize(idx + 1, 0);
            k_sum.resize(idx + 1, 0.0);
            pi_sum.resize(idx + 1, 0.0);
        }
        ++counts[idx];
        k_sum[idx] += static_cast<double>(s.repetition);
        pi_sum[idx] += s.pi2;
    }
    out->bins.clear();
    std::vector<double> xs, ys;
    for (std::size_t b = 0; b < counts.size(); ++b) {
        if (counts[b] < kBinCountFloor) continue;
        PowerBin bin;
        bin.count = counts[b];
        bin.k_mean = k_sum[b] / static_cast<double>(counts[b]);
        bin.pi_mean = pi_sum[b] / static_cast<double>(counts[b]);
        out->bins.push_back(bin);
        xs.push_back(std::log(bin.k_mean));
        ys.push_back(std::log(bin.pi_mean));
    }
    if (out->bins.size() < kMinBins) return false;
    out->line = ols(xs, ys);
    return true;
}

}  // namespace

ProbeResult train_redundancy_probe(const std::vector<std::vector<double>>& inputs,
                                   const std::vector<std::vector<double>>& targets,
                                   double ridge) {
    check_activation_shapes(inputs, targets);
    std::size_t n = inputs.size();
    std::size_t d_in = inputs[0].size();
    std::size_t d_out = targets[0].size();
    if (n < 10 * d_in)
        throw std::runtime_error("redundancy probe: need at least 10 * " +
                                 std::to_string(d_in) + " samples, have " +
                                 std::to_string(n));
    if (ridge < 0.0)
        throw std::runtime_error("redundancy probe: ridge must be nonnegative");

    std::size_t n_train = (n * 8) / 10;
    std::size_t m = d_in + 1;  // bias column
    std::vector<double> gram(m * m, 0.0), moment(m * d_out, 0.0);
    std::vector<double> row(m);
    for (std::size_t t = 0; t < n_train; ++t) {
        std::copy(inputs[t].begin(), inputs[t].end(), row.begin());
        row[d_in] = 1.0;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < m; ++j) gram[i * m + j] += row[i] * row[j];
            for (std::size_t j = 0; j < d_out; ++j)
                moment[i * d_out + j] += row[i] * targets[t][j];
        }
    }
    for (std::size_t i = 0; i < m; ++i) gram[i * m + i] += ridge;

    ProbeResult res;
    res.d_in = d_in;
    res.d_out = d_out;
    res.weights = solve_linear(std::move(gram), std::move(moment), m, d_out);

    std::vector<double> predicted(d_out);
    std::vector<double> scores;
    for (std::size_t t = n_train; t < n; ++t) {
        predict_row(res.weights, inputs[t], d_in, d_out, predicted);
        bool skipped = false;
        double r = token_redundancy(predicted.data(), targets[t].data(), d_out, &skipped);
        if (skipped)
            ++res.skipped_tokens;
        else
            scores.push_back(r);
    }
    if (scores.empty())
        throw std::runtime_error("redundancy probe: no held-out tokens to score");
    res.eval_tokens = scores.size();
    double sum = 0.0;
    for (double s : scores) sum += s;
    res.r = sum / static_cast<double>(scores.size());
    std::sort(scores.begin(), scores.end());
    res.r_min = scores.front();
    res.r_max = scores.back();
    res.r_median = scores[scores.size() / 2];
    return res;
}

double redundancy_score(const std::vector<double>& weights, std::size_t d_in,
                        std::size_t d_out,
                        const std::vector<std::vector<double>>& inputs,
                        const std::vector<std::vector<double>>& targets) {
    check_activation_shapes(inputs, targets);
    if (weights.size() != (d_in + 1) * d_out)
        throw std::runtime_error("redundancy probe: weight size does not match shape");
    std::vector<double> predicted(d_out);
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        predict_row(weights, inputs[t], d_in, d_out, predicted);
        bool skipped = false;
        double r = token_redundancy(predicted.data(), targets[t].data(), d_out, &skipped);
        if (!skipped) {
            sum += r;
            ++counted;
        }
    }
    if (counted == 0)
        throw std::runtime_error("redundancy probe: every target had zero norm");
    return sum / static_cast<double>(counted);
}

TaxonomyCounts head_taxonomy(const std::vector<double>& r_values) {
    TaxonomyCounts counts;
    for (double r : r_values) {
        if (r > 0.8)
            ++counts.redundant;
        else if (r > 0.5)
            ++counts.partial;
        else
            ++counts.novel;
    }
    return counts;
}

PowerLawFit fit_power_law(const std::vector<PowerSample>& samples, Rng& rng) {
    PowerLawFit fit;
    std::vector<PowerSample> usable;
    usable.reserve(samples.size());
    for (const PowerSample& s : samples) {
        if (s.repetition >= 1 && s.pi2 > 0.0)
            usable.push_back(s);
        else
            ++fit.skipped_samples;
    }
    fit.sample_count = usable.size();

    BinnedFit base;
    if (!binned_power_fit(usable, &base))
        throw std::runtime_error(
            "power-law fit: fewer than 3 bins meet the 20-sample floor; "
            "collect more routing samples");
    fit.bins = base.bins;
    fit.gamma = -base.line.slope;
    fit.p0 = std::exp(base.line.intercept);
    fit.r2 = base.line.r2;

    constexpr std::size_t kResamples = 200;
    std::vector<double> gammas;
    std::vector<PowerSample> resample(usable.size());
    for (std::size_t b = 0; b < kResamples; ++b) {
        for (std::size_t i = 0; i < usable.size(); ++i)
            resample[i] = usable[rng.uniform_index(usable.size())];
        BinnedFit boot;
        if (binned_power_fit(resample, &boot)) gammas.push_back(-boot.line.slope);
    }
    if (gammas.size() >= 2) {
        double mean = 0.0;
        for (double g : gammas) mean += g;
        mean /= static_cast<double>(gammas.size());
        double var = 0.0;
        for (double g : gammas) var += (g - mean) * (g - mean);
        fit.gamma_se = std::sqrt(var / static_cast<double>(gammas.size() - 1));
    }
    return fit;
}

TransitionResult detect_transition(const std::vector<double>& attention_fractions) {
    constexpr std::size_t kWindow = 500;
    std::size_t n = attention_fractions.size();
    if (n < 1000)
        throw std::runtime_error("transition detect: need at least 1000 logged steps, have " +
                                 std::to_string(n));
    TransitionResult res;
    double window_sum = 0.0;
    for (std::size_t t = 0; t < kWindow; ++t) window_sum += attention_fractions[t];
    for (std::size_t t = kWindow; t < n; ++t) {
        double trailing_mean = window_sum / static_cast<double>(kWindow);
        if (attention_fractions[t] < 0.5 * trailing_mean) {
            res.found = true;
            res.step = t;
            break;
        }
        window_sum += attention_fractions[t] - attention_fractions[t - kWindow];
    }
    std::size_t edge = std::max<std::size_t>(1, n / 20);
    double pre = 0.0, post = 0.0;
    for (std::size_t t = 0; t < edge; ++t) pre += attention_fractions[t];
    for (std::size_t t = n - edge; t < n; ++t) post += attention_fractions[t];
    res.pre_mean = pre / static_cast<double>(edge);
    res.post_mean = post / static_cast<double>(edge);
    res.reduction_factor = res.post_mean == 0.0
                               ? std::numeric_limits<double>::infinity()
                               : res.pre_mean / res.post_mean;
    return res;
}

}  // namespace cram
