#include "cram/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

#include "cram/kernels.hpp"

namespace cram {

AttendRow attend_row(const Tape& tape, const Tensor& t) {
    AttendRow row;
    row.values = t.store;
    row.node = (t.epoch == tape.epoch() && t.node >= 0) ? t.node : -1;
    return row;
}

std::uint64_t Tape::next_epoch() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

Tape::Tape(std::size_t node_budget) : epoch_(next_epoch()), node_budget_(node_budget) {}

void Tape::reset() {
    nodes_.clear();
    leaves_.clear();
    epoch_ = next_epoch();
    backward_done_ = false;
}

int Tape::push(Node n) {
    if (nodes_.size() >= node_budget_)
        throw std::runtime_error("tape: node budget of " + std::to_string(node_budget_) +
                                 " exceeded; raise the budget or reset the tape");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::wrap(int id, std::vector<std::size_t> shape,
                  std::shared_ptr<std::vector<double>> out) const {
    Tensor t;
    t.shape = std::move(shape);
    t.store = std::move(out);
    t.node = id;
    t.epoch = epoch_;
    return t;
}

int Tape::intern(const Tensor& t) {
    if (!t.store) throw std::runtime_error("tape: tensor has no storage");
    if (t.epoch == epoch_ && t.node >= 0) return t.node;
    if (t.requires_grad) {
        // Parameters are identified by their storage, so every handle to the
        // same data resolves to one leaf and gradients accumulate there.
        auto it = leaves_.find(t.store.get());
        if (it != leaves_.end()) {
            t.node = it->second;
            t.epoch = epoch_;
            return it->second;
        }
    }
    Node n;
    n.op = t.requires_grad ? Op::leaf : Op::constant;
    n.shape = t.shape;
    n.out = t.store;
    n.needs_grad = t.requires_grad;
    int id = push(std::move(n));
    if (t.requires_grad) leaves_[t.store.get()] = id;
    t.node = id;
    t.epoch = epoch_;
    return id;
}

void Tape::bind(const Tensor& param) { intern(param); }

Tensor Tape::constant(const Tensor& values) {
    Tensor c = values;
    c.requires_grad = false;
    intern(c);
    return c;
}

Tensor Tape::constant(std::vector<std::size_t> shape, std::vector<double> values) {
    return constant(Tensor::from(std::move(shape), std::move(values)));
}

void Tape::check_same_shape(const Tensor& a, const Tensor& b, const char* op) const {
    if (!a.same_shape(b))
        throw std::runtime_error(std::string(op) + ": shape mismatch " +
                                 Tensor::shape_str(a.shape) + " vs " +
                                 Tensor::shape_str(b.shape));
}

// ---------------------------------------------------------------------------
// op builders

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2)
        throw std::runtime_error("matmul: right operand must be rank 2, got " +
                                 Tensor::shape_str(b.shape));
    std::size_t m, k;
    bool vec = (a.rank() == 1);
    if (vec) {
        m = 1;
        k = a.shape[0];
    } else if (a.rank() == 2) {
        m = a.shape[0];
        k = a.shape[1];
    } else {
        throw std::runtime_error("matmul: left operand must be rank 1 or 2");
    }
    if (k != b.shape[0])
        throw std::runtime_error("matmul: inner dimensions disagree " +
                                 Tensor::shape_str(a.shape) + " vs " +
                                 Tensor::shape_str(b.shape));
    std::size_t n = b.shape[1];
    Node node;
    node.op = Op::matmul;
    node.a = intern(a);
    node.b = intern(b);
    node.shape = vec ? std::vector<std::size_t>{n} : std::vector<std::size_t>{m, n};
    node.out = std::make_shared<std::vector<double>>(m * n, 0.0);
    node.meta = {m, k};
    kern::mm_nn(a.ptr(), b.ptr(), node.out->data(), m, k, n);
    node.needs_grad = at(node.a).needs_grad || at(node.b).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

// add/sub/mul share the broadcast rule: either identical shapes, or the right
// operand is a vector spanning the left operand's last axis.
static bool bias_broadcast(const Tensor& a, const Tensor& b) {
    return a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1];
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    bool bc = bias_broadcast(a, b);
    if (!bc) check_same_shape(a, b, "add");
    Node node;
    node.op = Op::add;
    node.a = intern(a);
    node.b = intern(b);
    node.shape = a.shape;
    node.out = std::make_shared<std::vector<double>>(a.data());
    node.meta[0] = bc ? 1 : 0;
    if (bc) {
        std::size_t rows = a.shape[0], cols = a.shape[1];
        for (std::size_t r = 0; r < rows; ++r)
            kern::axpy(1.0, b.ptr(), node.out->data() + r * cols, cols);
    } else {
        kern::axpy(1.0, b.ptr(), node.out->data(), a.numel());
    }
    node.needs_grad = at(node.a).needs_grad || at(node.b).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    bool bc = bias_broadcast(a, b);
    if (!bc) check_same_shape(a, b, "sub");
    Node node;
    node.op = Op::sub;
    node.a = intern(a);
    node.b = intern(b);
    node.shape = a.shape;
    node.out = std::make_shared<std::vector<double>>(a.data());
    node.meta[0] = bc ? 1 : 0;
    if (bc) {
        std::size_t rows = a.shape[0], cols = a.shape[1];
        for (std::size_t r = 0; r < rows; ++r)
            kern::axpy(-1.0, b.ptr(), node.out->data() + r * cols, cols);
    } else {
        kern::axpy(-1.0, b.ptr(), node.out->data(), a.numel());
    }
    node.needs_grad = at(node.a).needs_grad || at(node.b).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    bool bc = bias_broadcast(a, b);
    if (!bc) check_same_shape(a, b, "mul");
    Node node;
    node.op = Op::mul;
    node.a = intern(a);
    node.b = intern(b);
    node.shape = a.shape;
    node.out = std::make_shared<std::vector<double>>(a.data());
    node.meta[0] = bc ? 1 : 0;
    if (bc) {
        std::size_t rows = a.shape[0], cols = a.shape[1];
        for (std::size_t r = 0; r < rows; ++r) {
            double* orow = node.out->data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) orow[j] *= b.at(j);
        }
    } else {
        for (std::size_t i = 0; i < a.numel(); ++i) (*node.out)[i] *= b.at(i);
    }
    node.needs_grad = at(node.a).needs_grad || at(node.b).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::scale(const Tensor& a, double s) {
    Node node;
    node.op = Op::scale;
    node.a = intern(a);
    node.shape = a.shape;
    node.scalar = s;
    node.out = std::make_shared<std::vector<double>>(a.data());
    for (double& v : *node.out) v *= s;
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::unary_op(const Tensor& a, double (*f)(double), double (*df)(double, double)) {
    Node node;
    node.op = Op::unary;
    node.a = intern(a);
    node.shape = a.shape;
    node.out = std::make_shared<std::vector<double>>(a.numel());
    node.saved.resize(a.numel());
    const auto& in = a.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        double y = f(in[i]);
        (*node.out)[i] = y;
        node.saved[i] = df(in[i], y);
    }
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor Tape::sigmoid(const Tensor& a) {
    return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor Tape::relu(const Tensor& a) {
    // d/dx at exactly 0 is taken as 0.
    return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor Tape::exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor Tape::log1p(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log1p(x); },
                    [](double x, double) { return 1.0 / (1.0 + x); });
}

static void softmax_row(const double* x, double* y, std::size_t n) {
    double m = x[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - m);
        s += y[i];
    }
    double inv = 1.0 / s;
    for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
}

Tensor Tape::softmax(const Tensor& a, int axis) {
    if (axis == -1) axis = static_cast<int>(a.rank()) - 1;
    bool ok = (a.rank() == 1 && axis == 0) || (a.rank() == 2 && axis == 1);
    if (!ok)
        throw std::invalid_argument("softmax: unsupported axis " + std::to_string(axis) +
                                    " for shape " + Tensor::shape_str(a.shape));
    Node node;
    node.op = Op::softmax;
    node.a = intern(a);
    node.shape = a.shape;
    node.out = std::make_shared<std::vector<double>>(a.numel());
    std::size_t rows = a.rank() == 1 ? 1 : a.shape[0];
    std::size_t cols = a.rank() == 1 ? a.shape[0] : a.shape[1];
    for (std::size_t r = 0; r < rows; ++r)
        softmax_row(a.ptr() + r * cols, node.out->data() + r * cols, cols);
    node.meta = {rows, cols};
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

GumbelSample Tape::gumbel_softmax(const Tensor& logits, double temperature, Rng& rng) {
    if (logits.rank() != 1)
        throw std::invalid_argument("gumbel_softmax: logits must be rank 1");
    if (!(temperature > 0.0))
        throw std::invalid_argument("gumbel_softmax: temperature must be > 0");
    std::size_t n = logits.shape[0];
    Node node;
    node.op = Op::gumbel_softmax;
    node.a = intern(logits);
    node.shape = logits.shape;
    node.scalar = 1.0 / temperature;
    node.out = std::make_shared<std::vector<double>>(n);
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i)
        z[i] = (logits.at(i) + rng.gumbel()) * node.scalar;
    softmax_row(z.data(), node.out->data(), n);
    std::size_t hard = 0;
    for (std::size_t i = 1; i < n; ++i)
        if ((*node.out)[i] > (*node.out)[hard]) hard = i;
    node.meta[0] = hard;
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    GumbelSample s;
    s.soft = wrap(id, shape, out);
    s.hard = static_cast<int>(hard);
    return s;
}

Tensor Tape::stop_gradient(const Tensor& a) {
    Node node;
    node.op = Op::stop_grad;
    node.shape = a.shape;
    node.out = a.store;  // forward identity, shares storage
    node.needs_grad = false;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::grad_scale(const Tensor& a, double s) {
    Node node;
    node.op = Op::grad_scale;
    node.a = intern(a);
    node.shape = a.shape;
    node.scalar = s;
    node.out = a.store;  // forward identity
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
    if (table.rank() != 2) throw std::runtime_error("gather_rows: table must be rank 2");
    std::size_t d = table.shape[1];
    Node node;
    node.op = Op::gather_rows;
    node.a = intern(table);
    node.shape = {ids.size(), d};
    node.out = std::make_shared<std::vector<double>>(ids.size() * d);
    node.extra = std::make_unique<NodeExtra>();
    node.extra->rows = ids;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= table.shape[0])
            throw std::runtime_error("gather_rows: row " + std::to_string(ids[i]) +
                                     " out of range for table " +
                                     Tensor::shape_str(table.shape));
        std::copy_n(table.ptr() + ids[i] * d, d, node.out->data() + i * d);
    }
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::slice_row(const Tensor& a, std::size_t row) {
    if (a.rank() != 2) throw std::runtime_error("slice_row: operand must be rank 2");
    if (row >= a.shape[0]) throw std::runtime_error("slice_row: row out of range");
    std::size_t d = a.shape[1];
    Node node;
    node.op = Op::slice_row;
    node.a = intern(a);
    node.shape = {d};
    node.meta[0] = row;
    node.out = std::make_shared<std::vector<double>>(a.ptr() + row * d, a.ptr() + (row + 1) * d);
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::pick(const Tensor& a, std::size_t idx) {
    if (idx >= a.numel()) throw std::runtime_error("pick: index out of range");
    Node node;
    node.op = Op::pick;
    node.a = intern(a);
    node.shape = {1};
    node.meta[0] = idx;
    node.out = std::make_shared<std::vector<double>>(1, a.at(idx));
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::st_one(const Tensor& soft, std::size_t idx) {
    if (idx >= soft.numel()) throw std::runtime_error("st_one: index out of range");
    Node node;
    node.op = Op::st_one;
    node.a = intern(soft);
    node.shape = {1};
    node.meta[0] = idx;
    node.out = std::make_shared<std::vector<double>>(1, 1.0);
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::row_norms(const Tensor& a) {
    if (a.rank() != 2) throw std::runtime_error("row_norms: operand must be rank 2");
    std::size_t rows = a.shape[0], cols = a.shape[1];
    Node node;
    node.op = Op::row_norms;
    node.a = intern(a);
    node.shape = {rows};
    node.out = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = kern::dot(a.ptr() + r * cols, a.ptr() + r * cols, cols);
        (*node.out)[r] = std::sqrt(s);
    }
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::colvec_outer(const Tensor& col, const Tensor& vec) {
    if (col.rank() != 1 || vec.rank() != 1)
        throw std::runtime_error("colvec_outer: both operands must be rank 1");
    std::size_t rows = col.shape[0], cols = vec.shape[0];
    Node node;
    node.op = Op::colvec_outer;
    node.a = intern(col);
    node.b = intern(vec);
    node.shape = {rows, cols};
    node.out = std::make_shared<std::vector<double>>(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double cv = col.at(r);
        double* orow = node.out->data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) orow[j] = cv * vec.at(j);
    }
    node.needs_grad = at(node.a).needs_grad || at(node.b).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    if (x.rank() != 2) throw std::runtime_error("layer_norm: input must be rank 2");
    std::size_t rows = x.shape[0], cols = x.shape[1];
    if (gain.numel() != cols || bias.numel() != cols)
        throw std::runtime_error("layer_norm: gain/bias length must match feature dim");
    const double eps = 1e-5;
    Node node;
    node.op = Op::layer_norm;
    node.a = intern(x);
    node.b = intern(gain);
    node.c = intern(bias);
    node.shape = x.shape;
    node.out = std::make_shared<std::vector<double>>(rows * cols);
    node.saved.resize(rows * cols + rows);  // xhat, then inv_std per row
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.ptr() + r * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            double dlt = xr[j] - mean;
            var += dlt * dlt;
        }
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + eps);
        node.saved[rows * cols + r] = inv;
        double* xhat = node.saved.data() + r * cols;
        double* yr = node.out->data() + r * cols;
        for (std::size_t j = 0; j < cols; ++j) {
            xhat[j] = (xr[j] - mean) * inv;
            yr[j] = xhat[j] * gain.at(j) + bias.at(j);
        }
    }
    node.needs_grad =
        at(node.a).needs_grad || at(node.b).needs_grad || at(node.c).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::sum_all(const Tensor& a) {
    Node node;
    node.op = Op::sum_all;
    node.a = intern(a);
    node.shape = {1};
    double s = 0.0;
    for (double v : a.data()) s += v;
    node.out = std::make_shared<std::vector<double>>(1, s);
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::mean_all(const Tensor& a) {
    Node node;
    node.op = Op::mean_all;
    node.a = intern(a);
    node.shape = {1};
    double s = 0.0;
    for (double v : a.data()) s += v;
    node.out = std::make_shared<std::vector<double>>(1, s / static_cast<double>(a.numel()));
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    Node node;
    node.op = Op::mse;
    node.a = intern(a);
    node.b = intern(b);
    node.shape = {1};
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = a.at(i) - b.at(i);
        s += d * d;
    }
    node.out = std::make_shared<std::vector<double>>(1, s / static_cast<double>(a.numel()));
    node.needs_grad = at(node.a).needs_grad || at(node.b).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::cross_entropy_rows(const Tensor& logits, const std::vector<int>& ids) {
    if (logits.rank() != 2) throw std::runtime_error("cross_entropy: logits must be rank 2");
    std::size_t rows = logits.shape[0], cols = logits.shape[1];
    if (ids.size() != rows)
        throw std::runtime_error("cross_entropy: one target id per logits row required");
    Node node;
    node.op = Op::cross_entropy;
    node.a = intern(logits);
    node.shape = {1};
    node.saved.resize(rows * cols);
    node.extra = std::make_unique<NodeExtra>();
    node.extra->ids = ids;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        int id = ids[r];
        if (id < 0 || static_cast<std::size_t>(id) >= cols)
            throw std::runtime_error("cross_entropy: target id out of range");
        softmax_row(logits.ptr() + r * cols, node.saved.data() + r * cols, cols);
        total -= std::log(std::max(node.saved[r * cols + id], 1e-300));
    }
    node.out = std::make_shared<std::vector<double>>(1, total / static_cast<double>(rows));
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::attend(const Tensor& q, const std::vector<AttendRow>& keys,
                    const std::vector<AttendRow>& vals, AttendInfo* info) {
    if (keys.empty()) throw std::logic_error("attend: empty key set (cold path is the caller's)");
    if (keys.size() != vals.size())
        throw std::runtime_error("attend: key/value row counts differ");
    std::size_t d = q.numel();
    std::size_t m = keys.size();
    Node node;
    node.op = Op::attend;
    node.a = intern(q);
    node.shape = {d};
    node.extra = std::make_unique<NodeExtra>();
    auto& ex = *node.extra;
    ex.krows.reserve(m);
    ex.vrows.reserve(m);
    ex.knodes.reserve(m);
    ex.vnodes.reserve(m);
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> scores(m);
    bool fresh_grad = false;
    for (std::size_t i = 0; i < m; ++i) {
        if (keys[i].values->size() != d || vals[i].values->size() != d)
            throw std::runtime_error("attend: entry width does not match query width");
        scores[i] = kern::dot(q.ptr(), keys[i].values->data(), d) * inv_sqrt_d;
        ex.krows.push_back(keys[i].values);
        ex.vrows.push_back(vals[i].values);
        ex.knodes.push_back(keys[i].node);
        ex.vnodes.push_back(vals[i].node);
        if (keys[i].node >= 0 && at(keys[i].node).needs_grad) fresh_grad = true;
        if (vals[i].node >= 0 && at(vals[i].node).needs_grad) fresh_grad = true;
    }
    ex.alpha.resize(m);
    softmax_row(scores.data(), ex.alpha.data(), m);
    node.out = std::make_shared<std::vector<double>>(d, 0.0);
    std::size_t arg = 0;
    for (std::size_t i = 0; i < m; ++i) {
        kern::axpy(ex.alpha[i], ex.vrows[i]->data(), node.out->data(), d);
        if (ex.alpha[i] > ex.alpha[arg]) arg = i;
    }
    if (info) {
        info->max_alpha = ex.alpha[arg];
        info->argmax = arg;
    }
    node.meta = {m, d};
    node.needs_grad = at(node.a).needs_grad || fresh_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::mix_rows(const Tensor& base, const std::vector<MixUpdate>& updates) {
    if (base.rank() != 2) throw std::runtime_error("mix_rows: base must be rank 2");
    std::size_t cols = base.shape[1];
    Node node;
    node.op = Op::mix_rows;
    node.a = intern(base);
    node.shape = base.shape;
    node.out = std::make_shared<std::vector<double>>(base.data());
    node.extra = std::make_unique<NodeExtra>();
    auto& ex = *node.extra;
    bool up_grad = false;
    for (const auto& u : updates) {
        if (u.row >= base.shape[0]) throw std::runtime_error("mix_rows: row out of range");
        if (u.weight.numel() != 1) throw std::runtime_error("mix_rows: weight must be scalar");
        if (u.value.numel() != cols)
            throw std::runtime_error("mix_rows: value width does not match base");
        ex.rows.push_back(u.row);
        ex.wnodes.push_back(intern(u.weight));
        ex.pnodes.push_back(intern(u.value));
        kern::axpy(u.weight.value(), u.value.ptr(), node.out->data() + u.row * cols, cols);
        up_grad = up_grad || at(ex.wnodes.back()).needs_grad || at(ex.pnodes.back()).needs_grad;
    }
    node.needs_grad = at(node.a).needs_grad || up_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::routing_penalty(const std::vector<Tensor>& logits, const std::vector<double>& q,
                             double lambda_e, double lambda_s,
                             std::vector<double>* pis_out) {
    if (logits.empty()) throw std::runtime_error("routing_penalty: no tokens");
    if (q.size() != logits.size())
        throw std::runtime_error("routing_penalty: one quality value per token required");
    std::size_t t_count = logits.size();
    Node node;
    node.op = Op::routing_penalty;
    node.shape = {1};
    node.extra = std::make_unique<NodeExtra>();
    auto& ex = *node.extra;
    ex.qvals = q;
    ex.pis.resize(t_count * 3);
    double acc = 0.0;
    bool any_grad = false;
    for (std::size_t t = 0; t < t_count; ++t) {
        if (logits[t].numel() != 3)
            throw std::runtime_error("routing_penalty: logits must have 3 entries");
        int id = intern(logits[t]);
        ex.logit_nodes.push_back(id);
        any_grad = any_grad || at(id).needs_grad;
        softmax_row(logits[t].ptr(), ex.pis.data() + t * 3, 3);
        acc += lambda_e * ex.pis[t * 3 + 1] - lambda_s * ex.pis[t * 3 + 2] * q[t];
    }
    node.out = std::make_shared<std::vector<double>>(1, acc / static_cast<double>(t_count));
    node.scalar = lambda_e;
    node.saved = {lambda_s};
    node.needs_grad = any_grad;
    if (pis_out) *pis_out = ex.pis;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::rows_mse(const Tensor& block, const std::vector<std::size_t>& rows,
                      std::vector<double> targets, double backward_scale) {
    if (block.rank() != 2) throw std::runtime_error("rows_mse: block must be rank 2");
    std::size_t cols = block.shape[1];
    if (rows.empty()) throw std::runtime_error("rows_mse: no rows selected");
    if (targets.size() != rows.size() * cols)
        throw std::runtime_error("rows_mse: target size mismatch");
    Node node;
    node.op = Op::rows_mse;
    node.a = intern(block);
    node.shape = {1};
    node.scalar = backward_scale;
    node.extra = std::make_unique<NodeExtra>();
    node.extra->rows = rows;
    node.extra->targets = std::move(targets);
    double acc = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* xr = block.ptr() + rows[i] * cols;
        const double* tr = node.extra->targets.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) {
            double d = xr[j] - tr[j];
            acc += d * d;
        }
    }
    node.out = std::make_shared<std::vector<double>>(
        1, acc / static_cast<double>(rows.size() * cols));
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

Tensor Tape::assemble_features(const Tensor& dyn, std::size_t t,
                               const std::array<double, 4>& raw_others,
                               const std::array<double, 4>& mean,
                               const std::array<double, 4>& inv_std) {
    if (t >= dyn.numel()) throw std::runtime_error("assemble_features: token out of range");
    Node node;
    node.op = Op::assemble_features;
    node.a = intern(dyn);
    node.shape = {4};
    node.meta[0] = t;
    node.out = std::make_shared<std::vector<double>>(4);
    node.saved = {inv_std[1]};
    for (std::size_t i = 0; i < 4; ++i) {
        double raw = (i == 1) ? dyn.at(t) : raw_others[i];
        (*node.out)[i] = (raw - mean[i]) * inv_std[i];
    }
    node.needs_grad = at(node.a).needs_grad;
    auto out = node.out;
    auto shape = node.shape;
    int id = push(std::move(node));
    return wrap(id, shape, out);
}

// ---------------------------------------------------------------------------
// reverse pass

GradMap Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::runtime_error("backward: loss must be a scalar, got shape " +
                                 Tensor::shape_str(loss.shape));
    if (backward_done_)
        throw std::runtime_error(
            "backward: tape already differentiated; call reset() before reusing it");
    if (loss.epoch != epoch_ || loss.node < 0)
        throw std::runtime_error("backward: loss is not on this tape");
    backward_done_ = true;

    std::vector<std::vector<double>> grads(nodes_.size());
    grads[loss.node] = {1.0};

    auto acc = [&](int id) -> std::vector<double>* {
        if (id < 0) return nullptr;
        Node& n = nodes_[id];
        if (!n.needs_grad) return nullptr;
        auto& g = grads[id];
        if (g.empty()) g.assign(n.out->size(), 0.0);
        return &g;
    };

    for (int i = loss.node; i >= 0; --i) {
        if (grads[i].empty()) continue;
        Node& n = nodes_[i];
        if (!n.needs_grad) continue;
        const std::vector<double>& gy = grads[i];
        switch (n.op) {
            case Op::leaf:
            case Op::constant:
            case Op::stop_grad:
                break;
            case Op::matmul: {
                const Node& na = nodes_[n.a];
                const Node& nb = nodes_[n.b];
                std::size_t m = n.meta[0], k = n.meta[1];
                std::size_t ncols = nb.shape[1];
                if (auto* ga = acc(n.a))
                    kern::mm_nt(gy.data(), nb.out->data(), ga->data(), m, ncols, k);
                if (auto* gb = acc(n.b))
                    kern::mm_tn(na.out->data(), gy.data(), gb->data(), k, m, ncols);
                break;
            }
            case Op::add:
            case Op::sub: {
                double sign = (n.op == Op::sub) ? -1.0 : 1.0;
                if (auto* ga = acc(n.a)) kern::axpy(1.0, gy.data(), ga->data(), gy.size());
                if (auto* gb = acc(n.b)) {
                    if (n.meta[0]) {  // bias broadcast over rows
                        std::size_t cols = nodes_[n.b].out->size();
                        std::size_t rows = gy.size() / cols;
                        for (std::size_t r = 0; r < rows; ++r)
                            kern::axpy(sign, gy.data() + r * cols, gb->data(), cols);
                    } else {
                        kern::axpy(sign, gy.data(), gb->data(), gy.size());
                    }
                }
                break;
            }
            case Op::mul: {
                const auto& av = *nodes_[n.a].out;
                const auto& bv = *nodes_[n.b].out;
                if (n.meta[0]) {
                    std::size_t cols = bv.size();
                    std::size_t rows = gy.size() / cols;
                    if (auto* ga = acc(n.a))
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < cols; ++j)
                                (*ga)[r * cols + j] += gy[r * cols + j] * bv[j];
                    if (auto* gb = acc(n.b))
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < cols; ++j)
                                (*gb)[j] += gy[r * cols + j] * av[r * cols + j];
                } else {
                    if (auto* ga = acc(n.a))
                        for (std::size_t j = 0; j < gy.size(); ++j) (*ga)[j] += gy[j] * bv[j];
                    if (auto* gb = acc(n.b))
                        for (std::size_t j = 0; j < gy.size(); ++j) (*gb)[j] += gy[j] * av[j];
                }
                break;
            }
            case Op::scale:
            case Op::grad_scale: {
                if (auto* ga = acc(n.a)) kern::axpy(n.scalar, gy.data(), ga->data(), gy.size());
                break;
            }
            case Op::unary: {
                if (auto* ga = acc(n.a))
                    for (std::size_t j = 0; j < gy.size(); ++j) (*ga)[j] += gy[j] * n.saved[j];
                break;
            }
            case Op::softmax:
            case Op::gumbel_softmax: {
                std::size_t rows = n.op == Op::softmax ? n.meta[0] : 1;
                std::size_t cols = n.op == Op::softmax ? n.meta[1] : n.out->size();
                double s = n.op == Op::gumbel_softmax ? n.scalar : 1.0;
                if (auto* ga = acc(n.a)) {
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* y = n.out->data() + r * cols;
                        const double* g = gy.data() + r * cols;
                        double dot = kern::dot(g, y, cols);
                        double* t = ga->data() + r * cols;
                        for (std::size_t j = 0; j < cols; ++j)
                            t[j] += s * y[j] * (g[j] - dot);
                    }
                }
                break;
            }
            case Op::gather_rows: {
                std::size_t d = n.shape[1];
                if (auto* ga = acc(n.a))
                    for (std::size_t r = 0; r < n.extra->rows.size(); ++r)
                        kern::axpy(1.0, gy.data() + r * d,
                                   ga->data() + n.extra->rows[r] * d, d);
                break;
            }
            case Op::slice_row: {
                std::size_t d = n.shape[0];
                if (auto* ga = acc(n.a))
                    kern::axpy(1.0, gy.data(), ga->data() + n.meta[0] * d, d);
                break;
            }
            case Op::pick:
            case Op::st_one: {
                if (auto* ga = acc(n.a)) (*ga)[n.meta[0]] += gy[0];
                break;
            }
            case Op::row_norms: {
                const auto& av = *nodes_[n.a].out;
                std::size_t rows = n.shape[0];
                std::size_t cols = av.size() / rows;
                if (auto* ga = acc(n.a))
                    for (std::size_t r = 0; r < rows; ++r) {
                        double norm = (*n.out)[r];
                        if (norm <= 0.0) continue;
                        kern::axpy(gy[r] / norm, av.data() + r * cols,
                                   ga->data() + r * cols, cols);
                    }
                break;
            }
            case Op::colvec_outer: {
                const auto& colv = *nodes_[n.a].out;
                const auto& vecv = *nodes_[n.b].out;
                std::size_t rows = n.shape[0], cols = n.shape[1];
                if (auto* ga = acc(n.a))
                    for (std::size_t r = 0; r < rows; ++r)
                        (*ga)[r] += kern::dot(gy.data() + r * cols, vecv.data(), cols);
                if (auto* gb = acc(n.b))
                    for (std::size_t r = 0; r < rows; ++r)
                        kern::axpy(colv[r], gy.data() + r * cols, gb->data(), cols);
                break;
            }
            case Op::layer_norm: {
                std::size_t rows = n.shape[0], cols = n.shape[1];
                const auto& gv = *nodes_[n.b].out;
                const double* xhat = n.saved.data();
                const double* inv = n.saved.data() + rows * cols;
                auto* ga = acc(n.a);
                auto* gg = acc(n.b);
                auto* gb = acc(n.c);
                std::vector<double> dxhat(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* gyr = gy.data() + r * cols;
                    const double* xr = xhat + r * cols;
                    if (gg)
                        for (std::size_t j = 0; j < cols; ++j) (*gg)[j] += gyr[j] * xr[j];
                    if (gb)
                        for (std::size_t j = 0; j < cols; ++j) (*gb)[j] += gyr[j];
                    if (ga) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < cols; ++j) {
                            dxhat[j] = gyr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xr[j];
                        }
                        m1 /= static_cast<double>(cols);
                        m2 /= static_cast<double>(cols);
                        double* gar = ga->data() + r * cols;
                        for (std::size_t j = 0; j < cols; ++j)
                            gar[j] += inv[r] * (dxhat[j] - m1 - xr[j] * m2);
                    }
                }
                break;
            }
            case Op::sum_all: {
                if (auto* ga = acc(n.a))
                    for (double& v : *ga) v += gy[0];
                break;
            }
            case Op::mean_all: {
                if (auto* ga = acc(n.a)) {
                    double g = gy[0] / static_cast<double>(ga->size());
                    for (double& v : *ga) v += g;
                }
                break;
            }
            case Op::mse: {
                const auto& av = *nodes_[n.a].out;
                const auto& bv = *nodes_[n.b].out;
                double coeff = 2.0 * gy[0] / static_cast<double>(av.size());
                if (auto* ga = acc(n.a))
                    for (std::size_t j = 0; j < av.size(); ++j)
                        (*ga)[j] += coeff * (av[j] - bv[j]);
                if (auto* gb = acc(n.b))
                    for (std::size_t j = 0; j < av.size(); ++j)
                        (*gb)[j] -= coeff * (av[j] - bv[j]);
                break;
            }
            case Op::cross_entropy: {
                std::size_t rows = n.extra->ids.size();
                std::size_t cols = n.saved.size() / rows;
                double coeff = gy[0] / static_cast<double>(rows);
                if (auto* ga = acc(n.a))
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* p = n.saved.data() + r * cols;
                        double* g = ga->data() + r * cols;
                        for (std::size_t j = 0; j < cols; ++j) g[j] += coeff * p[j];
                        g[n.extra->ids[r]] -= coeff;
                    }
                break;
            }
            case Op::attend: {
                auto& ex = *n.extra;
                std::size_t m = n.meta[0], d = n.meta[1];
                double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
                const auto& qv = *nodes_[n.a].out;
                std::vector<double> dalpha(m);
                for (std::size_t j = 0; j < m; ++j) {
                    dalpha[j] = kern::dot(gy.data(), ex.vrows[j]->data(), d);
                    if (ex.vnodes[j] >= 0)
                        if (auto* gv = acc(ex.vnodes[j]))
                            kern::axpy(ex.alpha[j], gy.data(), gv->data(), d);
                }
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j) s += ex.alpha[j] * dalpha[j];
                auto* gq = acc(n.a);
                for (std::size_t j = 0; j < m; ++j) {
                    double dlogit = ex.alpha[j] * (dalpha[j] - s);
                    if (gq)
                        kern::axpy(dlogit * inv_sqrt_d, ex.krows[j]->data(), gq->data(), d);
                    if (ex.knodes[j] >= 0)
                        if (auto* gk = acc(ex.knodes[j]))
                            kern::axpy(dlogit * inv_sqrt_d, qv.data(), gk->data(), d);
                }
                break;
            }
            case Op::mix_rows: {
                auto& ex = *n.extra;
                std::size_t cols = n.shape[1];
                if (auto* ga = acc(n.a)) kern::axpy(1.0, gy.data(), ga->data(), gy.size());
                for (std::size_t u = 0; u < ex.rows.size(); ++u) {
                    const double* gyr = gy.data() + ex.rows[u] * cols;
                    double w = (*nodes_[ex.wnodes[u]].out)[0];
                    if (auto* gw = acc(ex.wnodes[u]))
                        (*gw)[0] += kern::dot(gyr, nodes_[ex.pnodes[u]].out->data(), cols);
                    if (auto* gp = acc(ex.pnodes[u]))
                        kern::axpy(w, gyr, gp->data(), cols);
                }
                break;
            }
            case Op::routing_penalty: {
                auto& ex = *n.extra;
                std::size_t t_count = ex.logit_nodes.size();
                double lam_e = n.scalar, lam_s = n.saved[0];
                double coeff = gy[0] / static_cast<double>(t_count);
                for (std::size_t t = 0; t < t_count; ++t) {
                    auto* gl = acc(ex.logit_nodes[t]);
                    if (!gl) continue;
                    const double* pi = ex.pis.data() + t * 3;
                    double g1 = coeff * lam_e;
                    double g2 = -coeff * lam_s * ex.qvals[t];
                    double dot = g1 * pi[1] + g2 * pi[2];
                    (*gl)[0] += pi[0] * (0.0 - dot);
                    (*gl)[1] += pi[1] * (g1 - dot);
                    (*gl)[2] += pi[2] * (g2 - dot);
                }
                break;
            }
            case Op::rows_mse: {
                auto& ex = *n.extra;
                const auto& bv = *nodes_[n.a].out;
                std::size_t cols = nodes_[n.a].shape[1];
                double coeff = n.scalar * 2.0 * gy[0] /
                               static_cast<double>(ex.rows.size() * cols);
                if (auto* ga = acc(n.a))
                    for (std::size_t r = 0; r < ex.rows.size(); ++r) {
                        const double* xr = bv.data() + ex.rows[r] * cols;
                        const double* tr = ex.targets.data() + r * cols;
                        double* g = ga->data() + ex.rows[r] * cols;
                        for (std::size_t j = 0; j < cols; ++j)
                            g[j] += coeff * (xr[j] - tr[j]);
                    }
                break;
            }
            case Op::assemble_features: {
                if (auto* ga = acc(n.a)) (*ga)[n.meta[0]] += gy[1] * n.saved[0];
                break;
            }
        }
    }

    GradMap gm;
    gm.epoch_ = epoch_;
    gm.grads_ = std::move(grads);
    gm.leaves_ = leaves_;
    return gm;
}

int GradMap::resolve(const Tensor& t) const {
    if (t.epoch == epoch_ && t.node >= 0 &&
        static_cast<std::size_t>(t.node) < grads_.size())
        return t.node;
    if (t.requires_grad) {
        auto it = leaves_.find(t.store.get());
        if (it != leaves_.end()) return it->second;
    }
    return -1;
}

bool GradMap::has(const Tensor& t) const { return resolve(t) >= 0; }

const std::vector<double>* GradMap::raw(const Tensor& t) const {
    int id = resolve(t);
    if (id < 0) return nullptr;
    const auto& g = grads_[id];
    return g.empty() ? nullptr : &g;
}

Tensor GradMap::grad(const Tensor& t) const {
    int id = resolve(t);
    if (id < 0)
        throw std::runtime_error("GradMap::grad: tensor is not on the differentiated tape");
    const auto& g = grads_[id];
    if (g.empty()) return Tensor::zeros(t.shape);
    return Tensor::from(t.shape, g);
}

}  // namespace cram
