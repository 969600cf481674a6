#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <unordered_map>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace cram {

// Reverse-mode tape. The graph is rebuilt from scratch every step
// (define-by-run); ops append nodes whose parents always have smaller ids,
// so the reverse pass is a single backward sweep over the node array.
//
// Tensors cache their node id together with the tape generation that issued
// it. A tensor carried over from an earlier step (a stale generation) is
// re-interned as a constant: values flow, gradients do not. Parameters are
// re-bound through bind() each step so their gradients accumulate on one
// leaf.

enum class Op : std::uint8_t {
    leaf,
    constant,
    matmul,
    add,
    sub,
    mul,
    scale,
    unary,          // tanh/sigmoid/relu/exp/log1p; saved holds dy/dx
    softmax,
    gumbel_softmax, // softmax((logits + g)/tau); meta0 = hard index
    stop_grad,
    grad_scale,
    gather_rows,
    slice_row,
    pick,
    st_one,         // forward 1.0, backward into soft[idx] (straight-through)
    row_norms,
    colvec_outer,
    layer_norm,
    sum_all,
    mean_all,
    mse,
    cross_entropy,
    attend,
    mix_rows,
    routing_penalty,
    rows_mse,
    assemble_features,
};

struct NodeExtra {
    // attend
    std::vector<std::shared_ptr<std::vector<double>>> krows, vrows;
    std::vector<int> knodes, vnodes;
    std::vector<double> alpha;
    // mix_rows / rows_mse / gather_rows / cross_entropy
    std::vector<std::size_t> rows;
    std::vector<int> wnodes, pnodes;
    std::vector<int> ids;
    std::vector<double> targets;
    // routing_penalty
    std::vector<int> logit_nodes;
    std::vector<double> qvals;
    std::vector<double> pis;  // clean softmax per token, row-major T x 3
};

struct Node {
    Op op;
    int a = -1, b = -1, c = -1;
    std::vector<std::size_t> shape;
    std::shared_ptr<std::vector<double>> out;
    std::vector<double> saved;
    std::array<std::size_t, 2> meta{0, 0};
    double scalar = 0.0;
    bool needs_grad = false;
    std::unique_ptr<NodeExtra> extra;
};

struct GumbelSample {
    Tensor soft;
    int hard = -1;
};

struct AttendInfo {
    double max_alpha = 0.0;
    std::size_t argmax = 0;
};

struct AttendRow {
    std::shared_ptr<std::vector<double>> values;  // length d
    int node = -1;                                // tape node if written this step
};

struct MixUpdate {
    std::size_t row = 0;
    Tensor weight;  // scalar
    Tensor value;   // length-d vector
};

class Tape;

// Wrap a tensor as an attend() operand. Tensors from the current tape
// generation keep their node (gradients flow); anything older participates
// by value only.
AttendRow attend_row(const Tape& tape, const Tensor& t);

// Gradients produced by one backward pass. Tensors are addressed by their
// cached node id when they touched the tape themselves, or — for parameters
// (requires_grad) — by storage identity, so copies of a parameter handle all
// resolve to the same leaf.
class GradMap {
public:
    bool has(const Tensor& t) const;
    // Gradient with the tensor's shape. Zero tensor if the node exists but
    // received no gradient; throws if the tensor is not on this tape.
    Tensor grad(const Tensor& t) const;
    const std::vector<double>* raw(const Tensor& t) const;

private:
    friend class Tape;
    int resolve(const Tensor& t) const;
    std::uint64_t epoch_ = 0;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<const void*, int> leaves_;
};

class Tape {
public:
    explicit Tape(std::size_t node_budget = 8'000'000);

    // --- graph management ----------------------------------------------
    Tensor constant(const Tensor& values);
    Tensor constant(std::vector<std::size_t> shape, std::vector<double> values);
    // Bind a parameter for this generation; gradients accumulate on one leaf.
    void bind(const Tensor& param);
    void reset();
    std::size_t node_count() const { return nodes_.size(); }
    std::uint64_t epoch() const { return epoch_; }

    // --- core ops -------------------------------------------------------
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double s);
    Tensor tanh(const Tensor& a);
    Tensor sigmoid(const Tensor& a);
    Tensor relu(const Tensor& a);
    Tensor exp(const Tensor& a);
    Tensor log1p(const Tensor& a);
    Tensor softmax(const Tensor& a, int axis);
    GumbelSample gumbel_softmax(const Tensor& logits, double temperature, Rng& rng);
    Tensor stop_gradient(const Tensor& a);
    Tensor grad_scale(const Tensor& a, double s);

    // --- structure ops --------------------------------------------------
    Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);
    Tensor slice_row(const Tensor& a, std::size_t row);
    Tensor pick(const Tensor& a, std::size_t idx);
    Tensor st_one(const Tensor& soft, std::size_t idx);
    Tensor row_norms(const Tensor& a);
    Tensor colvec_outer(const Tensor& col, const Tensor& vec);
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
    Tensor sum_all(const Tensor& a);
    Tensor mean_all(const Tensor& a);
    Tensor mse(const Tensor& a, const Tensor& b);
    Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& ids);
    Tensor attend(const Tensor& q, const std::vector<AttendRow>& keys,
                  const std::vector<AttendRow>& vals, AttendInfo* info);
    Tensor mix_rows(const Tensor& base, const std::vector<MixUpdate>& updates);
    Tensor routing_penalty(const std::vector<Tensor>& logits, const std::vector<double>& q,
                           double lambda_e, double lambda_s,
                           std::vector<double>* pis_out = nullptr);
    Tensor rows_mse(const Tensor& block, const std::vector<std::size_t>& rows,
                    std::vector<double> targets, double backward_scale);
    Tensor assemble_features(const Tensor& dyn, std::size_t t,
                             const std::array<double, 4>& raw_others,
                             const std::array<double, 4>& mean,
                             const std::array<double, 4>& inv_std);

    // --- reverse pass ---------------------------------------------------
    GradMap backward(const Tensor& loss);

private:
    int intern(const Tensor& t);
    int push(Node n);
    Node& at(int id) { return nodes_[id]; }
    Tensor wrap(int id, std::vector<std::size_t> shape,
                std::shared_ptr<std::vector<double>> out) const;
    Tensor unary_op(const Tensor& a, double (*f)(double), double (*df)(double, double));
    void check_same_shape(const Tensor& a, const Tensor& b, const char* op) const;

    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaves_;  // param store -> leaf node
    std::uint64_t epoch_;
    std::size_t node_budget_;
    bool backward_done_ = false;

    static std::uint64_t next_epoch();
};

}  // namespace cram
