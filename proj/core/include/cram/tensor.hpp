#pragma once

#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cram {

// Dense float64 tensor, rank 1 or 2, row-major. Data lives behind a
// shared_ptr so tape nodes can retain operand values without copying the
// arrays. Tensors are treated as immutable once produced by an op; only
// parameter updates write through data() in place, between tape lifetimes.
struct Tensor {
    std::vector<std::size_t> shape;
    std::shared_ptr<std::vector<double>> store;

    // Position on the current tape. epoch identifies which tape generation
    // the node id belongs to; a mismatch means "not on this tape".
    mutable int node = -1;
    mutable std::uint64_t epoch = 0;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape_) {
        Tensor t;
        t.shape = std::move(shape_);
        t.store = std::make_shared<std::vector<double>>(numel_of(t.shape), 0.0);
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape_, std::vector<double> values) {
        if (numel_of(shape_) != values.size())
            throw std::invalid_argument("Tensor::from: value count does not match shape");
        Tensor t;
        t.shape = std::move(shape_);
        t.store = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t numel() const { return store ? store->size() : 0; }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    std::vector<double>& data() & { return *store; }
    const std::vector<double>& data() const& { return *store; }
    // On temporaries, hand out a copy: a reference into an expiring tensor's
    // store dangles as soon as the expression ends (e.g. range-for over
    // grad_map.grad(w).data()).
    std::vector<double> data() && { return *store; }
    double* ptr() { return store->data(); }
    const double* ptr() const { return store->data(); }

    double value() const {
        if (numel() != 1) throw std::runtime_error("Tensor::value: tensor is not a scalar");
        return (*store)[0];
    }

    double& at(std::size_t i) { return (*store)[i]; }
    double at(std::size_t i) const { return (*store)[i]; }
    double& at(std::size_t r, std::size_t c) { return (*store)[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return (*store)[r * cols() + c]; }

    // Deep copy (fresh storage, not on any tape).
    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.store = std::make_shared<std::vector<double>>(*store);
        t.requires_grad = requires_grad;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::string out = "(";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(s[i]);
        }
        return out + ")";
    }
};

}  // namespace cram
