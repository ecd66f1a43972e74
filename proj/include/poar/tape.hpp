#pragma once

// Reverse-mode automatic differentiation over whole tensors.
//
// A Tape records every op as a node holding its forward value and a closure
// that pushes the node's gradient into its parents. Nodes are appended in
// evaluation order, so walking the tape backwards is a valid topological
// order. Parameters live outside the tape; each parameter gets at most one
// leaf node per tape and receives its gradient once, at the end of
// backward().
//
// A tape is single-threaded. Independent tapes may run concurrently over
// shared read-only parameters.

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "poar/tensor.hpp"

namespace poar {

template <class Real>
struct Parameter {
    Parameter() = default;
    Parameter(std::string name, BasicTensor<Real> value)
        : name(std::move(name)), value(std::move(value)), grad(this->value.shape()) {}

    void zero_grad() { std::fill(grad.storage().begin(), grad.storage().end(), Real(0)); }

    std::string name;
    BasicTensor<Real> value;
    BasicTensor<Real> grad;
};

template <class Real>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <class Real>
class Var {
public:
    Var() = default;
    Var(Tape<Real>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<Real>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const BasicTensor<Real>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    Tape<Real>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <class Real>
class Tape {
public:
    // Receives the tape and the id of the node whose gradient is ready.
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    Var<Real> constant(BasicTensor<Real> value) {
        nodes_.push_back(Node{std::move(value), {}, {}, {}, false, nullptr});
        return {this, nodes_.size() - 1};
    }

    Var<Real> param(Parameter<Real>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return {this, it->second};
        nodes_.push_back(Node{p.value, {}, {}, {}, grad_enabled_, &p});
        param_nodes_.emplace(&p, nodes_.size() - 1);
        return {this, nodes_.size() - 1};
    }

    // Appends an op result. The closure is dropped when no parent needs a
    // gradient.
    Var<Real> record(BasicTensor<Real> value, std::vector<std::size_t> parents, BackwardFn backward) {
        if (!value.all_finite()) throw numeric_error("non-finite value produced on tape");
        bool needs = false;
        if (grad_enabled_)
            for (auto p : parents) needs = needs || nodes_[p].requires_grad;
        nodes_.push_back(Node{std::move(value), {}, needs ? std::move(parents) : std::vector<std::size_t>{},
                              needs ? std::move(backward) : BackwardFn{}, needs, nullptr});
        return {this, nodes_.size() - 1};
    }

    const BasicTensor<Real>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    // Gradient buffer of a node, allocated on first touch.
    BasicTensor<Real>& grad(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = BasicTensor<Real>(n.value.shape());
        return n.grad;
    }

    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    // Propagates d(root)/d(node) to every node and adds the result into
    // each reachable parameter's grad buffer.
    void backward(Var<Real> root) {
        if (!grad_enabled_) throw usage_error("backward() on a tape with gradients disabled");
        if (root.value().size() != 1)
            throw usage_error("backward() needs a scalar root, got shape " + shape_string(root.shape()));
        if (!nodes_[root.id()].requires_grad) return;
        grad(root.id())[0] = Real(1);
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
            if (n.param) {
                auto& dst = n.param->grad.storage();
                const auto& src = n.grad.storage();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }
    }

    // Adds `delta` into the gradient of `id` if that node needs one.
    void accumulate(std::size_t id, const BasicTensor<Real>& delta) {
        if (!nodes_[id].requires_grad) return;
        auto& g = grad(id).storage();
        const auto& d = delta.storage();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += d[k];
    }

private:
    struct Node {
        BasicTensor<Real> value;
        BasicTensor<Real> grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        Parameter<Real>* param = nullptr;
    };

    bool grad_enabled_;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter<Real>*, std::size_t> param_nodes_;
};

}  // namespace poar
