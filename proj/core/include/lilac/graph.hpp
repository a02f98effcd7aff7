#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lilac/tensor.hpp"

namespace lilac {

/// A named trainable (or frozen) value with a gradient accumulator and
/// lazily-allocated Adam moments.
struct Parameter {
    std::string id;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    // Optimizer state, owned here so per-task parameter copies carry their
    // own moments.
    Tensor adam_m;
    Tensor adam_v;
    long adam_steps = 0;

    Parameter() = default;
    Parameter(std::string id_, Tensor v) : id(std::move(id_)), value(std::move(v)) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { grad.fill(0.0f); }
};

using ParamPtr = std::shared_ptr<Parameter>;

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    int idx = -1;
};

/// Tape of executed primitives in topological (creation) order. Each node
/// holds its forward value, a gradient buffer, and a backward closure.
class Graph {
  public:
    struct Node {
        Tensor val;
        Tensor grad;           // allocated lazily
        bool grad_alloc = false;
        std::function<void(Graph&)> back;  // empty for leaves/constants
        ParamPtr param;                    // set for parameter leaves
    };

    Var constant(Tensor t) {
        nodes_.push_back(Node{std::move(t), {}, false, {}, nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var leaf(const ParamPtr& p) {
        nodes_.push_back(Node{p->value, {}, false, {}, p});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var make(Tensor val, std::function<void(Graph&)> back) {
        nodes_.push_back(Node{std::move(val), {}, false, std::move(back), nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].val; }

    Tensor& grad(Var v) {
        Node& n = nodes_[static_cast<std::size_t>(v.idx)];
        if (!n.grad_alloc) {
            n.grad = Tensor::zeros(n.val.shape);
            n.grad_alloc = true;
        }
        return n.grad;
    }

    /// Reverse sweep from a scalar loss. Gradients of trainable parameter
    /// leaves accumulate (sum) into Parameter::grad; frozen parameters are
    /// left untouched.
    void backward(Var loss) {
        if (val(loss).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        grad(loss).at(0) = 1.0f;
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.grad_alloc) continue;  // nothing flowed here
            if (n.back) n.back(*this);
            if (n.param && n.param->trainable) {
                Tensor& pg = n.param->grad;
                for (std::int64_t k = 0; k < pg.numel(); ++k) pg.data[static_cast<std::size_t>(k)] += n.grad.data[static_cast<std::size_t>(k)];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    std::vector<Node> nodes_;
};

}  // namespace lilac
