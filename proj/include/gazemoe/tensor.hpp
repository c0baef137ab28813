#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gazemoe/errors.hpp"
#include "gazemoe/rng.hpp"

namespace gazemoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Thread-local switch consulted by every op before recording onto the tape.
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set_enabled(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool f = true;
        return f;
    }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad; // empty until the first accumulation
    bool requires_grad = false;

    std::size_t numel() const { return value.size(); }

    std::vector<S>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
        return grad;
    }
};

// Dense row-major tensor; value semantics over a shared node so ops can hold
// cheap references to their operands on the tape.
template <class S>
class Tensor {
public:
    using scalar_type = S;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(shape_numel(t.node_->shape), S(0));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.node_->value) x = v;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, S stddev, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& x : t.node_->value) x = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t extent(std::size_t axis) const { return node_->shape[axis]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }
    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }
    S item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    std::vector<S>& grad_buffer() { return node_->grad_buffer(); }
    const std::vector<S>& grad() const {
        if (!has_grad()) throw ContractError("grad: no gradient has been accumulated");
        return node_->grad;
    }
    void zero_grad() {
        if (node_ && !node_->grad.empty()) node_->grad.assign(node_->value.size(), S(0));
    }

    std::shared_ptr<TensorNode<S>> node() const { return node_; }

private:
    std::shared_ptr<TensorNode<S>> node_;
};

// Ordered record of differentiable primitives for one forward pass.  Entries
// are appended in execution order, so inputs always precede the ops that use
// them; backward() walks the record in reverse and frees it.
template <class S>
class Tape {
public:
    struct Entry {
        std::shared_ptr<TensorNode<S>> output;
        std::function<void()> pull; // accumulate output->grad into input grads
    };

    static Tape& active() {
        thread_local Tape t;
        return t;
    }

    void record(std::shared_ptr<TensorNode<S>> output, std::function<void()> pull) {
        entries_.push_back(Entry{std::move(output), std::move(pull)});
    }

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    // Propagates from `loss` through every recorded op whose output is on the
    // path.  The tape is freed afterwards; leaf gradients are kept and keep
    // accumulating across forward/backward rounds until zero_grad.
    void backward_from(Tensor<S>& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        loss.grad_buffer()[0] += S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (!it->output->grad.empty()) it->pull();
        }
        clear();
    }

private:
    std::vector<Entry> entries_;
};

template <class S>
void backward(Tensor<S> loss) {
    Tape<S>::active().backward_from(loss);
}

// True when the op about to run should register a backward closure.
template <class S>
inline bool grad_wanted(const Tensor<S>& a) {
    return GradMode::enabled() && a.requires_grad();
}

template <class S>
inline bool grad_wanted(const Tensor<S>& a, const Tensor<S>& b) {
    return GradMode::enabled() && (a.requires_grad() || b.requires_grad());
}

template <class S>
inline bool grad_wanted(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& c) {
    return GradMode::enabled() && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

} // namespace gazemoe
