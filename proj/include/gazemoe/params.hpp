#pragma once

#include <string>
#include <vector>

#include "gazemoe/rng.hpp"
#include "gazemoe/tensor.hpp"

namespace gazemoe {

// Named parameter store. Registration order is stable and defines both the
// init RNG consumption order and the checkpoint tensor order.
template <class S>
class Params {
public:
    struct Item {
        std::string name;
        Tensor<S> tensor;
        bool trainable;
    };

    Tensor<S> add_randn(const std::string& name, Shape shape, Rng& rng, double stddev,
                        bool trainable = true) {
        Tensor<S> t = Tensor<S>::randn(std::move(shape), rng, static_cast<S>(stddev));
        return add(name, t, trainable);
    }

    Tensor<S> add_full(const std::string& name, Shape shape, S value, bool trainable = true) {
        Tensor<S> t = Tensor<S>::full(std::move(shape), value);
        return add(name, t, trainable);
    }

    Tensor<S> add(const std::string& name, Tensor<S> t, bool trainable = true) {
        for (const auto& it : items_)
            if (it.name == name) throw ContractError("params: duplicate name '" + name + "'");
        t.set_requires_grad(trainable);
        items_.push_back({name, t, trainable});
        return t;
    }

    const std::vector<Item>& items() const { return items_; }

    Tensor<S> find(const std::string& name) const {
        for (const auto& it : items_)
            if (it.name == name) return it.tensor;
        throw ContractError("params: no parameter named '" + name + "'");
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& it : items_)
            if (it.trainable) n += it.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& it : items_) it.tensor.zero_grad();
    }

private:
    std::vector<Item> items_;
};

} // namespace gazemoe
