#pragma once

#include "ddet/autodiff.hpp"
#include "ddet/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace ddet {

// A named trainable parameter plus its non-trainable companions (batchnorm
// running stats are registered as buffers so checkpoints capture them).
template <typename T>
struct NamedParam {
    std::string name;
    Var<T> var;
};

template <typename T>
struct NamedBuffer {
    std::string name;
    Tensor<T>* tensor; // owned by the block
};

template <typename T>
struct ParamRegistry {
    std::vector<NamedParam<T>> params;
    std::vector<NamedBuffer<T>> buffers;

    Var<T> add(const std::string& name, Tensor<T> init) {
        auto v = make_var<T>(std::move(init), true);
        params.push_back({name, v});
        return v;
    }
    void add_buffer(const std::string& name, Tensor<T>* t) { buffers.push_back({name, t}); }

    size_t count() const {
        size_t n = 0;
        for (const auto& p : params) n += p.var->value.numel();
        return n;
    }
    void zero_grad() {
        for (auto& p : params)
            if (!p.var->grad.data.empty()) p.var->grad.fill(T(0));
    }
};

// Kaiming-uniform fan-in init, the usual choice for conv weights feeding
// piecewise-linear-ish activations.
template <typename T>
Tensor<T> kaiming_uniform(const std::vector<int>& shape, size_t fan_in, Rng& rng) {
    Tensor<T> t(shape);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
Tensor<T> zeros(const std::vector<int>& shape) {
    return Tensor<T>(shape);
}

template <typename T>
Tensor<T> ones(const std::vector<int>& shape) {
    Tensor<T> t(shape);
    t.fill(T(1));
    return t;
}

template <typename T>
Tensor<T> full(const std::vector<int>& shape, T v) {
    Tensor<T> t(shape);
    t.fill(v);
    return t;
}

} // namespace ddet
