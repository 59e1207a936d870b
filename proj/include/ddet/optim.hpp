#pragma once

#include "ddet/params.hpp"

#include <cmath>
#include <vector>

namespace ddet {

// SGD with classic momentum and decoupled-from-schedule weight decay:
//   v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v
template <typename T>
struct SGD {
    double momentum = 0.937;
    double weight_decay = 0.0005;
    std::vector<Tensor<T>> velocity;

    void step(ParamRegistry<T>& reg, double lr) {
        if (velocity.empty()) {
            velocity.reserve(reg.params.size());
            for (const auto& p : reg.params) velocity.emplace_back(p.var->value.shape);
        }
        for (size_t pi = 0; pi < reg.params.size(); ++pi) {
            auto& p = reg.params[pi];
            if (p.var->grad.data.empty()) continue; // never touched by backward
            auto& v = velocity[pi];
            auto& w = p.var->value;
            const auto& g = p.var->grad;
            for (size_t i = 0; i < w.numel(); ++i) {
                v[i] = static_cast<T>(momentum) * v[i] + g[i] + static_cast<T>(weight_decay) * w[i];
                w[i] -= static_cast<T>(lr) * v[i];
            }
        }
    }
};

// Cosine decay from lr_init (epoch 0) to lr_min (last epoch).
inline double cosine_lr(int epoch, int total_epochs, double lr_init, double lr_min) {
    if (total_epochs <= 1) return lr_init;
    const double t = static_cast<double>(epoch) / (total_epochs - 1);
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(t * 3.14159265358979323846));
}

} // namespace ddet
