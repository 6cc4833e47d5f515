#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "m2s/nn.hpp"

namespace m2s {

template <typename T>
void zero_grads(ParamRefs<T>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
void require_grad_present(const NamedParam<T>& p) {
    if (!p.tensor.has_grad()) {
        throw ValidationError("optimizer: missing gradient for parameter '" + p.name + "'");
    }
}

// AdamW with decoupled weight decay.
template <typename T>
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamRefs<T>& params) {
        ++t_;
        const T bc1 = static_cast<T>(1.0 - std::pow(beta1_, t_));
        const T bc2 = static_cast<T>(1.0 - std::pow(beta2_, t_));
        for (auto& p : params) {
            require_grad_present(p);
            auto& state = state_[p.name];
            auto& v = p.tensor.mutable_value();
            const auto& g = p.tensor.grad();
            if (state.m.empty()) {
                state.m.assign(v.size(), T(0));
                state.v.assign(v.size(), T(0));
            }
            const T lr = static_cast<T>(lr_);
            const T b1 = static_cast<T>(beta1_);
            const T b2 = static_cast<T>(beta2_);
            const T eps = static_cast<T>(eps_);
            const T decay = static_cast<T>(1.0 - lr_ * wd_);
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] *= decay;
                state.m[i] = b1 * state.m[i] + (T(1) - b1) * g[i];
                state.v[i] = b2 * state.v[i] + (T(1) - b2) * g[i] * g[i];
                const T mhat = state.m[i] / bc1;
                const T vhat = state.v[i] / bc2;
                v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

private:
    struct State {
        std::vector<T> m, v;
    };
    double lr_, wd_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, State> state_;
};

// Classical momentum: v <- m*v + (g + wd*p); p <- p - lr*v.
template <typename T>
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum, double weight_decay)
        : lr_(lr), momentum_(momentum), wd_(weight_decay) {}

    void step(ParamRefs<T>& params) {
        for (auto& p : params) {
            require_grad_present(p);
            auto& vel = velocity_[p.name];
            auto& v = p.tensor.mutable_value();
            const auto& g = p.tensor.grad();
            if (vel.empty()) vel.assign(v.size(), T(0));
            const T lr = static_cast<T>(lr_);
            const T mom = static_cast<T>(momentum_);
            const T wd = static_cast<T>(wd_);
            for (std::size_t i = 0; i < v.size(); ++i) {
                vel[i] = mom * vel[i] + (g[i] + wd * v[i]);
                v[i] -= lr * vel[i];
            }
        }
    }

    const std::vector<T>* velocity(const std::string& name) const {
        auto it = velocity_.find(name);
        return it == velocity_.end() ? nullptr : &it->second;
    }

private:
    double lr_, momentum_, wd_;
    std::map<std::string, std::vector<T>> velocity_;
};

}  // namespace m2s
