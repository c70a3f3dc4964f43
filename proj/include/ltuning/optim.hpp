#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ltuning/tensor.hpp"

namespace ltuning {

template <class T>
struct NamedParam {
    std::string name;
    TensorPtrT<T> tensor;
};

template <class T>
struct AdamHyperparams {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T epsilon = T(1e-8);
};

// Adam with bias correction. Moment buffers start at zero, the step counter
// at zero; step() applies one update from the accumulated gradients and then
// zeroes them.
template <class T>
class AdamT {
public:
    AdamT(std::vector<NamedParam<T>> params, AdamHyperparams<T> hp = {})
        : params_(std::move(params)), hp_(hp) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor->data.size(), T(0));
            v_.emplace_back(p.tensor->data.size(), T(0));
        }
    }

    void step() {
        for (const auto& p : params_) {
            if (!p.tensor->requires_grad || p.tensor->grad.size() != p.tensor->data.size()) {
                throw TrainError("adam_step: parameter '" + p.name + "' has no gradient");
            }
        }
        ++t_;
        const T bc1 = T(1) - std::pow(hp_.beta1, T(t_));
        const T bc2 = T(1) - std::pow(hp_.beta2, T(t_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& t = *params_[pi].tensor;
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < t.data.size(); ++i) {
                const T g = t.grad[i];
                m[i] = hp_.beta1 * m[i] + (T(1) - hp_.beta1) * g;
                v[i] = hp_.beta2 * v[i] + (T(1) - hp_.beta2) * g * g;
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                t.data[i] -= hp_.lr * mhat / (std::sqrt(vhat) + hp_.epsilon);
            }
            t.zero_grad();
        }
    }

    std::int64_t step_count() const { return t_; }
    const std::vector<NamedParam<T>>& params() const { return params_; }

private:
    std::vector<NamedParam<T>> params_;
    AdamHyperparams<T> hp_;
    std::vector<std::vector<T>> m_, v_;
    std::int64_t t_ = 0;
};

using Adam = AdamT<float>;

// Plain SGD step; zeroes gradients afterwards like the Adam step does.
template <class T>
void sgd_step(const std::vector<NamedParam<T>>& params, T lr) {
    for (const auto& p : params) {
        if (!p.tensor->requires_grad || p.tensor->grad.size() != p.tensor->data.size()) {
            throw TrainError("sgd_step: parameter '" + p.name + "' has no gradient");
        }
        for (std::size_t i = 0; i < p.tensor->data.size(); ++i) {
            p.tensor->data[i] -= lr * p.tensor->grad[i];
        }
        p.tensor->zero_grad();
    }
}

}  // namespace ltuning
