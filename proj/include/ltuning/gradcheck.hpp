#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ltuning/optim.hpp"
#include "ltuning/tensor.hpp"

namespace ltuning {

// Central finite-difference verification of reverse-mode gradients.
// Instantiate with T = double for the high-precision mode used by the
// acceptance checks; the f32 instantiation exists but has far less headroom.
template <class T>
struct GradCheckReport {
    struct Group {
        std::string name;
        T max_rel_err;
    };
    std::vector<Group> groups;
    T max_rel_err = T(0);

    bool pass(T tol) const { return max_rel_err < tol; }
};

// `loss_fn` must rebuild the scalar loss from the current parameter values on
// the tape it is given, deterministically. Relative error per coordinate is
// |fd - analytic| / max(|fd|, |analytic|, 1e-8).
template <class T>
GradCheckReport<T> finite_diff_check(const std::function<TensorPtrT<T>(TapeT<T>&)>& loss_fn,
                                     const std::vector<NamedParam<T>>& params, T step) {
    if (!(step > T(0))) {
        throw ConfigError("finite_diff_check: step must be positive");
    }
    auto eval = [&]() -> T {
        TapeT<T> tape;
        auto loss = loss_fn(tape);
        if (loss->numel() != 1) {
            throw ShapeError("finite_diff_check: loss must be scalar, got " + shape_str(loss->shape));
        }
        const T v = loss->data[0];
        if (!std::isfinite(v)) {
            throw TrainError("finite_diff_check: non-finite loss value");
        }
        return v;
    };

    // Analytic gradients at the current point.
    for (const auto& p : params) p.tensor->zero_grad();
    std::vector<std::vector<T>> analytic;
    {
        TapeT<T> tape;
        auto loss = loss_fn(tape);
        if (!std::isfinite(loss->data[0])) {
            throw TrainError("finite_diff_check: non-finite loss value");
        }
        tape.backward(loss);
        for (const auto& p : params) analytic.push_back(p.tensor->grad);
    }

    GradCheckReport<T> report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& tensor = *params[pi].tensor;
        T group_max = T(0);
        for (std::size_t i = 0; i < tensor.data.size(); ++i) {
            const T saved = tensor.data[i];
            tensor.data[i] = saved + step;
            const T fp = eval();
            tensor.data[i] = saved - step;
            const T fm = eval();
            tensor.data[i] = saved;
            const T fd = (fp - fm) / (T(2) * step);
            const T an = analytic[pi][i];
            const T denom = std::max({std::abs(fd), std::abs(an), T(1e-8)});
            group_max = std::max(group_max, std::abs(fd - an) / denom);
        }
        report.groups.push_back({params[pi].name, group_max});
        report.max_rel_err = std::max(report.max_rel_err, group_max);
    }
    for (const auto& p : params) p.tensor->zero_grad();
    return report;
}

}  // namespace ltuning
