#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ltuning/errors.hpp"

namespace ltuning {

using shape_t = std::vector<std::int64_t>;

inline std::string shape_str(const shape_t& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::int64_t shape_numel(const shape_t& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

// Additive mask value standing in for -inf: finite in f32, but exp() of it
// underflows to exactly zero after max subtraction.
inline constexpr double kMaskedScore = -1e30;

// Dense row-major tensor. `grad` is allocated iff `requires_grad`; gradient
// accumulation is additive and callers zero it explicitly (the Adam step
// zeroes parameter gradients after applying them).
template <class T>
class TensorT {
public:
    shape_t shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;

    TensorT() = default;
    TensorT(shape_t s, bool rg) : shape(std::move(s)), requires_grad(rg) {
        data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
        if (requires_grad) grad.assign(data.size(), T(0));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::size_t ndim() const { return shape.size(); }
    std::int64_t dim(std::size_t i) const { return shape[i]; }

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (rg) {
            grad.assign(data.size(), T(0));
        } else {
            grad.clear();
        }
    }
};

template <class T>
using TensorPtrT = std::shared_ptr<TensorT<T>>;

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;

template <class T>
TensorPtrT<T> make_tensor(shape_t shape, bool requires_grad = false) {
    return std::make_shared<TensorT<T>>(std::move(shape), requires_grad);
}

template <class T>
TensorPtrT<T> tensor_from(shape_t shape, std::vector<T> values, bool requires_grad = false) {
    auto t = make_tensor<T>(std::move(shape), requires_grad);
    if (static_cast<std::int64_t>(values.size()) != t->numel()) {
        throw ShapeError("tensor_from: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(t->shape));
    }
    t->data = std::move(values);
    return t;
}

// Copy of a tensor's values with no gradient tracking; used to freeze
// per-label caches at evaluation time.
template <class T>
TensorPtrT<T> detach(const TensorPtrT<T>& x) {
    auto t = make_tensor<T>(x->shape, false);
    t->data = x->data;
    return t;
}

// Records executed operations so a reverse pass can replay them backwards.
// Each backward() call first clears the gradients of every tensor this tape
// produced, then seeds the (scalar) root with 1 and walks the records in
// exact reverse execution order. Tensors the tape did not produce (leaves:
// parameters and constants) are never cleared here, so repeated backward()
// calls accumulate one full gradient contribution per call.
template <class T>
class TapeT {
public:
    void record(TensorPtrT<T> out, std::function<void()> backward_fn) {
        entries_.push_back(Entry{std::move(out), std::move(backward_fn)});
    }

    void backward(const TensorPtrT<T>& root) {
        if (root->numel() != 1) {
            throw ShapeError("backward: root must be scalar, got " + shape_str(root->shape));
        }
        if (!root->requires_grad) {
            throw TrainError("backward: root does not require gradients");
        }
        for (auto& e : entries_) {
            e.out->zero_grad();
        }
        root->grad[0] += T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->fn();
        }
    }

    std::size_t size() const { return entries_.size(); }

private:
    struct Entry {
        TensorPtrT<T> out;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
};

using Tape = TapeT<float>;

namespace detail {

// c[p,r] += a[p,q] * b[q,r], ikj order so the inner loop runs over
// contiguous rows of b and c.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::int64_t p, std::int64_t q, std::int64_t r) {
    for (std::int64_t i = 0; i < p; ++i) {
        const T* arow = a + i * q;
        T* crow = c + i * r;
        for (std::int64_t k = 0; k < q; ++k) {
            const T av = arow[k];
            const T* brow = b + k * r;
            for (std::int64_t j = 0; j < r; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c[p,r] += a[p,q] * b[r,q]^T
template <class T>
void gemm_bt_acc(const T* a, const T* b, T* c, std::int64_t p, std::int64_t q, std::int64_t r) {
    for (std::int64_t i = 0; i < p; ++i) {
        const T* arow = a + i * q;
        T* crow = c + i * r;
        for (std::int64_t j = 0; j < r; ++j) {
            const T* brow = b + j * q;
            T acc = T(0);
            for (std::int64_t k = 0; k < q; ++k) {
                acc += arow[k] * brow[k];
            }
            crow[j] += acc;
        }
    }
}

// c[q,r] += a[p,q]^T * b[p,r]
template <class T>
void gemm_at_acc(const T* a, const T* b, T* c, std::int64_t p, std::int64_t q, std::int64_t r) {
    for (std::int64_t i = 0; i < p; ++i) {
        const T* arow = a + i * q;
        const T* brow = b + i * r;
        for (std::int64_t k = 0; k < q; ++k) {
            const T av = arow[k];
            T* crow = c + k * r;
            for (std::int64_t j = 0; j < r; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: a[..,p,q] * b[..,q,r] -> [..,p,r]
// Rank combinations: 2Dx2D, 3Dx3D with equal batch, 3Dx2D (b shared across
// the batch). Gradients: da = g*b^T, db = a^T*g (summed over the batch when
// b is shared).
// ---------------------------------------------------------------------------
template <class T>
TensorPtrT<T> matmul(TapeT<T>& tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    const auto& sa = a->shape;
    const auto& sb = b->shape;
    auto fail = [&]() -> void {
        throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    };
    if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3) fail();
    if (sb.size() == 3 && sa.size() == 2) fail();

    const std::int64_t batch = (sa.size() == 3) ? sa[0] : 1;
    const std::int64_t p = sa[sa.size() - 2];
    const std::int64_t q = sa[sa.size() - 1];
    const std::int64_t r = sb[sb.size() - 1];
    if (sb[sb.size() - 2] != q) fail();
    const bool b_batched = (sb.size() == 3);
    if (b_batched && sb[0] != batch) fail();

    shape_t out_shape = (sa.size() == 3) ? shape_t{batch, p, r} : shape_t{p, r};
    const bool ng = a->requires_grad || b->requires_grad;
    auto out = make_tensor<T>(std::move(out_shape), ng);
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        detail::gemm_acc(a->data.data() + bi * p * q,
                         b->data.data() + (b_batched ? bi * q * r : 0),
                         out->data.data() + bi * p * r, p, q, r);
    }
    if (ng) {
        tape.record(out, [a, b, out, batch, p, q, r, b_batched] {
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                const T* g = out->grad.data() + bi * p * r;
                const std::int64_t b_off = b_batched ? bi * q * r : 0;
                if (a->requires_grad) {
                    detail::gemm_bt_acc(g, b->data.data() + b_off,
                                        a->grad.data() + bi * p * q, p, r, q);
                }
                if (b->requires_grad) {
                    detail::gemm_at_acc(a->data.data() + bi * p * q, g,
                                        b->grad.data() + b_off, p, q, r);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
TensorPtrT<T> add(TapeT<T>& tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (a->shape != b->shape) {
        throw ShapeError("add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    const bool ng = a->requires_grad || b->requires_grad;
    auto out = make_tensor<T>(a->shape, ng);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (ng) {
        tape.record(out, [a, b, out] {
            if (a->requires_grad) {
                for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

template <class T>
TensorPtrT<T> mul(TapeT<T>& tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (a->shape != b->shape) {
        throw ShapeError("mul: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    const bool ng = a->requires_grad || b->requires_grad;
    auto out = make_tensor<T>(a->shape, ng);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (ng) {
        tape.record(out, [a, b, out] {
            if (a->requires_grad) {
                for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
            }
        });
    }
    return out;
}

template <class T>
TensorPtrT<T> scale(TapeT<T>& tape, const TensorPtrT<T>& a, T c) {
    const bool ng = a->requires_grad;
    auto out = make_tensor<T>(a->shape, ng);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * c;
    if (ng) {
        tape.record(out, [a, out, c] {
            for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

// GELU (exact erf form).
template <class T>
TensorPtrT<T> gelu(TapeT<T>& tape, const TensorPtrT<T>& x) {
    const bool ng = x->requires_grad;
    auto out = make_tensor<T>(x->shape, ng);
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const T v = x->data[i];
        out->data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    if (ng) {
        tape.record(out, [x, out] {
            constexpr T is2 = T(0.70710678118654752440);
            constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
            for (std::size_t i = 0; i < out->grad.size(); ++i) {
                const T v = x->data[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * is2));
                const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                x->grad[i] += out->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax over the last dimension, with max subtraction. Rows sum to 1.
// ---------------------------------------------------------------------------
template <class T>
TensorPtrT<T> softmax_lastdim(TapeT<T>& tape, const TensorPtrT<T>& x) {
    if (x->ndim() == 0 || x->shape.back() < 1) {
        throw ShapeError("softmax_lastdim: last extent must be >= 1, got " + shape_str(x->shape));
    }
    const std::int64_t cols = x->shape.back();
    const std::int64_t rows = x->numel() / cols;
    const bool ng = x->requires_grad;
    auto out = make_tensor<T>(x->shape, ng);
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* xr = x->data.data() + i * cols;
        T* yr = out->data.data() + i * cols;
        T mx = xr[0];
        for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < cols; ++j) yr[j] *= inv;
    }
    if (ng) {
        tape.record(out, [x, out, rows, cols] {
            for (std::int64_t i = 0; i < rows; ++i) {
                const T* p = out->data.data() + i * cols;
                const T* g = out->grad.data() + i * cols;
                T dot = T(0);
                for (std::int64_t j = 0; j < cols; ++j) dot += g[j] * p[j];
                T* gx = x->grad.data() + i * cols;
                for (std::int64_t j = 0; j < cols; ++j) gx[j] += p[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer_norm over the last dimension: per-row standardization then affine.
// Variance epsilon sits inside the square root.
// ---------------------------------------------------------------------------
template <class T>
TensorPtrT<T> layer_norm(TapeT<T>& tape, const TensorPtrT<T>& x, const TensorPtrT<T>& gain,
                         const TensorPtrT<T>& bias) {
    const std::int64_t d = x->shape.back();
    if (gain->numel() != d || bias->numel() != d) {
        throw ShapeError("layer_norm: gain/bias extent must match " + std::to_string(d));
    }
    const std::int64_t rows = x->numel() / d;
    constexpr T eps = T(1e-5);
    const bool ng = x->requires_grad || gain->requires_grad || bias->requires_grad;
    auto out = make_tensor<T>(x->shape, ng);
    // Normalized rows are recomputed in backward from saved statistics.
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    auto means = std::make_shared<std::vector<T>>(rows);
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* xr = x->data.data() + i * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= T(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const T c = xr[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*means)[i] = mean;
        (*inv_std)[i] = is;
        T* yr = out->data.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) {
            yr[j] = gain->data[j] * ((xr[j] - mean) * is) + bias->data[j];
        }
    }
    if (ng) {
        tape.record(out, [x, gain, bias, out, means, inv_std, rows, d] {
            for (std::int64_t i = 0; i < rows; ++i) {
                const T* xr = x->data.data() + i * d;
                const T* g = out->grad.data() + i * d;
                const T mean = (*means)[i];
                const T is = (*inv_std)[i];
                if (gain->requires_grad || bias->requires_grad) {
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T xhat = (xr[j] - mean) * is;
                        if (gain->requires_grad) gain->grad[j] += g[j] * xhat;
                        if (bias->requires_grad) bias->grad[j] += g[j];
                    }
                }
                if (x->requires_grad) {
                    // dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    T sum_dxhat = T(0);
                    T sum_dxhat_xhat = T(0);
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T xhat = (xr[j] - mean) * is;
                        const T dxhat = g[j] * gain->data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const T m1 = sum_dxhat / T(d);
                    const T m2 = sum_dxhat_xhat / T(d);
                    T* gx = x->grad.data() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T xhat = (xr[j] - mean) * is;
                        const T dxhat = g[j] * gain->data[j];
                        gx[j] += is * (dxhat - m1 - xhat * m2);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row concatenation and slicing (2D)
// ---------------------------------------------------------------------------

template <class T>
TensorPtrT<T> concat_rows(TapeT<T>& tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (a->ndim() != 2 || b->ndim() != 2 || a->shape[1] != b->shape[1]) {
        throw ShapeError("concat_rows: trailing extents differ, " + shape_str(a->shape) +
                         " vs " + shape_str(b->shape));
    }
    const std::int64_t d = a->shape[1];
    const std::int64_t pa = a->shape[0];
    const std::int64_t pb = b->shape[0];
    const bool ng = a->requires_grad || b->requires_grad;
    auto out = make_tensor<T>({pa + pb, d}, ng);
    std::copy(a->data.begin(), a->data.end(), out->data.begin());
    std::copy(b->data.begin(), b->data.end(), out->data.begin() + pa * d);
    if (ng) {
        tape.record(out, [a, b, out, pa, pb, d] {
            if (a->requires_grad) {
                for (std::int64_t i = 0; i < pa * d; ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                for (std::int64_t i = 0; i < pb * d; ++i) b->grad[i] += out->grad[pa * d + i];
            }
        });
    }
    return out;
}

// Variadic row stacking; used to assemble per-item logit vectors into a
// batch. Rank-1 inputs count as single rows.
template <class T>
TensorPtrT<T> stack_rows(TapeT<T>& tape, const std::vector<TensorPtrT<T>>& parts) {
    if (parts.empty()) throw ShapeError("stack_rows: no inputs");
    const std::int64_t d = parts[0]->shape.back();
    std::int64_t rows = 0;
    bool ng = false;
    for (const auto& p : parts) {
        const bool ok = (p->ndim() == 2 && p->shape[1] == d) || (p->ndim() == 1 && p->shape[0] == d);
        if (!ok) {
            throw ShapeError("stack_rows: trailing extents differ, " + shape_str(parts[0]->shape) +
                             " vs " + shape_str(p->shape));
        }
        rows += (p->ndim() == 2) ? p->shape[0] : 1;
        ng = ng || p->requires_grad;
    }
    auto out = make_tensor<T>({rows, d}, ng);
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + off);
        off += p->numel();
    }
    if (ng) {
        tape.record(out, [parts, out] {
            std::int64_t off2 = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) {
                    for (std::int64_t i = 0; i < p->numel(); ++i) p->grad[i] += out->grad[off2 + i];
                }
                off2 += p->numel();
            }
        });
    }
    return out;
}

template <class T>
TensorPtrT<T> slice_rows(TapeT<T>& tape, const TensorPtrT<T>& x, std::int64_t begin, std::int64_t end) {
    if (x->ndim() != 2 || begin < 0 || end < begin || end > x->shape[0]) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x->shape));
    }
    const std::int64_t d = x->shape[1];
    const bool ng = x->requires_grad;
    auto out = make_tensor<T>({end - begin, d}, ng);
    std::copy(x->data.begin() + begin * d, x->data.begin() + end * d, out->data.begin());
    if (ng) {
        tape.record(out, [x, out, begin, d] {
            for (std::int64_t i = 0; i < out->numel(); ++i) x->grad[begin * d + i] += out->grad[i];
        });
    }
    return out;
}

template <class T>
TensorPtrT<T> take_row(TapeT<T>& tape, const TensorPtrT<T>& x, std::int64_t row) {
    return slice_rows(tape, x, row, row + 1);
}

// Concatenation along the middle dimension of two 3D tensors; this is how
// prefix key/value blocks are prepended to per-head token keys/values.
template <class T>
TensorPtrT<T> concat_dim1(TapeT<T>& tape, const TensorPtrT<T>& a, const TensorPtrT<T>& b) {
    if (a->ndim() != 3 || b->ndim() != 3 || a->shape[0] != b->shape[0] || a->shape[2] != b->shape[2]) {
        throw ShapeError("concat_dim1: incompatible shapes " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    const std::int64_t B = a->shape[0], pa = a->shape[1], pb = b->shape[1], d = a->shape[2];
    const bool ng = a->requires_grad || b->requires_grad;
    auto out = make_tensor<T>({B, pa + pb, d}, ng);
    for (std::int64_t bi = 0; bi < B; ++bi) {
        std::copy(a->data.begin() + bi * pa * d, a->data.begin() + (bi + 1) * pa * d,
                  out->data.begin() + bi * (pa + pb) * d);
        std::copy(b->data.begin() + bi * pb * d, b->data.begin() + (bi + 1) * pb * d,
                  out->data.begin() + bi * (pa + pb) * d + pa * d);
    }
    if (ng) {
        tape.record(out, [a, b, out, B, pa, pb, d] {
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const T* g = out->grad.data() + bi * (pa + pb) * d;
                if (a->requires_grad) {
                    T* ga = a->grad.data() + bi * pa * d;
                    for (std::int64_t i = 0; i < pa * d; ++i) ga[i] += g[i];
                }
                if (b->requires_grad) {
                    T* gb = b->grad.data() + bi * pb * d;
                    for (std::int64_t i = 0; i < pb * d; ++i) gb[i] += g[pa * d + i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
TensorPtrT<T> reshape(TapeT<T>& tape, const TensorPtrT<T>& x, shape_t new_shape) {
    if (shape_numel(new_shape) != x->numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(new_shape));
    }
    const bool ng = x->requires_grad;
    auto out = make_tensor<T>(std::move(new_shape), ng);
    out->data = x->data;
    if (ng) {
        tape.record(out, [x, out] {
            for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

// [a,b,c] -> [b,a,c]
template <class T>
TensorPtrT<T> permute102(TapeT<T>& tape, const TensorPtrT<T>& x) {
    if (x->ndim() != 3) throw ShapeError("permute102: need rank 3, got " + shape_str(x->shape));
    const std::int64_t A = x->shape[0], B = x->shape[1], C = x->shape[2];
    const bool ng = x->requires_grad;
    auto out = make_tensor<T>({B, A, C}, ng);
    for (std::int64_t i = 0; i < A; ++i) {
        for (std::int64_t j = 0; j < B; ++j) {
            std::copy(x->data.begin() + (i * B + j) * C, x->data.begin() + (i * B + j + 1) * C,
                      out->data.begin() + (j * A + i) * C);
        }
    }
    if (ng) {
        tape.record(out, [x, out, A, B, C] {
            for (std::int64_t i = 0; i < A; ++i) {
                for (std::int64_t j = 0; j < B; ++j) {
                    const T* g = out->grad.data() + (j * A + i) * C;
                    T* gx = x->grad.data() + (i * B + j) * C;
                    for (std::int64_t k = 0; k < C; ++k) gx[k] += g[k];
                }
            }
        });
    }
    return out;
}

// [a,b,c] -> [a,c,b]
template <class T>
TensorPtrT<T> permute021(TapeT<T>& tape, const TensorPtrT<T>& x) {
    if (x->ndim() != 3) throw ShapeError("permute021: need rank 3, got " + shape_str(x->shape));
    const std::int64_t A = x->shape[0], B = x->shape[1], C = x->shape[2];
    const bool ng = x->requires_grad;
    auto out = make_tensor<T>({A, C, B}, ng);
    for (std::int64_t i = 0; i < A; ++i) {
        const T* xi = x->data.data() + i * B * C;
        T* yi = out->data.data() + i * B * C;
        for (std::int64_t j = 0; j < B; ++j) {
            for (std::int64_t k = 0; k < C; ++k) {
                yi[k * B + j] = xi[j * C + k];
            }
        }
    }
    if (ng) {
        tape.record(out, [x, out, A, B, C] {
            for (std::int64_t i = 0; i < A; ++i) {
                const T* gi = out->grad.data() + i * B * C;
                T* gx = x->grad.data() + i * B * C;
                for (std::int64_t j = 0; j < B; ++j) {
                    for (std::int64_t k = 0; k < C; ++k) {
                        gx[j * C + k] += gi[k * B + j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding_gather: rows of `table` selected by id. Gradient scatter-adds
// into the table (skipped entirely when the table is frozen).
// ---------------------------------------------------------------------------
template <class T>
TensorPtrT<T> embedding_gather(TapeT<T>& tape, const TensorPtrT<T>& table,
                               const std::vector<int>& ids) {
    if (table->ndim() != 2) {
        throw ShapeError("embedding_gather: table must be rank 2, got " + shape_str(table->shape));
    }
    const std::int64_t V = table->shape[0];
    const std::int64_t d = table->shape[1];
    for (int id : ids) {
        if (id < 0 || id >= V) {
            throw VocabError("embedding_gather: id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(V));
        }
    }
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    const bool ng = table->requires_grad;
    auto out = make_tensor<T>({n, d}, ng);
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy(table->data.begin() + ids[i] * d, table->data.begin() + (ids[i] + 1) * d,
                  out->data.begin() + i * d);
    }
    if (ng) {
        tape.record(out, [table, out, ids, d, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                const T* g = out->grad.data() + i * d;
                T* gt = table->grad.data() + ids[i] * d;
                for (std::int64_t j = 0; j < d; ++j) gt[j] += g[j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class T>
TensorPtrT<T> sum_all(TapeT<T>& tape, const TensorPtrT<T>& x) {
    const bool ng = x->requires_grad;
    auto out = make_tensor<T>({1}, ng);
    T acc = T(0);
    for (T v : x->data) acc += v;
    out->data[0] = acc;
    if (ng) {
        tape.record(out, [x, out] {
            const T g = out->grad[0];
            for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g;
        });
    }
    return out;
}

namespace detail {

// Shared core of the two cross-entropy losses: mean over rows of
// logsumexp(row) - row[target]. Gradient: (softmax(row) - onehot) / rows.
template <class T>
TensorPtrT<T> ce_from_logits(TapeT<T>& tape, const TensorPtrT<T>& logits,
                             const std::vector<int>& targets, const char* op_name) {
    if (logits->ndim() != 2) {
        throw ShapeError(std::string(op_name) + ": logits must be rank 2, got " +
                         shape_str(logits->shape));
    }
    const std::int64_t rows = logits->shape[0];
    const std::int64_t k = logits->shape[1];
    if (static_cast<std::int64_t>(targets.size()) != rows) {
        throw ShapeError(std::string(op_name) + ": " + std::to_string(rows) + " logit rows vs " +
                         std::to_string(targets.size()) + " targets");
    }
    for (int t : targets) {
        if (t < 0 || t >= k) {
            throw ShapeError(std::string(op_name) + ": target " + std::to_string(t) +
                             " outside [0," + std::to_string(k) + ")");
        }
    }
    const bool ng = logits->requires_grad;
    auto out = make_tensor<T>({1}, ng);
    T total = T(0);
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* z = logits->data.data() + i * k;
        T mx = z[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
        total += mx + std::log(sum) - z[targets[i]];
    }
    out->data[0] = total / T(rows);
    if (ng) {
        tape.record(out, [logits, out, targets, rows, k] {
            const T g = out->grad[0] / T(rows);
            for (std::int64_t i = 0; i < rows; ++i) {
                const T* z = logits->data.data() + i * k;
                T* gz = logits->grad.data() + i * k;
                T mx = z[0];
                for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
                T sum = T(0);
                for (std::int64_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
                const T inv = T(1) / sum;
                for (std::int64_t j = 0; j < k; ++j) {
                    const T p = std::exp(z[j] - mx) * inv;
                    gz[j] += g * (p - (j == targets[i] ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

}  // namespace detail

// Binary cross-entropy over 2-way logits: softmax over the pair, then the
// mean of -[c*log(o) + (1-c)*log(1-o)] with o the class-1 probability.
// Evaluated in log-sum-exp form so log(0) is never materialized.
template <class T>
TensorPtrT<T> bce_with_logits(TapeT<T>& tape, const TensorPtrT<T>& logits,
                              const std::vector<int>& targets) {
    if (logits->ndim() != 2 || logits->shape[1] != 2) {
        throw ShapeError("bce_with_logits: logits must be [b,2], got " + shape_str(logits->shape));
    }
    for (int t : targets) {
        if (t != 0 && t != 1) {
            throw ShapeError("bce_with_logits: targets must be 0/1, got " + std::to_string(t));
        }
    }
    return detail::ce_from_logits(tape, logits, targets, "bce_with_logits");
}

// K-way softmax cross-entropy (the baseline training objective).
template <class T>
TensorPtrT<T> cross_entropy_with_logits(TapeT<T>& tape, const TensorPtrT<T>& logits,
                                        const std::vector<int>& targets) {
    return detail::ce_from_logits(tape, logits, targets, "cross_entropy_with_logits");
}

}  // namespace ltuning
