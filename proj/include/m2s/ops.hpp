#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "m2s/tensor.hpp"

namespace m2s {

namespace detail {

inline int div_ceil(int a, int b) {
    return (a > 0) ? (a + b - 1) / b : a / b;
}

inline std::array<std::size_t, 4> strides_of(const Shape4& s) {
    return {static_cast<std::size_t>(s.c) * s.h * s.w,
            static_cast<std::size_t>(s.h) * s.w,
            static_cast<std::size_t>(s.w),
            1};
}

// Broadcast plan over the four fixed axes: each axis pair must match or one
// side must be 1 (stride 0 on the broadcast side).
struct BcastPlan {
    Shape4 out;
    std::array<std::size_t, 4> sa{};
    std::array<std::size_t, 4> sb{};
    bool same_shape = false;
};

inline BcastPlan make_bcast_plan(const Shape4& a, const Shape4& b, const char* who) {
    auto axis = [&](int da, int db, const char* name) {
        if (da != db && da != 1 && db != 1) {
            throw ValidationError(std::string(who) + ": axis " + name + " mismatch, " +
                                  a.str() + " vs " + b.str());
        }
        return std::max(da, db);
    };
    BcastPlan p;
    p.out = Shape4{axis(a.n, b.n, "n"), axis(a.c, b.c, "c"), axis(a.h, b.h, "h"),
                   axis(a.w, b.w, "w")};
    auto sa = strides_of(a);
    auto sb = strides_of(b);
    const int ae[4] = {a.n, a.c, a.h, a.w};
    const int be[4] = {b.n, b.c, b.h, b.w};
    const int oe[4] = {p.out.n, p.out.c, p.out.h, p.out.w};
    for (int i = 0; i < 4; ++i) {
        p.sa[i] = (ae[i] == oe[i]) ? sa[i] : 0;
        p.sb[i] = (be[i] == oe[i]) ? sb[i] : 0;
    }
    p.same_shape = (a == b);
    return p;
}

// Calls f(out_index, a_index, b_index) over the broadcast output space.
template <typename F>
inline void for_each_bcast(const BcastPlan& p, F&& f) {
    std::size_t io = 0;
    for (int n = 0; n < p.out.n; ++n) {
        for (int c = 0; c < p.out.c; ++c) {
            for (int h = 0; h < p.out.h; ++h) {
                std::size_t ia = n * p.sa[0] + c * p.sa[1] + h * p.sa[2];
                std::size_t ib = n * p.sb[0] + c * p.sb[1] + h * p.sb[2];
                for (int w = 0; w < p.out.w; ++w) {
                    f(io++, ia + w * p.sa[3], ib + w * p.sb[3]);
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto plan = detail::make_bcast_plan(a.shape(), b.shape(), "add");
    std::vector<T> out(plan.out.numel());
    const auto& av = a.value();
    const auto& bv = b.value();
    if (plan.same_shape) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    } else {
        detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
            out[io] = av[ia] + bv[ib];
        });
    }
    return make_op_result<T>(
        plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& o) {
            auto& pa = *o.parents[0];
            auto& pb = *o.parents[1];
            if (pa.requires_grad) pa.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                if (pa.requires_grad) pa.grad[ia] += o.grad[io];
                if (pb.requires_grad) pb.grad[ib] += o.grad[io];
            });
        });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    auto plan = detail::make_bcast_plan(a.shape(), b.shape(), "sub");
    std::vector<T> out(plan.out.numel());
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
        out[io] = av[ia] - bv[ib];
    });
    return make_op_result<T>(
        plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& o) {
            auto& pa = *o.parents[0];
            auto& pb = *o.parents[1];
            if (pa.requires_grad) pa.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                if (pa.requires_grad) pa.grad[ia] += o.grad[io];
                if (pb.requires_grad) pb.grad[ib] -= o.grad[io];
            });
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto plan = detail::make_bcast_plan(a.shape(), b.shape(), "mul");
    std::vector<T> out(plan.out.numel());
    const auto& av = a.value();
    const auto& bv = b.value();
    if (plan.same_shape) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    } else {
        detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
            out[io] = av[ia] * bv[ib];
        });
    }
    return make_op_result<T>(
        plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& o) {
            auto& pa = *o.parents[0];
            auto& pb = *o.parents[1];
            if (pa.requires_grad) pa.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                if (pa.requires_grad) pa.grad[ia] += o.grad[io] * pb.value[ib];
                if (pb.requires_grad) pb.grad[ib] += o.grad[io] * pa.value[ia];
            });
        });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    auto plan = detail::make_bcast_plan(a.shape(), b.shape(), "div");
    std::vector<T> out(plan.out.numel());
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
        out[io] = av[ia] / bv[ib];
    });
    return make_op_result<T>(
        plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& o) {
            auto& pa = *o.parents[0];
            auto& pb = *o.parents[1];
            if (pa.requires_grad) pa.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            detail::for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                T inv = T(1) / pb.value[ib];
                if (pa.requires_grad) pa.grad[ia] += o.grad[io] * inv;
                if (pb.requires_grad)
                    pb.grad[ib] -= o.grad[io] * pa.value[ia] * inv * inv;
            });
        });
}

namespace detail {

template <typename T, bool TakeMin>
Tensor<T> min_max_impl(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
    auto plan = make_bcast_plan(a.shape(), b.shape(), who);
    std::vector<T> out(plan.out.numel());
    const auto& av = a.value();
    const auto& bv = b.value();
    const bool traced = BranchTrace::active();
    for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
        bool take_a = TakeMin ? (av[ia] <= bv[ib]) : (av[ia] >= bv[ib]);
        out[io] = take_a ? av[ia] : bv[ib];
        if (traced) BranchTrace::note(io * 2 + (take_a ? 1 : 0));
    });
    return make_op_result<T>(
        plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& o) {
            auto& pa = *o.parents[0];
            auto& pb = *o.parents[1];
            if (pa.requires_grad) pa.ensure_grad();
            if (pb.requires_grad) pb.ensure_grad();
            for_each_bcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                bool take_a = TakeMin ? (pa.value[ia] <= pb.value[ib])
                                      : (pa.value[ia] >= pb.value[ib]);
                if (take_a) {
                    if (pa.requires_grad) pa.grad[ia] += o.grad[io];
                } else {
                    if (pb.requires_grad) pb.grad[ib] += o.grad[io];
                }
            });
        });
}

}  // namespace detail

template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::min_max_impl<T, true>(a, b, "minimum");
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::min_max_impl<T, false>(a, b, "maximum");
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double v) {
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    const T tv = static_cast<T>(v);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + tv;
    return make_op_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, double v) {
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    const T tv = static_cast<T>(v);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * tv;
    return make_op_result<T>(x.shape(), std::move(out), {x}, [tv](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * tv;
    });
}

// Numerically stable logistic; output is clamped into the open interval (0,1)
// so downstream gating and bound invariants hold for every finite input.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    const T hi = std::nextafter(T(1), T(0));
    const T lo = std::numeric_limits<T>::denorm_min();
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T v = xv[i];
        T y;
        if (v >= T(0)) {
            y = T(1) / (T(1) + std::exp(-v));
        } else {
            T e = std::exp(v);
            y = e / (T(1) + e);
        }
        if (y >= T(1)) y = hi;
        if (y <= T(0)) y = lo;
        out[i] = y;
    }
    return make_op_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            T y = o.value[i];
            p.grad[i] += o.grad[i] * y * (T(1) - y);
        }
    });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.1) {
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    const T s = static_cast<T>(slope);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = xv[i] >= T(0) ? xv[i] : s * xv[i];
    }
    if (BranchTrace::active()) {
        for (std::size_t i = 0; i < xv.size(); ++i) {
            BranchTrace::note(i * 2 + (xv[i] >= T(0) ? 1 : 0));
        }
    }
    return make_op_result<T>(x.shape(), std::move(out), {x}, [s](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            p.grad[i] += o.grad[i] * (p.value[i] >= T(0) ? T(1) : s);
        }
    });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, double lo, double hi) {
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    const T tlo = static_cast<T>(lo);
    const T thi = static_cast<T>(hi);
    const bool traced = BranchTrace::active();
    for (std::size_t i = 0; i < out.size(); ++i) {
        int region = xv[i] < tlo ? 0 : (xv[i] > thi ? 2 : 1);
        out[i] = region == 0 ? tlo : (region == 2 ? thi : xv[i]);
        if (traced) BranchTrace::note(i * 4 + region);
    }
    return make_op_result<T>(x.shape(), std::move(out), {x}, [tlo, thi](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            if (p.value[i] >= tlo && p.value[i] <= thi) p.grad[i] += o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
    return make_op_result<T>(x.shape(), std::move(out), {x}, [](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            p.grad[i] += o.grad[i] * o.value[i];
        }
    });
}

// Stable binary cross-entropy from logits against constant targets:
// max(z,0) - z*t + log1p(exp(-|z|)), gradient sigmoid(z) - t.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& x, std::vector<T> targets) {
    if (targets.size() != x.numel()) {
        throw ValidationError("bce_with_logits: target count " +
                              std::to_string(targets.size()) + " != input " +
                              std::to_string(x.numel()));
    }
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        T z = xv[i];
        out[i] = std::max(z, T(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    return make_op_result<T>(
        x.shape(), std::move(out), {x}, [t = std::move(targets)](TensorNode<T>& o) {
            auto& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                T z = p.value[i];
                T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z))
                                : std::exp(z) / (T(1) + std::exp(z));
                p.grad[i] += o.grad[i] * (s - t[i]);
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.value()) acc += v;
    return make_op_result<T>(Shape4{1, 1, 1, 1}, {acc}, {x}, [](TensorNode<T>& o) {
        auto& p = *o.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        T g = o.grad[0];
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Per-channel spatial mean, shape [n,c,1,1].
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& x) {
    const Shape4 s = x.shape();
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    if (hw == 0) throw ValidationError("spatial_mean: empty spatial extent");
    std::vector<T> out(static_cast<std::size_t>(s.n) * s.c);
    const auto& xv = x.value();
    for (std::size_t nc = 0; nc < out.size(); ++nc) {
        T acc = T(0);
        const T* p = &xv[nc * hw];
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        out[nc] = acc / static_cast<T>(hw);
    }
    return make_op_result<T>(Shape4{s.n, s.c, 1, 1}, std::move(out), {x},
                             [hw](TensorNode<T>& o) {
                                 auto& p = *o.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 for (std::size_t nc = 0; nc < o.grad.size(); ++nc) {
                                     T g = o.grad[nc] / static_cast<T>(hw);
                                     T* gp = &p.grad[nc * hw];
                                     for (std::size_t i = 0; i < hw; ++i) gp[i] += g;
                                 }
                             });
}

// Per-channel spatial max, shape [n,c,1,1]; gradient routes to the first
// maximal element.
template <typename T>
Tensor<T> spatial_max(const Tensor<T>& x) {
    const Shape4 s = x.shape();
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    if (hw == 0) throw ValidationError("spatial_max: empty spatial extent");
    std::vector<T> out(static_cast<std::size_t>(s.n) * s.c);
    std::vector<std::size_t> arg(out.size());
    const auto& xv = x.value();
    const bool traced = BranchTrace::active();
    for (std::size_t nc = 0; nc < out.size(); ++nc) {
        const T* p = &xv[nc * hw];
        std::size_t best = 0;
        for (std::size_t i = 1; i < hw; ++i) {
            if (p[i] > p[best]) best = i;
        }
        out[nc] = p[best];
        arg[nc] = best;
        if (traced) BranchTrace::note(nc * hw + best);
    }
    return make_op_result<T>(Shape4{s.n, s.c, 1, 1}, std::move(out), {x},
                             [hw, arg = std::move(arg)](TensorNode<T>& o) {
                                 auto& p = *o.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 for (std::size_t nc = 0; nc < o.grad.size(); ++nc) {
                                     p.grad[nc * hw + arg[nc]] += o.grad[nc];
                                 }
                             });
}

// Per-pixel channel mean, shape [n,1,h,w].
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
    const Shape4 s = x.shape();
    if (s.c < 1) throw ValidationError("channel_mean: needs at least one channel");
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t chw = s.c * hw;
    std::vector<T> out(static_cast<std::size_t>(s.n) * hw, T(0));
    const auto& xv = x.value();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            const T* p = &xv[n * chw + c * hw];
            T* op = &out[n * hw];
            for (std::size_t i = 0; i < hw; ++i) op[i] += p[i];
        }
        T* op = &out[n * hw];
        for (std::size_t i = 0; i < hw; ++i) op[i] /= static_cast<T>(s.c);
    }
    return make_op_result<T>(Shape4{s.n, 1, s.h, s.w}, std::move(out), {x},
                             [s, hw, chw](TensorNode<T>& o) {
                                 auto& p = *o.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 for (int n = 0; n < s.n; ++n) {
                                     const T* gp = &o.grad[n * hw];
                                     for (int c = 0; c < s.c; ++c) {
                                         T* out_g = &p.grad[n * chw + c * hw];
                                         for (std::size_t i = 0; i < hw; ++i) {
                                             out_g[i] += gp[i] / static_cast<T>(s.c);
                                         }
                                     }
                                 }
                             });
}

// Per-pixel channel max, shape [n,1,h,w].
template <typename T>
Tensor<T> channel_max(const Tensor<T>& x) {
    const Shape4 s = x.shape();
    if (s.c < 1) throw ValidationError("channel_max: needs at least one channel");
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t chw = s.c * hw;
    std::vector<T> out(static_cast<std::size_t>(s.n) * hw);
    std::vector<int> arg(out.size());
    const auto& xv = x.value();
    const bool traced = BranchTrace::active();
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < hw; ++i) {
            int best = 0;
            T bv = xv[n * chw + i];
            for (int c = 1; c < s.c; ++c) {
                T v = xv[n * chw + c * hw + i];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out[n * hw + i] = bv;
            arg[n * hw + i] = best;
            if (traced) BranchTrace::note((n * hw + i) * s.c + best);
        }
    }
    return make_op_result<T>(Shape4{s.n, 1, s.h, s.w}, std::move(out), {x},
                             [hw, chw, arg = std::move(arg)](TensorNode<T>& o) {
                                 auto& p = *o.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 for (std::size_t j = 0; j < o.grad.size(); ++j) {
                                     std::size_t n = j / hw;
                                     std::size_t i = j % hw;
                                     p.grad[n * chw + arg[j] * hw + i] += o.grad[j];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Style pooling: per-channel spatial mean and population standard deviation.
// Returned as (avg, std), both [n,c,1,1]. The epsilon floor inside the square
// root keeps the derivative defined on constant slices.
// ---------------------------------------------------------------------------

template <typename T>
std::pair<Tensor<T>, Tensor<T>> style_pool(const Tensor<T>& x) {
    const Shape4 s = x.shape();
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    if (hw == 0) throw ValidationError("style_pool: empty spatial extent");
    const std::size_t nc = static_cast<std::size_t>(s.n) * s.c;
    std::vector<T> mu(nc), sd(nc);
    const auto& xv = x.value();
    for (std::size_t k = 0; k < nc; ++k) {
        const T* p = &xv[k * hw];
        T acc = T(0);
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        T m = acc / static_cast<T>(hw);
        T var = T(0);
        for (std::size_t i = 0; i < hw; ++i) {
            T d = p[i] - m;
            var += d * d;
        }
        var /= static_cast<T>(hw);
        mu[k] = m;
        sd[k] = std::sqrt(var + T(1e-12));
    }
    Shape4 out_shape{s.n, s.c, 1, 1};
    Tensor<T> avg = make_op_result<T>(out_shape, std::vector<T>(mu), {x},
                                      [hw](TensorNode<T>& o) {
                                          auto& p = *o.parents[0];
                                          if (!p.requires_grad) return;
                                          p.ensure_grad();
                                          for (std::size_t k = 0; k < o.grad.size(); ++k) {
                                              T g = o.grad[k] / static_cast<T>(hw);
                                              T* gp = &p.grad[k * hw];
                                              for (std::size_t i = 0; i < hw; ++i) gp[i] += g;
                                          }
                                      });
    std::vector<T> sd_value = sd;  // copy before the lambda captures move from sd
    Tensor<T> std_t = make_op_result<T>(
        out_shape, std::move(sd_value), {x},
        [hw, mu = std::move(mu), sd = std::move(sd)](TensorNode<T>& o) {
            auto& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t k = 0; k < o.grad.size(); ++k) {
                T scale = o.grad[k] / (static_cast<T>(hw) * sd[k]);
                const T* xp = &p.value[k * hw];
                T* gp = &p.grad[k * hw];
                for (std::size_t i = 0; i < hw; ++i) {
                    gp[i] += scale * (xp[i] - mu[k]);
                }
            }
        });
    return {avg, std_t};
}

// Per-pixel channel statistics: plane 0 mean over channels, plane 1 population
// standard deviation over channels. Output [n,2,h,w].
template <typename T>
Tensor<T> spatial_stats(const Tensor<T>& x) {
    const Shape4 s = x.shape();
    if (s.c < 1) throw ValidationError("spatial_stats: needs at least one channel");
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t chw = s.c * hw;
    std::vector<T> out(static_cast<std::size_t>(s.n) * 2 * hw);
    const auto& xv = x.value();
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < hw; ++i) {
            T acc = T(0);
            for (int c = 0; c < s.c; ++c) acc += xv[n * chw + c * hw + i];
            T m = acc / static_cast<T>(s.c);
            T var = T(0);
            for (int c = 0; c < s.c; ++c) {
                T d = xv[n * chw + c * hw + i] - m;
                var += d * d;
            }
            var /= static_cast<T>(s.c);
            out[n * 2 * hw + i] = m;
            out[n * 2 * hw + hw + i] = std::sqrt(var + T(1e-12));
        }
    }
    return make_op_result<T>(
        Shape4{s.n, 2, s.h, s.w}, std::move(out), {x}, [s, hw, chw](TensorNode<T>& o) {
            auto& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int n = 0; n < s.n; ++n) {
                for (std::size_t i = 0; i < hw; ++i) {
                    T m = o.value[n * 2 * hw + i];
                    T sd = o.value[n * 2 * hw + hw + i];
                    T g_mean = o.grad[n * 2 * hw + i] / static_cast<T>(s.c);
                    T g_std = o.grad[n * 2 * hw + hw + i] / (static_cast<T>(s.c) * sd);
                    for (int c = 0; c < s.c; ++c) {
                        std::size_t xi = n * chw + c * hw + i;
                        p.grad[xi] += g_mean + g_std * (p.value[xi] - m);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// Space-to-depth: output channel c*f*f + dy*f + dx holds input pixels at
// offsets (dy,dx); a pure permutation of the values.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int factor = 2) {
    const Shape4 s = x.shape();
    if (factor < 1) throw ValidationError("pixel_unshuffle: factor must be >= 1");
    if (s.h % factor != 0 || s.w % factor != 0) {
        throw ValidationError("pixel_unshuffle: spatial extents " + s.str() +
                              " not divisible by factor " + std::to_string(factor));
    }
    const int oh = s.h / factor;
    const int ow = s.w / factor;
    const Shape4 os{s.n, s.c * factor * factor, oh, ow};
    std::vector<T> out(os.numel());
    const auto& xv = x.value();
    auto xoff = detail::strides_of(s);
    auto ooff = detail::strides_of(os);
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int dy = 0; dy < factor; ++dy) {
                for (int dx = 0; dx < factor; ++dx) {
                    int oc = c * factor * factor + dy * factor + dx;
                    for (int i = 0; i < oh; ++i) {
                        const T* src = &xv[n * xoff[0] + c * xoff[1] +
                                           (i * factor + dy) * xoff[2] + dx];
                        T* dst = &out[n * ooff[0] + oc * ooff[1] + i * ooff[2]];
                        for (int j = 0; j < ow; ++j) dst[j] = src[j * factor];
                    }
                }
            }
        }
    }
    return make_op_result<T>(
        os, std::move(out), {x}, [s, os, factor, xoff, ooff](TensorNode<T>& o) {
            auto& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            const int oh = os.h;
            const int ow = os.w;
            for (int n = 0; n < s.n; ++n) {
                for (int c = 0; c < s.c; ++c) {
                    for (int dy = 0; dy < factor; ++dy) {
                        for (int dx = 0; dx < factor; ++dx) {
                            int oc = c * factor * factor + dy * factor + dx;
                            for (int i = 0; i < oh; ++i) {
                                const T* src =
                                    &o.grad[n * ooff[0] + oc * ooff[1] + i * ooff[2]];
                                T* dst = &p.grad[n * xoff[0] + c * xoff[1] +
                                                 (i * factor + dy) * xoff[2] + dx];
                                for (int j = 0; j < ow; ++j) dst[j * factor] += src[j];
                            }
                        }
                    }
                }
            }
        });
}

// Bilinear resize with half-pixel centers: src = (dst + 0.5) * scale - 0.5,
// clamped to the valid range.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
    const Shape4 s = x.shape();
    if (out_h <= 0 || out_w <= 0) {
        throw ValidationError("bilinear_resize: output extents must be positive");
    }
    struct Tap {
        int i0, i1;
        T f;  // weight of i1
    };
    auto make_taps = [](int in, int out) {
        std::vector<Tap> taps(out);
        double scale = static_cast<double>(in) / out;
        for (int d = 0; d < out; ++d) {
            double src = (d + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            if (src > in - 1) src = in - 1;
            int i0 = static_cast<int>(std::floor(src));
            if (i0 > in - 1) i0 = in - 1;
            int i1 = std::min(i0 + 1, in - 1);
            taps[d] = {i0, i1, static_cast<T>(src - i0)};
        }
        return taps;
    };
    auto ty = make_taps(s.h, out_h);
    auto tx = make_taps(s.w, out_w);
    const Shape4 os{s.n, s.c, out_h, out_w};
    std::vector<T> out(os.numel());
    const auto& xv = x.value();
    const std::size_t plane_in = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t plane_out = static_cast<std::size_t>(out_h) * out_w;
    const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const T* src = &xv[pl * plane_in];
        T* dst = &out[pl * plane_out];
        for (int i = 0; i < out_h; ++i) {
            const Tap& a = ty[i];
            const T* r0 = src + static_cast<std::size_t>(a.i0) * s.w;
            const T* r1 = src + static_cast<std::size_t>(a.i1) * s.w;
            for (int j = 0; j < out_w; ++j) {
                const Tap& b = tx[j];
                T top = r0[b.i0] + b.f * (r0[b.i1] - r0[b.i0]);
                T bot = r1[b.i0] + b.f * (r1[b.i1] - r1[b.i0]);
                dst[i * out_w + j] = top + a.f * (bot - top);
            }
        }
    }
    return make_op_result<T>(
        os, std::move(out), {x},
        [s, out_h, out_w, ty = std::move(ty), tx = std::move(tx), plane_in,
         plane_out, planes](TensorNode<T>& o) {
            auto& p = *o.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t pl = 0; pl < planes; ++pl) {
                T* gsrc = &p.grad[pl * plane_in];
                const T* gdst = &o.grad[pl * plane_out];
                for (int i = 0; i < out_h; ++i) {
                    const auto& a = ty[i];
                    for (int j = 0; j < out_w; ++j) {
                        const auto& b = tx[j];
                        T g = gdst[i * out_w + j];
                        T w00 = (T(1) - a.f) * (T(1) - b.f);
                        T w01 = (T(1) - a.f) * b.f;
                        T w10 = a.f * (T(1) - b.f);
                        T w11 = a.f * b.f;
                        gsrc[a.i0 * s.w + b.i0] += g * w00;
                        gsrc[a.i0 * s.w + b.i1] += g * w01;
                        gsrc[a.i1 * s.w + b.i0] += g * w10;
                        gsrc[a.i1 * s.w + b.i1] += g * w11;
                    }
                }
            }
        });
}

// Channel concatenation of same-extent tensors.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValidationError("concat_channels: no inputs");
    const Shape4 s0 = parts[0].shape();
    int total_c = 0;
    for (const auto& p : parts) {
        const Shape4 s = p.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
            throw ValidationError("concat_channels: incompatible shapes " + s0.str() +
                                  " vs " + s.str());
        }
        total_c += s.c;
    }
    const Shape4 os{s0.n, total_c, s0.h, s0.w};
    const std::size_t hw = static_cast<std::size_t>(s0.h) * s0.w;
    std::vector<T> out(os.numel());
    std::vector<int> channels(parts.size());
    for (std::size_t k = 0; k < parts.size(); ++k) channels[k] = parts[k].shape().c;
    for (int n = 0; n < s0.n; ++n) {
        std::size_t oc_base = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const auto& pv = parts[k].value();
            const std::size_t part_chw = channels[k] * hw;
            std::copy(pv.begin() + n * part_chw, pv.begin() + (n + 1) * part_chw,
                      out.begin() + (static_cast<std::size_t>(n) * total_c + oc_base) * hw);
            oc_base += channels[k];
        }
    }
    return make_op_result<T>(
        os, std::move(out), parts,
        [total_c, hw, channels = std::move(channels), n_count = s0.n](TensorNode<T>& o) {
            for (int n = 0; n < n_count; ++n) {
                std::size_t oc_base = 0;
                for (std::size_t k = 0; k < o.parents.size(); ++k) {
                    auto& p = *o.parents[k];
                    const std::size_t part_chw = channels[k] * hw;
                    if (p.requires_grad) {
                        p.ensure_grad();
                        const T* g =
                            &o.grad[(static_cast<std::size_t>(n) * total_c + oc_base) * hw];
                        T* pg = &p.grad[n * part_chw];
                        for (std::size_t i = 0; i < part_chw; ++i) pg[i] += g[i];
                    }
                    oc_base += channels[k];
                }
            }
        });
}

// Contiguous channel slice [c0, c0+len).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int len) {
    const Shape4 s = x.shape();
    if (c0 < 0 || len <= 0 || c0 + len > s.c) {
        throw ValidationError("slice_channels: range [" + std::to_string(c0) + "," +
                              std::to_string(c0 + len) + ") outside channels of " + s.str());
    }
    const Shape4 os{s.n, len, s.h, s.w};
    const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
    std::vector<T> out(os.numel());
    const auto& xv = x.value();
    for (int n = 0; n < s.n; ++n) {
        std::copy(xv.begin() + (static_cast<std::size_t>(n) * s.c + c0) * hw,
                  xv.begin() + (static_cast<std::size_t>(n) * s.c + c0 + len) * hw,
                  out.begin() + static_cast<std::size_t>(n) * len * hw);
    }
    return make_op_result<T>(os, std::move(out), {x},
                             [s, c0, len, hw](TensorNode<T>& o) {
                                 auto& p = *o.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 for (int n = 0; n < s.n; ++n) {
                                     const T* g = &o.grad[static_cast<std::size_t>(n) * len * hw];
                                     T* pg = &p.grad[(static_cast<std::size_t>(n) * s.c + c0) * hw];
                                     for (std::size_t i = 0; i < len * hw; ++i) pg[i] += g[i];
                                 }
                             });
}

// Single-element extraction as a [1,1,1,1] tensor.
template <typename T>
Tensor<T> select(const Tensor<T>& x, int n, int c, int h, int w) {
    const Shape4 s = x.shape();
    if (n < 0 || n >= s.n || c < 0 || c >= s.c || h < 0 || h >= s.h || w < 0 || w >= s.w) {
        throw ValidationError("select: index out of bounds for " + s.str());
    }
    const std::size_t idx =
        ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
    return make_op_result<T>(Shape4{1, 1, 1, 1}, {x.value()[idx]}, {x},
                             [idx](TensorNode<T>& o) {
                                 auto& p = *o.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 p.grad[idx] += o.grad[0];
                             });
}

// Balanced-tree sum of a list of same-shape tensors (empty list -> scalar 0).
template <typename T>
Tensor<T> sum_list(std::vector<Tensor<T>> xs) {
    if (xs.empty()) return Tensor<T>::scalar(T(0));
    while (xs.size() > 1) {
        std::vector<Tensor<T>> next;
        next.reserve((xs.size() + 1) / 2);
        for (std::size_t i = 0; i + 1 < xs.size(); i += 2) next.push_back(add(xs[i], xs[i + 1]));
        if (xs.size() % 2 == 1) next.push_back(xs.back());
        xs = std::move(next);
    }
    return xs[0];
}

// 1-D convolution over the channel axis of a pooled [n,c,1,1] tensor with a
// [1,1,1,k] kernel, zero padded (no bias).
template <typename T>
Tensor<T> eca_conv1d(const Tensor<T>& x, const Tensor<T>& weight) {
    const Shape4 s = x.shape();
    const Shape4 ws = weight.shape();
    if (s.h != 1 || s.w != 1) {
        throw ValidationError("eca_conv1d: input must be pooled to [n,c,1,1], got " + s.str());
    }
    if (ws.n != 1 || ws.c != 1 || ws.h != 1 || ws.w % 2 != 1) {
        throw ValidationError("eca_conv1d: kernel must be [1,1,1,k] with odd k, got " +
                              ws.str());
    }
    const int k = ws.w;
    const int half = k / 2;
    std::vector<T> out(s.numel(), T(0));
    const auto& xv = x.value();
    const auto& wv = weight.value();
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            T acc = T(0);
            for (int j = 0; j < k; ++j) {
                int cc = c + j - half;
                if (cc >= 0 && cc < s.c) acc += wv[j] * xv[n * s.c + cc];
            }
            out[n * s.c + c] = acc;
        }
    }
    return make_op_result<T>(s, std::move(out), {x, weight}, [s, k, half](TensorNode<T>& o) {
        auto& px = *o.parents[0];
        auto& pw = *o.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (int n = 0; n < s.n; ++n) {
            for (int c = 0; c < s.c; ++c) {
                T g = o.grad[n * s.c + c];
                for (int j = 0; j < k; ++j) {
                    int cc = c + j - half;
                    if (cc < 0 || cc >= s.c) continue;
                    if (px.requires_grad) px.grad[n * s.c + cc] += g * pw.value[j];
                    if (pw.requires_grad) pw.grad[j] += g * px.value[n * s.c + cc];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation) with zero padding.
// x [n,ci,h,w], weight [co,ci,kh,kw], bias [1,co,1,1].
//
// Implemented as im2col followed by an output-channel-tiled kernel so the
// vectorized axis is the full n*oh*ow extent rather than a single output row;
// small feature maps stay fast that way.
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    Shape4 xs, ws, os;
    int stride, pad;
    std::size_t K;  // ci * kh * kw
    std::size_t N;  // n * oh * ow
};

// cols[k][j], k = (ci, kh, kw) row-major, j = (n, i, jw) row-major.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* cols) {
    const int oh = d.os.h, ow = d.os.w;
    const std::size_t x_chw = static_cast<std::size_t>(d.xs.c) * d.xs.h * d.xs.w;
    std::size_t k = 0;
    for (int ci = 0; ci < d.xs.c; ++ci) {
        for (int kh = 0; kh < d.ws.h; ++kh) {
            for (int kw = 0; kw < d.ws.w; ++kw, ++k) {
                T* row = cols + k * d.N;
                const int ow_lo = std::max(0, div_ceil(d.pad - kw, d.stride));
                const int ow_hi = std::min(ow, (d.xs.w - 1 - kw + d.pad) / d.stride + 1);
                for (int n = 0; n < d.xs.n; ++n) {
                    const T* xplane = x + n * x_chw + static_cast<std::size_t>(ci) * d.xs.h * d.xs.w;
                    for (int i = 0; i < oh; ++i) {
                        T* dst = row + (static_cast<std::size_t>(n) * oh + i) * ow;
                        const int ih = i * d.stride - d.pad + kh;
                        if (ih < 0 || ih >= d.xs.h) {
                            std::fill(dst, dst + ow, T(0));
                            continue;
                        }
                        if (ow_lo > 0) std::fill(dst, dst + ow_lo, T(0));
                        if (ow_hi < ow) std::fill(dst + ow_hi, dst + ow, T(0));
                        const T* src = xplane + static_cast<std::size_t>(ih) * d.xs.w + (kw - d.pad);
                        if (d.stride == 1) {
                            for (int j = ow_lo; j < ow_hi; ++j) dst[j] = src[j];
                        } else {
                            for (int j = ow_lo; j < ow_hi; ++j) dst[j] = src[j * d.stride];
                        }
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-adds col rows back into the input gradient.
template <typename T>
void col2im_add(const T* cols, const ConvDims& d, T* gx) {
    const int oh = d.os.h, ow = d.os.w;
    const std::size_t x_chw = static_cast<std::size_t>(d.xs.c) * d.xs.h * d.xs.w;
    std::size_t k = 0;
    for (int ci = 0; ci < d.xs.c; ++ci) {
        for (int kh = 0; kh < d.ws.h; ++kh) {
            for (int kw = 0; kw < d.ws.w; ++kw, ++k) {
                const T* row = cols + k * d.N;
                const int ow_lo = std::max(0, div_ceil(d.pad - kw, d.stride));
                const int ow_hi = std::min(ow, (d.xs.w - 1 - kw + d.pad) / d.stride + 1);
                for (int n = 0; n < d.xs.n; ++n) {
                    T* xplane = gx + n * x_chw + static_cast<std::size_t>(ci) * d.xs.h * d.xs.w;
                    for (int i = 0; i < oh; ++i) {
                        const int ih = i * d.stride - d.pad + kh;
                        if (ih < 0 || ih >= d.xs.h) continue;
                        const T* src = row + (static_cast<std::size_t>(n) * oh + i) * ow;
                        T* dst = xplane + static_cast<std::size_t>(ih) * d.xs.w + (kw - d.pad);
                        if (d.stride == 1) {
                            for (int j = ow_lo; j < ow_hi; ++j) dst[j] += src[j];
                        } else {
                            for (int j = ow_lo; j < ow_hi; ++j) dst[j * d.stride] += src[j];
                        }
                    }
                }
            }
        }
    }
}

// C[co][j] = sum_k W[co][k] * cols[k][j], 4 output rows per pass.
template <typename T>
void gemm_w_cols(const T* w, const T* cols, const ConvDims& d, int co_count, T* c) {
    const std::size_t K = d.K, N = d.N;
    int co = 0;
    for (; co + 4 <= co_count; co += 4) {
        T* c0 = c + (co + 0) * N;
        T* c1 = c + (co + 1) * N;
        T* c2 = c + (co + 2) * N;
        T* c3 = c + (co + 3) * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T* col = cols + k * N;
            const T w0 = w[(co + 0) * K + k];
            const T w1 = w[(co + 1) * K + k];
            const T w2 = w[(co + 2) * K + k];
            const T w3 = w[(co + 3) * K + k];
            for (std::size_t j = 0; j < N; ++j) {
                const T v = col[j];
                c0[j] += w0 * v;
                c1[j] += w1 * v;
                c2[j] += w2 * v;
                c3[j] += w3 * v;
            }
        }
    }
    for (; co < co_count; ++co) {
        T* c0 = c + co * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T* col = cols + k * N;
            const T w0 = w[co * K + k];
            for (std::size_t j = 0; j < N; ++j) c0[j] += w0 * col[j];
        }
    }
}

// dW[co][k] += sum_j g[co][j] * cols[k][j], 4 k-rows per pass.
template <typename T>
void gemm_g_cols(const T* g, const T* cols, const ConvDims& d, int co_count, T* dw) {
    const std::size_t K = d.K, N = d.N;
    for (int co = 0; co < co_count; ++co) {
        const T* grow = g + static_cast<std::size_t>(co) * N;
        std::size_t k = 0;
        for (; k + 4 <= K; k += 4) {
            const T* col0 = cols + (k + 0) * N;
            const T* col1 = cols + (k + 1) * N;
            const T* col2 = cols + (k + 2) * N;
            const T* col3 = cols + (k + 3) * N;
            T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
            for (std::size_t j = 0; j < N; ++j) {
                const T gv = grow[j];
                a0 += gv * col0[j];
                a1 += gv * col1[j];
                a2 += gv * col2[j];
                a3 += gv * col3[j];
            }
            dw[co * K + k + 0] += a0;
            dw[co * K + k + 1] += a1;
            dw[co * K + k + 2] += a2;
            dw[co * K + k + 3] += a3;
        }
        for (; k < K; ++k) {
            const T* col = cols + k * N;
            T acc = T(0);
            for (std::size_t j = 0; j < N; ++j) acc += grow[j] * col[j];
            dw[co * K + k] += acc;
        }
    }
}

// dcols[k][j] = sum_co W[co][k] * g[co][j], 4 k-rows per pass.
template <typename T>
void gemm_wt_g(const T* w, const T* g, const ConvDims& d, int co_count, T* dcols) {
    const std::size_t K = d.K, N = d.N;
    std::size_t k = 0;
    for (; k + 4 <= K; k += 4) {
        T* d0 = dcols + (k + 0) * N;
        T* d1 = dcols + (k + 1) * N;
        T* d2 = dcols + (k + 2) * N;
        T* d3 = dcols + (k + 3) * N;
        for (int co = 0; co < co_count; ++co) {
            const T* grow = g + static_cast<std::size_t>(co) * N;
            const T w0 = w[co * K + k + 0];
            const T w1 = w[co * K + k + 1];
            const T w2 = w[co * K + k + 2];
            const T w3 = w[co * K + k + 3];
            for (std::size_t j = 0; j < N; ++j) {
                const T gv = grow[j];
                d0[j] += w0 * gv;
                d1[j] += w1 * gv;
                d2[j] += w2 * gv;
                d3[j] += w3 * gv;
            }
        }
    }
    for (; k < K; ++k) {
        T* d0 = dcols + k * N;
        for (int co = 0; co < co_count; ++co) {
            const T* grow = g + static_cast<std::size_t>(co) * N;
            const T w0 = w[co * K + k];
            for (std::size_t j = 0; j < N; ++j) d0[j] += w0 * grow[j];
        }
    }
}

// Layout change between [co][n*oh*ow] and the tensor's [n][co][oh*ow].
template <typename T>
void rows_to_planes(const T* c, const ConvDims& d, const T* bias, T* out) {
    const std::size_t plane = static_cast<std::size_t>(d.os.h) * d.os.w;
    for (int n = 0; n < d.os.n; ++n) {
        for (int co = 0; co < d.os.c; ++co) {
            const T* src = c + co * d.N + n * plane;
            T* dst = out + (static_cast<std::size_t>(n) * d.os.c + co) * plane;
            const T b = bias ? bias[co] : T(0);
            for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + b;
        }
    }
}

template <typename T>
void planes_to_rows(const T* out_grad, const ConvDims& d, T* c) {
    const std::size_t plane = static_cast<std::size_t>(d.os.h) * d.os.w;
    for (int n = 0; n < d.os.n; ++n) {
        for (int co = 0; co < d.os.c; ++co) {
            const T* src = out_grad + (static_cast<std::size_t>(n) * d.os.c + co) * plane;
            T* dst = c + co * d.N + n * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i];
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad) {
    const Shape4 xs = x.shape();
    const Shape4 ws = weight.shape();
    const Shape4 bs = bias.shape();
    if (stride < 1) throw ValidationError("conv2d: stride must be positive");
    if (pad < 0) throw ValidationError("conv2d: pad must be non-negative");
    if (xs.c != ws.c) {
        throw ValidationError("conv2d: input channels (c=" + std::to_string(xs.c) +
                              ") do not match weight in-channels (c_in=" +
                              std::to_string(ws.c) + ")");
    }
    if (bs.n != 1 || bs.c != ws.n || bs.h != 1 || bs.w != 1) {
        throw ValidationError("conv2d: bias shape " + bs.str() +
                              " must be [1,c_out=" + std::to_string(ws.n) + ",1,1]");
    }
    const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    if (xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w || oh <= 0 || ow <= 0) {
        throw ValidationError("conv2d: kernel " + ws.str() + " does not fit input " +
                              xs.str() + " with stride " + std::to_string(stride) +
                              ", pad " + std::to_string(pad));
    }
    detail::ConvDims d;
    d.xs = xs;
    d.ws = ws;
    d.os = Shape4{xs.n, ws.n, oh, ow};
    d.stride = stride;
    d.pad = pad;
    d.K = static_cast<std::size_t>(xs.c) * ws.h * ws.w;
    d.N = static_cast<std::size_t>(xs.n) * oh * ow;

    std::vector<T> cols(d.K * d.N);
    detail::im2col(x.value().data(), d, cols.data());
    std::vector<T> c(static_cast<std::size_t>(ws.n) * d.N, T(0));
    detail::gemm_w_cols(weight.value().data(), cols.data(), d, ws.n, c.data());
    std::vector<T> out(d.os.numel());
    detail::rows_to_planes(c.data(), d, bias.value().data(), out.data());

    return make_op_result<T>(
        d.os, std::move(out), {x, weight, bias}, [d](TensorNode<T>& o) {
            auto& px = *o.parents[0];
            auto& pw = *o.parents[1];
            auto& pb = *o.parents[2];
            const std::size_t plane = static_cast<std::size_t>(d.os.h) * d.os.w;
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int n = 0; n < d.os.n; ++n) {
                    for (int co = 0; co < d.os.c; ++co) {
                        const T* g = &o.grad[(static_cast<std::size_t>(n) * d.os.c + co) * plane];
                        T acc = T(0);
                        for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                        pb.grad[co] += acc;
                    }
                }
            }
            if (!px.requires_grad && !pw.requires_grad) return;
            std::vector<T> g_rows(static_cast<std::size_t>(d.os.c) * d.N);
            detail::planes_to_rows(o.grad.data(), d, g_rows.data());
            if (pw.requires_grad) {
                pw.ensure_grad();
                std::vector<T> cols(d.K * d.N);
                detail::im2col(px.value.data(), d, cols.data());
                detail::gemm_g_cols(g_rows.data(), cols.data(), d, d.os.c, pw.grad.data());
            }
            if (px.requires_grad) {
                px.ensure_grad();
                std::vector<T> dcols(d.K * d.N, T(0));
                detail::gemm_wt_g(pw.value.data(), g_rows.data(), d, d.os.c, dcols.data());
                detail::col2im_add(dcols.data(), d, px.grad.data());
            }
        });
}

}  // namespace m2s
