#pragma once

#include <functional>
#include <string>
#include <vector>

#include "m2s/tensor.hpp"

namespace m2s {

// Central finite-difference validation of reverse-mode gradients.
//
// The analytic gradients under test come from the 64-bit engine. The finite
// differences are evaluated on an extended-precision (long double) twin of the
// same graph, built from identical leaf values, so the oracle's rounding
// noise (eps * |f| / h) sits far below the comparison tolerance even for
// parameters with tiny gradients. Probe pairs whose two evaluations take
// different branches through piecewise ops (detected via BranchTrace)
// straddle a non-differentiable point and are skipped instead of compared.
struct FdOptions {
    double step = 1e-5;
    double tol = 1e-6;
    int max_elems_per_tensor = 16;  // random subsample of large tensors
    bool corrupt_analytic = false;  // harness negative control
};

struct FdResult {
    std::string name;
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;
    bool pass = false;
};

// A graph under check: the forward closure rebuilds the loss from the current
// values of the wrt leaves every call.
template <typename T>
struct FdGraph {
    std::function<Tensor<T>()> forward;
    std::vector<Tensor<T>> wrt;
};

// Dual-precision check: analytic gradients from the double graph, finite
// differences from the extended-precision twin. The two graphs must be built
// from the same deterministic construction so leaf values align exactly.
inline FdResult fd_check_dual(const std::string& name, const FdGraph<double>& g,
                              const FdGraph<long double>& twin, Rng& sampler,
                              const FdOptions& opt = {}) {
    FdResult res;
    res.name = name;
    if (g.wrt.size() != twin.wrt.size()) {
        throw ValidationError("fd_check: twin graph has different leaf count");
    }
    for (std::size_t t = 0; t < g.wrt.size(); ++t) {
        if (g.wrt[t].numel() != twin.wrt[t].numel()) {
            throw ValidationError("fd_check: twin leaf " + std::to_string(t) +
                                  " has different element count");
        }
    }

    for (const auto& t : g.wrt) const_cast<Tensor<double>&>(t).zero_grad();
    Tensor<double> loss = g.forward();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(g.wrt.size());
    for (const auto& t : g.wrt) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    }
    if (opt.corrupt_analytic && !analytic.empty() && !analytic[0].empty()) {
        analytic[0][0] += 1e-3;
    }

    const long double h = static_cast<long double>(opt.step);
    auto eval = [&](long double& slot, long double v, std::uint64_t& sig) {
        const long double saved = slot;
        slot = v;
        long double out;
        {
            NoGradGuard ng;
            BranchTrace::begin();
            out = twin.forward().item();
            sig = BranchTrace::end();
        }
        slot = saved;
        return out;
    };

    for (std::size_t ti = 0; ti < g.wrt.size(); ++ti) {
        Tensor<long double>& t = const_cast<Tensor<long double>&>(twin.wrt[ti]);
        const std::size_t n = t.numel();
        std::vector<std::size_t> idx;
        if (n <= static_cast<std::size_t>(opt.max_elems_per_tensor)) {
            for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int k = 0; k < opt.max_elems_per_tensor; ++k) {
                idx.push_back(sampler.next_u64() % n);
            }
        }
        for (std::size_t i : idx) {
            long double& slot = t.mutable_value()[i];
            const long double v0 = slot;
            std::uint64_t sig_hi = 0, sig_lo = 0;
            const long double f_hi = eval(slot, v0 + h, sig_hi);
            const long double f_lo = eval(slot, v0 - h, sig_lo);
            if (sig_hi != sig_lo) {
                ++res.skipped;
                continue;
            }
            const double fd = static_cast<double>((f_hi - f_lo) / (2.0L * h));
            const double grad = analytic[ti][i];
            const double denom = std::max({std::abs(fd), std::abs(grad), 1e-8});
            const double rel = std::abs(fd - grad) / denom;
            if (rel > res.max_rel_err) res.max_rel_err = rel;
            ++res.checked;
        }
    }
    res.pass = res.checked > 0 && res.max_rel_err <= opt.tol;
    return res;
}

// Single-precision convenience variant for tests whose gradients are O(1):
// analytic and finite differences both from the same double graph.
inline FdResult fd_check(const std::string& name,
                         const std::function<Tensor<double>()>& forward,
                         const std::vector<Tensor<double>>& wrt, Rng& sampler,
                         const FdOptions& opt = {}) {
    FdGraph<double> g{forward, wrt};
    FdResult res;
    res.name = name;
    for (const auto& t : g.wrt) const_cast<Tensor<double>&>(t).zero_grad();
    Tensor<double> loss = g.forward();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const auto& t : g.wrt) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    }
    if (opt.corrupt_analytic && !analytic.empty() && !analytic[0].empty()) {
        analytic[0][0] += 1e-3;
    }
    auto eval = [&](double& slot, double v, std::uint64_t& sig) {
        const double saved = slot;
        slot = v;
        double out;
        {
            NoGradGuard ng;
            BranchTrace::begin();
            out = forward().item();
            sig = BranchTrace::end();
        }
        slot = saved;
        return out;
    };
    for (std::size_t ti = 0; ti < g.wrt.size(); ++ti) {
        Tensor<double>& t = const_cast<Tensor<double>&>(g.wrt[ti]);
        const std::size_t n = t.numel();
        std::vector<std::size_t> idx;
        if (n <= static_cast<std::size_t>(opt.max_elems_per_tensor)) {
            for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int k = 0; k < opt.max_elems_per_tensor; ++k) {
                idx.push_back(sampler.next_u64() % n);
            }
        }
        for (std::size_t i : idx) {
            double& slot = t.mutable_value()[i];
            const double v0 = slot;
            std::uint64_t sig_hi = 0, sig_lo = 0;
            const double f_hi = eval(slot, v0 + opt.step, sig_hi);
            const double f_lo = eval(slot, v0 - opt.step, sig_lo);
            if (sig_hi != sig_lo) {
                ++res.skipped;
                continue;
            }
            const double fd = (f_hi - f_lo) / (2.0 * opt.step);
            const double grad = analytic[ti][i];
            const double denom = std::max({std::abs(fd), std::abs(grad), 1e-8});
            const double rel = std::abs(fd - grad) / denom;
            if (rel > res.max_rel_err) res.max_rel_err = rel;
            ++res.checked;
        }
    }
    res.pass = res.checked > 0 && res.max_rel_err <= opt.tol;
    return res;
}

}  // namespace m2s
