#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ctxspeech/ops.hpp"
#include "ctxspeech/rng.hpp"
#include "ctxspeech/tape.hpp"
#include "ctxspeech/tensor.hpp"

namespace testutil {

// Records f(params) on a fresh tape, runs the reverse sweep, and checks every
// parameter gradient against central finite differences. Returns the worst
// relative error |g - fd| / max(|g|, |fd|, 1e-6). f must be deterministic and
// must return a scalar.
inline double max_grad_rel_error(
    const std::vector<ctxspeech::Tensor>& params,
    const std::function<ctxspeech::Tensor(const std::vector<ctxspeech::Tensor>&)>& f,
    double eps = 1e-5) {
    using namespace ctxspeech;
    std::vector<Tensor> tracked = params;
    for (Tensor& p : tracked) p.set_requires_grad(true);

    GradTape tape_obj;
    GradMap grads;
    {
        tape::Scope scope(tape_obj);
        Tensor loss = f(tracked);
        grads = backward(tape_obj, loss);
    }

    double worst = 0.0;
    for (std::size_t pi = 0; pi < tracked.size(); ++pi) {
        const Tensor& p = tracked[pi];
        const Tensor& g = grads.at(p.id());
        for (std::size_t i = 0; i < p.size(); ++i) {
            auto bumped = [&](double delta) {
                std::vector<double> v(p.data().begin(), p.data().end());
                v[i] += delta;
                std::vector<Tensor> alt = tracked;
                alt[pi] = Tensor::from_vec(p.shape(), std::move(v));
                return f(alt).item();
            };
            const double fd = (bumped(eps) - bumped(-eps)) / (2.0 * eps);
            const double gv = g.data()[i];
            const double rel = std::abs(gv - fd) / std::max({std::abs(gv), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline double max_abs_diff(const ctxspeech::Tensor& a, const ctxspeech::Tensor& b) {
    if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

inline bool bit_equal(const ctxspeech::Tensor& a, const ctxspeech::Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

inline ctxspeech::Tensor rand_tensor(ctxspeech::Shape shape, ctxspeech::Rng& rng, double lo = -1.0,
                                     double hi = 1.0) {
    return ctxspeech::random_uniform(std::move(shape), rng, lo, hi);
}

} // namespace testutil
