#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxspeech/rng.hpp"
#include "ctxspeech/tape.hpp"
#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

// Dense primitives. Every op is a pure function of its inputs; when a tape is
// active and any input requires grad, the op records a backward closure and the
// result is marked requires_grad. conv ops use "same" zero padding so sequence
// length is preserved.

Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k] x [k,n] -> [m,n]
Tensor transpose(const Tensor& x);                      // [m,n] -> [n,m]
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor sub(const Tensor& a, const Tensor& b);           // same shape
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise, same shape
Tensor scalar_mul(const Tensor& x, double c);
Tensor broadcast_add(const Tensor& x, const Tensor& bias); // [m,n] + [n], rowwise

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor elu_plus_one(const Tensor& x); // x>0 ? x+1 : exp(x); strictly positive

Tensor softmax_last_axis(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x [L,Cin], w [K,Cin,Cout], bias [Cout] (empty tensor = no bias)
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);
// x [L,C], w [K,C], bias [C] (empty tensor = no bias)
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor glu(const Tensor& x); // [L,2C] -> [L,C], first half gated by sigmoid of second

// Seeded mask, survivors scaled by 1/(1-rate); rate 0 returns the input as-is.
Tensor dropout(const Tensor& x, double rate, std::uint64_t seed);

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
Tensor last_rows(const Tensor& x, std::size_t count);

// row i of x appears counts[i] consecutive times; counts must all be >= 1
Tensor repeat_rows(const Tensor& x, std::span<const std::size_t> counts);

Tensor sum(const Tensor& x); // scalar

// Detached copy whose tape node is a barrier: backward assigns it exactly zero
// and stops the flow.
Tensor stop_gradient(const Tensor& x);

Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi);

} // namespace ctxspeech
