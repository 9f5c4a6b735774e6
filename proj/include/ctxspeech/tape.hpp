#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

using GradMap = std::unordered_map<TensorId, Tensor>;

// Accumulates gradient contributions per tensor id during the reverse sweep.
class GradSink {
public:
    explicit GradSink(GradMap& grads) : grads_(grads) {}
    void add(const Tensor& input, Tensor grad);

private:
    GradMap& grads_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

// Reverse-mode tape. One tape per forward/backward pass, single-threaded.
// Tensors in the barrier set cut gradient flow and always come out of
// backward() with an exactly-zero gradient.
class GradTape {
public:
    void record(const char* op, std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward);
    void add_barrier(const Tensor& t);
    bool is_barrier(TensorId id) const { return barrier_.count(id) > 0; }
    std::size_t num_nodes() const { return nodes_.size(); }

    friend GradMap backward(const GradTape& tape, const Tensor& loss);

private:
    struct Node {
        const char* op;
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::unordered_set<TensorId> barrier_;
    std::unordered_map<TensorId, Shape> barrier_shapes_;
};

// Gradient of `loss` (scalar, produced by ops recorded on `tape`) with respect
// to every tensor the tape touched. Barrier tensors map to exact zeros.
GradMap backward(const GradTape& tape, const Tensor& loss);

namespace tape {

GradTape* active();

// Makes `t` the active tape for the current scope.
struct Scope {
    explicit Scope(GradTape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

private:
    GradTape* prev_;
};

// Suspends recording for the current scope (used by backward itself and by
// cache maintenance that must stay off the tape).
struct Pause {
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

private:
    GradTape* prev_;
};

} // namespace tape

} // namespace ctxspeech
