#include "ctxspeech/tape.hpp"

#include "ctxspeech/errors.hpp"

namespace ctxspeech {

namespace {
thread_local GradTape* g_active = nullptr;

Tensor add_payloads(const Tensor& a, const Tensor& b) {
    std::vector<double> out(a.data().begin(), a.data().end());
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return Tensor::from_vec(a.shape(), std::move(out));
}
} // namespace

void GradSink::add(const Tensor& input, Tensor grad) {
    if (!input.same_shape(grad)) {
        throw ContractError("gradient shape " + shape_str(grad.shape()) + " does not match tensor shape " +
                            shape_str(input.shape()));
    }
    auto it = grads_.find(input.id());
    if (it == grads_.end()) {
        grads_.emplace(input.id(), std::move(grad));
    } else {
        it->second = add_payloads(it->second, grad);
    }
}

void GradTape::record(const char* op, std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward) {
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
}

void GradTape::add_barrier(const Tensor& t) {
    barrier_.insert(t.id());
    barrier_shapes_.emplace(t.id(), t.shape());
}

GradMap backward(const GradTape& tape, const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    bool reachable = false;
    for (const auto& node : tape.nodes_) {
        if (node.output.id() == loss.id()) {
            reachable = true;
            break;
        }
    }
    if (!reachable) throw ContractError("backward: loss tensor was not produced by a recorded operation");

    tape::Pause pause; // closures run raw ops; never re-record

    GradMap grads;
    grads.emplace(loss.id(), Tensor::full(loss.shape(), 1.0));
    GradSink sink(grads);

    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
        const auto& node = *it;
        if (tape.is_barrier(node.output.id())) continue; // flow cut at barrier
        auto git = grads.find(node.output.id());
        if (git == grads.end()) continue; // nothing flowed into this node
        if (node.backward) node.backward(git->second, sink);
    }

    // every recorded tensor gets an entry; missing ones saw zero flow
    for (const auto& node : tape.nodes_) {
        for (const auto& in : node.inputs) {
            grads.try_emplace(in.id(), Tensor::zeros(in.shape()));
        }
        grads.try_emplace(node.output.id(), Tensor::zeros(node.output.shape()));
    }
    // barrier tensors receive exactly zero, even if something was accumulated
    for (TensorId id : tape.barrier_) {
        grads.insert_or_assign(id, Tensor::zeros(tape.barrier_shapes_.at(id)));
    }
    return grads;
}

namespace tape {

GradTape* active() { return g_active; }

Scope::Scope(GradTape& t) : prev_(g_active) { g_active = &t; }
Scope::~Scope() { g_active = prev_; }

Pause::Pause() : prev_(g_active) { g_active = nullptr; }
Pause::~Pause() { g_active = prev_; }

} // namespace tape

} // namespace ctxspeech
