#include "ctxspeech/memory.hpp"

#include <algorithm>

#include "ctxspeech/errors.hpp"

namespace ctxspeech {

SegmentMemory new_memory(std::size_t n_layers, std::size_t mem_len) {
    if (n_layers == 0) throw ConfigError("segment memory needs at least one layer");
    if (mem_len == 0) throw ConfigError("segment memory length must be >= 1");
    SegmentMemory m;
    m.layers.resize(n_layers);
    m.mem_len = mem_len;
    return m;
}

SegmentMemory update(const SegmentMemory& memory, const std::vector<Tensor>& layer_states) {
    if (layer_states.size() != memory.layers.size())
        throw ConfigError("segment memory update got " + std::to_string(layer_states.size()) +
                          " layers, expected " + std::to_string(memory.layers.size()));
    SegmentMemory next;
    next.mem_len = memory.mem_len;
    next.segment_index = memory.segment_index + 1;
    next.layers.resize(layer_states.size());
    for (std::size_t n = 0; n < layer_states.size(); ++n) {
        const Tensor& t = layer_states[n];
        if (t.rank() != 2)
            throw ShapeError("segment memory expects rank-2 layer states, got " + shape_str(t.shape()) +
                             " for layer " + std::to_string(n));
        const std::size_t rows = t.dim(0);
        if (rows == 0)
            throw ShapeError("segment memory cannot absorb an empty segment at layer " +
                             std::to_string(n));
        const std::size_t keep = std::min(memory.mem_len, rows);
        const std::size_t cols = t.dim(1);
        // plain copy of the trailing rows: no tape node, no grad flag, so the
        // cache is unconditionally cut off from whatever graph produced it
        const double* src = t.ptr() + (rows - keep) * cols;
        std::vector<double> data(src, src + keep * cols);
        next.layers[n] = Tensor::from_vec({keep, cols}, std::move(data));
    }
    return next;
}

SegmentMemory reset(const SegmentMemory& memory) {
    SegmentMemory fresh;
    fresh.layers.resize(memory.layers.size());
    fresh.mem_len = memory.mem_len;
    return fresh;
}

} // namespace ctxspeech
