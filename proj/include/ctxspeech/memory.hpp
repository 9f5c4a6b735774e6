#pragma once

#include <cstddef>
#include <vector>

#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

// Per-layer cache of the previous segment's block inputs. After a segment is
// absorbed, layers[n] holds the trailing min(mem_len, L) rows of the state
// that entered block n, detached from any recorded graph. The next segment
// prepends these rows so attention can look back across the segment boundary
// without growing the working set. Treated as an immutable value: update and
// reset return new memories.
struct SegmentMemory {
    std::vector<Tensor> layers; // default (size-0) tensors until the first update
    std::size_t mem_len = 1;
    std::size_t segment_index = 0;

    std::size_t num_layers() const { return layers.size(); }
    bool empty() const { return segment_index == 0; }
};

SegmentMemory new_memory(std::size_t n_layers, std::size_t mem_len);

// Absorbs one segment's per-block input states (one [L x D] tensor per
// layer), keeping the trailing min(mem_len, L) rows of each as a plain
// detached copy. Replaces the previous caches entirely.
SegmentMemory update(const SegmentMemory& memory, const std::vector<Tensor>& layer_states);

// Forgets everything; the result compares equal in behavior to new_memory.
SegmentMemory reset(const SegmentMemory& memory);

} // namespace ctxspeech
