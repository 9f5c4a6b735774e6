#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ctxspeech/attention.hpp"
#include "ctxspeech/memory.hpp"
#include "ctxspeech/tensor.hpp"

namespace ctxspeech {

struct LayerNormWeights {
    Tensor gamma, beta; // [D]
};

// Convolution module: pointwise-expand conv with ReLU, a GLU gate, a
// depthwise conv over time, then a pointwise projection back to D.
struct ConvModuleWeights {
    Tensor pre_w, pre_b;   // [k, D, D], [D]
    Tensor glu_w, glu_b;   // [1, D, 2D], [2D]
    Tensor dw_w, dw_b;     // [k_dw, D], [D]
    Tensor post_w, post_b; // [k, D, D], [D]
};

// Convolutional feed-forward: two convs through an expansion width.
struct ConvFfnWeights {
    Tensor w1, b1; // [k, D, E·D], [E·D]
    Tensor w2, b2; // [k, E·D, D], [D]
};

struct ConformerBlockWeights {
    LayerNormWeights ln_conv, ln_attn, ln_ffn;
    ConvModuleWeights conv;
    MhaWeights attn;
    ConvFfnWeights ffn;
};

struct StackConfig {
    std::size_t num_blocks = 4;
    std::size_t hidden = 384;
    std::size_t num_heads = 4;
    std::size_t depthwise_kernel = 5;
    std::size_t ffn_kernel = 3;
    std::size_t ffn_expansion = 4;
    AttentionVariant variant = AttentionVariant::LinearizedRpe;
    std::optional<RpeSpec> rpe = RpeSpec{};

    void validate() const;
    AttentionConfig attention() const; // head_dim = hidden / num_heads
};

Tensor conv_module(const Tensor& x, const ConvModuleWeights& w);
Tensor conv_ffn(const Tensor& x, const ConvFfnWeights& w);

// One block: x + ConvModule(LN(x)), then + MHSA(LN(.)), then + ConvFFN(LN(.)).
// Self-attention runs over all rows of x; `positions` feeds the relative
// position encoding and must cover every row.
Tensor conformer_block(const Tensor& x, const ConformerBlockWeights& w, const AttentionConfig& cfg,
                       std::span<const std::int64_t> positions = {}, const PreparedRpe* rpe = nullptr);

struct StackResult {
    Tensor output;        // [L x D], rows for the current segment only
    SegmentMemory memory; // caches absorbed from this segment (meaningful only when one was passed)
};

// Runs x through the block stack. When `memory` holds a previous segment,
// each block sees [cached ∘ current] rows with the cache behind a gradient
// barrier; positions are absolute within that concatenation and only the
// trailing current rows continue upward. The returned memory has absorbed
// this segment's per-block input states. Passing nullptr disables the
// cross-segment recurrence entirely (the returned memory is then an empty
// placeholder).
StackResult stack_forward(const Tensor& x, const std::vector<ConformerBlockWeights>& blocks,
                          const StackConfig& cfg, const SegmentMemory* memory = nullptr,
                          const PreparedRpe* rpe = nullptr);

} // namespace ctxspeech
