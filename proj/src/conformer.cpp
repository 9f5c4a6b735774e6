#include "ctxspeech/conformer.hpp"

#include "ctxspeech/errors.hpp"
#include "ctxspeech/ops.hpp"

namespace ctxspeech {

void StackConfig::validate() const {
    std::string problems;
    auto bad = [&](const std::string& p) { problems += problems.empty() ? p : "; " + p; };
    if (num_blocks == 0) bad("num_blocks must be >= 1");
    if (hidden == 0) bad("hidden must be >= 1");
    if (num_heads == 0) bad("num_heads must be >= 1");
    else if (hidden % num_heads != 0)
        bad("hidden " + std::to_string(hidden) + " not divisible by num_heads " +
            std::to_string(num_heads));
    if (depthwise_kernel == 0 || depthwise_kernel % 2 == 0)
        bad("depthwise_kernel must be odd (same padding), got " + std::to_string(depthwise_kernel));
    if (ffn_kernel == 0 || ffn_kernel % 2 == 0)
        bad("ffn_kernel must be odd (same padding), got " + std::to_string(ffn_kernel));
    if (ffn_expansion == 0) bad("ffn_expansion must be >= 1");
    if (variant == AttentionVariant::LinearizedRpe && !rpe.has_value())
        bad("linearized_rpe variant needs an rpe spec");
    if (!problems.empty()) throw ConfigError("invalid stack config: " + problems);
}

AttentionConfig StackConfig::attention() const {
    validate();
    AttentionConfig cfg;
    cfg.num_heads = num_heads;
    cfg.head_dim = hidden / num_heads;
    cfg.variant = variant;
    cfg.rpe = rpe;
    return cfg;
}

Tensor conv_module(const Tensor& x, const ConvModuleWeights& w) {
    Tensor h = relu(conv1d(x, w.pre_w, w.pre_b));
    h = glu(conv1d(h, w.glu_w, w.glu_b));
    h = depthwise_conv1d(h, w.dw_w, w.dw_b);
    return conv1d(h, w.post_w, w.post_b);
}

Tensor conv_ffn(const Tensor& x, const ConvFfnWeights& w) {
    Tensor h = relu(conv1d(x, w.w1, w.b1));
    return conv1d(h, w.w2, w.b2);
}

Tensor conformer_block(const Tensor& x, const ConformerBlockWeights& w, const AttentionConfig& cfg,
                       std::span<const std::int64_t> positions, const PreparedRpe* rpe) {
    if (x.rank() != 2)
        throw ShapeError("conformer block expects a rank-2 input, got " + shape_str(x.shape()));
    Tensor h = add(x, conv_module(layer_norm(x, w.ln_conv.gamma, w.ln_conv.beta), w.conv));
    Tensor attn_in = layer_norm(h, w.ln_attn.gamma, w.ln_attn.beta);
    h = add(h, multi_head_attention(attn_in, attn_in, w.attn, cfg, positions, positions, rpe));
    return add(h, conv_ffn(layer_norm(h, w.ln_ffn.gamma, w.ln_ffn.beta), w.ffn));
}

StackResult stack_forward(const Tensor& x, const std::vector<ConformerBlockWeights>& blocks,
                          const StackConfig& cfg, const SegmentMemory* memory,
                          const PreparedRpe* rpe) {
    cfg.validate();
    if (blocks.size() != cfg.num_blocks)
        throw ConfigError("stack has " + std::to_string(blocks.size()) + " block weights, config says " +
                          std::to_string(cfg.num_blocks));
    if (x.rank() != 2)
        throw ShapeError("stack_forward expects a rank-2 input, got " + shape_str(x.shape()));
    if (x.dim(1) != cfg.hidden)
        throw ConfigError("stack input width " + std::to_string(x.dim(1)) + " != configured hidden " +
                          std::to_string(cfg.hidden));
    if (memory != nullptr && memory->num_layers() != blocks.size())
        throw ConfigError("segment memory has " + std::to_string(memory->num_layers()) +
                          " layers for a stack of " + std::to_string(blocks.size()) + " blocks");
    const AttentionConfig attn_cfg = cfg.attention();
    const std::size_t l = x.dim(0);
    const bool use_mem = memory != nullptr && !memory->empty();

    std::vector<Tensor> layer_inputs;
    layer_inputs.reserve(blocks.size());
    Tensor h = x;
    for (std::size_t n = 0; n < blocks.size(); ++n) {
        layer_inputs.push_back(h);
        Tensor block_in = h;
        std::size_t mem_rows = 0;
        if (use_mem) {
            // the cache enters behind an explicit barrier: activations flow
            // forward across the segment boundary, gradients never flow back
            Tensor cached = stop_gradient(memory->layers[n]);
            mem_rows = cached.dim(0);
            block_in = concat({cached, h}, 0);
        }
        // absolute positions over [cache ∘ current]: cached rows sit at
        // 0..mem_rows-1, current rows continue from there
        std::vector<std::int64_t> positions(mem_rows + l);
        for (std::size_t i = 0; i < positions.size(); ++i)
            positions[i] = static_cast<std::int64_t>(i);
        Tensor full = conformer_block(block_in, blocks[n], attn_cfg, positions, rpe);
        h = mem_rows == 0 ? full : last_rows(full, l);
    }
    StackResult result;
    result.output = h;
    result.memory = memory != nullptr ? update(*memory, layer_inputs) : SegmentMemory{};
    return result;
}

} // namespace ctxspeech
