#include <doctest.h>

#include "ctxspeech/conformer.hpp"
#include "ctxspeech/errors.hpp"
#include "ctxspeech/ops.hpp"
#include "ctxspeech/rng.hpp"
#include "testutil.hpp"

using namespace ctxspeech;
using testutil::rand_tensor;

namespace {

// small random block weights for a stack of width D with E-fold ffn expansion
ConformerBlockWeights random_block(std::size_t D, std::size_t dw_k, std::size_t ffn_k, std::size_t E,
                                   Rng& rng) {
    auto w = [&](Shape s) { return rand_tensor(std::move(s), rng, -0.2, 0.2); };
    ConformerBlockWeights b;
    b.ln_conv = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.ln_attn = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.ln_ffn = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.conv = {w({3, D, D}), Tensor::zeros({D}), w({1, D, 2 * D}), Tensor::zeros({2 * D}),
              w({dw_k, D}),  Tensor::zeros({D}), w({3, D, D}),    Tensor::zeros({D})};
    b.attn = {w({D, D}), w({D, D}), w({D, D}), w({D, D})};
    b.ffn = {w({ffn_k, D, E * D}), Tensor::zeros({E * D}), w({ffn_k, E * D, D}), Tensor::zeros({D})};
    return b;
}

ConformerBlockWeights zero_block(std::size_t D, std::size_t dw_k, std::size_t ffn_k, std::size_t E) {
    ConformerBlockWeights b;
    b.ln_conv = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.ln_attn = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.ln_ffn = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.conv = {Tensor::zeros({3, D, D}), Tensor::zeros({D}), Tensor::zeros({1, D, 2 * D}),
              Tensor::zeros({2 * D}),   Tensor::zeros({dw_k, D}), Tensor::zeros({D}),
              Tensor::zeros({3, D, D}), Tensor::zeros({D})};
    b.attn = {Tensor::zeros({D, D}), Tensor::zeros({D, D}), Tensor::zeros({D, D}), Tensor::zeros({D, D})};
    b.ffn = {Tensor::zeros({ffn_k, D, E * D}), Tensor::zeros({E * D}), Tensor::zeros({ffn_k, E * D, D}),
             Tensor::zeros({D})};
    return b;
}

StackConfig small_config(std::size_t blocks, std::size_t D, std::size_t heads) {
    StackConfig cfg;
    cfg.num_blocks = blocks;
    cfg.hidden = D;
    cfg.num_heads = heads;
    cfg.depthwise_kernel = 5;
    cfg.ffn_kernel = 3;
    cfg.ffn_expansion = 2;
    cfg.variant = AttentionVariant::LinearizedRpe;
    return cfg;
}

} // namespace

TEST_CASE("conv module and ffn keep the sequence shape") {
    Rng rng(211);
    ConformerBlockWeights b = random_block(6, 5, 3, 2, rng);
    Tensor x = rand_tensor({7, 6}, rng);
    Tensor y = conv_module(x, b.conv);
    CHECK(y.dim(0) == 7);
    CHECK(y.dim(1) == 6);
    Tensor z = conv_ffn(x, b.ffn);
    CHECK(z.dim(0) == 7);
    CHECK(z.dim(1) == 6);
}

TEST_CASE("a single-row sequence passes through every sub-module") {
    Rng rng(223);
    ConformerBlockWeights b = random_block(4, 5, 3, 2, rng);
    StackConfig cfg = small_config(1, 4, 2);
    Tensor x = rand_tensor({1, 4}, rng);
    Tensor y = conformer_block(x, b, cfg.attention());
    CHECK(y.dim(0) == 1);
    CHECK(y.dim(1) == 4);
    CHECK(y.all_finite());
}

TEST_CASE("zero-weight blocks are the exact identity") {
    Rng rng(227);
    StackConfig cfg = small_config(3, 6, 2);
    std::vector<ConformerBlockWeights> blocks;
    for (std::size_t i = 0; i < 3; ++i) blocks.push_back(zero_block(6, 5, 3, 2));
    Tensor x = rand_tensor({5, 6}, rng, -2.0, 2.0);
    StackResult r = stack_forward(x, blocks, cfg);
    CHECK(testutil::bit_equal(r.output, x));
}

TEST_CASE("stack output differs from its input with live weights") {
    Rng rng(229);
    StackConfig cfg = small_config(2, 6, 2);
    std::vector<ConformerBlockWeights> blocks;
    for (std::size_t i = 0; i < 2; ++i) blocks.push_back(random_block(6, 5, 3, 2, rng));
    Tensor x = rand_tensor({5, 6}, rng);
    StackResult r = stack_forward(x, blocks, cfg);
    CHECK(r.output.dim(0) == 5);
    CHECK(r.output.dim(1) == 6);
    CHECK(testutil::max_abs_diff(r.output, x) > 1e-6);
}

TEST_CASE("stack validates block count, width and memory layers") {
    Rng rng(233);
    StackConfig cfg = small_config(2, 6, 2);
    std::vector<ConformerBlockWeights> blocks{random_block(6, 5, 3, 2, rng)};
    Tensor x = rand_tensor({4, 6}, rng);
    CHECK_THROWS_AS(stack_forward(x, blocks, cfg), ConfigError);

    blocks.push_back(random_block(6, 5, 3, 2, rng));
    CHECK_THROWS_AS(stack_forward(rand_tensor({4, 7}, rng), blocks, cfg), ConfigError);

    SegmentMemory wrong = new_memory(3, 2); // three layers for a two-block stack
    CHECK_THROWS_AS(stack_forward(x, blocks, cfg, &wrong), ConfigError);
}

TEST_CASE("stack config validation lists all problems") {
    StackConfig cfg = small_config(0, 10, 4); // zero blocks, 10 not divisible by 4
    cfg.depthwise_kernel = 4;                 // and an even kernel
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("num_blocks") != std::string::npos);
        CHECK(msg.find("divisible") != std::string::npos);
        CHECK(msg.find("odd") != std::string::npos);
    }
}

TEST_CASE("conformer block gradients match finite differences") {
    Rng rng(239);
    const std::size_t D = 4;
    ConformerBlockWeights b = random_block(D, 3, 3, 2, rng);
    StackConfig cfg = small_config(1, D, 2);
    cfg.depthwise_kernel = 3;
    AttentionConfig acfg = cfg.attention();
    Tensor x = rand_tensor({3, D}, rng, -1.0, 1.0);
    Tensor w = rand_tensor({3, D}, rng);

    // spot-check the input and one weight from each sub-module
    auto f = [&](const std::vector<Tensor>& p) {
        ConformerBlockWeights used = b;
        used.conv.pre_w = p[1];
        used.attn.w_q = p[2];
        used.ffn.w1 = p[3];
        used.ln_attn.gamma = p[4];
        return sum(mul(conformer_block(p[0], used, acfg), w));
    };
    CHECK(testutil::max_grad_rel_error({x, b.conv.pre_w, b.attn.w_q, b.ffn.w1, b.ln_attn.gamma}, f) <
          2e-4);
}
