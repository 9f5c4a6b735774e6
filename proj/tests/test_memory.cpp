#include <doctest.h>

#include "ctxspeech/conformer.hpp"
#include "ctxspeech/errors.hpp"
#include "ctxspeech/memory.hpp"
#include "ctxspeech/ops.hpp"
#include "ctxspeech/rng.hpp"
#include "ctxspeech/tape.hpp"
#include "testutil.hpp"

using namespace ctxspeech;
using testutil::rand_tensor;

namespace {

ConformerBlockWeights tiny_block(std::size_t D, Rng& rng) {
    auto w = [&](Shape s) { return rand_tensor(std::move(s), rng, -0.25, 0.25); };
    ConformerBlockWeights b;
    b.ln_conv = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.ln_attn = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.ln_ffn = {Tensor::full({D}, 1.0), Tensor::zeros({D})};
    b.conv = {w({3, D, D}), w({D}), w({1, D, 2 * D}), w({2 * D}), w({3, D}), w({D}), w({3, D, D}), w({D})};
    b.attn = {w({D, D}), w({D, D}), w({D, D}), w({D, D})};
    b.ffn = {w({3, D, 2 * D}), w({2 * D}), w({3, 2 * D, D}), w({D})};
    return b;
}

StackConfig tiny_config(std::size_t blocks, std::size_t D) {
    StackConfig cfg;
    cfg.num_blocks = blocks;
    cfg.hidden = D;
    cfg.num_heads = 2;
    cfg.depthwise_kernel = 3;
    cfg.ffn_kernel = 3;
    cfg.ffn_expansion = 2;
    cfg.variant = AttentionVariant::LinearizedRpe;
    return cfg;
}

} // namespace

TEST_CASE("fresh memories are empty and validated") {
    SegmentMemory m = new_memory(3, 4);
    CHECK(m.num_layers() == 3);
    CHECK(m.mem_len == 4);
    CHECK(m.empty());
    CHECK(m.segment_index == 0);
    CHECK_THROWS_AS(new_memory(0, 4), ConfigError);
    CHECK_THROWS_AS(new_memory(3, 0), ConfigError);
}

TEST_CASE("update keeps the trailing rows of each layer state") {
    Rng rng(311);
    SegmentMemory m = new_memory(2, 3);
    Tensor s0 = rand_tensor({5, 4}, rng);
    Tensor s1 = rand_tensor({5, 4}, rng);
    SegmentMemory next = update(m, {s0, s1});

    CHECK(m.empty());            // the old value is untouched
    CHECK_FALSE(next.empty());
    CHECK(next.segment_index == 1);
    REQUIRE(next.num_layers() == 2);
    CHECK(next.layers[0].dim(0) == 3); // min(mem_len=3, rows=5)
    CHECK(testutil::bit_equal(next.layers[0], last_rows(s0, 3)));
    CHECK(testutil::bit_equal(next.layers[1], last_rows(s1, 3)));

    // shorter segments cache every row they have
    Tensor trim0 = rand_tensor({2, 4}, rng);
    Tensor trim1 = rand_tensor({2, 4}, rng);
    SegmentMemory after = update(next, {trim0, trim1});
    CHECK(after.segment_index == 2);
    CHECK(after.layers[0].dim(0) == 2);
    CHECK(testutil::bit_equal(after.layers[0], trim0));
}

TEST_CASE("update rejects layer count mismatches") {
    Rng rng(313);
    SegmentMemory m = new_memory(2, 3);
    CHECK_THROWS_AS(update(m, {rand_tensor({4, 4}, rng)}), ConfigError);
}

TEST_CASE("cached rows are detached copies") {
    Rng rng(317);
    Tensor s = rand_tensor({4, 4}, rng);
    s.set_requires_grad(true);
    GradTape tape_obj;
    SegmentMemory next;
    {
        tape::Scope scope(tape_obj);
        next = update(new_memory(1, 2), {s});
    }
    CHECK(tape_obj.num_nodes() == 0); // cache maintenance never touches the tape
    CHECK_FALSE(next.layers[0].requires_grad());
    CHECK(next.layers[0].id() != s.id());
}

TEST_CASE("reset forgets content but keeps the configuration") {
    Rng rng(331);
    SegmentMemory m = update(new_memory(2, 3), {rand_tensor({5, 4}, rng), rand_tensor({5, 4}, rng)});
    SegmentMemory r = reset(m);
    CHECK(r.empty());
    CHECK(r.segment_index == 0);
    CHECK(r.mem_len == 3);
    CHECK(r.num_layers() == 2);
}

TEST_CASE("a second segment sees the first through the cache") {
    Rng rng(337);
    const std::size_t D = 6;
    StackConfig cfg = tiny_config(2, D);
    std::vector<ConformerBlockWeights> blocks{tiny_block(D, rng), tiny_block(D, rng)};

    Tensor seg_a = rand_tensor({5, D}, rng);
    Tensor seg_b = rand_tensor({4, D}, rng);

    SegmentMemory mem = new_memory(2, 3);
    StackResult ra = stack_forward(seg_a, blocks, cfg, &mem);
    CHECK(ra.memory.segment_index == 1);
    CHECK(ra.memory.layers[0].dim(0) == 3);
    // the first block's cache is the raw input suffix
    CHECK(testutil::bit_equal(ra.memory.layers[0], last_rows(seg_a, 3)));

    StackResult rb = stack_forward(seg_b, blocks, cfg, &ra.memory);
    CHECK(rb.output.dim(0) == 4);

    // without the cache the same segment comes out different
    SegmentMemory fresh = new_memory(2, 3);
    StackResult rb_cold = stack_forward(seg_b, blocks, cfg, &fresh);
    CHECK(testutil::max_abs_diff(rb.output, rb_cold.output) > 1e-9);

    // and reset really restores the cold-start behavior bit for bit
    SegmentMemory wiped = reset(ra.memory);
    StackResult rb_reset = stack_forward(seg_b, blocks, cfg, &wiped);
    CHECK(testutil::bit_equal(rb_reset.output, rb_cold.output));

    // recurrence disabled entirely matches a cold start too
    StackResult rb_off = stack_forward(seg_b, blocks, cfg, nullptr);
    CHECK(testutil::bit_equal(rb_off.output, rb_cold.output));
}

TEST_CASE("perturbing the cache changes the next segment's output") {
    Rng rng(347);
    const std::size_t D = 6;
    StackConfig cfg = tiny_config(2, D);
    std::vector<ConformerBlockWeights> blocks{tiny_block(D, rng), tiny_block(D, rng)};
    Tensor seg_a = rand_tensor({4, D}, rng);
    Tensor seg_b = rand_tensor({4, D}, rng);

    SegmentMemory mem = new_memory(2, 2);
    StackResult ra = stack_forward(seg_a, blocks, cfg, &mem);
    Tensor base = stack_forward(seg_b, blocks, cfg, &ra.memory).output;

    std::size_t changed = 0;
    const std::size_t trials = 20;
    for (std::size_t t = 0; t < trials; ++t) {
        SegmentMemory bumped = ra.memory;
        std::vector<double> v(bumped.layers[0].data().begin(), bumped.layers[0].data().end());
        v[rng.below(v.size())] += rng.uniform(0.2, 0.7);
        bumped.layers[0] = Tensor::from_vec(bumped.layers[0].shape(), std::move(v));
        Tensor out = stack_forward(seg_b, blocks, cfg, &bumped).output;
        if (testutil::max_abs_diff(out, base) > 1e-12) ++changed;
    }
    CHECK(changed >= 19);
}

TEST_CASE("gradients flow to current inputs but never into the cache") {
    Rng rng(353);
    const std::size_t D = 4;
    StackConfig cfg = tiny_config(2, D);
    std::vector<ConformerBlockWeights> blocks{tiny_block(D, rng), tiny_block(D, rng)};

    Tensor seg_a = rand_tensor({3, D}, rng);
    SegmentMemory mem = update(new_memory(2, 2), {seg_a, rand_tensor({3, D}, rng)});

    Tensor x = rand_tensor({3, D}, rng, -0.8, 0.8);
    Tensor w = rand_tensor({3, D}, rng);

    x.set_requires_grad(true);
    GradTape tape_obj;
    GradMap grads;
    {
        tape::Scope scope(tape_obj);
        StackResult r = stack_forward(x, blocks, cfg, &mem);
        grads = backward(tape_obj, sum(mul(r.output, w)));
    }

    // every gradient seen by a cache row is exactly zero
    std::size_t barrier_zero = 0;
    for (const auto& [id, g] : grads) {
        if (!tape_obj.is_barrier(id)) continue;
        ++barrier_zero;
        for (double v : g.data()) CHECK(v == 0.0);
    }
    CHECK(barrier_zero == 2); // one stop-gradient per block

    // and the gradient on the live input is real
    auto f = [&](const std::vector<Tensor>& p) {
        return sum(mul(stack_forward(p[0], blocks, cfg, &mem).output, w));
    };
    CHECK(testutil::max_grad_rel_error({x}, f) < 1e-4);
}
