#pragma once

#include <cstdint>

namespace ctxspeech::flops {

// Thread-local multiply-accumulate counter. matmul, conv and the attention
// kernels add closed-form op counts; complexity tests compare counts at L vs 2L
// instead of timing.

void add(std::uint64_t macs);
std::uint64_t count();
void reset();

} // namespace ctxspeech::flops
