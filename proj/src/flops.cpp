#include "ctxspeech/flops.hpp"

namespace ctxspeech::flops {

namespace {
thread_local std::uint64_t g_macs = 0;
}

void add(std::uint64_t macs) { g_macs += macs; }
std::uint64_t count() { return g_macs; }
void reset() { g_macs = 0; }

} // namespace ctxspeech::flops
