#pragma once

#include <atomic>
#include <cstddef>

namespace ctxspeech::memtrack {

// Process-wide counters for tensor payload allocations. `peak` is the high-water
// mark of live bytes since the last reset_peak(); the benchmark reads it to
// estimate transient working-set size per attention call.

void add(std::size_t bytes);
void sub(std::size_t bytes);
std::size_t live_bytes();
std::size_t peak_bytes();
void reset_peak();

} // namespace ctxspeech::memtrack
