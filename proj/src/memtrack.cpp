#include "ctxspeech/memtrack.hpp"

namespace ctxspeech::memtrack {

namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};
} // namespace

void add(std::size_t bytes) {
    std::size_t now = g_live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t prev = g_peak.load(std::memory_order_relaxed);
    while (now > prev && !g_peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
}

void sub(std::size_t bytes) { g_live.fetch_sub(bytes, std::memory_order_relaxed); }

std::size_t live_bytes() { return g_live.load(std::memory_order_relaxed); }

std::size_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }

void reset_peak() { g_peak.store(g_live.load(std::memory_order_relaxed), std::memory_order_relaxed); }

} // namespace ctxspeech::memtrack
