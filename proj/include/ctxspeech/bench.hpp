#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctxspeech/attention.hpp"

namespace ctxspeech {

// Isolated attention-kernel benchmark: heads independent [L x d] instances
// per run, honest wall-clock medians, and allocation-counter peaks.
struct BenchSpec {
    std::vector<std::size_t> lengths = {256, 512, 1024, 2048, 4096, 8192};
    std::vector<AttentionVariant> variants = {AttentionVariant::Softmax, AttentionVariant::Linearized,
                                              AttentionVariant::LinearizedRpe};
    std::size_t dim = 64;
    std::size_t heads = 1;
    std::size_t repetitions = 10;
    std::size_t warmup = 3;
    std::uint64_t seed = 42;
    std::size_t threads = 1;          // >1 runs independent instances in parallel (throughput mode)
    std::size_t mem_cap_bytes = 0;    // 0 = unlimited; otherwise refuse runs estimated above the cap

    void validate() const;
};

struct BenchRow {
    AttentionVariant variant;
    std::size_t length = 0;
    bool oom = false;            // refused by the memory cap or killed by allocation failure
    double median_ms = 0.0;      // meaningless when oom
    double ms_per_element = 0.0; // median_ms / length
    std::uint64_t peak_bytes_est = 0; // measured peak; for oom rows, the refused estimate
    std::uint64_t macs = 0;           // multiply-accumulates for one full run
};

struct BenchReport {
    BenchSpec spec;
    std::vector<BenchRow> rows;
    // least-squares slope of log(median time) vs log(length) per variant;
    // present only when the variant has at least 4 non-oom points
    std::map<std::string, double> slopes;
};

BenchReport run_bench(const BenchSpec& spec);

// header: variant,length,median_ms,ms_per_element,peak_bytes_est
// oom rows print the string "oom" in both time columns
std::string bench_csv(const BenchReport& report);
std::string bench_json(const BenchReport& report);

double fit_loglog_slope(std::span<const double> lengths, std::span<const double> times);

} // namespace ctxspeech
