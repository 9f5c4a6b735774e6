#include "ctxspeech/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <new>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ctxspeech/errors.hpp"
#include "ctxspeech/flops.hpp"
#include "ctxspeech/memtrack.hpp"
#include "ctxspeech/ops.hpp"
#include "ctxspeech/rng.hpp"

namespace ctxspeech {

namespace {

struct Instance {
    Tensor q, k, v;
};

// Transient working-set estimate for one forward call, used only to gate the
// optional memory cap before anything is allocated.
std::uint64_t estimate_bytes(AttentionVariant variant, std::size_t l, std::size_t d) {
    const std::uint64_t ld = static_cast<std::uint64_t>(l) * d;
    switch (variant) {
    case AttentionVariant::Softmax:
        // score matrix dominates, plus the output rows
        return (static_cast<std::uint64_t>(l) * l + ld) * sizeof(double);
    case AttentionVariant::Linearized:
        // kernel-mapped copies, summaries, output
        return (static_cast<std::uint64_t>(d) * d + d + 3 * ld) * sizeof(double);
    case AttentionVariant::LinearizedRpe:
        // as linearized plus the position-mapped copies
        return (static_cast<std::uint64_t>(d) * d + d + 5 * ld) * sizeof(double);
    }
    return 0;
}

void run_instance(AttentionVariant variant, const Instance& inst, std::size_t dim,
                  std::span<const std::int64_t> positions, const RpeConfig* rpe,
                  const RpePowers* powers) {
    switch (variant) {
    case AttentionVariant::Softmax:
        softmax_attention(inst.q, inst.k, inst.v, 1.0 / std::sqrt(static_cast<double>(dim)));
        break;
    case AttentionVariant::Linearized:
        linearized_attention(inst.q, inst.k, inst.v);
        break;
    case AttentionVariant::LinearizedRpe: {
        Tensor qm = apply_rpe(elu_plus_one(inst.q), positions, *rpe, RpeRole::Query, powers);
        Tensor km = apply_rpe(elu_plus_one(inst.k), positions, *rpe, RpeRole::Key, powers);
        linearized_premapped(qm, km, inst.v);
        break;
    }
    }
}

double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

} // namespace

void BenchSpec::validate() const {
    if (lengths.empty()) throw ConfigError("bench needs at least one length");
    for (std::size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1])
            throw ConfigError("bench lengths must be strictly increasing");
    if (lengths.front() == 0) throw ConfigError("bench lengths must be >= 1");
    if (variants.empty()) throw ConfigError("bench needs at least one variant");
    if (repetitions < 3) throw ConfigError("bench repetitions must be >= 3");
    if (dim == 0) throw ConfigError("bench dim must be >= 1");
    if (heads == 0) throw ConfigError("bench heads must be >= 1");
    if (threads == 0) throw ConfigError("bench threads must be >= 1");
}

double fit_loglog_slope(std::span<const double> lengths, std::span<const double> times) {
    if (lengths.size() != times.size() || lengths.size() < 2)
        throw ContractError("slope fit needs matching samples, at least 2");
    const std::size_t n = lengths.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += std::log(lengths[i]);
        my += std::log(times[i]);
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double cov = 0.0, var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = std::log(lengths[i]) - mx;
        cov += dx * (std::log(times[i]) - my);
        var += dx * dx;
    }
    if (var == 0.0) throw ContractError("slope fit needs at least two distinct lengths");
    return cov / var;
}

BenchReport run_bench(const BenchSpec& spec) {
    spec.validate();
    BenchReport report;
    report.spec = spec;

    // per-head position transforms are fixed across lengths; cache powers up
    // to the longest sequence once
    AttentionConfig rpe_cfg;
    rpe_cfg.num_heads = spec.heads;
    rpe_cfg.head_dim = spec.dim;
    rpe_cfg.variant = AttentionVariant::LinearizedRpe;
    rpe_cfg.rpe = RpeSpec{1.0, mix_seed(spec.seed, fnv1a64("rpe")), false};
    const PreparedRpe prepared = PreparedRpe::build(rpe_cfg, spec.lengths.back() - 1);

    for (AttentionVariant variant : spec.variants) {
        for (std::size_t length : spec.lengths) {
            BenchRow row;
            row.variant = variant;
            row.length = length;

            const std::uint64_t estimate =
                estimate_bytes(variant, length, spec.dim) * spec.heads * spec.threads;
            if (spec.mem_cap_bytes != 0 && estimate > spec.mem_cap_bytes) {
                row.oom = true;
                row.peak_bytes_est = estimate;
                report.rows.push_back(row);
                continue;
            }

            std::vector<std::int64_t> positions(length);
            for (std::size_t i = 0; i < length; ++i) positions[i] = static_cast<std::int64_t>(i);

            try {
                // one input set per thread so parallel instances never share
                std::vector<std::vector<Instance>> inputs(spec.threads);
                Rng rng(mix_seed(spec.seed, mix_seed(fnv1a64(variant_name(variant)), length)));
                for (std::size_t t = 0; t < spec.threads; ++t) {
                    inputs[t].reserve(spec.heads);
                    for (std::size_t h = 0; h < spec.heads; ++h) {
                        inputs[t].push_back(Instance{random_uniform({length, spec.dim}, rng, -1.0, 1.0),
                                                     random_uniform({length, spec.dim}, rng, -1.0, 1.0),
                                                     random_uniform({length, spec.dim}, rng, -1.0, 1.0)});
                    }
                }

                auto run_all_heads = [&](std::size_t thread_idx) {
                    for (std::size_t h = 0; h < spec.heads; ++h)
                        run_instance(variant, inputs[thread_idx][h], spec.dim, positions,
                                     &prepared.head(h), prepared.powers_for(h));
                };

                // warmup on the calling thread; the first pass also records
                // the MAC count for one full run
                for (std::size_t wi = 0; wi < std::max<std::size_t>(spec.warmup, 1); ++wi) {
                    if (wi == 0) flops::reset();
                    run_all_heads(0);
                    if (wi == 0) row.macs = flops::count();
                }

                std::vector<double> times_ms, peaks;
                times_ms.reserve(spec.repetitions);
                for (std::size_t rep = 0; rep < spec.repetitions; ++rep) {
                    const std::size_t live_before = memtrack::live_bytes();
                    memtrack::reset_peak();
                    const auto t0 = std::chrono::steady_clock::now();
                    if (spec.threads == 1) {
                        run_all_heads(0);
                    } else {
                        std::vector<std::thread> workers;
                        workers.reserve(spec.threads);
                        for (std::size_t t = 0; t < spec.threads; ++t)
                            workers.emplace_back(run_all_heads, t);
                        for (std::thread& w : workers) w.join();
                    }
                    const auto dt = std::chrono::steady_clock::now() - t0;
                    times_ms.push_back(std::chrono::duration<double, std::milli>(dt).count());
                    peaks.push_back(static_cast<double>(memtrack::peak_bytes() - live_before));
                }
                row.median_ms = median(times_ms);
                row.ms_per_element = row.median_ms / static_cast<double>(length);
                row.peak_bytes_est = static_cast<std::uint64_t>(median(peaks));
            } catch (const std::bad_alloc&) {
                row.oom = true;
                row.peak_bytes_est = estimate;
            } catch (const std::length_error&) {
                row.oom = true;
                row.peak_bytes_est = estimate;
            }
            report.rows.push_back(row);
        }
    }

    for (AttentionVariant variant : spec.variants) {
        std::vector<double> ls, ts;
        for (const BenchRow& row : report.rows) {
            if (row.variant == variant && !row.oom) {
                ls.push_back(static_cast<double>(row.length));
                ts.push_back(row.median_ms);
            }
        }
        if (ls.size() >= 4) report.slopes[variant_name(variant)] = fit_loglog_slope(ls, ts);
    }
    return report;
}

std::string bench_csv(const BenchReport& report) {
    std::ostringstream out;
    out << "variant,length,median_ms,ms_per_element,peak_bytes_est\n";
    for (const BenchRow& row : report.rows) {
        out << variant_name(row.variant) << ',' << row.length << ',';
        if (row.oom) {
            out << "oom,oom," << row.peak_bytes_est << '\n';
        } else {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.6f", row.median_ms);
            out << buf << ',';
            std::snprintf(buf, sizeof(buf), "%.9f", row.ms_per_element);
            out << buf << ',' << row.peak_bytes_est << '\n';
        }
    }
    return out.str();
}

std::string bench_json(const BenchReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const BenchRow& row : report.rows) {
        nlohmann::json r{{"variant", variant_name(row.variant)},
                         {"length", row.length},
                         {"oom", row.oom},
                         {"peak_bytes_est", row.peak_bytes_est},
                         {"macs", row.macs}};
        if (!row.oom) {
            r["median_ms"] = row.median_ms;
            r["ms_per_element"] = row.ms_per_element;
        }
        rows.push_back(std::move(r));
    }
    nlohmann::json variants = nlohmann::json::array();
    for (AttentionVariant v : report.spec.variants) variants.push_back(variant_name(v));
    nlohmann::json j{{"mode", report.spec.threads > 1 ? "throughput" : "latency"},
                     {"threads", report.spec.threads},
                     {"dim", report.spec.dim},
                     {"heads", report.spec.heads},
                     {"repetitions", report.spec.repetitions},
                     {"warmup", report.spec.warmup},
                     {"seed", report.spec.seed},
                     {"lengths", report.spec.lengths},
                     {"variants", variants},
                     {"rows", rows},
                     {"slopes", report.slopes}};
    return j.dump(2);
}

} // namespace ctxspeech
