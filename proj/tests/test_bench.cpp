#include <doctest.h>

#include <string>
#include <vector>

#include <json.hpp>

#include "ctxspeech/bench.hpp"
#include "ctxspeech/errors.hpp"

using namespace ctxspeech;

namespace {

BenchSpec tiny_spec() {
    BenchSpec spec;
    spec.lengths = {8, 16, 32, 64};
    spec.dim = 4;
    spec.repetitions = 3;
    spec.warmup = 1;
    spec.seed = 11;
    return spec;
}

} // namespace

TEST_CASE("bench spec validation") {
    CHECK_NOTHROW(tiny_spec().validate());

    BenchSpec bad = tiny_spec();
    bad.lengths = {8, 8, 16};
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = tiny_spec();
    bad.repetitions = 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = tiny_spec();
    bad.lengths.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = tiny_spec();
    bad.variants.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = tiny_spec();
    bad.dim = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("a small latency run produces complete rows and slopes") {
    BenchSpec spec = tiny_spec();
    BenchReport report = run_bench(spec);

    REQUIRE(report.rows.size() == spec.lengths.size() * spec.variants.size());
    for (const BenchRow& row : report.rows) {
        CHECK_FALSE(row.oom);
        CHECK(row.median_ms >= 0.0);
        CHECK(row.ms_per_element == doctest::Approx(row.median_ms / static_cast<double>(row.length)));
        CHECK(row.macs > 0);
        CHECK(row.peak_bytes_est > 0);
    }

    // four clean points per variant is enough for a slope
    for (AttentionVariant v : spec.variants) CHECK(report.slopes.count(variant_name(v)) == 1);

    // the quadratic kernel must do asymptotically more arithmetic
    auto macs_at = [&](AttentionVariant v, std::size_t len) -> std::uint64_t {
        for (const BenchRow& row : report.rows)
            if (row.variant == v && row.length == len) return row.macs;
        return 0;
    };
    const double softmax_growth = static_cast<double>(macs_at(AttentionVariant::Softmax, 64)) /
                                  static_cast<double>(macs_at(AttentionVariant::Softmax, 8));
    const double linear_growth = static_cast<double>(macs_at(AttentionVariant::Linearized, 64)) /
                                 static_cast<double>(macs_at(AttentionVariant::Linearized, 8));
    CHECK(softmax_growth > 30.0); // ~64x for a quadratic term
    CHECK(linear_growth < 12.0);  // ~8x for a linear one
}

TEST_CASE("bench runs are reproducible per seed") {
    BenchSpec spec = tiny_spec();
    BenchReport a = run_bench(spec);
    BenchReport b = run_bench(spec);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].macs == b.rows[i].macs);
}

TEST_CASE("the memory cap turns rows into graceful oom entries") {
    BenchSpec spec = tiny_spec();
    spec.mem_cap_bytes = 1; // below any estimate
    BenchReport report = run_bench(spec);
    REQUIRE(report.rows.size() == 12);
    for (const BenchRow& row : report.rows) {
        CHECK(row.oom);
        CHECK(row.peak_bytes_est > 0); // the refused estimate is reported
    }
    CHECK(report.slopes.empty()); // no clean points anywhere

    const std::string csv = bench_csv(report);
    CHECK(csv.find("oom,oom") != std::string::npos);
}

TEST_CASE("a generous cap lets the small runs through") {
    BenchSpec spec = tiny_spec();
    spec.lengths = {8, 16};
    spec.mem_cap_bytes = 64ull << 20;
    BenchReport report = run_bench(spec);
    for (const BenchRow& row : report.rows) CHECK_FALSE(row.oom);
}

TEST_CASE("csv output follows the documented schema") {
    BenchSpec spec = tiny_spec();
    spec.lengths = {8, 16, 32, 64};
    spec.variants = {AttentionVariant::Linearized};
    BenchReport report = run_bench(spec);
    const std::string csv = bench_csv(report);

    CHECK(csv.rfind("variant,length,median_ms,ms_per_element,peak_bytes_est\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 1 + 4);
    CHECK(csv.find("linearized,8,") != std::string::npos);
}

TEST_CASE("json output carries the mode, rows and slopes") {
    BenchSpec spec = tiny_spec();
    BenchReport report = run_bench(spec);
    auto j = nlohmann::json::parse(bench_json(report));
    CHECK(j["mode"] == "latency");
    CHECK(j["rows"].size() == 12);
    CHECK(j["slopes"].size() == 3);
    CHECK(j["dim"] == 4);
    CHECK(j["lengths"].size() == 4);

    spec.threads = 2;
    spec.lengths = {8, 16};
    auto jt = nlohmann::json::parse(bench_json(run_bench(spec)));
    CHECK(jt["mode"] == "throughput");
}

TEST_CASE("log-log slope fitting recovers exact power laws") {
    const double lengths[] = {1.0, 2.0, 4.0, 8.0, 16.0};
    const double quadratic[] = {3.0, 12.0, 48.0, 192.0, 768.0};
    CHECK(fit_loglog_slope(lengths, quadratic) == doctest::Approx(2.0).epsilon(1e-12));

    const double linear[] = {0.5, 1.0, 2.0, 4.0, 8.0};
    CHECK(fit_loglog_slope(lengths, linear) == doctest::Approx(1.0).epsilon(1e-12));

    const double one_point[] = {1.0};
    CHECK_THROWS_AS(fit_loglog_slope({one_point, 1}, {one_point, 1}), ContractError);
}
