#include <doctest/doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>

#include "rdkv/quantizer.hpp"
#include "test_support.hpp"

using namespace rdkv;
using testsupport::Rng;

TEST_SUITE_BEGIN("quantizer");

TEST_CASE("bit set invariants") {
    BitSet full;
    CHECK_NOTHROW(full.validate());
    CHECK(full.contains(0));
    CHECK(full.contains(16));

    BitSet tri = BitSet::parse("0,4,16");
    CHECK_NOTHROW(tri.validate());

    BitSet quant_only = BitSet::parse("2,4,8,16");
    CHECK_NOTHROW(quant_only.validate_relaxed());
    CHECK_THROWS_AS(quant_only.validate(), std::invalid_argument);

    CHECK_THROWS_AS(BitSet::parse("0,3,16"), std::invalid_argument);
    CHECK_THROWS_AS(BitSet::parse("0,2,2,16"), std::invalid_argument);
    CHECK_THROWS_AS(BitSet::parse(""), std::invalid_argument);
}

TEST_CASE("quantize: four levels, four values") {
    std::vector<float> vals{0, 1, 2, 3};
    auto q = quantize_unit(vals, 2);
    CHECK(q.params.scale == doctest::Approx(1.0));
    CHECK(q.params.zero_point == 0);
    CHECK(q.codes == std::vector<std::uint8_t>{0, 1, 2, 3});
    auto rec = dequantize_unit(q.codes, q.params);
    for (int i = 0; i < 4; ++i) CHECK(rec[i] == doctest::Approx(vals[i]).epsilon(1e-7));
}

TEST_CASE("quantize: degenerate constant range") {
    std::vector<float> vals{5, 5, 5};
    auto q = quantize_unit(vals, 4);
    auto rec = dequantize_unit(q.codes, q.params);
    CHECK(unit_nmse(vals, rec) < 1e-6);
}

TEST_CASE("quantize argument validation") {
    std::vector<float> vals{1, 2};
    CHECK_THROWS_AS(quantize_unit(vals, 3), std::invalid_argument);
    CHECK_THROWS_AS(quantize_unit(vals, 16), std::invalid_argument);
    CHECK_THROWS_AS(quantize_unit(std::vector<float>{}, 4), std::invalid_argument);
    std::vector<float> nan_vals{1.0f, std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS(quantize_unit(nan_vals, 4), NumericError);
}

TEST_CASE("dequantize: direct formula and range check") {
    QuantParams p{2.0f, 1, 4};
    std::vector<std::uint8_t> codes{3};
    auto rec = dequantize_unit(codes, p);
    CHECK(rec[0] == doctest::Approx(4.0));

    QuantParams zero{0.0f, 7, 4};
    rec = dequantize_unit(codes, zero);
    CHECK(rec[0] == 0.0f);

    std::vector<std::uint8_t> overflow{16};
    CHECK_THROWS_AS(dequantize_unit(overflow, p), std::invalid_argument);
}

TEST_CASE("roundtrip idempotence: requantizing the reconstruction fixes the codes") {
    Rng rng(101);
    for (int bits : {2, 4, 8}) {
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<float> vals(64);
            const double offset = trial % 3 == 0 ? 10.0 : 0.0;  // include units away from zero
            for (auto& v : vals) v = static_cast<float>(rng.normal() + offset);
            auto q1 = quantize_unit(vals, bits);
            auto rec = dequantize_unit(q1.codes, q1.params);
            auto q2 = quantize_unit(rec, bits);
            CHECK(q2.codes == q1.codes);
        }
    }
    // constant unit
    std::vector<float> vals{5, 5, 5};
    auto q1 = quantize_unit(vals, 4);
    auto rec = dequantize_unit(q1.codes, q1.params);
    auto q2 = quantize_unit(rec, 4);
    CHECK(q2.codes == q1.codes);
}

TEST_CASE("quantizer never does worse than eviction on its own range") {
    Rng rng(113);
    for (int bits : {2, 4, 8}) {
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<float> vals(32);
            const double offset = rng.uniform(-20.0, 20.0);
            const double spread = std::pow(10.0, rng.uniform(-3.0, 1.0));
            for (auto& v : vals) v = static_cast<float>(rng.normal() * spread + offset);
            double energy = 0.0;
            for (float v : vals) energy += static_cast<double>(v) * v;
            if (energy == 0.0) continue;
            auto q = quantize_unit(vals, bits);
            auto rec = dequantize_unit(q.codes, q.params);
            CHECK(unit_nmse(vals, rec) <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("bennett sigma closed forms") {
    CHECK(bennett_sigma(2.0 * std::sqrt(3.0)) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bennett_sigma(0.0) == 0.0);
    CHECK(bennett_sigma(1.0) == doctest::Approx(0.28867513459481287).epsilon(1e-12));
    CHECK_THROWS_AS(bennett_sigma(-1.0), std::invalid_argument);
}

TEST_CASE("uniform data at 8 bits sits on the Bennett curve") {
    Rng rng(131);
    const int n = 1 << 14;
    std::vector<float> vals(n);
    for (auto& v : vals) v = static_cast<float>(rng.uniform(0.0, 1.0));
    float lo = vals[0], hi = vals[0];
    double energy = 0.0;
    for (float v : vals) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        energy += static_cast<double>(v) * v;
    }
    energy /= n;
    auto q = quantize_unit(vals, 8);
    auto rec = dequantize_unit(q.codes, q.params);
    const double nmse = unit_nmse(vals, rec);
    const double sigma = bennett_sigma(static_cast<double>(hi) - lo);
    const double predicted = sigma * std::pow(2.0, -8.0);
    const double predicted_nmse = predicted * predicted / energy;
    CHECK(std::abs(nmse / predicted_nmse - 1.0) < 0.25);
}

TEST_CASE("unit_nmse conventions") {
    std::vector<float> x{1, -2, 3};
    CHECK(unit_nmse(x, x) == 0.0);
    std::vector<float> zeros{0, 0, 0};
    CHECK(unit_nmse(x, zeros) == doctest::Approx(1.0));
    std::vector<float> twice{2, -4, 6};
    CHECK(unit_nmse(x, twice) == doctest::Approx(1.0));
    CHECK_THROWS_AS(unit_nmse(zeros, x), NumericError);
    std::vector<float> shorter{1, 2};
    CHECK_THROWS_AS(unit_nmse(x, shorter), std::invalid_argument);
}

TEST_CASE("distortion table validation") {
    DistortionTable t;
    t.eps = {{0, 1.0}, {2, 0.3}, {4, 0.014}, {8, 5e-5}, {16, 0.0}};
    CHECK_NOTHROW(t.validate());
    CHECK(t.at(4) == doctest::Approx(0.014));
    CHECK_THROWS_AS(t.at(6), std::invalid_argument);

    t.eps[0].second = 0.9;  // eps(0) must be exactly 1
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
    t.eps[0].second = 1.0;
    t.eps[2].second = 0.4;  // not decreasing vs eps(2)=0.3
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("calibration on a Gaussian cache follows the high-rate scaling") {
    CacheShape shape{1, 2, 2, 64, 256};
    std::vector<KVCache> sample;
    sample.push_back(gen_synthetic_cache(77, shape, 32));
    auto table = calibrate_epsilon(sample, Granularity::token);
    CHECK_NOTHROW(table.validate());
    CHECK(table.at(0) == 1.0);
    CHECK(table.at(16) == 0.0);
    const double ratio = table.at(4) / table.at(8);
    CHECK(ratio > 64.0);
    CHECK(ratio < 1024.0);

    auto channel_table = calibrate_epsilon(sample, Granularity::channel);
    CHECK(channel_table.granularity == Granularity::channel);
    CHECK_NOTHROW(channel_table.validate());

    CHECK_THROWS_AS(calibrate_epsilon(std::span<const KVCache>{}, Granularity::token),
                    std::invalid_argument);

    // all units zero-norm: NMSE undefined everywhere
    KVCache zeros;
    zeros.shape = CacheShape{1, 1, 1, 4, 8};
    zeros.probe_window = 4;
    zeros.k.emplace_back(1, 8, 4);
    zeros.v.emplace_back(1, 8, 4);
    zeros.probe_q.emplace_back(1, 4, 4);
    std::vector<KVCache> zero_sample;
    zero_sample.push_back(std::move(zeros));
    CHECK_THROWS_AS(calibrate_epsilon(zero_sample, Granularity::token), NumericError);
}

TEST_CASE("distortion table JSON roundtrip and fixture") {
    DistortionTable t;
    t.granularity = Granularity::channel;
    t.eps = {{0, 1.0}, {2, 0.149}, {4, 0.0062}, {8, 2.2e-5}, {16, 0.0}};
    t.provenance = "test";
    auto text = distortion_table_to_json(t);
    auto back = distortion_table_from_json(text);
    CHECK(back.granularity == Granularity::channel);
    CHECK(back.eps == t.eps);

    // reference-model fixture ships with the tests and must parse and
    // validate; its values are never asserted against synthetic data
    const std::string fixture = std::string(RDKV_FIXTURE_DIR) + "/eps_reference.json";
    auto tables = load_distortion_tables(fixture);
    REQUIRE(tables.size() == 2);
    auto v = select_table(tables, Granularity::token);
    auto k = select_table(tables, Granularity::channel);
    CHECK(v.at(2) == doctest::Approx(0.313));
    CHECK(k.at(8) == doctest::Approx(2.2e-5));
    CHECK_NOTHROW(v.validate());
    CHECK_NOTHROW(k.validate());
}

TEST_CASE("calibration is thread-count independent within tolerance") {
    // associative average with 64-bit accumulation: assert tolerance,
    // not bit equality
    CacheShape shape{2, 2, 2, 16, 64};
    std::vector<KVCache> sample;
    sample.push_back(gen_synthetic_cache(3, shape, 16));
    sample.push_back(gen_synthetic_cache(4, shape, 16));
    setenv("RDKV_THREADS", "1", 1);
    auto t1 = calibrate_epsilon(sample, Granularity::token);
    setenv("RDKV_THREADS", "4", 1);
    auto t2 = calibrate_epsilon(sample, Granularity::token);
    unsetenv("RDKV_THREADS");
    for (std::size_t i = 0; i < t1.eps.size(); ++i) {
        CHECK(std::abs(t1.eps[i].second - t2.eps[i].second) <= 1e-9);
    }
}

TEST_SUITE_END();
