#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "aeseg/metrics.hpp"
#include "testutil.hpp"

using namespace aeseg;

namespace {

std::span<const double> sp(const std::vector<double>& v) { return {v.data(), v.size()}; }

}  // namespace

TEST_CASE("pixel metrics hand cases") {
    MetricsReport r = pixel_metrics({1, 1, 1, 1});
    CHECK(r.pixel_accuracy == 0.5);
    CHECK(r.precision == 0.5);
    CHECK(r.recall == 0.5);
    CHECK(r.f1 == 0.5);
    CHECK(r.iou == Catch::Approx(1.0 / 3.0).margin(1e-15));

    r = pixel_metrics({10, 0, 0, 5});
    CHECK(r.pixel_accuracy == 1.0);
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.f1 == 1.0);
    CHECK(r.iou == 1.0);
}

TEST_CASE("degenerate denominators follow the stated convention") {
    // no positives anywhere: flawless negative-only prediction
    MetricsReport r = pixel_metrics({0, 0, 0, 8});
    CHECK(r.precision == 1.0);
    CHECK(r.recall == 1.0);
    CHECK(r.f1 == 1.0);
    CHECK(r.iou == 1.0);
    CHECK(r.pixel_accuracy == 1.0);

    // never predicts positive but misses actual positives
    r = pixel_metrics({0, 0, 3, 5});
    CHECK(r.precision == 0.0);
    CHECK(r.recall == 0.0);
    CHECK(r.f1 == 0.0);
    CHECK(r.iou == 0.0);

    // predicts positives where none exist
    r = pixel_metrics({0, 3, 0, 5});
    CHECK(r.precision == 0.0);
    CHECK(r.recall == 0.0);

    CHECK_THROWS_AS(pixel_metrics({0, 0, 0, 0}), data_error);
}

TEST_CASE("ties at the threshold classify negative") {
    std::vector<double> p{0.5, 0.5, 0.500001};
    std::vector<std::uint8_t> y{1, 0, 1}, m{1, 1, 1};
    const ConfusionCounts c = confusion(sp(p), y, m, 0.5);
    CHECK(c.tp == 1);
    CHECK(c.fn == 1);
    CHECK(c.tn == 1);
    CHECK(c.fp == 0);
}

TEST_CASE("confusion matches a brute-force tally on random instances") {
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1000;
        std::vector<double> p(n);
        std::vector<std::uint8_t> y(n), m(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = u(rng);
            y[i] = u(rng) < 0.5;
            m[i] = u(rng) < 0.9;
        }
        m[0] = 1;
        const double threshold = 0.2 + 0.6 * u(rng);
        const ConfusionCounts c = confusion(sp(p), y, m, threshold);
        const testutil::NaiveTally t = testutil::naive_confusion(p, y, m, threshold);
        CHECK(c.tp == static_cast<std::uint64_t>(t.tp));
        CHECK(c.fp == static_cast<std::uint64_t>(t.fp));
        CHECK(c.fn == static_cast<std::uint64_t>(t.fn));
        CHECK(c.tn == static_cast<std::uint64_t>(t.tn));
        CHECK(c.total() == static_cast<std::uint64_t>(t.tp + t.fp + t.fn + t.tn));

        // metric identities and ranges
        const MetricsReport r = pixel_metrics(c);
        CHECK(r.iou <= r.f1 + 1e-15);
        for (double v : {r.pixel_accuracy, r.precision, r.recall, r.f1, r.iou}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("confusion counts pool associatively") {
    std::mt19937_64 rng(505);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> p(300);
    std::vector<std::uint8_t> y(300), m(300);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = u(rng);
        y[i] = u(rng) < 0.4;
        m[i] = 1;
    }
    const ConfusionCounts whole = confusion(sp(p), y, m, 0.5);
    ConfusionCounts pooled;
    for (std::size_t start = 0; start < p.size(); start += 100) {
        pooled += confusion(std::span<const double>(p.data() + start, 100),
                            std::span<const std::uint8_t>(y.data() + start, 100),
                            std::span<const std::uint8_t>(m.data() + start, 100), 0.5);
    }
    CHECK(pooled.tp == whole.tp);
    CHECK(pooled.fp == whole.fp);
    CHECK(pooled.fn == whole.fn);
    CHECK(pooled.tn == whole.tn);
}

TEST_CASE("metrics ignore invalid pixels entirely") {
    std::mt19937_64 rng(606);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> p(200);
        std::vector<std::uint8_t> y(200), m(200);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = u(rng);
            y[i] = u(rng) < 0.5;
            m[i] = u(rng) < 0.7;
        }
        m[0] = 1;
        const ConfusionCounts base = confusion(sp(p), y, m, 0.5);
        std::vector<double> p2 = p;
        std::vector<std::uint8_t> y2 = y;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (m[i]) continue;
            p2[i] = u(rng) * 10.0 - 5.0;
            y2[i] = u(rng) < 0.5;
        }
        const ConfusionCounts mutated = confusion(sp(p2), y2, m, 0.5);
        CHECK(mutated.tp == base.tp);
        CHECK(mutated.fp == base.fp);
        CHECK(mutated.fn == base.fn);
        CHECK(mutated.tn == base.tn);
    }
}

TEST_CASE("chip prediction and chip accuracy") {
    std::vector<double> p{0.9, 0.8, 0.1};
    std::vector<std::uint8_t> y{1, 1, 1}, m{1, 1, 0};
    const ChipPrediction cp = chip_prediction(sp(p), y, m);
    CHECK(cp.mean_prob == Catch::Approx(0.85).margin(1e-15));
    CHECK(cp.truth_tomato);

    std::vector<ChipPrediction> chips{{0.9, true}, {0.2, false}, {0.4, true}, {0.5, false}};
    // 0.5 vs threshold 0.5 predicts negative: correct for the last chip
    CHECK(chip_accuracy(chips, 0.5) == Catch::Approx(0.75).margin(1e-15));

    std::vector<std::uint8_t> mixed{1, 0, 1}, all{1, 1, 1};
    CHECK_THROWS_AS(chip_prediction(sp(p), mixed, all), data_error);
    std::vector<std::uint8_t> none{0, 0, 0};
    CHECK_THROWS_AS(chip_prediction(sp(p), y, none), data_error);
}

TEST_CASE("report text carries the machine-readable block") {
    MetricsReport r = pixel_metrics({3, 1, 1, 5});
    r.chip_accuracy = 0.9;
    r.n_chips = 10;
    const std::string text = format_report(r);
    CHECK(text.find("pixel_accuracy=0.800000") != std::string::npos);
    CHECK(text.find("tp=3") != std::string::npos);
    CHECK(text.find("n_chips=10") != std::string::npos);
    CHECK(text.find("Pixel Accuracy") != std::string::npos);
}
