#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pcqr/conformal.hpp"
#include "pcqr/inverse.hpp"
#include "pcqr/random.hpp"

#include <cmath>
#include <limits>
#include <vector>

using namespace pcqr;

namespace {

CoverageBounds bounds_at(const CalibrationAlphas& alphas, double a_lo, double a_hi) {
    return coverage_bounds(alphas, ExtendedProbability{a_lo, 0.0}, ExtendedProbability{a_hi, 0.0});
}

}  // namespace

TEST_CASE("four calibration alphas") {
    const std::vector<double> a = {0.8, 0.2, 0.6, 0.4};
    const CalibrationAlphas alphas{std::span<const double>(a)};

    auto b = bounds_at(alphas, 0.5, 0.5);
    CHECK(b.rank_lo == 3);
    CHECK(b.rank_hi == 2);
    CHECK(b.p_lower == 0.0);
    CHECK(b.p_upper == doctest::Approx(0.2));

    b = bounds_at(alphas, 0.35, 0.65);
    CHECK(b.rank_lo == 2);
    CHECK(b.rank_hi == 3);
    CHECK(b.p_lower == doctest::Approx(0.2));
    CHECK(b.p_upper == doctest::Approx(0.6));

    // Endpoints equal to calibration values count as inside.
    b = bounds_at(alphas, 0.2, 0.8);
    CHECK(b.rank_lo == 1);
    CHECK(b.rank_hi == 4);
    CHECK(b.p_lower == doctest::Approx(0.6));
    CHECK(b.p_upper == 1.0);

    b = bounds_at(alphas, 0.0, 0.1);
    CHECK(b.rank_lo == 1);
    CHECK(b.rank_hi == 0);
    CHECK(b.p_lower == 0.0);
    CHECK(b.p_upper == doctest::Approx(0.2));

    b = bounds_at(alphas, 0.9, 1.0);
    CHECK(b.rank_lo == 5);
    CHECK(b.rank_hi == 4);
}

TEST_CASE("prob-only rank statistics agree with extended ones inside the support") {
    const std::vector<double> a = {0.8, 0.2, 0.6, 0.4};
    const CalibrationAlphas alphas{std::span<const double>(a)};
    const auto plain = interval_rank_stats(alphas, 0.35, 0.65);
    const auto extended = interval_rank_stats(alphas, ExtendedProbability{0.35, 0}, ExtendedProbability{0.65, 0});
    CHECK(plain.rank_lo == extended.rank_lo);
    CHECK(plain.rank_hi == extended.rank_hi);
}

TEST_CASE("coverage bounds match gap enumeration for every n up to 10") {
    Rng rng(17);
    int fixtures = 0;
    for (int n = 1; n <= 10; ++n) {
        for (int rep = 0; rep < 50; ++rep, ++fixtures) {
            std::vector<double> a;
            for (int i = 0; i < n; ++i) a.push_back(std::round(rng.uniform01() * 999) / 1000 + i * 1e-7);
            const CalibrationAlphas alphas{std::span<const double>(a)};
            double lo = rng.uniform01();
            double hi = rng.uniform01();
            if (rng.bernoulli(0.3)) lo = a[rng.uniform_int(0, n - 1)];
            if (rng.bernoulli(0.3)) hi = a[rng.uniform_int(0, n - 1)];
            if (lo > hi) std::swap(lo, hi);
            const auto b = bounds_at(alphas, lo, hi);
            const auto expected = oracle::enumerate_bounds(a, lo, hi);
            CHECK(b.p_lower == expected.p_lower);
            CHECK(b.p_upper == expected.p_upper);
            if (b.p_lower > 0.0 && b.p_upper < 1.0)
                CHECK(b.p_upper - b.p_lower == doctest::Approx(2.0 / (n + 1)).epsilon(1e-15));
        }
    }
    CHECK(fixtures == 500);
}

TEST_CASE("bounds are monotone in the target") {
    Rng rng(23);
    std::vector<double> a;
    for (int i = 0; i < 30; ++i) a.push_back(rng.uniform01());
    const CalibrationAlphas alphas{std::span<const double>(a)};
    for (int rep = 0; rep < 200; ++rep) {
        double lo = rng.uniform01();
        double hi = rng.uniform01();
        if (lo > hi) std::swap(lo, hi);
        const double wider_lo = lo * rng.uniform01();
        const double wider_hi = hi + (1 - hi) * rng.uniform01();
        const auto narrow = bounds_at(alphas, lo, hi);
        const auto wide = bounds_at(alphas, wider_lo, wider_hi);
        CHECK(wide.p_lower >= narrow.p_lower);
        CHECK(wide.p_upper >= narrow.p_upper);
    }
}

TEST_CASE("inverse agrees with the forward interval built from the same calibration data") {
    Rng rng(29);
    for (int rep = 0; rep < 100; ++rep) {
        const int n = 1 + rep % 10;
        std::vector<double> v;
        std::vector<double> w;
        for (int i = 0; i < 8; ++i) {
            v.push_back(rng.uniform(-2, 2));
            w.push_back(rng.uniform(0.1, 1));
        }
        const WeightedCdf f(v, w);
        std::vector<ExtendedProbability> keys;
        for (int i = 0; i < n; ++i) keys.push_back(f.extended(rng.uniform(-2.5, 2.5)));
        const CalibrationAlphas alphas(keys);
        const auto scores = scores_from_alphas(alphas);
        for (std::size_t k = 1; k <= static_cast<std::size_t>(n); ++k) {
            const auto& s = scores.order_statistic(k);
            const auto [lo, hi] = pcqr_bounds(f, s);
            const auto b = coverage_bounds(f, alphas, TargetInterval{lo, hi});
            const double m = n + 1.0;
            CHECK(b.p_lower >= (k - 1.0) / m - 1.0 / m - 1e-12);
            CHECK(b.p_upper >= k / m - 1e-12);
        }
    }
}

TEST_CASE("unbounded targets") {
    WeightedCdf f(std::vector<double>{0, 1, 2}, std::vector<double>{1, 1, 1});
    const std::vector<double> a = {0.1, 0.5, 0.9};
    const CalibrationAlphas alphas{std::span<const double>(a)};
    const double inf = std::numeric_limits<double>::infinity();
    const auto all = coverage_bounds(f, alphas, TargetInterval{-inf, inf});
    CHECK(all.p_upper == 1.0);
    CHECK(all.rank_lo == 1);
    CHECK(all.rank_hi == 3);
    const auto none = coverage_bounds(f, alphas, TargetInterval{-inf, -5});
    CHECK(none.p_lower == 0.0);
    CHECK(none.p_upper == doctest::Approx(0.25));
}

TEST_CASE("saturated calibration values stay ordered by their excess") {
    WeightedCdf f(std::vector<double>{0, 1}, std::vector<double>{1, 1});
    const std::vector<ExtendedProbability> keys = {f.extended(1.5), f.extended(3.0), f.extended(0.5)};
    const CalibrationAlphas alphas(keys);
    // Only the calibration value at 1.5 falls in [1.2, 2].
    const auto b = coverage_bounds(f, alphas, TargetInterval{1.2, 2.0});
    CHECK(b.rank_lo == 2);
    CHECK(b.rank_hi == 2);
    CHECK_THROWS_AS(CalibrationAlphas(std::vector<ExtendedProbability>{{1.0, 0.5}, {1.0, 0.5}}), TieError);
}

TEST_CASE("validation") {
    const std::vector<double> a = {0.1, 0.5};
    const CalibrationAlphas alphas{std::span<const double>(a)};
    WeightedCdf f(std::vector<double>{0, 1}, std::vector<double>{1, 1});
    CHECK_THROWS_AS(coverage_bounds(f, alphas, TargetInterval{1, 0}), std::invalid_argument);
    CHECK_THROWS_AS(coverage_bounds(f, alphas, TargetInterval{NAN, 0}), std::invalid_argument);
    const std::vector<double> bad = {1.5};
    CHECK_THROWS_AS(CalibrationAlphas{std::span<const double>(bad)}, std::invalid_argument);
    CHECK_THROWS_AS(CalibrationAlphas{std::vector<ExtendedProbability>{}}, std::invalid_argument);
}

TEST_CASE("probability sandwich on heteroskedastic data") {
    fixture::Heteroskedastic gen(41);
    const auto model = fit_forest(gen.draw(300), fixture::small_forest());
    const TargetInterval target{0.0, 2.5};
    const int n = 19;
    const int resamples = 400;
    double sum_lower = 0;
    double sum_upper = 0;
    int inside = 0;
    for (int r = 0; r < resamples; ++r) {
        const auto alphas = calibrate_alphas(model, gen.draw(n));
        const auto test = gen.draw(1);
        const auto b = coverage_bounds(model, alphas, test.features.row(0).transpose(), target);
        sum_lower += b.p_lower;
        sum_upper += b.p_upper;
        inside += target.contains(test.responses(0));
    }
    const double freq = inside / double(resamples);
    const double se = std::sqrt(0.25 / resamples);
    CHECK(freq >= sum_lower / resamples - 4 * se);
    CHECK(freq <= sum_upper / resamples + 4 * se);
}

TEST_CASE("probability sandwich with the exact conditional cdf") {
    // With F equal to the true N(x, 1 + x^2) cdf the calibration alphas are
    // uniform and independent of x, so the band must hold at 3 SE.
    auto phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
    auto exact = [&](double x, double y) { return phi((y - x) / std::sqrt(1 + x * x)); };
    fixture::Heteroskedastic gen(43);
    const int n = 99;
    const int resamples = 5000;
    double sum_lower = 0;
    double sum_upper = 0;
    int inside = 0;
    for (int r = 0; r < resamples; ++r) {
        const auto cal = gen.draw(n);
        std::vector<double> a;
        for (int i = 0; i < n; ++i) a.push_back(exact(cal.features(i, 0), cal.responses(i)));
        const CalibrationAlphas alphas{std::span<const double>(a)};
        const auto test = gen.draw(1);
        const double x = test.features(0, 0);
        const auto b = bounds_at(alphas, exact(x, 0.0), exact(x, 2.5));
        sum_lower += b.p_lower;
        sum_upper += b.p_upper;
        inside += test.responses(0) >= 0.0 && test.responses(0) <= 2.5;
    }
    const double freq = inside / double(resamples);
    const double se = std::sqrt(freq * (1 - freq) / resamples);
    CHECK(freq >= sum_lower / resamples - 3 * se);
    CHECK(freq <= sum_upper / resamples + 3 * se);
}
