#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pcqr/eval.hpp"
#include "pcqr/io.hpp"
#include "pcqr/random.hpp"

#include <filesystem>
#include <numeric>
#include <set>

using namespace pcqr;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_experiment() {
    ExperimentConfig c;
    c.episode_count = 400;
    c.n_train = 100;
    c.n_cal = 100;
    c.n_test = 200;
    c.seeds = {1, 2};
    c.forest.tree_count = 10;
    c.trace_count = 3;
    return c;
}

// One-step episodes carrying a single (x, y) pair.
std::vector<Episode> as_episodes(const LabeledData& d) {
    std::vector<Episode> out;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        Episode e;
        e.id = i;
        e.features = d.features.row(i);
        e.rewards = Eigen::VectorXd::Constant(1, d.responses(i));
        e.cumulative = Eigen::Vector2d(0.0, d.responses(i));
        out.push_back(e);
    }
    return out;
}

}  // namespace

TEST_CASE("partition sizes, coverage and determinism") {
    ExperimentConfig c;
    const auto p = partition(10000, c, 1);
    CHECK(p.train.size() == 2500);
    CHECK(p.cal.size() == 2500);
    CHECK(p.test.size() == 5000);
    std::set<std::size_t> all(p.train.begin(), p.train.end());
    all.insert(p.cal.begin(), p.cal.end());
    all.insert(p.test.begin(), p.test.end());
    CHECK(all.size() == 10000);
    CHECK(*all.rbegin() == 9999);

    const auto again = partition(10000, c, 1);
    CHECK(again.train == p.train);
    CHECK(again.test == p.test);
    const auto other = partition(10000, c, 2);
    CHECK(other.train != p.train);

    CHECK_THROWS_AS(partition(9999, c, 1), std::invalid_argument);
    c.n_test = 4999;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("type-1 empirical quantiles") {
    const std::vector<double> v = {10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
    const auto t = empirical_target_interval(v, 0.1, 0.9);
    CHECK(t.lower == 1.0);
    CHECK(t.upper == 9.0);
    const auto full = empirical_target_interval(v, 0.0, 1.0);
    CHECK(full.lower == 1.0);
    CHECK(full.upper == 10.0);
    CHECK(empirical_quantile(v, 0.15) == 2.0);
    CHECK_THROWS_AS(empirical_quantile(std::vector<double>{}, 0.5), std::invalid_argument);

    Rng rng(1);
    std::vector<double> big;
    for (int i = 0; i < 5000; ++i) big.push_back(rng.uniform01());
    const auto band = empirical_target_interval(big, 0.1, 0.9);
    const auto inside = std::count_if(big.begin(), big.end(), [&](double y) { return band.contains(y); });
    CHECK(std::abs(inside / 5000.0 - 0.8) <= 0.001);
}

TEST_CASE("ece edge cases") {
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(10);
    CHECK(ece(ones, ones, 30) == 0.0);
    const Eigen::VectorXd half = Eigen::VectorXd::Constant(10, 0.5);
    CHECK(ece(half, ones, 30) == doctest::Approx(0.5));
    CHECK_THROWS_AS(ece(half, Eigen::VectorXd::Ones(9), 30), std::invalid_argument);
    CHECK_THROWS_AS(ece(Eigen::VectorXd::Constant(3, 1.5), Eigen::VectorXd::Ones(3), 30), std::invalid_argument);
    CHECK_THROWS_AS(ece(half, half, 30), std::invalid_argument);
}

TEST_CASE("ece matches a two-pass oracle") {
    Rng rng(2);
    std::vector<double> p;
    std::vector<int> o;
    for (int i = 0; i < 200; ++i) {
        p.push_back(i % 17 == 0 ? 1.0 : rng.uniform01());
        o.push_back(rng.bernoulli(p.back()) ? 1 : 0);
    }
    const Eigen::Map<const Eigen::VectorXd> probs(p.data(), 200);
    const Eigen::VectorXi outcomes = Eigen::Map<const Eigen::VectorXi>(o.data(), 200);
    for (int bins : {1, 10, 30}) CHECK(std::abs(ece(probs, outcomes, bins) - oracle::ece(p, o, bins)) <= 1e-12);

    const auto table = reliability_table(probs, outcomes, 30);
    CHECK(table.size() == 30);
    std::size_t total = 0;
    for (const auto& row : table) {
        total += row.count;
        CHECK(row.observed_frequency >= 0.0);
        CHECK(row.observed_frequency <= 1.0);
        double sum = 0.0;
        int count = 0;
        for (double v : p) {
            const int bin = std::min(29, static_cast<int>(v * 30));
            if (bin == static_cast<int>(std::lround(row.bin_lo * 30))) {
                sum += v;
                ++count;
            }
        }
        CHECK(row.count == static_cast<std::size_t>(count));
        if (count > 0) CHECK(row.mean_predicted == doctest::Approx(sum / count).epsilon(1e-12));
    }
    CHECK(total == 200);
    CHECK(table.back().bin_hi == 1.0);
}

TEST_CASE("single prediction reliability row") {
    const Eigen::VectorXd p = Eigen::VectorXd::Constant(1, 0.95);
    const Eigen::VectorXd o = Eigen::VectorXd::Ones(1);
    const auto table = reliability_table(p, o, 30);
    int nonzero = 0;
    for (const auto& row : table) {
        if (row.count == 0) continue;
        ++nonzero;
        CHECK(row.observed_frequency == 1.0);
        CHECK(row.bin_lo <= 0.95);
        CHECK(row.bin_hi > 0.95);
    }
    CHECK(nonzero == 1);
}

TEST_CASE("mean and sample standard deviation") {
    const std::vector<double> v = {1, 2, 3, 4};
    const auto m = mean_std(v);
    CHECK(m.mean == 2.5);
    CHECK(m.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(mean_std(std::vector<double>{7}).std == 0.0);
}

TEST_CASE("forward coverage at the smallest valid delta") {
    fixture::Heteroskedastic gen(8);
    const auto model = fit_forest(gen.draw(300), fixture::small_forest());
    const int n = 9;
    const int resamples = 300;
    double covered = 0.0;
    for (int r = 0; r < resamples; ++r) {
        const auto scores = calibrate(model, gen.draw(n));
        covered += forward_coverage(model, scores, as_episodes(gen.draw(5)), 1.0 / (n + 1));
    }
    const double mean = covered / resamples;
    const double target = n / (n + 1.0);
    CHECK(mean >= target - 3 * std::sqrt(target * (1 - target) / (5.0 * resamples)));
}

TEST_CASE("small experiment report") {
    const auto c = small_experiment();
    const auto report = run_experiment(TamariskConfig{}, c);
    CHECK(report.horizon == 50);
    REQUIRE(report.partitions.size() == 2);
    for (const auto& p : report.partitions) {
        CHECK(p.ece_lower.size() == 50);
        CHECK(p.ece_upper.size() == 50);
        CHECK(p.mean_lower.size() == 50);
        CHECK(p.forward_coverage >= 0.0);
        CHECK(p.forward_coverage <= 1.0);
        for (int t = 0; t < 50; ++t) CHECK(p.mean_upper[t] - p.mean_lower[t] <= 2.0 / 101 + 1e-12);
    }
    std::size_t total = 0;
    for (const auto& row : report.reliability) total += row.count;
    CHECK(total == 2u * 50u * 200u);
    CHECK(report.traces.size() == 3u * 50u);

    const auto again = run_experiment(TamariskConfig{}, c);
    CHECK(format_summary(again) == format_summary(report));
    CHECK(again.partitions[1].ece_lower == report.partitions[1].ece_lower);

    const auto dir = fs::temp_directory_path() / "pcqr_report";
    fs::remove_all(dir);
    write_report(report, dir);
    for (const char* name : {"forward_coverage.csv", "ece_vs_time.csv", "reliability_bins.csv", "traces.csv",
                             "mean_coverage_vs_time.csv", "summary.txt"})
        CHECK(fs::exists(dir / name));
    const auto summary = read_file(dir / "summary.txt");
    CHECK(summary.find("schema_version=1") != std::string::npos);
    CHECK(summary.find("forward_coverage=") != std::string::npos);
    const auto ece_rows = read_file(dir / "ece_vs_time.csv");
    CHECK(std::count(ece_rows.begin(), ece_rows.end(), '\n') == 1 + 2 * 50);
    fs::remove_all(dir);
}
